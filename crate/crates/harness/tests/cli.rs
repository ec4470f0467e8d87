mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{tiny_config, tiny_grid};
use xview_harness::TrainConfig;

fn xview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xview")).args(args).output().expect("binary runs")
}

fn xview_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xview")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

/// Tiny grid config file plus a generated dataset at `name`.
fn dataset(dir: &Path, name: &str, count: usize, seed: u64) -> PathBuf {
    let grid = dir.join("grid.json");
    write_json(&grid, &tiny_grid());
    let out = dir.join(name);
    let run = xview(&[
        "gen-data",
        "--config",
        p(&grid),
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    out
}

fn train_config(dir: &Path, data: &Path) -> PathBuf {
    let cfg = TrainConfig { dataset: data.to_path_buf(), ..tiny_config() };
    let path = dir.join("train.json");
    write_json(&path, &cfg);
    path
}

#[test]
fn gen_data_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dataset(dir.path(), "a", 3, 7);
    let b = dataset(dir.path(), "b", 3, 7);
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.len() > 3);
    assert_eq!(fa, fb);
}

#[test]
fn gen_data_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dataset(dir.path(), "empty", 0, 0);
    let ds = xview_gridworld::read_dataset(&empty).unwrap();
    assert_eq!(ds.manifest.count, 0);
    assert!(ds.triplets.is_empty());

    let full = dataset(dir.path(), "full", 1, 0);
    let grid = dir.path().join("grid.json");
    let again = ["gen-data", "--config", p(&grid), "--count", "1", "--out", p(&full)];
    let refused = xview(&again);
    assert_eq!(code(&refused), 1);
    assert!(String::from_utf8_lossy(&refused.stderr).contains("non-empty"));
    let mut forced = again.to_vec();
    forced.push("--force");
    assert_eq!(code(&xview(&forced)), 0);

    assert_eq!(code(&xview(&["gen-data", "--count", "1"])), 1);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&xview(&[])), 1);
    assert_eq!(code(&xview(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&xview(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"batch_size": 0}"#).unwrap();
    assert_eq!(code(&xview(&["train", "--config", p(&bad)])), 1);
    std::fs::write(&bad, r#"{"no_such_field": 1}"#).unwrap();
    assert_eq!(code(&xview(&["train", "--config", p(&bad)])), 1);
}

#[test]
fn train_sample_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = dataset(d, "train", 2, 0);
    let held = dataset(d, "held", 1, 100);
    let cfg = train_config(d, &data);

    // Same relative output path from two directories: the config echo in
    // the header is then identical too.
    let (a, b) = (d.join("a/m.ckpt"), d.join("b/m.ckpt"));
    for run_dir in ["a", "b"] {
        std::fs::create_dir(d.join(run_dir)).unwrap();
        let run = xview_in(&d.join(run_dir), &["train", "--config", p(&cfg), "--out", "m.ckpt"]);
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    }
    for suffix in ["", ".loss.csv", ".base"] {
        let read = |c: &Path| std::fs::read(format!("{}{suffix}", c.display())).unwrap();
        assert!(read(&a) == read(&b), "{suffix} differs");
    }
    let log = std::fs::read_to_string(format!("{}.loss.csv", a.display())).unwrap();
    assert_eq!(log.lines().next(), Some("phase,step,loss"));
    assert_eq!(log.lines().count(), 1 + 6);
    assert_eq!(code(&xview(&["train", "--config", p(&cfg), "--out", p(&a)])), 1);

    // Sampling: direction must match the checkpoint.
    let out = d.join("sample");
    let wrong = xview(&["sample", "--checkpoint", p(&a), "--dataset", p(&held), "--task", "EGO2EXO", "--out", p(&out)]);
    assert_eq!(code(&wrong), 1);
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("EXO2EGO"));
    let ok = xview(&["sample", "--checkpoint", p(&a), "--dataset", p(&held), "--task", "exo2ego", "--out", p(&out)]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let blob = std::fs::read(out.join("target.f32")).unwrap();
    assert_eq!(blob.len(), 4 * 5 * 3 * 16 * 16);
    assert!(blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).all(|v| (0.0..=1.0).contains(&v)));
    assert!(std::fs::read(out.join("preview.ppm")).unwrap().starts_with(b"P6\n"));

    // Evaluation: overlap with training seeds is flagged, held-out is not.
    let on_train = xview(&["eval", "--checkpoint", p(&a), "--dataset", p(&data)]);
    assert_eq!(code(&on_train), 0);
    assert!(String::from_utf8_lossy(&on_train.stdout).contains("overlap"));
    let report = d.join("report.json");
    let on_held = xview(&["eval", "--checkpoint", p(&a), "--dataset", p(&held), "--out", p(&report)]);
    assert_eq!(code(&on_held), 0);
    let text = String::from_utf8_lossy(&on_held.stdout);
    assert!(!text.contains("WARNING"), "{text}");
    assert!(text.contains("mid-gray"));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 1);
    assert_eq!(json["loss_samples"].as_array().unwrap().is_empty(), false);
}

#[test]
fn numeric_and_data_failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = dataset(d, "nan", 1, 0);
    let cfg = train_config(d, &data);
    let blob = xview_gridworld::triplet_dir(&data, 0).join("ego.f32");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[40..44].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&blob, bytes).unwrap();
    let run = xview(&["train", "--config", p(&cfg), "--out", p(&d.join("m.ckpt"))]);
    assert_eq!(code(&run), 3, "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stderr).contains("non-finite"));

    let missing =
        xview(&["train", "--config", p(&cfg), "--dataset", p(&d.join("nowhere")), "--out", p(&d.join("m.ckpt"))]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn gradcheck_passes_and_catches_a_bad_rule() {
    let ok = xview(&["gradcheck"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = xview(&["gradcheck", "--inject-fault"]);
    assert_eq!(code(&bad), 4);
}

//! Short training run printing loss and overfit metrics. Step counts come
//! from `BASE_STEPS`, `STEPS`, `COUNT` and `TASK` environment variables; a
//! `CKPT` path is loaded when it exists and written after training otherwise.
//! `PREVIEW` names a directory for condition / sample / truth previews.

use std::path::PathBuf;
use std::time::Instant;

use xview_core::Task;
use xview_gridworld::{generate_triplets, GridConfig};
use xview_harness::checkpoint::{load_checkpoint, save_checkpoint};
use xview_harness::eval::{evaluate, ground_truth, MetricsReport};
use xview_harness::sample::{preview_ppm, sample_video};
use xview_harness::{encode_all, finetune, pretrain_base, TrainConfig};

fn env(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> anyhow::Result<()> {
    let count = env("COUNT", 8);
    let task: Task = std::env::var("TASK").unwrap_or_else(|_| "EXO2EGO".into()).parse()?;
    let cfg =
        TrainConfig { task, base_steps: env("BASE_STEPS", 200), steps: env("STEPS", 200), ..TrainConfig::default() };
    let triplets = generate_triplets(count, 0, &GridConfig::default())?;
    let lat = encode_all(&triplets, cfg.model.patch)?;
    let start = Instant::now();
    let every = env("PRINT_EVERY", 50);
    let mut report = |r: &xview_harness::LossRecord| {
        if r.step % every == 0 {
            println!("{} {:>5} {:.5}  {:.0}s", r.phase, r.step, r.loss, start.elapsed().as_secs_f64());
        }
    };
    let ckpt = std::env::var("CKPT").ok().map(PathBuf::from);
    let model = match &ckpt {
        Some(p) if p.exists() => load_checkpoint(p)?.model,
        _ => {
            let base = pretrain_base(&cfg, &lat, &mut report)?;
            let run = finetune(&cfg, base.model, &lat, &mut report)?;
            if let Some(p) = &ckpt {
                save_checkpoint(p, &run.model, &cfg, None)?;
            }
            run.model
        }
    };
    let steps_list = std::env::var("SAMPLE_STEPS").unwrap_or_else(|_| "50".into());
    for steps in steps_list.split(',').map(|s| s.parse::<usize>()) {
        let steps = steps?;
        let rows = evaluate(&model, cfg.task, &cfg.variant, &triplets, &lat, steps, cfg.model.patch)?;
        println!("{}", MetricsReport::new(cfg.task, cfg.variant, steps, rows, vec![], vec![]).render_table());
    }
    if let Ok(dir) = std::env::var("PREVIEW") {
        std::fs::create_dir_all(&dir)?;
        for (i, (t, l)) in triplets.iter().zip(&lat).enumerate().take(3) {
            let video = sample_video(&model, cfg.task, &cfg.variant, l, cfg.sample_steps, cfg.model.patch)?;
            let cond = match cfg.task {
                Task::Exo2Ego => &t.exo,
                Task::Ego2Exo => &t.ego,
            };
            std::fs::write(format!("{dir}/{i}.ppm"), preview_ppm(&[cond, &video, ground_truth(cfg.task, t)])?)?;
        }
    }
    println!("total {:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}

//! `xview`: data generation, training, sampling, evaluation, ablations and
//! gradient checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use xview_core::Task;
use xview_gridworld::{generate_triplets, read_dataset, write_dataset, GridConfig, GridError};
use xview_harness::ablate::{run_ablation, AblationPlan, DEFAULT_VARIANTS};
use xview_harness::checkpoint::{load_base, load_checkpoint, save_checkpoint, SeedRange};
use xview_harness::eval::{evaluate, loss_samples, overlap_warning, MetricsReport};
use xview_harness::gradcheck::run_gradcheck;
use xview_harness::sample::{check_direction, preview_ppm, sample_video, write_f32};
use xview_harness::train::{finetune, pretrain_base, read_loss_log, write_loss_log, LossRecord};
use xview_harness::{encode_all, HarnessError, TrainConfig};

#[derive(Parser)]
#[command(name = "xview", version, about = "Cross-view video translation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired ego/exo dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
    /// Pretrain a base model and fine-tune adapters on one task.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides the dataset path from the config.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Generate one triplet's target view.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Triplet index within the dataset.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Requested direction; must match the checkpoint.
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a checkpoint on a held-out dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train every variant over several seeds at matched budget.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Held-out dataset scored after each run.
        #[arg(long)]
        eval_dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Adapter steps at which smoothed losses are reported.
        #[arg(long, value_delimiter = ',', default_value = "250,500,1000")]
        checkpoints: Vec<usize>,
    },
    /// Check every backward rule and a tiny model against finite differences.
    Gradcheck {
        /// Adds a deliberately wrong backward rule (self-test of the checker).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// A check ran and did not pass.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn grid_code(e: &GridError) -> u8 {
    match e {
        GridError::Config(_) | GridError::NotEmpty { .. } => 1,
        _ => 2,
    }
}

/// 1 usage, 2 data, 3 numeric failure, 4 failed check.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 4;
    }
    match err.downcast_ref::<HarnessError>() {
        Some(HarnessError::NonFinite { .. }) => 3,
        Some(HarnessError::Config(_) | HarnessError::DirectionMismatch { .. } | HarnessError::Exists { .. }) => 1,
        Some(HarnessError::Data(g)) => grid_code(g),
        Some(_) => 2,
        None => err.downcast_ref::<GridError>().map_or(2, grid_code),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common, count } => gen_data(&common, count),
        Command::Train { common, dataset } => train(&common, dataset),
        Command::Sample { common, checkpoint, dataset, index, task, steps } => {
            sample(&common, &checkpoint, &dataset, index, task, steps)
        }
        Command::Eval { common, checkpoint, dataset, steps } => eval(&common, &checkpoint, &dataset, steps),
        Command::Ablate { common, eval_dataset, seeds, checkpoints } => {
            ablate(&common, eval_dataset, seeds, checkpoints)
        }
        Command::Gradcheck { inject_fault } => gradcheck(inject_fault),
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())).into())
}

fn train_config(common: &Common) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.checkpoint = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn refuse_overwrite(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() && !force {
        return Err(HarnessError::Exists { path: path.to_path_buf() }.into());
    }
    Ok(())
}

/// The loss log sits next to its checkpoint.
fn loss_log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

fn base_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".base");
    PathBuf::from(s)
}

fn gen_data(common: &Common, count: usize) -> anyhow::Result<()> {
    let cfg: GridConfig = match &common.config {
        Some(p) => load_json(p)?,
        None => GridConfig::default(),
    };
    let Some(out) = &common.out else {
        bail!(HarnessError::Config("gen-data needs --out".into()));
    };
    let seed = common.seed.unwrap_or(0);
    let triplets = generate_triplets(count, seed, &cfg)?;
    let manifest = write_dataset(out, &triplets, seed, &cfg, common.force)?;
    println!("wrote {} triplets (seeds {:?}) to {}", manifest.count, manifest.seeds(), out.display());
    Ok(())
}

fn progress_printer(every: usize) -> impl FnMut(&LossRecord) {
    move |r: &LossRecord| {
        if r.step % every == 0 {
            eprintln!("[{}] step {:>5}  loss {:.5}", r.phase, r.step, r.loss);
        }
    }
}

fn train(common: &Common, dataset: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = train_config(common)?;
    if let Some(d) = dataset {
        cfg.dataset = d;
    }
    let log_path = loss_log_path(&cfg.checkpoint);
    refuse_overwrite(&cfg.checkpoint, common.force)?;
    refuse_overwrite(&log_path, common.force)?;
    let ds = read_dataset(&cfg.dataset)?;
    let latents = encode_all(&ds.triplets, cfg.model.patch)?;
    let seeds = SeedRange { start: ds.manifest.seed_base, count: ds.manifest.count };
    let mut progress = progress_printer(100);

    let (base, mut log) = match &cfg.base_checkpoint {
        Some(p) => (load_base(p)?.model, Vec::new()),
        None => {
            let run = pretrain_base(&cfg, &latents, &mut progress)?;
            let bp = base_path(&cfg.checkpoint);
            save_checkpoint(&bp, &run.model, &cfg, Some(seeds))?;
            eprintln!("base checkpoint: {}", bp.display());
            (run.model, run.log)
        }
    };
    let run = finetune(&cfg, base, &latents, &mut progress)?;
    log.extend(run.log);
    save_checkpoint(&cfg.checkpoint, &run.model, &cfg, Some(seeds))?;
    write_loss_log(&log_path, &log)?;
    println!("checkpoint: {}", cfg.checkpoint.display());
    println!("loss log:   {}", log_path.display());
    Ok(())
}

fn sample(
    common: &Common,
    checkpoint: &Path,
    dataset: &Path,
    index: usize,
    task: Option<Task>,
    steps: Option<usize>,
) -> anyhow::Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = &ck.header.config;
    if let Some(t) = task {
        check_direction(cfg.task, t)?;
    }
    let ds = read_dataset(dataset)?;
    let Some(triplet) = ds.triplets.get(index) else {
        bail!(HarnessError::Config(format!("index {index} out of range ({} triplets)", ds.triplets.len())));
    };
    let lat = encode_all(std::slice::from_ref(triplet), cfg.model.patch)?.remove(0);
    let steps = steps.unwrap_or(cfg.sample_steps);
    let video = sample_video(&ck.model, cfg.task, &cfg.variant, &lat, steps, cfg.model.patch)?;

    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("sample"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let blob = out.join("target.f32");
    let preview = out.join("preview.ppm");
    refuse_overwrite(&blob, common.force)?;
    write_f32(&blob, video.tensor())?;
    let (cond, truth) = match cfg.task {
        Task::Exo2Ego => (&triplet.exo, &triplet.ego),
        Task::Ego2Exo => (&triplet.ego, &triplet.exo),
    };
    std::fs::write(&preview, preview_ppm(&[cond, &video, truth])?)
        .with_context(|| format!("writing {}", preview.display()))?;
    println!("{} sample of triplet {index} ({steps} steps): {}", cfg.task, blob.display());
    println!("preview (condition / sample / truth): {}", preview.display());
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, dataset: &Path, steps: Option<usize>) -> anyhow::Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let cfg = &ck.header.config;
    let ds = read_dataset(dataset)?;
    let latents = encode_all(&ds.triplets, cfg.model.patch)?;
    let steps = steps.unwrap_or(cfg.sample_steps);
    let rows = evaluate(&ck.model, cfg.task, &cfg.variant, &ds.triplets, &latents, steps, cfg.model.patch)?;
    let eval_seeds = SeedRange { start: ds.manifest.seed_base, count: ds.manifest.count };
    let warnings = overlap_warning(ck.header.train_seeds, eval_seeds).into_iter().collect();
    let log_path = loss_log_path(checkpoint);
    let samples = if log_path.exists() { loss_samples(&read_loss_log(&log_path)?, 20) } else { Vec::new() };
    let report = MetricsReport::new(cfg.task, cfg.variant, steps, rows, samples, warnings);
    print!("{}", report.render_table());
    if let Some(out) = &common.out {
        refuse_overwrite(out, common.force)?;
        std::fs::write(out, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", out.display()))?;
        println!("report: {}", out.display());
    }
    Ok(())
}

fn ablate(common: &Common, eval_dataset: Option<PathBuf>, seeds: u64, checkpoints: Vec<usize>) -> anyhow::Result<()> {
    let cfg = train_config(common)?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("ablation"));
    let csv = out.join("ablation.csv");
    refuse_overwrite(&csv, common.force)?;
    let train = read_dataset(&cfg.dataset)?;
    let train_lat = encode_all(&train.triplets, cfg.model.patch)?;
    let held = match &eval_dataset {
        Some(p) => read_dataset(p)?.triplets,
        None => Vec::new(),
    };
    let held_lat = encode_all(&held, cfg.model.patch)?;
    let plan = AblationPlan {
        base: cfg.clone(),
        variants: DEFAULT_VARIANTS.to_vec(),
        seeds: (cfg.seed..cfg.seed + seeds).collect(),
        checkpoints,
        train: &train_lat,
        eval: (&held, &held_lat),
    };
    let report = run_ablation(&plan, &mut |line| eprintln!("{line}"))?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    let summary = report.summary();
    std::fs::write(out.join("summary.txt"), &summary).context("writing summary")?;
    print!("{summary}");
    println!("csv: {}", csv.display());
    Ok(())
}

fn gradcheck(inject_fault: bool) -> anyhow::Result<()> {
    let start = std::time::Instant::now();
    let report = run_gradcheck(inject_fault)?;
    print!("{}", report.render());
    let worst = report.worst().map(|l| l.max_rel_error).unwrap_or(0.0);
    println!("{} checks, worst relative error {worst:.3e}, {:.1}s", report.lines.len(), start.elapsed().as_secs_f64());
    if !report.passed() {
        return Err(CheckFailed(format!(
            "gradient check failed (tolerance {:e})",
            xview_harness::gradcheck::TOLERANCE
        ))
        .into());
    }
    Ok(())
}

//! Two-phase training on one translation task: a full-parameter base
//! pretrain, then adapter fine-tuning of the frozen base.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xview_core::{flow_matching_loss, Dit, FlowSample, Init, LatentGrid, ModelConfig, Task, UnifiedSequence};
use xview_tensor::{AdamW, AdamWConfig, Graph, ParamGrads};

use crate::config::{Attention, TrainConfig};
use crate::data::TripletLatents;
use crate::error::{HarnessError, Result};
use crate::model::FlowModel;
use crate::pipeline::{build_sequence, padded_target, target_view};
use crate::prior::GaussianPrior;

/// RNG stream ids under one seed. Data streams do not depend on the
/// variant, so ablation runs see identical batches, timesteps and noise.
const STREAM_BASE_INIT: u64 = 0;
const STREAM_BASE_DATA: u64 = 1;
const STREAM_ADAPTER_INIT: u64 = 2;
const STREAM_ADAPTER_DATA: u64 = 3;

pub(crate) fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Base,
    Adapter,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Base => "base",
            Phase::Adapter => "lora",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "base" => Some(Phase::Base),
            "lora" => Some(Phase::Adapter),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Batch-mean loss after one optimizer step (steps count from 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub phase: Phase,
    pub step: usize,
    pub loss: f64,
}

pub struct TrainRun {
    pub model: FlowModel,
    pub log: Vec<LossRecord>,
}

pub const LOSS_LOG_HEADER: &str = "phase,step,loss";

/// CSV rendering; `f64` display is shortest round-trip, so equal logs give
/// equal bytes.
pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for r in log {
        s.push_str(&format!("{},{},{}\n", r.phase, r.step, r.loss));
    }
    s
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(HarnessError::io(path))?;
    f.write_all(loss_log_csv(log).as_bytes()).map_err(HarnessError::io(path))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
    let bad = |line: usize| HarnessError::Config(format!("{}:{line}: malformed loss log row", path.display()));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut parts = line.split(',');
        let (Some(p), Some(s), Some(l), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad(i + 1));
        };
        out.push(LossRecord {
            phase: Phase::parse(p).ok_or_else(|| bad(i + 1))?,
            step: s.parse().map_err(|_| bad(i + 1))?,
            loss: l.parse().map_err(|_| bad(i + 1))?,
        });
    }
    Ok(out)
}

/// Mean logged loss of `phase` over steps `(step − window, step]`.
pub fn smoothed_loss(log: &[LossRecord], phase: Phase, step: usize, window: usize) -> Option<f64> {
    let lo = step.saturating_sub(window);
    let vals: Vec<f64> =
        log.iter().filter(|r| r.phase == phase && r.step > lo && r.step <= step).map(|r| r.loss).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// One draw from a data stream.
#[derive(Clone, Debug)]
pub struct Draw {
    pub index: usize,
    pub t: f64,
    pub z_t: LatentGrid<f32>,
    pub velocity: LatentGrid<f32>,
}

/// Seeded sequence of (triplet, timestep, noise) draws over the target
/// view. It depends only on the seed, task, phase and data, never on the
/// variant.
pub struct DataStream<'a> {
    rng: ChaCha8Rng,
    data: &'a [TripletLatents],
    task: Task,
}

impl<'a> DataStream<'a> {
    pub fn new(cfg: &TrainConfig, phase: Phase, data: &'a [TripletLatents]) -> Self {
        let stream = match phase {
            Phase::Base => STREAM_BASE_DATA,
            Phase::Adapter => STREAM_ADAPTER_DATA,
        };
        Self { rng: rng_stream(cfg.seed, stream), data, task: cfg.task }
    }

    pub fn next_draw(&mut self) -> Result<Draw> {
        let index = self.rng.random_range(0..self.data.len());
        let z0 = target_view(self.task, &self.data[index]);
        let s = FlowSample::draw(z0.tensor().clone(), &mut self.rng)?;
        let velocity = LatentGrid::new(s.velocity()?)?;
        Ok(Draw { index, t: s.t, z_t: LatentGrid::new(s.z_t)?, velocity })
    }
}

/// One training example: a sequence and its per-token target.
struct Example {
    seq: UnifiedSequence<f32>,
    target: Rc<xview_tensor::Tensor<f32>>,
    seed: u64,
    t: f64,
}

impl Example {
    /// The transformer regresses the velocity minus the prior's share.
    fn new(model: &FlowModel, seq: UnifiedSequence<f32>, draw: &Draw, seed: u64) -> Result<Self> {
        let z_rows = draw.z_t.to_tokens();
        let rows = draw.velocity.to_tokens().sub(&model.prior_velocity(&z_rows, draw.t)?)?;
        let target = Rc::new(padded_target(&seq, &rows)?);
        Ok(Self { seq, target, seed, t: draw.t })
    }
}

fn item_grads(model: &Dit<f32>, ex: &Example) -> Result<(f64, ParamGrads<f32>)> {
    let graph = Graph::new();
    let bound = model.params().bind(&graph);
    let pred = model.forward(&graph, &bound, &ex.seq)?;
    let loss = flow_matching_loss(pred, ex.target.clone(), ex.seq.target_mask().into())?;
    let value = loss.value().item()? as f64;
    let mut grads = graph.backward(loss)?;
    Ok((value, bound.grads(&mut grads)))
}

/// Runs `steps` AdamW steps; `draw` produces each batch item in order.
fn optimize(
    model: &mut FlowModel,
    phase: Phase,
    steps: usize,
    opt: AdamWConfig,
    cfg: &TrainConfig,
    mut draw: impl FnMut(&FlowModel) -> Result<Example>,
    progress: &mut dyn FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    let (batch, log_every) = (cfg.batch_size, cfg.log_every);
    let mut adam = AdamW::new(opt);
    let mut log = Vec::with_capacity(steps / log_every + 1);
    for step in 1..=steps {
        let mut acc = ParamGrads(Vec::new());
        let mut total = 0.0;
        for item in 0..batch {
            let ex = draw(model)?;
            let (loss, grads) = item_grads(&model.dit, &ex)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(HarnessError::NonFinite {
                    phase: phase.as_str(),
                    step,
                    detail: format!(
                        "batch item {item}: triplet seed {}, t = {}, tokens {}, loss {loss}, grad norm {}",
                        ex.seed,
                        ex.t,
                        ex.seq.len(),
                        grads.global_norm()
                    ),
                });
            }
            total += loss;
            acc.accumulate(grads)?;
        }
        acc.scale(1.0 / batch as f32);
        adam.step(model.dit.params_mut(), &acc)?;
        let rec = LossRecord { phase, step, loss: total / batch as f64 };
        if step % log_every == 0 || step == steps {
            log.push(rec);
        }
        progress(&rec);
    }
    Ok(log)
}

fn check_data(data: &[TripletLatents]) -> Result<()> {
    if data.is_empty() {
        return Err(HarnessError::Config("training needs at least one triplet".into()));
    }
    Ok(())
}

fn adam(lr: f64, cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig { lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() }
}

/// Prior over the target-view tokens of every triplet.
pub fn fit_prior(task: Task, data: &[TripletLatents]) -> Result<GaussianPrior> {
    // A single NaN would poison the covariance and stall the eigensolver.
    if let Some(l) = data.iter().find(|l| !target_view(task, l).tensor().all_finite()) {
        return Err(HarnessError::NonFinite {
            phase: Phase::Base.as_str(),
            step: 0,
            detail: format!("fitting the velocity prior: non-finite latent in triplet seed {}", l.seed),
        });
    }
    let blocks: Vec<_> = data.iter().map(|l| target_view(task, l).to_tokens()).collect();
    GaussianPrior::fit(&blocks.iter().collect::<Vec<_>>())
}

/// Architecture the variant trains: the config's model, plus the
/// condition input for channel concatenation.
pub fn variant_model_config(cfg: &TrainConfig) -> ModelConfig {
    match cfg.variant.attention {
        Attention::TokenConcat => cfg.model.clone(),
        Attention::ChannelConcat => ModelConfig { extra_channels: cfg.model.latent_channels(), ..cfg.model.clone() },
    }
}

/// Steps of `phase` over the task's sequences.
fn run_phase(
    cfg: &TrainConfig,
    phase: Phase,
    model: &mut FlowModel,
    data: &[TripletLatents],
    progress: &mut dyn FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    let (steps, lr) = match phase {
        Phase::Base => (cfg.base_steps, cfg.base_lr),
        Phase::Adapter => (cfg.steps, cfg.lr),
    };
    let mut stream = DataStream::new(cfg, phase, data);
    let (task, variant) = (cfg.task, cfg.variant);
    let draw = |m: &FlowModel| {
        let d = stream.next_draw()?;
        let lat = &data[d.index];
        let seq = build_sequence(task, &variant, lat, &d.z_t, d.t)?;
        Example::new(m, seq, &d, lat.seed)
    };
    optimize(model, phase, steps, adam(lr, cfg), cfg, draw, progress)
}

/// Fresh model pretrained on the task with every parameter trainable.
pub fn pretrain_base(
    cfg: &TrainConfig,
    data: &[TripletLatents],
    progress: &mut dyn FnMut(&LossRecord),
) -> Result<TrainRun> {
    cfg.validate()?;
    check_data(data)?;
    let mut init = rng_stream(cfg.seed, STREAM_BASE_INIT);
    let mut dit = Dit::new(cfg.model.clone(), Init::Standard, &mut init)?;
    if cfg.variant.attention == Attention::ChannelConcat {
        dit.add_condition_input(cfg.model.latent_channels())?;
    }
    let prior = if cfg.velocity_prior { Some(fit_prior(cfg.task, data)?) } else { None };
    let mut model = FlowModel { dit, prior };
    let log = run_phase(cfg, Phase::Base, &mut model, data, progress)?;
    Ok(TrainRun { model, log })
}

/// Attaches adapters to `base`, which must match the variant's
/// architecture, and fine-tunes them. The base's prior is kept.
pub fn finetune(
    cfg: &TrainConfig,
    base: FlowModel,
    data: &[TripletLatents],
    progress: &mut dyn FnMut(&LossRecord),
) -> Result<TrainRun> {
    cfg.validate()?;
    check_data(data)?;
    let FlowModel { mut dit, prior } = base;
    if cfg.velocity_prior != prior.is_some() {
        return Err(HarnessError::Config(format!(
            "velocity_prior is {} but the base model {} a prior",
            cfg.velocity_prior,
            if prior.is_some() { "has" } else { "lacks" }
        )));
    }
    if dit.lora_config().is_some() {
        return Err(HarnessError::Config("base model already carries adapters".into()));
    }
    if *dit.config() != variant_model_config(cfg) {
        return Err(HarnessError::Config(format!(
            "base model architecture differs from the {} variant of the training config",
            cfg.variant.label()
        )));
    }
    dit.attach_lora(cfg.lora, &mut rng_stream(cfg.seed, STREAM_ADAPTER_INIT))?;
    let mut model = FlowModel { dit, prior };
    let log = run_phase(cfg, Phase::Adapter, &mut model, data, progress)?;
    Ok(TrainRun { model, log })
}

/// Both phases back to back; the returned log holds base then adapter rows.
pub fn train(cfg: &TrainConfig, data: &[TripletLatents], progress: &mut dyn FnMut(&LossRecord)) -> Result<TrainRun> {
    let base = pretrain_base(cfg, data, progress)?;
    let mut run = finetune(cfg, base.model, data, progress)?;
    let mut log = base.log;
    log.append(&mut run.log);
    run.log = log;
    Ok(run)
}

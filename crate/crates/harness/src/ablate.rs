//! Variant ablations at matched budget: every run of a seed trains both
//! phases on the same batches, timesteps and noise, and differs only in its
//! variant.

use serde::{Deserialize, Serialize};
use xview_gridworld::Triplet;

use crate::config::{TrainConfig, Variant};
use crate::data::TripletLatents;
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate, Aggregate};
use crate::metrics::median;
use crate::train::{finetune, pretrain_base, LossRecord, Phase};

pub const DEFAULT_VARIANTS: [Variant; 3] = [Variant::FULL, Variant::CHANNEL_CONCAT, Variant::UNIFORM_POSITIONS];

/// Trailing window of the smoothed adapter-phase loss.
pub const SMOOTHING_WINDOW: usize = 50;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    /// `(step, smoothed loss)` at each requested checkpoint.
    pub smoothed: Vec<(usize, f64)>,
    pub eval: Option<Aggregate>,
    #[serde(skip)]
    pub log: Vec<LossRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub checkpoints: Vec<usize>,
    pub runs: Vec<AblationRun>,
}

pub struct AblationPlan<'a> {
    pub base: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Adapter-phase steps at which smoothed losses are reported.
    pub checkpoints: Vec<usize>,
    pub train: &'a [TripletLatents],
    /// Held-out triplets and their latents; evaluation is skipped when empty.
    pub eval: (&'a [Triplet], &'a [TripletLatents]),
}

/// Runs every (seed, variant) pair. `progress` receives a status line per
/// completed phase.
pub fn run_ablation(plan: &AblationPlan<'_>, progress: &mut dyn FnMut(&str)) -> Result<AblationReport> {
    let mut runs = Vec::new();
    for &seed in &plan.seeds {
        let mut hash: Option<String> = None;
        for &variant in &plan.variants {
            let cfg = TrainConfig { seed, ..plan.base.clone() }.with_variant(variant);
            let h = cfg.hash_without_variant();
            match &hash {
                Some(prev) if *prev != h => {
                    return Err(HarnessError::Config(format!(
                        "run {} differs from seed {seed} beyond its variant",
                        variant.label()
                    )))
                }
                _ => hash = Some(h.clone()),
            }
            let base = pretrain_base(&cfg, plan.train, &mut |_| {})?;
            progress(&format!("seed {seed}: {} base pretrain done ({} steps)", variant.label(), cfg.base_steps));
            let run = finetune(&cfg, base.model, plan.train, &mut |_| {})?;
            let smoothed = plan
                .checkpoints
                .iter()
                .filter_map(|&s| {
                    crate::train::smoothed_loss(&run.log, Phase::Adapter, s, SMOOTHING_WINDOW).map(|l| (s, l))
                })
                .collect();
            let (eval_triplets, eval_latents) = plan.eval;
            let eval = if eval_triplets.is_empty() {
                None
            } else {
                let rows = evaluate(
                    &run.model,
                    cfg.task,
                    &variant,
                    eval_triplets,
                    eval_latents,
                    cfg.sample_steps,
                    cfg.model.patch,
                )?;
                let col = |f: fn(&crate::eval::TripletScore) -> f64| rows.iter().map(f).collect::<Vec<_>>();
                Some(Aggregate::of(&col(|r| r.psnr), &col(|r| r.ssim)))
            };
            progress(&format!("seed {seed}: {} done", variant.label()));
            runs.push(AblationRun {
                variant,
                label: variant.label(),
                seed,
                config_hash: h,
                smoothed,
                eval,
                log: run.log,
            });
        }
    }
    Ok(AblationReport { checkpoints: plan.checkpoints.clone(), runs })
}

impl AblationReport {
    fn runs_of<'a>(&'a self, v: &'a Variant) -> impl Iterator<Item = &'a AblationRun> + 'a {
        self.runs.iter().filter(move |r| r.variant == *v)
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut out: Vec<Variant> = Vec::new();
        for r in &self.runs {
            if !out.contains(&r.variant) {
                out.push(r.variant);
            }
        }
        out
    }

    /// Median across seeds of the smoothed loss at `step`.
    pub fn median_loss(&self, v: &Variant, step: usize) -> Option<f64> {
        let vals: Vec<f64> =
            self.runs_of(v).filter_map(|r| r.smoothed.iter().find(|(s, _)| *s == step).map(|&(_, l)| l)).collect();
        (!vals.is_empty()).then(|| median(&vals))
    }

    /// Median across seeds of mean held-out `(psnr, ssim)`.
    pub fn median_eval(&self, v: &Variant) -> Option<(f64, f64)> {
        let evals: Vec<Aggregate> = self.runs_of(v).filter_map(|r| r.eval).collect();
        if evals.is_empty() {
            return None;
        }
        let p: Vec<f64> = evals.iter().map(|a| a.mean_psnr).collect();
        let s: Vec<f64> = evals.iter().map(|a| a.mean_ssim).collect();
        Some((median(&p), median(&s)))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,config_hash");
        for c in &self.checkpoints {
            s.push_str(&format!(",loss@{c}"));
        }
        s.push_str(",heldout_psnr,heldout_ssim\n");
        for r in &self.runs {
            s.push_str(&format!("{},{},{}", r.label, r.seed, r.config_hash));
            for c in &self.checkpoints {
                match r.smoothed.iter().find(|(s, _)| s == c) {
                    Some((_, l)) => s.push_str(&format!(",{l}")),
                    None => s.push(','),
                }
            }
            match r.eval {
                Some(a) => s.push_str(&format!(",{},{}\n", a.mean_psnr, a.mean_ssim)),
                None => s.push_str(",,\n"),
            }
        }
        s
    }

    /// Variants ordered by median loss at the last checkpoint, then by
    /// median held-out PSNR.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let variants = self.variants();
        if let Some(&last) = self.checkpoints.last() {
            let mut by_loss: Vec<(f64, String)> =
                variants.iter().filter_map(|v| self.median_loss(v, last).map(|l| (l, v.label()))).collect();
            by_loss.sort_by(|a, b| a.0.total_cmp(&b.0));
            s.push_str(&format!("median smoothed loss at step {last} (lower is better):\n"));
            for (i, (l, name)) in by_loss.iter().enumerate() {
                s.push_str(&format!("  {}. {name:<20} {l:.5}\n", i + 1));
            }
        }
        let mut by_psnr: Vec<(f64, f64, String)> =
            variants.iter().filter_map(|v| self.median_eval(v).map(|(p, q)| (p, q, v.label()))).collect();
        if !by_psnr.is_empty() {
            by_psnr.sort_by(|a, b| b.0.total_cmp(&a.0));
            s.push_str("median held-out PSNR / SSIM (higher is better):\n");
            for (i, (p, q, name)) in by_psnr.iter().enumerate() {
                s.push_str(&format!("  {}. {name:<20} {p:.3} dB  {q:.4}\n", i + 1));
            }
        }
        s
    }
}

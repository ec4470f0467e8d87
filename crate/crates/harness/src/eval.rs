//! Held-out evaluation against ground truth and a mid-gray baseline.

use serde::{Deserialize, Serialize};
use xview_core::{Task, UnifiedSequence, VelocityField, VideoTensor};
use xview_gridworld::Triplet;
use xview_tensor::Tensor;

use crate::checkpoint::SeedRange;
use crate::config::Variant;
use crate::data::TripletLatents;
use crate::error::{HarnessError, Result};
use crate::metrics::{capped_psnr, mean, median, psnr, video_ssim};
use crate::sample::sample_video;
use crate::train::LossRecord;

/// Value of the constant baseline prediction.
pub const BASELINE_GRAY: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletScore {
    pub seed: u64,
    /// Capped at [`crate::metrics::PSNR_CAP`].
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_psnr: f64,
    pub median_psnr: f64,
    pub mean_ssim: f64,
    pub median_ssim: f64,
}

impl Aggregate {
    /// Values are sorted before reduction, so the result does not depend
    /// on triplet order.
    pub fn of(psnrs: &[f64], ssims: &[f64]) -> Self {
        let sorted = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        let (p, s) = (sorted(psnrs), sorted(ssims));
        Self { mean_psnr: mean(&p), median_psnr: median(&p), mean_ssim: mean(&s), median_ssim: median(&s) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub variant: Variant,
    pub variant_label: String,
    pub sample_steps: usize,
    pub rows: Vec<TripletScore>,
    pub model: Aggregate,
    pub baseline: Aggregate,
    pub loss_samples: Vec<LossSample>,
    pub warnings: Vec<String>,
}

pub fn score(pred: &VideoTensor<f32>, truth: &VideoTensor<f32>, seed: u64) -> Result<TripletScore> {
    let gray = Tensor::full(truth.tensor().shape(), BASELINE_GRAY);
    Ok(TripletScore {
        seed,
        psnr: capped_psnr(psnr(pred.tensor(), truth.tensor())?),
        ssim: video_ssim(pred.tensor(), truth.tensor())?,
        baseline_psnr: capped_psnr(psnr(&gray, truth.tensor())?),
        baseline_ssim: video_ssim(&gray, truth.tensor())?,
    })
}

pub fn ground_truth(task: Task, triplet: &Triplet) -> &VideoTensor<f32> {
    match task {
        Task::Exo2Ego => &triplet.ego,
        Task::Ego2Exo => &triplet.exo,
    }
}

/// Samples every triplet's target and scores it.
pub fn evaluate<M>(
    model: &M,
    task: Task,
    variant: &Variant,
    triplets: &[Triplet],
    latents: &[TripletLatents],
    steps: usize,
    patch: usize,
) -> Result<Vec<TripletScore>>
where
    M: VelocityField<f32, Cond = UnifiedSequence<f32>>,
{
    if triplets.len() != latents.len() {
        return Err(HarnessError::Shape(format!("{} triplets vs {} latents", triplets.len(), latents.len())));
    }
    triplets
        .iter()
        .zip(latents)
        .map(|(tr, lat)| {
            let pred = sample_video(model, task, variant, lat, steps, patch)?;
            score(&pred, ground_truth(task, tr), tr.meta.seed)
        })
        .collect()
}

/// At most `count` evenly spaced rows of `log`, always including the last.
pub fn loss_samples(log: &[LossRecord], count: usize) -> Vec<LossSample> {
    if log.is_empty() || count == 0 {
        return Vec::new();
    }
    let stride = log.len().div_ceil(count).max(1);
    let mut idx: Vec<usize> = (0..log.len()).step_by(stride).collect();
    if idx.last() != Some(&(log.len() - 1)) {
        idx.push(log.len() - 1);
    }
    idx.into_iter()
        .map(|i| LossSample { phase: log[i].phase.to_string(), step: log[i].step, loss: log[i].loss })
        .collect()
}

pub fn overlap_warning(train: Option<SeedRange>, eval: SeedRange) -> Option<String> {
    match train {
        Some(tr) if tr.overlaps(&eval) => Some(format!(
            "WARNING: evaluation seeds {}..{} overlap training seeds {}..{}; scores are not held-out",
            eval.start,
            eval.start + eval.count as u64,
            tr.start,
            tr.start + tr.count as u64
        )),
        None => Some("WARNING: checkpoint does not record its training seeds; held-out status unknown".into()),
        _ => None,
    }
}

impl MetricsReport {
    pub fn new(
        task: Task,
        variant: Variant,
        sample_steps: usize,
        rows: Vec<TripletScore>,
        loss_samples: Vec<LossSample>,
        warnings: Vec<String>,
    ) -> Self {
        let col = |f: fn(&TripletScore) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        let model = Aggregate::of(&col(|r| r.psnr), &col(|r| r.ssim));
        let baseline = Aggregate::of(&col(|r| r.baseline_psnr), &col(|r| r.baseline_ssim));
        Self {
            task,
            variant,
            variant_label: variant.label(),
            sample_steps,
            rows,
            model,
            baseline,
            loss_samples,
            warnings,
        }
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        for w in &self.warnings {
            s.push_str(w);
            s.push('\n');
        }
        s.push_str(&format!(
            "task {}  variant {}  sampler steps {}  triplets {}\n",
            self.task,
            self.variant_label,
            self.sample_steps,
            self.rows.len()
        ));
        s.push_str(&format!(
            "{:>8}  {:>9}  {:>7}  {:>13}  {:>13}\n",
            "seed", "psnr(dB)", "ssim", "gray psnr(dB)", "gray ssim"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:>8}  {:>9.3}  {:>7.4}  {:>13.3}  {:>13.4}\n",
                r.seed, r.psnr, r.ssim, r.baseline_psnr, r.baseline_ssim
            ));
        }
        for (name, a) in [("model", &self.model), ("mid-gray", &self.baseline)] {
            s.push_str(&format!(
                "{name:>8}  mean psnr {:.3} dB, median {:.3} dB; mean ssim {:.4}, median {:.4}\n",
                a.mean_psnr, a.median_psnr, a.mean_ssim, a.median_ssim
            ));
        }
        if !self.loss_samples.is_empty() {
            s.push_str("loss curve:");
            for l in &self.loss_samples {
                s.push_str(&format!(" {}@{}={:.4}", l.phase, l.step, l.loss));
            }
            s.push('\n');
        }
        s
    }
}

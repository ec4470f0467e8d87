//! Generating a target video from a triplet's condition views.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use xview_core::{euler_sample, LatentGrid, Task, UnifiedSequence, VelocityField, VideoTensor};
use xview_tensor::Tensor;

use crate::config::Variant;
use crate::data::{to_pixels, TripletLatents};
use crate::error::{HarnessError, Result};
use crate::pipeline::{build_sequence, target_view};
use crate::train::rng_stream;

const STREAM_SAMPLE_NOISE: u64 = 11;

/// Sampling noise depends only on the triplet seed, so evaluations are
/// reproducible and independent of triplet order.
pub fn noise_rng(triplet_seed: u64) -> ChaCha8Rng {
    rng_stream(triplet_seed, STREAM_SAMPLE_NOISE)
}

/// Condition sequence with a zero target at `t = 1`; the sampler overwrites
/// the target tokens at every step.
pub fn condition_sequence(task: Task, variant: &Variant, lat: &TripletLatents) -> Result<UnifiedSequence<f32>> {
    let tgt = target_view(task, lat);
    let blank = LatentGrid::zeros(tgt.frames(), tgt.channels(), tgt.height(), tgt.width());
    build_sequence(task, variant, lat, &blank, 1.0)
}

/// Integrates the target latent (model space) from seeded noise.
pub fn sample_latent<M>(
    model: &M,
    task: Task,
    variant: &Variant,
    lat: &TripletLatents,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LatentGrid<f32>>
where
    M: VelocityField<f32, Cond = UnifiedSequence<f32>>,
{
    let seq = condition_sequence(task, variant, lat)?;
    let seg = seq.target_segment()?.clone();
    let shape = [seg.len(), seq.tokens.shape()[1]];
    let tokens = euler_sample(model, &seq, &shape, steps, rng)?;
    Ok(LatentGrid::from_tokens(&tokens, seg.frames, seg.height, seg.width)?)
}

/// Samples the target for `lat` and decodes it to clamped pixels.
pub fn sample_video<M>(
    model: &M,
    task: Task,
    variant: &Variant,
    lat: &TripletLatents,
    steps: usize,
    patch: usize,
) -> Result<VideoTensor<f32>>
where
    M: VelocityField<f32, Cond = UnifiedSequence<f32>>,
{
    let z = sample_latent(model, task, variant, lat, steps, &mut noise_rng(lat.seed))?;
    to_pixels(&z, patch)
}

pub fn check_direction(trained: Task, requested: Task) -> Result<()> {
    if trained != requested {
        return Err(HarnessError::DirectionMismatch { trained, requested });
    }
    Ok(())
}

/// Raw little-endian `f32` blob, row-major.
pub fn write_f32(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(HarnessError::io(path))
}

/// Binary PPM (P6) of videos laid out one per row, frames left to right,
/// with a one-pixel white gutter. All videos must share a shape.
pub fn preview_ppm(rows: &[&VideoTensor<f32>]) -> Result<Vec<u8>> {
    let Some(first) = rows.first() else {
        return Err(HarnessError::Shape("preview needs at least one video".into()));
    };
    let shape = first.tensor().shape().to_vec();
    let (f, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if c != 3 {
        return Err(HarnessError::Shape(format!("preview expects 3 channels, got {c}")));
    }
    if let Some(v) = rows.iter().find(|v| v.tensor().shape() != shape.as_slice()) {
        return Err(HarnessError::Shape(format!("preview rows {:?} vs {:?}", shape, v.tensor().shape())));
    }
    let (cw, ch) = (f * (w + 1) + 1, rows.len() * (h + 1) + 1);
    let mut px = vec![255u8; cw * ch * 3];
    for (r, video) in rows.iter().enumerate() {
        let d = video.tensor().data();
        for k in 0..f {
            for y in 0..h {
                for x in 0..w {
                    let (oy, ox) = (1 + r * (h + 1) + y, 1 + k * (w + 1) + x);
                    for cc in 0..3 {
                        let v = d[((k * 3 + cc) * h + y) * w + x].clamp(0.0, 1.0);
                        px[(oy * cw + ox) * 3 + cc] = (v * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    let mut out = format!("P6\n{cw} {ch}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

//! Per-task sequence assembly shared by training and sampling.

use xview_core::incontext::{assemble_channel_concat, assemble_ego2exo, assemble_exo2ego, channel_concat_variant};
use xview_core::{LatentGrid, Task, UnifiedSequence};
use xview_tensor::Tensor;

use crate::config::{Attention, Variant};
use crate::data::TripletLatents;
use crate::error::Result;

/// The view a task generates.
pub fn target_view(task: Task, lat: &TripletLatents) -> &LatentGrid<f32> {
    match task {
        Task::Exo2Ego => &lat.ego,
        Task::Ego2Exo => &lat.exo,
    }
}

/// The view a task is conditioned on.
pub fn condition_view(task: Task, lat: &TripletLatents) -> &LatentGrid<f32> {
    match task {
        Task::Exo2Ego => &lat.exo,
        Task::Ego2Exo => &lat.ego,
    }
}

/// Sequence for `task` under `variant` with the noisy target `z_t`.
pub fn build_sequence(
    task: Task,
    variant: &Variant,
    lat: &TripletLatents,
    z_t: &LatentGrid<f32>,
    t: f64,
) -> Result<UnifiedSequence<f32>> {
    let seq = match (variant.attention, task) {
        (Attention::TokenConcat, Task::Exo2Ego) => assemble_exo2ego(&lat.exo, z_t, t)?,
        (Attention::TokenConcat, Task::Ego2Exo) => assemble_ego2exo(&lat.reference, &lat.ego, z_t, t)?,
        (Attention::ChannelConcat, _) => {
            let stacked = channel_concat_variant(condition_view(task, lat), z_t)?;
            let reference = (task == Task::Ego2Exo).then_some(&lat.reference);
            assemble_channel_concat(task, &stacked, reference, t)?
        }
    };
    Ok(seq.with_positions(variant.positions))
}

/// Per-token regression target: `rows` (`[n, C']`) on the target segment,
/// zero elsewhere (those rows are masked out of the loss).
pub fn padded_target(seq: &UnifiedSequence<f32>, rows: &Tensor<f32>) -> Result<Tensor<f32>> {
    let seg = seq.target_segment()?;
    let v = rows;
    let c = v.shape()[1];
    let head = Tensor::zeros([seg.start, c]);
    let tail = Tensor::zeros([seq.len() - seg.end, c]);
    Ok(Tensor::concat_rows(&[&head, v, &tail])?)
}

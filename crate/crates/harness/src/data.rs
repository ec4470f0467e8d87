//! Triplets as normalized latents, the form the model trains on.

use xview_core::{decode, encode, LatentGrid, VideoTensor};
use xview_gridworld::Triplet;
use xview_tensor::Tensor;

use crate::error::Result;

/// Pixel `[0, 1]` maps to latent `[-1, 1]`, centering the data for the
/// unit-variance noise path.
pub fn to_model_space(latent: LatentGrid<f32>) -> Result<LatentGrid<f32>> {
    Ok(LatentGrid::new(latent.into_tensor().affine(2.0, -1.0))?)
}

/// Inverse of [`to_model_space`].
pub fn from_model_space(latent: &LatentGrid<f32>) -> Result<LatentGrid<f32>> {
    Ok(LatentGrid::new(latent.tensor().affine(0.5, 0.5))?)
}

/// Encoded views of one triplet, in model space.
#[derive(Clone, Debug)]
pub struct TripletLatents {
    pub seed: u64,
    pub ego: LatentGrid<f32>,
    pub exo: LatentGrid<f32>,
    /// One latent frame.
    pub reference: LatentGrid<f32>,
}

impl TripletLatents {
    pub fn encode(triplet: &Triplet, patch: usize) -> Result<Self> {
        let r = &triplet.reference;
        let ref_video =
            VideoTensor::new(Tensor::new([1, r.shape()[0], r.shape()[1], r.shape()[2]], r.data().to_vec())?)?;
        Ok(Self {
            seed: triplet.meta.seed,
            ego: to_model_space(encode(&triplet.ego, patch)?)?,
            exo: to_model_space(encode(&triplet.exo, patch)?)?,
            reference: to_model_space(encode(&ref_video, patch)?)?,
        })
    }
}

pub fn encode_all(triplets: &[Triplet], patch: usize) -> Result<Vec<TripletLatents>> {
    triplets.iter().map(|t| TripletLatents::encode(t, patch)).collect()
}

/// Decodes a model-space latent to pixels clamped to `[0, 1]`.
pub fn to_pixels(latent: &LatentGrid<f32>, patch: usize) -> Result<VideoTensor<f32>> {
    Ok(decode(&from_model_space(latent)?, patch)?.clamp01())
}

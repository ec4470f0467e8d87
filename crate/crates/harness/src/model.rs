//! The sampled velocity field: transformer output plus the optional
//! Gaussian prior term.

use xview_core::{Dit, UnifiedSequence, VelocityField};
use xview_tensor::Tensor;

use crate::prior::GaussianPrior;

#[derive(Clone, Debug)]
pub struct FlowModel {
    pub dit: Dit<f32>,
    pub prior: Option<GaussianPrior>,
}

impl FlowModel {
    /// Prior velocity of target rows `z_t: [n, C']`; zeros without a prior.
    pub fn prior_velocity(&self, z_t: &Tensor<f32>, t: f64) -> crate::Result<Tensor<f32>> {
        match &self.prior {
            Some(p) => p.velocity(z_t, t),
            None => Ok(Tensor::zeros(z_t.shape())),
        }
    }
}

impl VelocityField<f32> for FlowModel {
    type Cond = UnifiedSequence<f32>;

    fn velocity(&self, z: &Tensor<f32>, cond: &UnifiedSequence<f32>, t: f64) -> xview_core::Result<Tensor<f32>> {
        let mut v = self.dit.velocity(z, cond, t)?;
        if let Some(p) = &self.prior {
            let base = p.velocity(z, t).map_err(|e| xview_core::Error::Contract(e.to_string()))?;
            v.add_assign(&base)?;
        }
        Ok(v)
    }
}

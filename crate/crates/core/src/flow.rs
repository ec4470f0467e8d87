//! Rectified-flow noising path, velocity target, masked flow-matching loss
//! and the Euler sampler.
//!
//! The path is `z_t = (1 − t)·z0 + t·ε`, so `dz_t/dt = ε − z0` and sampling
//! integrates from pure noise at `t = 1` down to `t = 0`.

use std::rc::Rc;

use rand::Rng;
use xview_tensor::{Element, Tensor, Var};

use crate::error::{shape_err, Error, Result};

/// Default number of Euler steps.
pub const DEFAULT_SAMPLE_STEPS: usize = 50;

/// `t ~ U[0, 1)`.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

pub fn forward_noise<T: Element>(z0: &Tensor<T>, eps: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("timestep {t} outside [0, 1]")));
    }
    let (a, b) = (T::from_f64(1.0 - t), T::from_f64(t));
    Ok(z0.zip_map(eps, "forward_noise", |z, e| a * z + b * e)?)
}

pub fn target_velocity<T: Element>(z0: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(eps.sub(z0)?)
}

/// A clean sample, its noise, a timestep and the resulting noisy point.
#[derive(Clone, Debug)]
pub struct FlowSample<T> {
    pub z0: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: f64,
    pub z_t: Tensor<T>,
}

impl<T: Element> FlowSample<T> {
    pub fn draw<R: Rng + ?Sized>(z0: Tensor<T>, rng: &mut R) -> Result<Self> {
        let t = sample_timestep(rng);
        let eps = Tensor::randn(z0.shape(), 1.0, rng);
        Self::new(z0, eps, t)
    }

    pub fn new(z0: Tensor<T>, eps: Tensor<T>, t: f64) -> Result<Self> {
        let z_t = forward_noise(&z0, &eps, t)?;
        Ok(Self { z0, eps, t, z_t })
    }

    pub fn velocity(&self) -> Result<Tensor<T>> {
        target_velocity(&self.z0, &self.eps)
    }
}

/// Mean squared error between predicted and target velocity over the rows
/// (tokens) flagged in `mask`.
pub fn flow_matching_loss<'g, T: Element>(
    pred: Var<'g, T>,
    target: Rc<Tensor<T>>,
    mask: Rc<[bool]>,
) -> Result<Var<'g, T>> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Contract("flow-matching mask selects no tokens".into()));
    }
    Ok(pred.masked_mse(target, mask)?)
}

/// Integrates `dz/dt = v(z, t)` from `t = 1` to `t = 0` in `steps` uniform
/// Euler steps starting at `noise`.
pub fn euler_integrate<T, F>(mut velocity: F, noise: Tensor<T>, steps: usize) -> Result<Tensor<T>>
where
    T: Element,
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    if steps == 0 {
        return Err(Error::Contract("euler sampler needs at least one step".into()));
    }
    let mut z = noise;
    for i in 0..steps {
        let t = 1.0 - i as f64 / steps as f64;
        let t_next = 1.0 - (i + 1) as f64 / steps as f64;
        let v = velocity(&z, t)?;
        if v.shape() != z.shape() {
            return Err(shape_err("velocity output", z.shape(), v.shape()));
        }
        let dt = T::from_f64(t - t_next);
        for (zv, vv) in z.data_mut().iter_mut().zip(v.data()) {
            *zv -= dt * *vv;
        }
    }
    Ok(z)
}

/// A velocity predictor conditioned on some context.
pub trait VelocityField<T: Element> {
    type Cond;

    fn velocity(&self, z: &Tensor<T>, cond: &Self::Cond, t: f64) -> Result<Tensor<T>>;
}

/// Draws `ε ~ N(0, I)` of `shape` and integrates it to `t = 0`.
pub fn euler_sample<T, M, R>(model: &M, cond: &M::Cond, shape: &[usize], steps: usize, rng: &mut R) -> Result<Tensor<T>>
where
    T: Element,
    M: VelocityField<T>,
    R: Rng + ?Sized,
{
    let noise = Tensor::randn(shape, 1.0, rng);
    euler_integrate(|z, t| model.velocity(z, cond, t), noise, steps)
}

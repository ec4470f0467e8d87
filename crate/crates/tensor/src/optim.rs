use crate::error::{Result, TensorError};
use crate::params::{ParamGrads, ParamSet};
use crate::{Element, Tensor};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Moment estimates, one slot per parameter id.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState<T> {
    pub step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new() -> Self {
        Self { step: 0, m: Vec::new(), v: Vec::new() }
    }
}

/// One AdamW update with decoupled weight decay. Only trainable parameters
/// that have a gradient are touched.
pub fn adamw_step<T: Element>(
    params: &mut ParamSet<T>,
    grads: &ParamGrads<T>,
    state: &mut OptimizerState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(TensorError::Contract(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    state.step += 1;
    let slots = params.capacity();
    state.m.resize_with(slots, || None);
    state.v.resize_with(slots, || None);

    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let lr = T::from_f64(cfg.lr);
    let decay = T::one() - T::from_f64(cfg.lr * cfg.weight_decay);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (ib1, ib2) = (T::one() - b1, T::one() - b2);
    let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
    let eps = T::from_f64(cfg.eps);

    let ids: Vec<_> = params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let Some(g) = grads.get(id) else { continue };
        let w = params.get_mut(id);
        if g.shape() != w.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                lhs: w.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let m = state.m[id.index()].get_or_insert_with(|| Tensor::zeros(w.shape()));
        let v = state.v[id.index()].get_or_insert_with(|| Tensor::zeros(w.shape()));
        for (((wv, gv), mv), vv) in w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mv = b1 * *mv + ib1 * *gv;
            *vv = b2 * *vv + ib2 * *gv * *gv;
            let mhat = *mv * inv_bc1;
            let vhat = *vv * inv_bc2;
            *wv = *wv * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// [`adamw_step`] bundled with its state.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub state: OptimizerState<T>,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, state: OptimizerState::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamGrads<T>) -> Result<()> {
        adamw_step(params, grads, &mut self.state, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    fn single(value: f64) -> (ParamSet<f64>, crate::ParamId) {
        let mut ps = ParamSet::new();
        let id = ps.insert("w", Tensor::new([3], vec![value, -value, 2.0 * value]).unwrap(), true).unwrap();
        (ps, id)
    }

    fn grads_of(ps: &ParamSet<f64>, g: Vec<f64>) -> ParamGrads<f64> {
        let mut out = vec![None; ps.capacity()];
        out[0] = Some(Tensor::new([g.len()], g).unwrap());
        ParamGrads(out)
    }

    #[test]
    fn decay_only_path() {
        let (mut ps, id) = single(1.5);
        let before = ps.get(id).clone();
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.3, ..Default::default() };
        let zero = grads_of(&ps, vec![0.0; 3]);
        adamw_step(&mut ps, &zero, &mut OptimizerState::new(), &cfg).unwrap();
        for (a, b) in ps.get(id).data().iter().zip(before.data()) {
            assert!((a - b * (1.0 - 0.1 * 0.3)).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut ps, id) = single(1.0);
        let before = ps.get(id).clone();
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.0, ..Default::default() };
        let g = grads_of(&ps, vec![3.0, -0.5, 1e-2]);
        adamw_step(&mut ps, &g, &mut OptimizerState::new(), &cfg).unwrap();
        let expect = [-0.01, 0.01, -0.01];
        for ((a, b), e) in ps.get(id).data().iter().zip(before.data()).zip(expect) {
            assert!((a - b - e).abs() < 1e-7, "{a} {b} {e}");
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let (mut ps, id) = single(0.7);
        let before = ps.get(id).clone();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let zero = grads_of(&ps, vec![0.0; 3]);
        let mut st = OptimizerState::new();
        for _ in 0..5 {
            adamw_step(&mut ps, &zero, &mut st, &cfg).unwrap();
        }
        assert_eq!(ps.get(id), &before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.insert("w", Tensor::scalar(0.0), true).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, ..Default::default() });
        for _ in 0..100 {
            let g = Graph::new();
            let b = ps.bind(&g);
            let w = b.var(id);
            let d = w.affine(1.0, -2.0).unwrap();
            let loss = d.mul(d).unwrap();
            let mut grads = g.backward(loss).unwrap();
            let pg = b.grads(&mut grads);
            opt.step(&mut ps, &pg).unwrap();
        }
        let w = ps.get(id).data()[0];
        assert!((w - 2.0).abs() < 0.05, "w = {w}");
    }

    #[test]
    fn frozen_params_untouched() {
        let (mut ps, id) = single(1.0);
        ps.set_trainable(id, false);
        let before = ps.get(id).clone();
        let g = grads_of(&ps, vec![1.0; 3]);
        adamw_step(&mut ps, &g, &mut OptimizerState::new(), &AdamWConfig::default()).unwrap();
        assert_eq!(ps.get(id), &before);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let (mut ps, _) = single(1.0);
        let g = grads_of(&ps, vec![1.0; 3]);
        let cfg = AdamWConfig { lr: 0.0, ..Default::default() };
        assert!(adamw_step(&mut ps, &g, &mut OptimizerState::new(), &cfg).is_err());
    }
}

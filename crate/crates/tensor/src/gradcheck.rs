//! Central finite-difference gradient checks in 64-bit precision.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::Tensor;

/// Worst coordinate found by [`finite_diff_report`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Max over all coordinates of `|analytic − numeric| / (|analytic| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    Ok(finite_diff_report(f, x, h, &coords)?.max_rel_error)
}

/// Like [`finite_diff_check`] over a chosen subset of coordinates.
pub fn finite_diff_report<F>(f: F, x: &Tensor<f64>, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let analytic = {
        let g = Graph::new();
        let xv = g.param(x.clone());
        let loss = f(&g, xv)?;
        let mut grads = g.backward(loss)?;
        grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let g = Graph::new();
        let xv = g.constant(probe);
        let out = f(&g, xv)?;
        let v = out.value().item()?;
        Ok(v)
    };
    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: coords.len() };
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + 1e-8);
        if rel > report.max_rel_error || !rel.is_finite() {
            report =
                GradCheckReport { max_rel_error: rel, worst_index: i, analytic: a, numeric, checked: coords.len() };
        }
    }
    Ok(report)
}

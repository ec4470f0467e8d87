//! Closed-form Gaussian velocity added to the transformer's output.
//!
//! Latent tokens have far more channels than the model width, so the linear
//! output head spans only a subspace of token space; noise outside that span
//! would survive sampling untouched. Fitting `z0 ~ N(μ, Σ)` to the training
//! tokens gives the exact posterior-mean velocity of that Gaussian,
//!
//! `v(z_t, t) = −μ + (t·I − (1−t)·Σ)·((1−t)²·Σ + t²·I)⁻¹·(z_t − (1−t)·μ)`,
//!
//! which is diagonal in Σ's eigenbasis. In directions where the data has no
//! variance it reduces to `(z_t − μ)/t`, which Euler steps integrate exactly.
//! The transformer learns the residual on top.

use nalgebra::{DMatrix, SymmetricEigen};
use xview_tensor::Tensor;

use crate::error::{HarnessError, Result};

/// Eigenvalues are clamped here so the coefficients stay bounded at `t = 0`.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrior {
    /// `[C']`.
    pub mean: Tensor<f32>,
    /// `[C', C']`, one eigenvector per row.
    pub basis: Tensor<f32>,
    /// `[C']`, clamped to [`VARIANCE_FLOOR`].
    pub eigenvalues: Tensor<f32>,
}

impl GaussianPrior {
    /// Fits mean and covariance over the rows of every `[n, C']` block.
    pub fn fit(blocks: &[&Tensor<f32>]) -> Result<Self> {
        let c = match blocks.first() {
            Some(b) if b.rank() == 2 => b.shape()[1],
            _ => return Err(HarnessError::Shape("prior needs at least one [n, C'] token block".into())),
        };
        if let Some(b) = blocks.iter().find(|b| b.rank() != 2 || b.shape()[1] != c) {
            return Err(HarnessError::Shape(format!("prior token blocks {:?} vs width {c}", b.shape())));
        }
        let n: usize = blocks.iter().map(|b| b.shape()[0]).sum();
        if n == 0 {
            return Err(HarnessError::Shape("prior needs at least one token".into()));
        }
        let mut mean = vec![0.0f64; c];
        for b in blocks {
            for row in b.data().chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v as f64;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered: Vec<f64> = blocks
            .iter()
            .flat_map(|b| b.data().chunks_exact(c))
            .flat_map(|row| row.iter().zip(&mean).map(|(&v, &m)| v as f64 - m))
            .collect();
        let x = Tensor::new([n, c], centered)?;
        let cov = x.matmul_tn(&x)?.scale(1.0 / n as f64);
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(c, c, cov.data()));
        // Descending eigenvalue order keeps the file layout independent of
        // the solver's internal ordering.
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut basis = Vec::with_capacity(c * c);
        for &k in &order {
            let v = eig.eigenvectors.column(k);
            // Sign convention: largest-magnitude entry positive.
            let pivot = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            basis.extend(v.iter().map(|&e| (sign * e) as f32));
        }
        let eigenvalues = order.iter().map(|&k| eig.eigenvalues[k].max(VARIANCE_FLOOR) as f32).collect();
        Ok(Self {
            mean: Tensor::new([c], mean.into_iter().map(|m| m as f32).collect())?,
            basis: Tensor::new([c, c], basis)?,
            eigenvalues: Tensor::new([c], eigenvalues)?,
        })
    }

    /// Reassembles a stored prior, checking that the shapes agree.
    pub fn from_parts(mean: Tensor<f32>, basis: Tensor<f32>, eigenvalues: Tensor<f32>) -> Result<Self> {
        let c = mean.numel();
        if mean.shape() != [c] || basis.shape() != [c, c] || eigenvalues.shape() != [c] {
            return Err(HarnessError::Shape(format!(
                "prior parts mean {:?}, basis {:?}, eigenvalues {:?}",
                mean.shape(),
                basis.shape(),
                eigenvalues.shape()
            )));
        }
        if eigenvalues.data().iter().any(|&l| !l.is_finite() || (l as f64) < VARIANCE_FLOOR * 0.5) {
            return Err(HarnessError::Shape("prior eigenvalues must be positive and finite".into()));
        }
        Ok(Self { mean, basis, eigenvalues })
    }

    pub fn width(&self) -> usize {
        self.mean.numel()
    }

    /// Per-eigendirection coefficient of `z_t − (1−t)μ` at time `t`.
    pub fn coefficients(&self, t: f64) -> Tensor<f32> {
        self.eigenvalues.map(|l| {
            let l = l as f64;
            ((t - (1.0 - t) * l) / ((1.0 - t).powi(2) * l + t * t)) as f32
        })
    }

    /// Gaussian velocity for token rows `z_t: [n, C']`.
    pub fn velocity(&self, z_t: &Tensor<f32>, t: f64) -> Result<Tensor<f32>> {
        let c = self.width();
        if z_t.rank() != 2 || z_t.shape()[1] != c {
            return Err(HarnessError::Shape(format!("prior velocity input {:?}, width {c}", z_t.shape())));
        }
        let shift = self.mean.scale(-(1.0 - t) as f32);
        let y = z_t.add_row(&shift)?;
        let coeff = y.matmul_nt(&self.basis)?.mul_row(&self.coefficients(t))?;
        Ok(coeff.matmul(&self.basis)?.add_row(&self.mean.scale(-1.0))?)
    }
}

//! Low-rank adapters for frozen linear layers.
//!
//! A layer `y = x·Wᵀ + b` with `W: [d, k]` gains `Δy = scale · (x·Aᵀ)·Bᵀ`,
//! `A: [r, k]`, `B: [d, r]`. `B` starts at zero so attaching never changes
//! the layer's output.

use rand::Rng;
use serde::{Deserialize, Serialize};
use xview_tensor::{Element, Tensor, Var};

use crate::error::{shape_err, Error, Result};

/// Rank and scale numerator; `alpha = None` means `alpha = rank`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: Option<f64>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: None }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64) / self.rank as f64
    }

    /// Checks the low-rank premise `1 ≤ r < min(d, k)`.
    pub fn validate_for(&self, d: usize, k: usize) -> Result<()> {
        if self.rank == 0 || self.rank >= d.min(k) {
            return Err(Error::Config(format!(
                "lora rank {} must satisfy 1 <= r < min(d, k) = {}",
                self.rank,
                d.min(k)
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    /// `[r, k]`.
    pub a: Tensor<T>,
    /// `[d, r]`.
    pub b: Tensor<T>,
    pub scale: f64,
}

impl<T: Element> LoraAdapter<T> {
    /// `A ~ N(0, 1/k)`, `B = 0`.
    pub fn attach<R: Rng + ?Sized>(weight: &Tensor<T>, config: LoraConfig, rng: &mut R) -> Result<Self> {
        let (d, k) = weight.dims2("lora attach")?;
        config.validate_for(d, k)?;
        let a = Tensor::randn([config.rank, k], 1.0 / (k as f64).sqrt(), rng);
        let b = Tensor::zeros([d, config.rank]);
        Ok(Self { a, b, scale: config.scale() })
    }

    pub fn from_parts(a: Tensor<T>, b: Tensor<T>, scale: f64) -> Result<Self> {
        let (r, _) = a.dims2("lora A")?;
        let (_, rb) = b.dims2("lora B")?;
        if r != rb {
            return Err(shape_err("lora B columns", r, rb));
        }
        Ok(Self { a, b, scale })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// `r·(d + k)`.
    pub fn parameter_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    fn check(&self, weight: &Tensor<T>) -> Result<()> {
        let (d, k) = weight.dims2("lora weight")?;
        if self.a.shape()[1] != k || self.b.shape()[0] != d {
            return Err(shape_err("lora factors for weight", [d, k], [self.b.shape()[0], self.a.shape()[1]]));
        }
        Ok(())
    }

    /// `scale · B·A`, shaped like the base weight.
    pub fn delta(&self) -> Result<Tensor<T>> {
        Ok(self.b.matmul(&self.a)?.scale(T::from_f64(self.scale)))
    }

    /// `W + scale·B·A`. Consumes the adapter so it cannot be merged twice.
    pub fn merge(self, weight: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(weight)?;
        Ok(weight.add(&self.delta()?)?)
    }
}

/// `y' = x·Wᵀ + b + scale·(x·Aᵀ)·Bᵀ` on plain tensors.
pub fn lora_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    adapter: Option<&LoraAdapter<T>>,
) -> Result<Tensor<T>> {
    let (_, k) = x.dims2("lora input")?;
    let (_, wk) = weight.dims2("lora weight")?;
    if k != wk {
        return Err(shape_err("lora input features", wk, k));
    }
    let mut y = x.matmul_nt(weight)?;
    if let Some(b) = bias {
        y = y.add_row(b)?;
    }
    if let Some(ad) = adapter {
        ad.check(weight)?;
        let low = x.matmul_nt(&ad.a)?.matmul_nt(&ad.b)?.scale(T::from_f64(ad.scale));
        y = y.add(&low)?;
    }
    Ok(y)
}

/// Linear layer on a graph with an optional adapter.
#[derive(Clone, Copy)]
pub struct LinearVars<'g, T: Element> {
    pub weight: Var<'g, T>,
    pub bias: Option<Var<'g, T>>,
    pub lora: Option<(Var<'g, T>, Var<'g, T>, f64)>,
}

impl<'g, T: Element> LinearVars<'g, T> {
    pub fn plain(weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Self {
        Self { weight, bias, lora: None }
    }

    pub fn apply(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let mut y = x.matmul_nt(self.weight)?;
        if let Some(b) = self.bias {
            y = y.add_row(b)?;
        }
        if let Some((a, b, scale)) = self.lora {
            let low = x.matmul_nt(a)?.matmul_nt(b)?.scale(scale)?;
            y = y.add(low)?;
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attach_shapes_and_zero_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::<f32>::randn([12, 10], 1.0, &mut rng);
        let ad = LoraAdapter::attach(&w, LoraConfig { rank: 3, alpha: None }, &mut rng).unwrap();
        assert_eq!(ad.a.shape(), [3, 10]);
        assert_eq!(ad.b.shape(), [12, 3]);
        assert!(ad.b.data().iter().all(|&v| v == 0.0));
        assert_eq!(ad.parameter_count(), 3 * (12 + 10));
        assert_eq!(ad.scale, 1.0);
    }

    #[test]
    fn rank_bounds() {
        let w = Tensor::<f32>::zeros([8, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for r in [0, 6, 7] {
            let e = LoraAdapter::attach(&w, LoraConfig { rank: r, alpha: None }, &mut rng);
            assert!(matches!(e, Err(Error::Config(_))), "rank {r}");
        }
        assert!(LoraConfig { rank: 80, alpha: None }.validate_for(3072, 3072).is_ok());
    }

    #[test]
    fn identity_composition() {
        let n = 4;
        let eye = Tensor::<f64>::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
        let ad = LoraAdapter::from_parts(eye.clone(), eye, 1.0).unwrap();
        let x = Tensor::from_fn([3, n], |i| i as f64 - 5.0);
        let y = lora_forward(&x, &Tensor::zeros([n, n]), None, Some(&ad)).unwrap();
        assert_eq!(y, x);
    }
}

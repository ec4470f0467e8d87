use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::Element;

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected = numel_of(&shape);
        if expected != data.len() {
            return Err(TensorError::DataLength { shape, expected, actual: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let data = vec![value; numel_of(&shape)];
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel_of(&shape)).map(f).collect();
        Self { shape, data }
    }

    /// Gaussian samples drawn in `f64` and cast, so both precisions see the
    /// same stream.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64(z * std)
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel_of(&shape) != self.data.len() {
            return Err(TensorError::ShapeMismatch { op: "reshape", lhs: self.shape, rhs: shape });
        }
        Ok(Self { shape, data: self.data })
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank { op, expected: 2, shape: self.shape.clone() }),
        }
    }

    /// Extent of the last axis; rank-0 tensors count as one element.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape("max_abs_diff", other)?;
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs())))
    }

    fn same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch { op, lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        Ok(())
    }

    // ---- matrix products ----

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: self.shape.clone(), rhs: rhs.shape.clone() });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nn(&self.data, &rhs.data, &mut out, m, k, n);
        Self::new([m, n], out)
    }

    /// `self · rhsᵀ`
    pub fn matmul_nt(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = rhs.dims2("matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt(&self.data, &rhs.data, &mut out, m, k, n);
        Self::new([m, n], out)
    }

    /// `selfᵀ · rhs`
    pub fn matmul_tn(&self, rhs: &Self) -> Result<Self> {
        let (k, m) = self.dims2("matmul_tn")?;
        let (k2, n) = rhs.dims2("matmul_tn")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_tn(&self.data, &rhs.data, &mut out, m, k, n);
        Self::new([m, n], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        Self::new([c, r], kernels::transpose_into(&self.data, r, c))
    }

    // ---- elementwise ----

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(op, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    /// `alpha * self + beta`
    pub fn affine(&self, alpha: T, beta: T) -> Self {
        self.map(|v| alpha * v + beta)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    fn check_row_vector(&self, op: &'static str, row: &Self) -> Result<usize> {
        let n = self.last_dim();
        if row.numel() != n || row.rank() != 1 || self.rank() == 0 {
            return Err(TensorError::ShapeMismatch { op, lhs: self.shape.clone(), rhs: row.shape.clone() });
        }
        Ok(n)
    }

    /// Adds a trailing-axis vector to every row.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        let n = self.check_row_vector("add_row", row)?;
        let mut out = self.clone();
        for chunk in out.data.chunks_exact_mut(n) {
            for (a, b) in chunk.iter_mut().zip(&row.data) {
                *a += *b;
            }
        }
        Ok(out)
    }

    /// Multiplies every row elementwise by a trailing-axis vector.
    pub fn mul_row(&self, row: &Self) -> Result<Self> {
        let n = self.check_row_vector("mul_row", row)?;
        let mut out = self.clone();
        for chunk in out.data.chunks_exact_mut(n) {
            for (a, b) in chunk.iter_mut().zip(&row.data) {
                *a *= *b;
            }
        }
        Ok(out)
    }

    /// Sums over every axis but the last, giving a `[n]` vector.
    pub fn sum_rows(&self) -> Self {
        let n = self.last_dim();
        let mut out = vec![T::zero(); n];
        for chunk in self.data.chunks_exact(n) {
            for (a, b) in out.iter_mut().zip(chunk) {
                *a += *b;
            }
        }
        Self { shape: vec![n], data: out }
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |s, &v| s + v)
    }

    pub fn silu(&self) -> Self {
        self.map(|v| v / (T::one() + (-v).exp()))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Self {
        let n = self.last_dim();
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = T::one() / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        out
    }

    /// `gain ⊙ x / sqrt(mean(x²) + eps)` per last-axis row. Also returns the
    /// per-row reciprocal RMS for use in backward.
    pub fn rms_norm(&self, gain: &Self, eps: T) -> Result<(Self, Vec<T>)> {
        let n = self.check_row_vector("rms_norm", gain)?;
        let mut out = self.clone();
        let mut inv = Vec::with_capacity(self.numel() / n.max(1));
        let nf = T::from_f64(n as f64);
        for row in out.data.chunks_exact_mut(n) {
            let ms = row.iter().fold(T::zero(), |s, &v| s + v * v) / nf;
            let r = T::one() / (ms + eps).sqrt();
            for (v, g) in row.iter_mut().zip(&gain.data) {
                *v = *v * r * *g;
            }
            inv.push(r);
        }
        Ok((out, inv))
    }

    // ---- structural ----

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2("slice_rows")?;
        if start + len > r {
            return Err(TensorError::OutOfBounds { op: "slice_rows", start, end: start + len, extent: r });
        }
        Self::new([len, c], self.data[start * c..(start + len) * c].to_vec())
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2("slice_cols")?;
        if start + len > c {
            return Err(TensorError::OutOfBounds { op: "slice_cols", start, end: start + len, extent: c });
        }
        let mut out = Vec::with_capacity(r * len);
        for row in self.data.chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        Self::new([r, len], out)
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::Contract("concat_rows of zero tensors".into()))?;
        let (_, c) = first.dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c2) = p.dims2("concat_rows")?;
            if c2 != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Self::new([rows, c], data)
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::Contract("concat_cols of zero tensors".into()))?;
        let (r, _) = first.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r2, c) = p.dims2("concat_cols")?;
            if r2 != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Self::new([r, total], data)
    }

    /// Picks rows by index: `out[i] = self[index[i]]`.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(index.len() * c);
        for &ix in index {
            if ix >= r {
                return Err(TensorError::OutOfBounds { op: "gather_rows", start: ix, end: ix + 1, extent: r });
            }
            data.extend_from_slice(&self.data[ix * c..(ix + 1) * c]);
        }
        Self::new([index.len(), c], data)
    }

    /// Adjoint of [`gather_rows`](Self::gather_rows): accumulates rows of
    /// `self` into a `[rows, c]` tensor at `index` positions, in index order.
    pub fn scatter_add_rows(&self, index: &[usize], rows: usize) -> Result<Self> {
        let (n, c) = self.dims2("scatter_add_rows")?;
        if n != index.len() {
            return Err(TensorError::Contract(format!("scatter_add_rows: {n} rows but {} indices", index.len())));
        }
        let mut out = vec![T::zero(); rows * c];
        for (src, &ix) in self.data.chunks_exact(c).zip(index) {
            if ix >= rows {
                return Err(TensorError::OutOfBounds { op: "scatter_add_rows", start: ix, end: ix + 1, extent: rows });
            }
            for (o, s) in out[ix * c..(ix + 1) * c].iter_mut().zip(src) {
                *o += *s;
            }
        }
        Self::new([rows, c], out)
    }

    /// Rotates consecutive channel pairs `(x[2l], x[2l+1])` of each row by
    /// the angle whose cosine/sine are `cos[row, l]`/`sin[row, l]`.
    /// `inverse` rotates by the negated angle.
    pub fn rotate_pairs(&self, cos: &Self, sin: &Self, inverse: bool) -> Result<Self> {
        let (r, c) = self.dims2("rotate_pairs")?;
        if c % 2 != 0 || cos.shape() != [r, c / 2] || sin.shape() != cos.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "rotate_pairs",
                lhs: self.shape.clone(),
                rhs: cos.shape.clone(),
            });
        }
        let half = c / 2;
        let mut out = self.clone();
        for i in 0..r {
            let row = &mut out.data[i * c..(i + 1) * c];
            let cs = &cos.data[i * half..(i + 1) * half];
            let sn = &sin.data[i * half..(i + 1) * half];
            for l in 0..half {
                let (x0, x1) = (row[2 * l], row[2 * l + 1]);
                let s = if inverse { -sn[l] } else { sn[l] };
                row[2 * l] = x0 * cs[l] - x1 * s;
                row[2 * l + 1] = x0 * s + x1 * cs[l];
            }
        }
        Ok(out)
    }
}

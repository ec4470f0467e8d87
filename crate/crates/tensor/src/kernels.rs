//! Row-major matrix kernels.
//!
//! Every output element is reduced in a fixed order that depends only on the
//! operand shapes, so results are bit-identical across runs.

use crate::Element;

const LANES: usize = 16;

/// Dot product with `LANES` independent accumulators combined pairwise.
#[inline]
pub fn dot<T: Element>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::zero(); LANES];
    let xc = x.chunks_exact(LANES);
    let yc = y.chunks_exact(LANES);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (xs, ys) in xc.zip(yc) {
        for l in 0..LANES {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] = acc[l] + acc[l + width];
        }
    }
    let mut s = acc[0];
    for (a, b) in xr.iter().zip(yr) {
        s += *a * *b;
    }
    s
}

const MR: usize = 6;
const NR: usize = 32;

/// `c[m,n] = a[m,k] · b[k,n]`
///
/// Register-blocked over `MR × W` output tiles with `W` in {32, 16, 8}. Each
/// output element is accumulated from zero in ascending `k`, the same order
/// as the naive loop.
pub fn matmul_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i < m {
        let rows = MR.min(m - i);
        let mut j = 0;
        while j < n {
            let cols = n - j;
            let step = if rows < MR || cols < 8 {
                let w = cols.min(NR);
                tile_edge(a, b, c, i, j, rows, w, k, n);
                w
            } else if cols >= 32 {
                tile_full::<T, 32>(a, b, c, i, j, k, n);
                32
            } else if cols >= 16 {
                tile_full::<T, 16>(a, b, c, i, j, k, n);
                16
            } else {
                tile_full::<T, 8>(a, b, c, i, j, k, n);
                8
            };
            j += step;
        }
        i += MR;
    }
}

#[inline(always)]
fn tile_full<T: Element, const W: usize>(a: &[T], b: &[T], c: &mut [T], i: usize, j: usize, k: usize, n: usize) {
    let mut acc = [[T::zero(); W]; MR];
    let a_rows: [&[T]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
    for p in 0..k {
        let brow: &[T; W] = b[p * n + j..p * n + j + W].try_into().expect("tile width");
        for r in 0..MR {
            let av = a_rows[r][p];
            let row = &mut acc[r];
            for l in 0..W {
                row[l] += av * brow[l];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * n + j..(i + r) * n + j + W].copy_from_slice(row);
    }
}

#[allow(clippy::too_many_arguments)]
fn tile_edge<T: Element>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    i: usize,
    j: usize,
    rows: usize,
    cols: usize,
    k: usize,
    n: usize,
) {
    let mut acc = [[T::zero(); NR]; MR];
    for p in 0..k {
        let brow = &b[p * n + j..p * n + j + cols];
        for r in 0..rows {
            let av = a[(i + r) * k + p];
            for (x, bv) in acc[r].iter_mut().zip(brow) {
                *x += av * *bv;
            }
        }
    }
    for r in 0..rows {
        c[(i + r) * n + j..(i + r) * n + j + cols].copy_from_slice(&acc[r][..cols]);
    }
}

/// Blocked so strided writes stay within a few cache lines.
pub fn transpose_into<T: Element>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    const B: usize = 16;
    let mut out = vec![T::zero(); src.len()];
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose_into(b, n, k);
    matmul_nn(a, &bt, c, m, k, n);
}

/// `c[m,n] = a[k,m]ᵀ · b[k,n]`
pub fn matmul_tn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    let at = transpose_into(a, k, m);
    matmul_nn(&at, b, c, m, k, n);
}

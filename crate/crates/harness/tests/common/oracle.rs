//! Direct-summation PSNR/SSIM oracles, independent of the library code.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use xview_tensor::Tensor;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Textbook PSNR: one pass for the MSE.
pub fn naive_psnr(a: &[f64], b: &[f64]) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        se += (a[i] - b[i]) * (a[i] - b[i]);
    }
    10.0 * (1.0 / (se / a.len() as f64)).log10()
}

/// Window statistics by explicit loops, two-pass variances.
fn naive_window(a: &[f64], b: &[f64], w: usize, y0: usize, x0: usize, wh: usize, ww: usize) -> f64 {
    let n = (wh * ww) as f64;
    let (mut ma, mut mb) = (0.0, 0.0);
    for y in y0..y0 + wh {
        for x in x0..x0 + ww {
            ma += a[y * w + x];
            mb += b[y * w + x];
        }
    }
    ma /= n;
    mb /= n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for y in y0..y0 + wh {
        for x in x0..x0 + ww {
            let (da, db) = (a[y * w + x] - ma, b[y * w + x] - mb);
            va += da * da;
            vb += db * db;
            cov += da * db;
        }
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

pub fn naive_ssim(a: &[f64], b: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a[ch * h * w..(ch + 1) * h * w];
        let pb = &b[ch * h * w..(ch + 1) * h * w];
        let (wh, ww) = if h < 8 || w < 8 { (h, w) } else { (8, 8) };
        let (mut sum, mut count) = (0.0, 0);
        let mut y = 0;
        while y + wh <= h {
            let mut x = 0;
            while x + ww <= w {
                sum += naive_window(pa, pb, w, y, x, wh, ww);
                count += 1;
                x += 4;
            }
            y += 4;
        }
        total += sum / count as f64;
    }
    total / c as f64
}

/// Image pairs of mixed difficulty: independent noise, correlated noise,
/// and piecewise-constant tiles.
pub fn random_pair(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> (Tensor<f64>, Tensor<f64>) {
    let a = Tensor::from_fn(shape, |_| rng.random::<f64>());
    let kind = rng.random_range(0..3);
    let b = match kind {
        0 => Tensor::from_fn(shape, |_| rng.random::<f64>()),
        1 => {
            let jitter: Vec<f64> = (0..a.numel()).map(|_| 0.1 * (rng.random::<f64>() - 0.5)).collect();
            Tensor::from_fn(shape, |i| (a.data()[i] + jitter[i]).clamp(0.0, 1.0))
        }
        _ => {
            let tile: Vec<f64> = (0..16).map(|_| rng.random()).collect();
            Tensor::from_fn(shape, |i| tile[(i / 5) % 16])
        }
    };
    (a, b)
}

//! PSNR and windowed SSIM on `[0, 1]` images and videos.

use xview_tensor::{Element, Tensor};

use crate::error::{HarnessError, Result};

/// PSNR shown in tables for identical inputs.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_STRIDE: usize = 4;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(HarnessError::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "mse")?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    Ok(s / a.numel().max(1) as f64)
}

/// `10·log10(1 / MSE)`; `+∞` for identical inputs.
pub fn psnr<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

pub fn capped_psnr(db: f64) -> f64 {
    db.min(PSNR_CAP)
}

/// Summed-area table with a zero first row and column.
struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let mut sums = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += value(y, x);
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w: w + 1, sums }
    }

    fn rect(&self, y: usize, x: usize, h: usize, w: usize) -> f64 {
        let s = &self.sums;
        s[(y + h) * self.w + x + w] - s[y * self.w + x + w] - s[(y + h) * self.w + x] + s[y * self.w + x]
    }
}

fn ssim_from_moments(n: f64, sa: f64, sb: f64, saa: f64, sbb: f64, sab: f64) -> f64 {
    let (ma, mb) = (sa / n, sb / n);
    let va = (saa / n - ma * ma).max(0.0);
    let vb = (sbb / n - mb * mb).max(0.0);
    let cov = sab / n - ma * mb;
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Mean SSIM over 8×8 windows at stride 4 (population statistics), averaged
/// over channels. Images smaller than a window use one global window.
/// Shapes are `[C, H, W]` or `[H, W]`.
pub fn ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let (c, h, w) = match *a.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(HarnessError::Shape(format!("ssim expects [C, H, W], got {:?}", a.shape()))),
    };
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * plane..(ch + 1) * plane];
        let pb = &b.data()[ch * plane..(ch + 1) * plane];
        let at = |p: &[T], y: usize, x: usize| p[y * w + x].as_f64();
        let ia = Integral::new(h, w, |y, x| at(pa, y, x));
        let ib = Integral::new(h, w, |y, x| at(pb, y, x));
        let iaa = Integral::new(h, w, |y, x| at(pa, y, x).powi(2));
        let ibb = Integral::new(h, w, |y, x| at(pb, y, x).powi(2));
        let iab = Integral::new(h, w, |y, x| at(pa, y, x) * at(pb, y, x));
        let (wh, ww) = if h < SSIM_WINDOW || w < SSIM_WINDOW { (h, w) } else { (SSIM_WINDOW, SSIM_WINDOW) };
        let n = (wh * ww) as f64;
        let (mut sum, mut count) = (0.0, 0usize);
        for y in (0..=h - wh).step_by(SSIM_STRIDE) {
            for x in (0..=w - ww).step_by(SSIM_STRIDE) {
                sum += ssim_from_moments(
                    n,
                    ia.rect(y, x, wh, ww),
                    ib.rect(y, x, wh, ww),
                    iaa.rect(y, x, wh, ww),
                    ibb.rect(y, x, wh, ww),
                    iab.rect(y, x, wh, ww),
                );
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / c as f64)
}

/// Mean per-frame SSIM of `[F, C, H, W]` videos.
pub fn video_ssim<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "video ssim")?;
    let [f, c, h, w] = match *a.shape() {
        [f, c, h, w] => [f, c, h, w],
        _ => return Err(HarnessError::Shape(format!("video ssim expects [F, C, H, W], got {:?}", a.shape()))),
    };
    let n = c * h * w;
    let mut total = 0.0;
    for k in 0..f {
        let fa = Tensor::new([c, h, w], a.data()[k * n..(k + 1) * n].to_vec())?;
        let fb = Tensor::new([c, h, w], b.data()[k * n..(k + 1) * n].to_vec())?;
        total += ssim(&fa, &fb)?;
    }
    Ok(total / f.max(1) as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Median after sorting; `NaN` for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Tensor::<f64>::full([4, 4], 0.5);
        assert_eq!(capped_psnr(psnr(&a, &a).unwrap()), PSNR_CAP);
        let b = Tensor::<f64>::full([4, 4], 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let zero = Tensor::<f64>::zeros([2, 2]);
        let one = Tensor::<f64>::ones([2, 2]);
        assert_eq!(psnr(&zero, &one).unwrap(), 0.0);
        assert!(psnr(&zero, &Tensor::zeros([4])).is_err());
    }

    #[test]
    fn ssim_constant_images() {
        let zero = Tensor::<f64>::zeros([3, 16, 16]);
        let one = Tensor::<f64>::ones([3, 16, 16]);
        assert!((ssim(&zero, &one).unwrap() - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-12);
        assert!((ssim(&one, &one).unwrap() - 1.0).abs() < 1e-9);
        let small = Tensor::<f64>::zeros([1, 4, 5]);
        assert!((ssim(&small, &small).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn median_handles_parity() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

//! PSNR and SSIM against direct-summation oracles.

mod common;

use common::oracle::{naive_psnr, naive_ssim, random_pair};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xview_harness::metrics::{capped_psnr, psnr, ssim, video_ssim, PSNR_CAP, SSIM_C1};
use xview_tensor::Tensor;

#[test]
fn fifty_random_pairs_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..50 {
        let shape = [rng.random_range(1..=3), rng.random_range(3..=40), rng.random_range(3..=40)];
        let (a, b) = random_pair(&mut rng, shape);
        let p = psnr(&a, &b).unwrap();
        let s = ssim(&a, &b).unwrap();
        let np = naive_psnr(a.data(), b.data());
        let ns = naive_ssim(a.data(), b.data(), shape[0], shape[1], shape[2]);
        assert!((p - np).abs() < 1e-6, "pair {k} {shape:?}: psnr {p} vs {np}");
        assert!((s - ns).abs() < 1e-6, "pair {k} {shape:?}: ssim {s} vs {ns}");
    }
}

#[test]
fn f32_inputs_agree_with_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = random_pair(&mut rng, [3, 32, 32]);
    let (a32, b32) = (a.cast::<f32>(), b.cast::<f32>());
    let ns = naive_ssim(a32.cast::<f64>().data(), b32.cast::<f64>().data(), 3, 32, 32);
    assert!((ssim(&a32, &b32).unwrap() - ns).abs() < 1e-6);
}

#[test]
fn closed_form_cases() {
    let zero = Tensor::<f64>::zeros([3, 16, 16]);
    let one = Tensor::<f64>::ones([3, 16, 16]);
    assert!((ssim(&one, &one).unwrap() - 1.0).abs() < 1e-9);
    let expected = SSIM_C1 / (1.0 + SSIM_C1);
    assert!((ssim(&zero, &one).unwrap() - expected).abs() < 1e-12);
    assert!((expected - 9.999e-5).abs() < 1e-8);

    assert_eq!(psnr(&one, &one).unwrap(), f64::INFINITY);
    assert_eq!(capped_psnr(psnr(&one, &one).unwrap()), PSNR_CAP);
    let off = Tensor::<f64>::full([3, 16, 16], 0.9);
    assert!((psnr(&one, &off).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&zero, &one).unwrap(), 0.0);
}

#[test]
fn video_ssim_is_the_frame_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (a, b) = random_pair(&mut rng, [4 * 3, 16, 16]);
    let (va, vb) = (a.clone().reshape([4, 3, 16, 16]).unwrap(), b.clone().reshape([4, 3, 16, 16]).unwrap());
    let frames: f64 = (0..4)
        .map(|k| {
            let n = 3 * 256;
            naive_ssim(&a.data()[k * n..(k + 1) * n], &b.data()[k * n..(k + 1) * n], 3, 16, 16)
        })
        .sum::<f64>()
        / 4.0;
    assert!((video_ssim(&va, &vb).unwrap() - frames).abs() < 1e-9);
    assert!(video_ssim(&a, &b).is_err());
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = Tensor::<f64>::zeros([3, 8, 8]);
    let b = Tensor::<f64>::zeros([3, 8, 9]);
    assert!(psnr(&a, &b).is_err());
    assert!(ssim(&a, &b).is_err());
    assert!(ssim(&Tensor::<f64>::zeros([2, 2, 2, 2]), &Tensor::zeros([2, 2, 2, 2])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>(), h in 2usize..24, w in 2usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = random_pair(&mut rng, [2, h, w]);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        prop_assert!(psnr(&a, &b).unwrap() >= 0.0);
    }
}

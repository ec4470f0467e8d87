use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xview_tensor::Tensor;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for &(m, k, n) in &[
        (128usize, 128usize, 128usize),
        (128, 768, 128),
        (128, 128, 512),
        (128, 16, 128),
        (128, 128, 16),
        (16, 128, 128),
        (128, 128, 768),
    ] {
        let a = Tensor::<f32>::randn([m, k], 1.0, &mut rng);
        let b = Tensor::<f32>::randn([k, n], 1.0, &mut rng);
        let bt = b.transpose().unwrap();
        let at = a.transpose().unwrap();
        let reps = 50;
        let flops = 2.0 * (m * k * n) as f64 * reps as f64;
        let t = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(a.matmul(&b).unwrap());
        }
        let nn = flops / t.elapsed().as_secs_f64() / 1e9;
        let t = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(a.matmul_nt(&bt).unwrap());
        }
        let nt = flops / t.elapsed().as_secs_f64() / 1e9;
        let t = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(at.matmul_tn(&b).unwrap());
        }
        let tn = flops / t.elapsed().as_secs_f64() / 1e9;
        println!("{m}x{k}x{n}: nn {nn:.1} nt {nt:.1} tn {tn:.1} GFLOP/s");
    }
}

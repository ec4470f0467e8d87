//! Times forward+backward of the default model on a 128-token sequence.

use std::rc::Rc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xview_core::incontext::assemble_exo2ego;
use xview_core::{Dit, Init, LatentGrid, ModelConfig};
use xview_tensor::{Graph, Tensor};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Dit::<f32>::new(ModelConfig::default(), Init::Randomized { std: 0.05 }, &mut rng).unwrap();
    let z = LatentGrid::new(Tensor::randn([4, 768, 4, 4], 1.0, &mut rng)).unwrap();
    let seq = assemble_exo2ego(&z, &z, 0.5).unwrap();
    let target = Rc::new(Tensor::<f32>::randn([128, 768], 1.0, &mut rng));
    let mask: Rc<[bool]> = seq.target_mask().into();
    let reps: usize = std::env::var("REPS").ok().and_then(|v| v.parse().ok()).unwrap_or(20);
    let start = Instant::now();
    for _ in 0..reps {
        let g = Graph::new();
        let b = model.params().bind(&g);
        let out = model.forward(&g, &b, &seq).unwrap();
        let loss = out.masked_mse(target.clone(), mask.clone()).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let _ = b.grads(&mut grads);
    }
    println!("train step (1 item): {:.2} ms", start.elapsed().as_secs_f64() * 1e3 / reps as f64);
    let start = Instant::now();
    for _ in 0..reps {
        model.predict(&seq).unwrap();
    }
    println!("predict: {:.2} ms", start.elapsed().as_secs_f64() * 1e3 / reps as f64);
}

//! Transformer-level contracts: patch embedding, equivariance, determinism,
//! gradients and adapter equivalences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xview_core::backbone::{lora_phase_trainable, patchify, unpatchify, TokenSequence};
use xview_core::check::model_gradcheck;
use xview_core::incontext::{
    assemble_channel_concat, assemble_ego2exo, assemble_exo2ego, assemble_single, channel_concat_variant,
};
use xview_core::lora::{lora_forward, LoraAdapter, LoraConfig};
use xview_core::rope::{AxisSplit, Position};
use xview_core::{Dit, Error, Init, LatentGrid, ModelConfig, Task};
use xview_tensor::{adamw_step, AdamWConfig, OptimizerState, ParamGrads, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny() -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        depth: 2,
        mlp_ratio: 2,
        axis_split: AxisSplit { frame: 4, height: 2, width: 2 },
        patch: 1,
        channels: 1,
        time_freq_dim: 8,
        ..ModelConfig::default()
    }
}

fn grid<T: xview_tensor::Element>(f: usize, c: usize, h: usize, w: usize, seed: u64) -> LatentGrid<T> {
    LatentGrid::new(Tensor::randn([f, c, h, w], 1.0, &mut rng(seed))).unwrap()
}

#[test]
fn patchify_token_counts() {
    let w = Tensor::<f64>::randn([8, 12], 1.0, &mut rng(0));
    assert_eq!(patchify(&grid::<f64>(4, 12, 4, 4, 1), &w, None).unwrap().tokens.shape(), [64, 8]);
    let one = patchify(&grid::<f64>(1, 12, 1, 1, 2), &w, None).unwrap();
    assert_eq!(one.tokens.shape(), [1, 8]);
    assert_eq!(one.positions, vec![Position::new(0, 0, 0)]);
    let zero = patchify(&LatentGrid::<f64>::zeros(2, 12, 2, 2), &w, None).unwrap();
    assert!(zero.tokens.data().iter().all(|&v| v == 0.0));
}

/// Inverse of a small square matrix by Gauss-Jordan elimination.
fn invert(m: &[f64], n: usize) -> Vec<f64> {
    let mut a: Vec<f64> = m.to_vec();
    let mut inv: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs())).unwrap();
        for c in 0..n {
            a.swap(col * n + c, piv * n + c);
            inv.swap(col * n + c, piv * n + c);
        }
        let d = a[col * n + col];
        for c in 0..n {
            a[col * n + c] /= d;
            inv[col * n + c] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[r * n + col];
                for c in 0..n {
                    a[r * n + c] -= f * a[col * n + c];
                    inv[r * n + c] -= f * inv[col * n + c];
                }
            }
        }
    }
    inv
}

#[test]
fn unpatchify_with_pseudo_inverse_head_round_trips() {
    let (c, d) = (4, 10);
    let w = Tensor::<f64>::randn([d, c], 1.0, &mut rng(3));
    // head = (WᵀW)⁻¹Wᵀ, the left inverse of the embedding.
    let wtw = w.matmul_tn(&w).unwrap();
    let inv = Tensor::new([c, c], invert(wtw.data(), c)).unwrap();
    let head = inv.matmul_nt(&w).unwrap();
    let z = grid::<f64>(2, c, 3, 2, 4);
    let seq = patchify(&z, &w, None).unwrap();
    let back = unpatchify(&seq, &head, None, 2, 3, 2).unwrap();
    assert!(back.tensor().max_abs_diff(z.tensor()).unwrap() < 1e-5);

    let zeros = TokenSequence { tokens: Tensor::zeros([12, d]), positions: seq.positions.clone() };
    let out = unpatchify(&zeros, &head, None, 2, 3, 2).unwrap();
    assert!(out.tensor().data().iter().all(|&v| v == 0.0));

    let single = patchify(&grid::<f64>(1, c, 1, 1, 5), &w, None).unwrap();
    assert_eq!(unpatchify(&single, &head, None, 1, 1, 1).unwrap().tensor().shape(), [1, c, 1, 1]);

    let mut holes = seq.clone();
    holes.positions[3] = holes.positions[4];
    assert!(matches!(unpatchify(&holes, &head, None, 2, 3, 2), Err(Error::Contract(_))));
}

#[test]
fn permuting_tokens_permutes_outputs() {
    let model = Dit::<f64>::new(tiny(), Init::Randomized { std: 0.3 }, &mut rng(6)).unwrap();
    let seq = assemble_exo2ego(&grid(2, 4, 1, 3, 7), &grid(2, 4, 1, 3, 8), 0.6).unwrap();
    assert_eq!(seq.len(), 12);
    let perm: Vec<usize> = vec![7, 2, 11, 0, 5, 9, 1, 4, 10, 3, 8, 6];
    let mut shuffled = seq.clone();
    shuffled.tokens = seq.tokens.gather_rows(&perm).unwrap();
    shuffled.token_info = perm.iter().map(|&p| seq.token_info[p]).collect();
    shuffled.positions = perm.iter().map(|&p| seq.positions[p]).collect();
    let base = model.predict(&seq).unwrap();
    let moved = model.predict(&shuffled).unwrap();
    let expect = base.gather_rows(&perm).unwrap();
    assert!(moved.max_abs_diff(&expect).unwrap() < 1e-12);
}

#[test]
fn forward_is_bit_deterministic() {
    let model = Dit::<f32>::new(tiny(), Init::Randomized { std: 0.3 }, &mut rng(1)).unwrap();
    let seq = assemble_ego2exo(&grid(1, 4, 2, 2, 1), &grid(2, 4, 2, 2, 2), &grid(2, 4, 2, 2, 3), 0.3).unwrap();
    let a = model.predict(&seq).unwrap();
    let b = model.predict(&seq).unwrap();
    assert_eq!(a.data(), b.data());
}

fn assert_gradcheck(model: &Dit<f64>, seq: &xview_core::UnifiedSequence<f64>, what: &str) {
    let target = Tensor::randn(seq.tokens.shape(), 1.0, &mut rng(99));
    let checks = model_gradcheck(model, seq, &target, 1e-5, 12).unwrap();
    assert_eq!(checks.len(), model.params().len());
    for c in checks {
        assert!(c.report.max_rel_error < 1e-4, "{what} {}: {:?}", c.name, c.report);
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut model = Dit::<f64>::new(tiny(), Init::Randomized { std: 0.3 }, &mut rng(21)).unwrap();
    let seq = assemble_ego2exo(&grid(1, 4, 2, 2, 1), &grid(2, 4, 2, 2, 2), &grid(2, 4, 2, 2, 3), 0.4).unwrap();
    assert_gradcheck(&model, &seq, "base");
    model.attach_lora(LoraConfig { rank: 2, alpha: None }, &mut rng(22)).unwrap();
    model.randomize(0.3, &mut rng(23));
    assert_gradcheck(&model, &seq, "lora");
}

#[test]
fn channel_concat_model_gradients() {
    let cfg = ModelConfig { extra_channels: 4, ..tiny() };
    let model = Dit::<f64>::new(cfg, Init::Randomized { std: 0.3 }, &mut rng(31)).unwrap();
    let stacked = channel_concat_variant(&grid(2, 4, 2, 2, 4), &grid(2, 4, 2, 2, 5)).unwrap();
    let seq = assemble_channel_concat(Task::Exo2Ego, &stacked, None, 0.7).unwrap();
    assert_gradcheck(&model, &seq, "channel concat");
}

#[test]
fn zero_condition_channel_concat_equals_single_video_model() {
    let plain = Dit::<f32>::new(tiny(), Init::Randomized { std: 0.3 }, &mut rng(41)).unwrap();
    let mut widened = plain.clone();
    widened.add_condition_input(4).unwrap();
    widened.set_param("patch_cond.weight", Tensor::randn([16, 4], 1.0, &mut rng(42))).unwrap();
    let tgt = grid::<f32>(2, 4, 2, 2, 43);
    let stacked = channel_concat_variant(&LatentGrid::zeros(2, 4, 2, 2), &tgt).unwrap();
    let seq = assemble_channel_concat(Task::Exo2Ego, &stacked, None, 0.5).unwrap();
    assert_eq!(seq.len(), 8);
    let single = assemble_single(&tgt, 0.5).unwrap();
    assert_eq!(widened.predict(&seq).unwrap(), plain.predict(&single).unwrap());
}

#[test]
fn fresh_adapters_leave_outputs_unchanged() {
    let cfg = ModelConfig { dim: 32, heads: 4, ..tiny() };
    let mut model = Dit::<f32>::new(cfg, Init::Standard, &mut rng(51)).unwrap();
    model.randomize(0.2, &mut rng(52));
    let seq = assemble_exo2ego(&grid(2, 4, 2, 2, 53), &grid(2, 4, 2, 2, 54), 0.8).unwrap();
    let before = model.predict(&seq).unwrap();
    let total_before = model.params().element_count();
    model.attach_lora(LoraConfig { rank: 4, alpha: None }, &mut rng(55)).unwrap();
    let after = model.predict(&seq).unwrap();
    assert!(before.max_abs_diff(&after).unwrap() < 1e-7);
    let added = model.params().element_count() - total_before;
    assert_eq!(added, 2 * 4 * 4 * (32 + 32));
    assert!(model.trainable_params().iter().all(|&id| lora_phase_trainable(model.params().name(id))));
}

#[test]
fn merged_and_unmerged_forwards_agree() {
    let cfg = ModelConfig { dim: 32, heads: 4, ..tiny() };
    let mut model = Dit::<f32>::new(cfg, Init::Randomized { std: 0.2 }, &mut rng(61)).unwrap();
    model.attach_lora(LoraConfig { rank: 3, alpha: Some(6.0) }, &mut rng(62)).unwrap();
    for (id, p) in model.params().clone().iter() {
        if p.name.ends_with(".b") && p.name.starts_with("lora/") {
            let shape = p.value.shape().to_vec();
            *model.params_mut().get_mut(id) = Tensor::randn(shape, 0.2, &mut rng(id.index() as u64));
        }
    }
    let seq = assemble_exo2ego(&grid(2, 4, 2, 2, 63), &grid(2, 4, 2, 2, 64), 0.2).unwrap();
    let unmerged = model.predict(&seq).unwrap();
    model.merge_lora().unwrap();
    assert!(model.lora_config().is_none());
    assert!(model.params().iter().all(|(_, p)| !p.name.starts_with("lora/")));
    let merged = model.predict(&seq).unwrap();
    assert!(merged.max_abs_diff(&unmerged).unwrap() < 1e-5);
    model.merge_lora().unwrap();
    assert_eq!(model.predict(&seq).unwrap(), merged);
}

#[test]
fn adapter_forward_matches_merged_weight() {
    let mut r = rng(71);
    let w = Tensor::<f64>::randn([12, 9], 1.0, &mut r);
    let bias = Tensor::<f64>::randn([12], 1.0, &mut r);
    let mut ad = LoraAdapter::attach(&w, LoraConfig { rank: 3, alpha: None }, &mut r).unwrap();
    let x = Tensor::<f64>::randn([5, 9], 1.0, &mut r);
    let plain = lora_forward(&x, &w, Some(&bias), None).unwrap();
    assert_eq!(lora_forward(&x, &w, Some(&bias), Some(&ad)).unwrap(), plain);
    ad.b = Tensor::randn([12, 3], 1.0, &mut r);
    let merged = ad.clone().merge(&w).unwrap();
    let via_merge = lora_forward(&x, &merged, Some(&bias), None).unwrap();
    let via_adapter = lora_forward(&x, &w, Some(&bias), Some(&ad)).unwrap();
    assert!(via_merge.max_abs_diff(&via_adapter).unwrap() < 1e-5);
    let zero_b = LoraAdapter { b: Tensor::zeros([12, 3]), ..ad };
    assert_eq!(zero_b.merge(&w).unwrap(), w);
}

#[test]
fn paper_rank_is_accepted_by_config() {
    assert!(LoraConfig { rank: 80, alpha: None }.validate_for(128, 128).is_ok());
    assert_eq!(LoraConfig::default().rank, 4);
}

#[test]
fn optimizer_never_touches_frozen_weights() {
    let mut model = Dit::<f32>::new(tiny(), Init::Randomized { std: 0.2 }, &mut rng(81)).unwrap();
    model.attach_lora(LoraConfig::default(), &mut rng(82)).unwrap();
    let frozen: Vec<_> =
        model.params().iter().filter(|(_, p)| !p.trainable).map(|(id, p)| (id, p.value.clone())).collect();
    assert!(frozen.iter().any(|(id, _)| model.params().name(*id) == "blocks.0.attn.q.weight"));
    let seq = assemble_exo2ego(&grid(2, 4, 2, 2, 83), &grid(2, 4, 2, 2, 84), 0.5).unwrap();
    let target = std::rc::Rc::new(Tensor::randn([16, 4], 1.0, &mut rng(85)));
    let mask: std::rc::Rc<[bool]> = seq.target_mask().into();
    let mut state = OptimizerState::default();
    for _ in 0..5 {
        let g = xview_tensor::Graph::new();
        let bound = model.params().bind(&g);
        let out = model.forward(&g, &bound, &seq).unwrap();
        let loss = out.masked_mse(target.clone(), mask.clone()).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let pg: ParamGrads<f32> = bound.grads(&mut grads);
        for (id, _) in &frozen {
            assert!(pg.get(*id).is_none());
        }
        adamw_step(model.params_mut(), &pg, &mut state, &AdamWConfig::default()).unwrap();
    }
    for (id, v) in frozen {
        assert_eq!(model.params().get(id), &v);
    }
    let trainable = model.params().trainable_element_count();
    assert!(trainable < model.params().element_count());
}

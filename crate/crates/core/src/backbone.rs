//! Diffusion transformer velocity predictor.
//!
//! Each block is `x += gate₁ ⊙ attn(mod(norm(x)))` then
//! `x += gate₂ ⊙ mlp(mod(norm(x)))`, where shift/scale/gate come from the
//! token's segment timestep. Modulation layers and the output head start at
//! zero, so a fresh model predicts zero velocity everywhere.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use xview_tensor::{Bound, Element, Graph, ParamId, ParamSet, Tensor, Var};

use crate::codec::{latent_channels, LatentGrid};
use crate::error::{shape_err, Error, Result};
use crate::flow::VelocityField;
use crate::incontext::{Role, UnifiedSequence};
use crate::lora::{LinearVars, LoraAdapter, LoraConfig};
use crate::rope::{build_rotary, AxisSplit, Position, RotaryTable};

/// Prefix of every adapter parameter name.
pub const LORA_PREFIX: &str = "lora/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub axis_split: AxisSplit,
    pub rope_base: f64,
    pub patch: usize,
    /// Pixel channels; latent channels are `4·channels·patch²`.
    pub channels: usize,
    pub time_freq_dim: usize,
    pub role_embedding: bool,
    /// Width of the channel-concatenated condition (0 when unused).
    pub extra_channels: usize,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            heads: 8,
            depth: 4,
            mlp_ratio: 4,
            axis_split: AxisSplit { frame: 8, height: 4, width: 4 },
            rope_base: 10_000.0,
            patch: 8,
            channels: 3,
            time_freq_dim: 64,
            role_embedding: true,
            extra_channels: 0,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn latent_channels(&self) -> usize {
        latent_channels(self.channels, self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.patch == 0 || self.channels == 0 {
            return Err(Error::Config("depth, mlp_ratio, patch and channels must be positive".into()));
        }
        if self.time_freq_dim == 0 || self.time_freq_dim % 2 != 0 {
            return Err(Error::Config(format!("time_freq_dim {} must be even and positive", self.time_freq_dim)));
        }
        if self.rope_base <= 1.0 || self.norm_eps <= 0.0 {
            return Err(Error::Config("rope_base must exceed 1 and norm_eps must be positive".into()));
        }
        self.axis_split.validate(self.head_dim())
    }
}

/// Token matrix plus grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub positions: Vec<Position>,
}

/// One token per `(frame, row, col)`, projected by `weight: [d, C']`.
pub fn patchify<T: Element>(
    z: &LatentGrid<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<TokenSequence<T>> {
    let mut tokens = z.to_tokens().matmul_nt(weight)?;
    if let Some(b) = bias {
        tokens = tokens.add_row(b)?;
    }
    let mut positions = Vec::with_capacity(z.token_count());
    for k in 0..z.frames() {
        for i in 0..z.height() {
            for j in 0..z.width() {
                positions.push(Position::new(i, j, k));
            }
        }
    }
    Ok(TokenSequence { tokens, positions })
}

/// Maps tokens back to channel vectors (`head: [C', d]`) and places each at
/// its grid slot. Positions must cover the grid exactly once.
pub fn unpatchify<T: Element>(
    seq: &TokenSequence<T>,
    head: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<LatentGrid<T>> {
    let n = frames * height * width;
    if seq.positions.len() != n || seq.tokens.shape().first() != Some(&n) {
        return Err(Error::Contract(format!(
            "unpatchify: {} positions for a {frames}x{height}x{width} grid",
            seq.positions.len()
        )));
    }
    let mut slot = vec![usize::MAX; n];
    for (t, p) in seq.positions.iter().enumerate() {
        if p.k >= frames || p.i >= height || p.j >= width {
            return Err(Error::Contract(format!("unpatchify: position {p:?} outside grid")));
        }
        let s = (p.k * height + p.i) * width + p.j;
        if slot[s] != usize::MAX {
            return Err(Error::Contract(format!("unpatchify: position {p:?} repeated")));
        }
        slot[s] = t;
    }
    let mut out = seq.tokens.matmul_nt(head)?;
    if let Some(b) = bias {
        out = out.add_row(b)?;
    }
    let ordered = out.gather_rows(&slot)?;
    LatentGrid::from_tokens(&ordered, frames, height, width)
}

/// Sinusoidal features of `1000·t`: cosines then sines, `dim` total.
pub fn timestep_features<T: Element>(timesteps: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let x = 1000.0 * t;
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| x * f).collect();
        data.extend(args.iter().map(|a| T::from_f64(a.cos())));
        data.extend(args.iter().map(|a| T::from_f64(a.sin())));
    }
    Tensor::new([timesteps.len(), dim], data).expect("length matches shape")
}

/// Full-attention weights of one layer.
#[derive(Clone, Copy)]
pub struct AttentionVars<'g, T: Element> {
    pub q: LinearVars<'g, T>,
    pub k: LinearVars<'g, T>,
    pub v: LinearVars<'g, T>,
    pub o: LinearVars<'g, T>,
}

/// Multi-head `softmax(QKᵀ/√D)·V` with rotary applied to `Q` and `K`, heads
/// concatenated and output-projected.
pub fn attention<'g, T: Element>(
    x: Var<'g, T>,
    rotary: &RotaryTable<T>,
    w: &AttentionVars<'g, T>,
    heads: usize,
) -> Result<Var<'g, T>> {
    let q = w.q.apply(x)?;
    let k = w.k.apply(x)?;
    let v = w.v.apply(x)?;
    let dim = q.shape()[1];
    if heads == 0 || dim % heads != 0 || dim / heads != rotary.head_dim() {
        return Err(shape_err("attention head dim", rotary.head_dim(), dim / heads.max(1)));
    }
    let hd = dim / heads;
    let inv = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = rotary.apply_var(q.slice_cols(h * hd, hd)?)?;
        let kh = rotary.apply_var(k.slice_cols(h * hd, hd)?)?;
        let vh = v.slice_cols(h * hd, hd)?;
        let weights = qh.matmul_nt(kh)?.scale(inv)?.softmax_lastdim()?;
        outs.push(weights.matmul(vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { Var::concat_cols(&outs)? };
    w.o.apply(cat)
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    weight: ParamId,
    bias: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct LoraIds {
    a: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct BlockIds {
    attn: [LinearIds; 4],
    lora: Option<[LoraIds; 4]>,
    mlp_in: LinearIds,
    mlp_out: LinearIds,
    modulation: LinearIds,
}

#[derive(Clone, Debug)]
struct Layout {
    patch: LinearIds,
    patch_cond: Option<ParamId>,
    role: Option<ParamId>,
    time_in: LinearIds,
    time_out: LinearIds,
    blocks: Vec<BlockIds>,
    final_modulation: LinearIds,
    head: LinearIds,
}

/// Attention projections in storage order.
pub const ATTENTION_PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

/// How weights are initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero modulation and head: the model starts at zero velocity.
    Standard,
    /// Every parameter random, so gradient checks exercise all paths.
    Randomized { std: f64 },
}

/// Transformer plus its named parameters.
#[derive(Clone, Debug)]
pub struct Dit<T: Element = f32> {
    config: ModelConfig,
    params: ParamSet<T>,
    layout: Layout,
    lora: Option<LoraConfig>,
}

fn linear<T: Element, R: Rng + ?Sized>(
    params: &mut ParamSet<T>,
    name: &str,
    out: usize,
    inp: usize,
    zero: bool,
    rng: &mut R,
) -> Result<LinearIds> {
    let w = if zero { Tensor::zeros([out, inp]) } else { Tensor::randn([out, inp], 1.0 / (inp as f64).sqrt(), rng) };
    let weight = params.insert(format!("{name}.weight"), w, true)?;
    let bias = params.insert(format!("{name}.bias"), Tensor::zeros([out]), true)?;
    Ok(LinearIds { weight, bias: Some(bias) })
}

/// Parameters updated during adapter fine-tuning: adapters, timestep
/// modulation, output head, role embedding and the channel-concat input.
pub fn lora_phase_trainable(name: &str) -> bool {
    name.starts_with(LORA_PREFIX)
        || name.starts_with("time.")
        || name.contains(".modulation.")
        || name.starts_with("final.")
        || name.starts_with("head.")
        || name == "role_embed"
        || name.starts_with("patch_cond.")
}

impl<T: Element> Dit<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, init: Init, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let c = config.latent_channels();
        let zero = init == Init::Standard;
        let mut p = ParamSet::new();
        let patch = linear(&mut p, "patch", d, c, false, rng)?;
        let role = if config.role_embedding {
            Some(p.insert("role_embed", Tensor::randn([Role::COUNT, d], 0.02, rng), true)?)
        } else {
            None
        };
        let time_in = linear(&mut p, "time.0", d, config.time_freq_dim, false, rng)?;
        let time_out = linear(&mut p, "time.2", d, d, false, rng)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let mut attn = Vec::with_capacity(4);
            for name in ATTENTION_PROJECTIONS {
                attn.push(linear(&mut p, &format!("blocks.{i}.attn.{name}"), d, d, false, rng)?);
            }
            let hidden = d * config.mlp_ratio;
            let mlp_in = linear(&mut p, &format!("blocks.{i}.mlp.0"), hidden, d, false, rng)?;
            let mlp_out = linear(&mut p, &format!("blocks.{i}.mlp.2"), d, hidden, false, rng)?;
            let modulation = linear(&mut p, &format!("blocks.{i}.modulation"), 6 * d, d, zero, rng)?;
            blocks.push(BlockIds {
                attn: [attn[0], attn[1], attn[2], attn[3]],
                lora: None,
                mlp_in,
                mlp_out,
                modulation,
            });
        }
        let final_modulation = linear(&mut p, "final.modulation", 2 * d, d, zero, rng)?;
        let head = linear(&mut p, "head", c, d, zero, rng)?;
        let mut model = Self {
            config: ModelConfig { extra_channels: 0, ..config.clone() },
            params: p,
            layout: Layout { patch, patch_cond: None, role, time_in, time_out, blocks, final_modulation, head },
            lora: None,
        };
        if config.extra_channels > 0 {
            model.add_condition_input(config.extra_channels)?;
        }
        if let Init::Randomized { std } = init {
            model.randomize(std, rng);
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn lora_config(&self) -> Option<LoraConfig> {
        self.lora
    }

    /// Overwrites every parameter with `N(0, std²)` draws.
    pub fn randomize<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        let ids: Vec<ParamId> = self.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = self.params.get(id).shape().to_vec();
            *self.params.get_mut(id) = Tensor::randn(shape, std, rng);
        }
    }

    /// Adds a zero-initialized projection of `width` condition channels that
    /// is summed into the patch embedding (channel-concat fusion).
    pub fn add_condition_input(&mut self, width: usize) -> Result<()> {
        if self.layout.patch_cond.is_some() {
            return Err(Error::Contract("condition input already present".into()));
        }
        let id = self.params.insert("patch_cond.weight", Tensor::zeros([self.config.dim, width]), true)?;
        self.layout.patch_cond = Some(id);
        self.config.extra_channels = width;
        Ok(())
    }

    /// Attaches adapters to every attention projection and freezes all
    /// parameters outside [`lora_phase_trainable`].
    pub fn attach_lora<R: Rng + ?Sized>(&mut self, config: LoraConfig, rng: &mut R) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::Contract("adapters already attached".into()));
        }
        config.validate_for(self.config.dim, self.config.dim)?;
        for i in 0..self.layout.blocks.len() {
            let mut ids = Vec::with_capacity(4);
            for (n, name) in ATTENTION_PROJECTIONS.iter().enumerate() {
                let w = self.params.get(self.layout.blocks[i].attn[n].weight);
                let ad = LoraAdapter::attach(w, config, rng)?;
                let base = format!("{LORA_PREFIX}blocks.{i}.attn.{name}");
                let a = self.params.insert(format!("{base}.a"), ad.a, true)?;
                let b = self.params.insert(format!("{base}.b"), ad.b, true)?;
                ids.push(LoraIds { a, b });
            }
            self.layout.blocks[i].lora = Some([ids[0], ids[1], ids[2], ids[3]]);
        }
        self.lora = Some(config);
        self.params.set_trainable_by(lora_phase_trainable);
        Ok(())
    }

    pub fn adapter(&self, block: usize, proj: usize) -> Option<LoraAdapter<T>> {
        let ids = self.layout.blocks.get(block)?.lora?[proj];
        let scale = self.lora?.scale();
        Some(LoraAdapter { a: self.params.get(ids.a).clone(), b: self.params.get(ids.b).clone(), scale })
    }

    /// Folds every adapter into its base weight and removes the adapters.
    pub fn merge_lora(&mut self) -> Result<()> {
        let Some(cfg) = self.lora.take() else {
            return Ok(());
        };
        for block in &mut self.layout.blocks {
            let Some(ids) = block.lora.take() else { continue };
            for (n, l) in ids.iter().enumerate() {
                let a = self.params.remove(l.a).expect("adapter A present").value;
                let b = self.params.remove(l.b).expect("adapter B present").value;
                let ad = LoraAdapter::from_parts(a, b, cfg.scale())?;
                let w = self.params.get_mut(block.attn[n].weight);
                *w = ad.merge(w)?;
            }
        }
        Ok(())
    }

    /// Ids of parameters the optimizer updates.
    pub fn trainable_params(&self) -> Vec<ParamId> {
        self.params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Replaces a parameter by name, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.params.find(name).ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if self.params.get(id).shape() != value.shape() {
            return Err(shape_err("parameter shape", self.params.get(id).shape(), value.shape()));
        }
        *self.params.get_mut(id) = value;
        Ok(())
    }

    fn lin<'g>(&self, ids: LinearIds, p: &impl Fn(ParamId) -> Var<'g, T>) -> LinearVars<'g, T> {
        LinearVars::plain(p(ids.weight), ids.bias.map(p))
    }

    /// Forward pass with parameters supplied by `p`; `tokens` is `[L, C']`
    /// and `extra`, when present, `[L, extra_channels]`. Returns `[L, C']`.
    pub fn forward_with<'g>(
        &self,
        graph: &'g Graph<T>,
        p: impl Fn(ParamId) -> Var<'g, T>,
        tokens: Var<'g, T>,
        extra: Option<Var<'g, T>>,
        seq: &UnifiedSequence<T>,
    ) -> Result<Var<'g, T>> {
        let cfg = &self.config;
        let l = seq.len();
        let c = cfg.latent_channels();
        if tokens.shape() != [l, c] {
            return Err(shape_err("input tokens", [l, c], tokens.shape()));
        }
        if seq.positions.len() != l {
            return Err(shape_err("positions", l, seq.positions.len()));
        }
        let mut x = self.lin(self.layout.patch, &p).apply(tokens)?;
        match (self.layout.patch_cond, extra) {
            (Some(id), Some(e)) => {
                if e.shape() != [l, cfg.extra_channels] {
                    return Err(shape_err("extra channels", [l, cfg.extra_channels], e.shape()));
                }
                x = x.add(e.matmul_nt(p(id))?)?;
            }
            (None, None) => {}
            (Some(_), None) => return Err(Error::Contract("model expects channel-concat input".into())),
            (None, Some(_)) => return Err(Error::Contract("model has no channel-concat input".into())),
        }
        if let Some(id) = self.layout.role {
            let roles: Rc<[usize]> = seq.role_index().into();
            x = x.add(p(id).gather_rows(roles)?)?;
        }

        let feats = graph.constant(timestep_features(&seq.segment_timesteps(), cfg.time_freq_dim));
        let temb = self.lin(self.layout.time_in, &p).apply(feats)?.silu()?;
        let temb = self.lin(self.layout.time_out, &p).apply(temb)?;
        let cond = temb.silu()?;
        let seg: Rc<[usize]> = seq.segment_index().into();

        let rotary = build_rotary::<T>(&seq.positions, cfg.axis_split, cfg.rope_base)?;
        let ones = graph.constant(Tensor::ones([cfg.dim]));
        let d = cfg.dim;
        let eps = cfg.norm_eps;
        let modulate = |h: Var<'g, T>, shift: Var<'g, T>, scale: Var<'g, T>| -> Result<Var<'g, T>> {
            Ok(h.rms_norm(ones, eps)?.mul(scale.affine(1.0, 1.0)?)?.add(shift)?)
        };

        for block in &self.layout.blocks {
            let m = self.lin(block.modulation, &p).apply(cond)?.gather_rows(seg.clone())?;
            let chunk = |n: usize| m.slice_cols(n * d, d);
            let scale = self.lora.map(|c| c.scale()).unwrap_or(1.0);
            let mut proj = [0, 1, 2, 3].map(|n| self.lin(block.attn[n], &p));
            if let Some(ids) = block.lora {
                for (lv, id) in proj.iter_mut().zip(ids) {
                    lv.lora = Some((p(id.a), p(id.b), scale));
                }
            }
            let w = AttentionVars { q: proj[0], k: proj[1], v: proj[2], o: proj[3] };

            let h = modulate(x, chunk(0)?, chunk(1)?)?;
            let a = attention(h, &rotary, &w, cfg.heads)?;
            x = x.add(chunk(2)?.mul(a)?)?;

            let h = modulate(x, chunk(3)?, chunk(4)?)?;
            let h = self.lin(block.mlp_in, &p).apply(h)?.silu()?;
            let h = self.lin(block.mlp_out, &p).apply(h)?;
            x = x.add(chunk(5)?.mul(h)?)?;
        }

        let m = self.lin(self.layout.final_modulation, &p).apply(cond)?.gather_rows(seg)?;
        let h = modulate(x, m.slice_cols(0, d)?, m.slice_cols(d, d)?)?;
        self.lin(self.layout.head, &p).apply(h)
    }

    /// Forward pass reading parameters from `bound`.
    pub fn forward<'g>(
        &self,
        graph: &'g Graph<T>,
        bound: &Bound<'g, T>,
        seq: &UnifiedSequence<T>,
    ) -> Result<Var<'g, T>> {
        let tokens = graph.constant(seq.tokens.clone());
        let extra = seq.extra.as_ref().map(|e| graph.constant(e.clone()));
        self.forward_with(graph, |id| bound.var(id), tokens, extra, seq)
    }

    /// Gradient-free forward pass.
    pub fn predict(&self, seq: &UnifiedSequence<T>) -> Result<Tensor<T>> {
        let graph = Graph::new();
        let bound = self.params.bind_with(&graph, |_, _| false);
        Ok(self.forward(&graph, &bound, seq)?.to_tensor())
    }
}

impl<T: Element> VelocityField<T> for Dit<T> {
    type Cond = UnifiedSequence<T>;

    /// `z` holds the target segment's tokens; every other segment is read
    /// from `cond` unchanged.
    fn velocity(&self, z: &Tensor<T>, cond: &UnifiedSequence<T>, t: f64) -> Result<Tensor<T>> {
        let mut seq = cond.clone();
        seq.set_target(z, t)?;
        let seg = seq.target_segment()?.clone();
        let out = self.predict(&seq)?;
        Ok(out.slice_rows(seg.start, seg.len())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::incontext::assemble_exo2ego;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
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

    #[test]
    fn default_config_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 16);
        assert_eq!(c.latent_channels(), 768);
    }

    #[test]
    fn bad_configs() {
        let c = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig { axis_split: AxisSplit { frame: 7, height: 5, width: 4 }, ..ModelConfig::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Dit::<f32>::new(tiny_config(), Init::Standard, &mut rng).unwrap();
        let z = LatentGrid::new(Tensor::randn([2, 4, 2, 2], 1.0, &mut rng)).unwrap();
        let seq = assemble_exo2ego(&z, &z, 0.5).unwrap();
        let out = model.predict(&seq).unwrap();
        assert_eq!(out.shape(), [16, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lora_partition() {
        assert!(lora_phase_trainable("lora/blocks.0.attn.q.a"));
        assert!(lora_phase_trainable("blocks.3.modulation.weight"));
        assert!(lora_phase_trainable("time.0.bias"));
        assert!(lora_phase_trainable("head.weight"));
        assert!(lora_phase_trainable("role_embed"));
        assert!(!lora_phase_trainable("blocks.0.attn.q.weight"));
        assert!(!lora_phase_trainable("blocks.0.mlp.0.weight"));
        assert!(!lora_phase_trainable("patch.weight"));
    }
}

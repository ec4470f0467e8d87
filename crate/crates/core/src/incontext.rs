//! Unified condition + target sequences.
//!
//! Condition latents stay noise-free (timestep 0) and are concatenated with
//! the noisy target along the token axis. Positions are assigned either per
//! segment (frame index restarts at 0 in every segment, so condition frame κ
//! and target frame κ share rotary phases) or with one running frame counter
//! across the whole concatenation.

use serde::{Deserialize, Serialize};
use xview_tensor::{Element, Tensor};

use crate::codec::LatentGrid;
use crate::error::{shape_err, Error, Result};
use crate::rope::Position;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "EXO2EGO")]
    Exo2Ego,
    #[serde(rename = "EGO2EXO")]
    Ego2Exo,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Exo2Ego => "EXO2EGO",
            Task::Ego2Exo => "EGO2EXO",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EXO2EGO" => Ok(Task::Exo2Ego),
            "EGO2EXO" => Ok(Task::Ego2Exo),
            _ => Err(Error::Config(format!("unknown task {s:?} (expected EXO2EGO or EGO2EXO)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Condition,
    Reference,
    Target,
}

impl Role {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            Role::Condition => 0,
            Role::Reference => 1,
            Role::Target => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    #[default]
    Collaborative,
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub id: usize,
    pub role: Role,
    pub start: usize,
    pub end: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub timestep: f64,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Where a token sits inside its own segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenInfo {
    pub segment: usize,
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug)]
pub struct UnifiedSequence<T> {
    pub task: Option<Task>,
    /// `[L, C']` latent channel vectors.
    pub tokens: Tensor<T>,
    /// Channel-concatenated condition `[L, C']` for the channel-fusion variant.
    pub extra: Option<Tensor<T>>,
    pub segments: Vec<Segment>,
    pub token_info: Vec<TokenInfo>,
    pub positions: Vec<Position>,
}

struct Part<'a, T> {
    latent: &'a LatentGrid<T>,
    role: Role,
    timestep: f64,
}

fn build<T: Element>(task: Option<Task>, parts: &[Part<'_, T>]) -> Result<UnifiedSequence<T>> {
    let mut rows: Vec<Tensor<T>> = Vec::with_capacity(parts.len());
    let mut segments = Vec::with_capacity(parts.len());
    let mut token_info = Vec::new();
    let mut start = 0;
    for (id, p) in parts.iter().enumerate() {
        let z = p.latent;
        let (f, h, w) = (z.frames(), z.height(), z.width());
        for frame in 0..f {
            for row in 0..h {
                for col in 0..w {
                    token_info.push(TokenInfo { segment: id, frame, row, col });
                }
            }
        }
        let end = start + z.token_count();
        segments.push(Segment { id, role: p.role, start, end, frames: f, height: h, width: w, timestep: p.timestep });
        rows.push(z.to_tokens());
        start = end;
    }
    let refs: Vec<&Tensor<T>> = rows.iter().collect();
    let tokens = Tensor::concat_rows(&refs)?;
    let mut seq = UnifiedSequence { task, tokens, extra: None, segments, token_info, positions: Vec::new() };
    seq.positions = collaborative_positions(&seq);
    Ok(seq)
}

fn check_timestep(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("timestep {t} outside [0, 1]")));
    }
    Ok(())
}

fn same_grid<T: Element>(a: &LatentGrid<T>, b: &LatentGrid<T>, what: &'static str) -> Result<()> {
    let da = [a.frames(), a.channels(), a.height(), a.width()];
    let db = [b.frames(), b.channels(), b.height(), b.width()];
    if da != db {
        return Err(shape_err(what, da, db));
    }
    Ok(())
}

/// One noisy video on its own, used to pretrain the base prior.
pub fn assemble_single<T: Element>(z_t: &LatentGrid<T>, t: f64) -> Result<UnifiedSequence<T>> {
    check_timestep(t)?;
    build(None, &[Part { latent: z_t, role: Role::Target, timestep: t }])
}

/// `[exo condition (t = 0), ego target (t)]`.
pub fn assemble_exo2ego<T: Element>(
    z_exo0: &LatentGrid<T>,
    z_ego_t: &LatentGrid<T>,
    t: f64,
) -> Result<UnifiedSequence<T>> {
    check_timestep(t)?;
    same_grid(z_exo0, z_ego_t, "exo/ego latent grids")?;
    build(
        Some(Task::Exo2Ego),
        &[
            Part { latent: z_exo0, role: Role::Condition, timestep: 0.0 },
            Part { latent: z_ego_t, role: Role::Target, timestep: t },
        ],
    )
}

/// `[reference (t = 0), ego condition (t = 0), exo target (t)]`.
pub fn assemble_ego2exo<T: Element>(
    z_ref0: &LatentGrid<T>,
    z_ego0: &LatentGrid<T>,
    z_exo_t: &LatentGrid<T>,
    t: f64,
) -> Result<UnifiedSequence<T>> {
    check_timestep(t)?;
    check_reference(z_ref0, z_ego0)?;
    same_grid(z_ego0, z_exo_t, "ego/exo latent grids")?;
    build(
        Some(Task::Ego2Exo),
        &[
            Part { latent: z_ref0, role: Role::Reference, timestep: 0.0 },
            Part { latent: z_ego0, role: Role::Condition, timestep: 0.0 },
            Part { latent: z_exo_t, role: Role::Target, timestep: t },
        ],
    )
}

fn check_reference<T: Element>(z_ref0: &LatentGrid<T>, video: &LatentGrid<T>) -> Result<()> {
    if z_ref0.frames() != 1 {
        return Err(shape_err("reference latent frames", 1, z_ref0.frames()));
    }
    let dr = [z_ref0.channels(), z_ref0.height(), z_ref0.width()];
    let dv = [video.channels(), video.height(), video.width()];
    if dr != dv {
        return Err(shape_err("reference latent grid", dv, dr));
    }
    Ok(())
}

/// Frame index restarts at 0 inside every segment; spatial indices are the
/// native grid coordinates.
pub fn collaborative_positions<T>(seq: &UnifiedSequence<T>) -> Vec<Position> {
    seq.token_info.iter().map(|ti| Position::new(ti.row, ti.col, ti.frame)).collect()
}

/// One running frame counter over the concatenation in segment order.
pub fn uniform_positions<T>(seq: &UnifiedSequence<T>) -> Vec<Position> {
    let mut offsets = Vec::with_capacity(seq.segments.len());
    let mut acc = 0;
    for s in &seq.segments {
        offsets.push(acc);
        acc += s.frames;
    }
    seq.token_info.iter().map(|ti| Position::new(ti.row, ti.col, offsets[ti.segment] + ti.frame)).collect()
}

impl<T: Element> UnifiedSequence<T> {
    pub fn len(&self) -> usize {
        self.token_info.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_positions(mut self, mode: PositionMode) -> Self {
        self.set_positions(mode);
        self
    }

    pub fn set_positions(&mut self, mode: PositionMode) {
        self.positions = match mode {
            PositionMode::Collaborative => collaborative_positions(self),
            PositionMode::Uniform => uniform_positions(self),
        };
    }

    pub fn target_segment(&self) -> Result<&Segment> {
        let mut it = self.segments.iter().filter(|s| s.role == Role::Target);
        match (it.next(), it.next()) {
            (Some(s), None) => Ok(s),
            (None, _) => Err(Error::Contract("sequence has no TARGET segment".into())),
            _ => Err(Error::Contract("sequence has more than one TARGET segment".into())),
        }
    }

    /// Loss mask: true exactly on TARGET tokens.
    pub fn target_mask(&self) -> Vec<bool> {
        self.token_info.iter().map(|ti| self.segments[ti.segment].role == Role::Target).collect()
    }

    pub fn segment_index(&self) -> Vec<usize> {
        self.token_info.iter().map(|ti| ti.segment).collect()
    }

    pub fn role_index(&self) -> Vec<usize> {
        self.token_info.iter().map(|ti| self.segments[ti.segment].role.index()).collect()
    }

    pub fn segment_timesteps(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.timestep).collect()
    }

    /// Replaces the target segment's tokens and timestep, keeping the
    /// condition untouched. Used by the sampler at every Euler step.
    pub fn set_target(&mut self, z_t: &Tensor<T>, t: f64) -> Result<()> {
        check_timestep(t)?;
        let seg = self.target_segment()?.clone();
        let c = self.tokens.last_dim();
        if z_t.shape() != [seg.len(), c] {
            return Err(shape_err("target tokens", [seg.len(), c], z_t.shape()));
        }
        self.tokens.data_mut()[seg.start * c..seg.end * c].copy_from_slice(z_t.data());
        self.segments[seg.id].timestep = t;
        Ok(())
    }
}

/// Stacks condition and noisy target along channels: `[f, 2C', h', w']`,
/// condition channels first.
pub fn channel_concat_variant<T: Element>(z_cond: &LatentGrid<T>, z_tgt_t: &LatentGrid<T>) -> Result<LatentGrid<T>> {
    same_grid(z_cond, z_tgt_t, "channel-concat grids")?;
    let (f, c, h, w) = (z_cond.frames(), z_cond.channels(), z_cond.height(), z_cond.width());
    let plane = c * h * w;
    let mut out = Vec::with_capacity(2 * f * plane);
    for k in 0..f {
        out.extend_from_slice(&z_cond.tensor().data()[k * plane..(k + 1) * plane]);
        out.extend_from_slice(&z_tgt_t.tensor().data()[k * plane..(k + 1) * plane]);
    }
    LatentGrid::new(Tensor::new([f, 2 * c, h, w], out)?)
}

fn split_channels<T: Element>(stacked: &LatentGrid<T>) -> Result<(LatentGrid<T>, LatentGrid<T>)> {
    let (f, c2, h, w) = (stacked.frames(), stacked.channels(), stacked.height(), stacked.width());
    if c2 % 2 != 0 {
        return Err(shape_err("channel-concat channels", "even", c2));
    }
    let c = c2 / 2;
    let plane = c * h * w;
    let (mut cond, mut tgt) = (Vec::with_capacity(f * plane), Vec::with_capacity(f * plane));
    for k in 0..f {
        let base = k * 2 * plane;
        cond.extend_from_slice(&stacked.tensor().data()[base..base + plane]);
        tgt.extend_from_slice(&stacked.tensor().data()[base + plane..base + 2 * plane]);
    }
    Ok((LatentGrid::new(Tensor::new([f, c, h, w], cond)?)?, LatentGrid::new(Tensor::new([f, c, h, w], tgt)?)?))
}

/// Sequence for the channel-fusion variant: the target grid alone (after an
/// optional noise-free reference frame), with the condition channels carried
/// per token in `extra`.
pub fn assemble_channel_concat<T: Element>(
    task: Task,
    stacked: &LatentGrid<T>,
    z_ref0: Option<&LatentGrid<T>>,
    t: f64,
) -> Result<UnifiedSequence<T>> {
    check_timestep(t)?;
    let (cond, tgt) = split_channels(stacked)?;
    let cond_tokens = cond.to_tokens();
    let mut seq = match z_ref0 {
        Some(r) => {
            check_reference(r, &tgt)?;
            build(
                Some(task),
                &[
                    Part { latent: r, role: Role::Reference, timestep: 0.0 },
                    Part { latent: &tgt, role: Role::Target, timestep: t },
                ],
            )?
        }
        None => build(Some(task), &[Part { latent: &tgt, role: Role::Target, timestep: t }])?,
    };
    let pad = seq.len() - cond_tokens.shape()[0];
    let extra = if pad > 0 {
        Tensor::concat_rows(&[&Tensor::zeros([pad, cond.channels()]), &cond_tokens])?
    } else {
        cond_tokens
    };
    seq.extra = Some(extra);
    Ok(seq)
}

/// The TARGET segment of a per-token output, reshaped to its latent grid.
pub fn extract_target<T: Element>(output: &Tensor<T>, seq: &UnifiedSequence<T>) -> Result<LatentGrid<T>> {
    let seg = seq.target_segment()?;
    let (l, _) = output.dims2("extract_target")?;
    if l != seq.len() {
        return Err(shape_err("output rows", seq.len(), l));
    }
    let rows = output.slice_rows(seg.start, seg.len())?;
    LatentGrid::from_tokens(&rows, seg.frames, seg.height, seg.width)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(f: usize, c: usize, hw: usize, offset: f32) -> LatentGrid<f32> {
        LatentGrid::new(Tensor::from_fn([f, c, hw, hw], |i| offset + i as f32)).unwrap()
    }

    #[test]
    fn exo2ego_lengths_and_timesteps() {
        let seq = assemble_exo2ego(&grid(4, 3, 4, 0.0), &grid(4, 3, 4, 1000.0), 0.7).unwrap();
        assert_eq!(seq.len(), 128);
        assert_eq!(seq.segments[0].role, Role::Condition);
        assert_eq!(seq.segments[0].timestep, 0.0);
        assert_eq!(seq.segments[1].timestep, 0.7);
        assert_eq!(seq.target_mask().iter().filter(|&&m| m).count(), 64);
    }

    #[test]
    fn swapping_inputs_keeps_token_bytes() {
        let (a, b) = (grid(4, 3, 4, 0.0), grid(4, 3, 4, 500.0));
        let s1 = assemble_exo2ego(&a, &b, 0.3).unwrap();
        let s2 = assemble_exo2ego(&b, &a, 0.3).unwrap();
        assert_eq!(s1.tokens.slice_rows(0, 64).unwrap(), s2.tokens.slice_rows(64, 64).unwrap());
        assert_eq!(s1.tokens.slice_rows(64, 64).unwrap(), s2.tokens.slice_rows(0, 64).unwrap());
    }

    #[test]
    fn ego2exo_layout() {
        let seq = assemble_ego2exo(&grid(1, 3, 4, 0.0), &grid(4, 3, 4, 10.0), &grid(4, 3, 4, 20.0), 0.5).unwrap();
        assert_eq!(seq.len(), 144);
        let roles: Vec<Role> = seq.segments.iter().map(|s| s.role).collect();
        assert_eq!(roles, vec![Role::Reference, Role::Condition, Role::Target]);
        assert_eq!(seq.segments[0].timestep, 0.0);
        assert_eq!(seq.segments[1].timestep, 0.0);
        let mask = seq.target_mask();
        assert!(mask[..80].iter().all(|m| !m));
        assert!(mask[80..].iter().all(|&m| m));
    }

    #[test]
    fn reference_must_be_single_frame() {
        let r = assemble_ego2exo(&grid(2, 3, 4, 0.0), &grid(4, 3, 4, 0.0), &grid(4, 3, 4, 0.0), 0.5);
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn mismatched_views_rejected() {
        assert!(assemble_exo2ego(&grid(4, 3, 4, 0.0), &grid(4, 3, 2, 0.0), 0.5).is_err());
    }

    #[test]
    fn positions_per_mode() {
        let seq = assemble_exo2ego(&grid(4, 3, 4, 0.0), &grid(4, 3, 4, 0.0), 0.5).unwrap();
        let col = collaborative_positions(&seq);
        let uni = uniform_positions(&seq);
        let cond_k: Vec<usize> = col[..64].iter().map(|p| p.k).collect();
        let tgt_k: Vec<usize> = col[64..].iter().map(|p| p.k).collect();
        assert_eq!(cond_k, tgt_k);
        assert_eq!(*tgt_k.iter().max().unwrap(), 3);
        assert_eq!(uni[64].k, 4);
        assert_eq!(uni[127].k, 7);
        assert_eq!(&col[..64], &uni[..64]);

        let seq = assemble_ego2exo(&grid(1, 3, 4, 0.0), &grid(4, 3, 4, 0.0), &grid(4, 3, 4, 0.0), 0.5).unwrap();
        let col = collaborative_positions(&seq);
        assert!(col[..16].iter().all(|p| p.k == 0));
        let uni = uniform_positions(&seq);
        assert_eq!(uni[16].k, 1);
        assert_eq!(uni[143].k, 8);
    }

    #[test]
    fn extraction_spans() {
        let tgt = grid(4, 3, 4, 7.0);
        let seq = assemble_exo2ego(&grid(4, 3, 4, 0.0), &tgt, 0.5).unwrap();
        assert_eq!(extract_target(&seq.tokens, &seq).unwrap(), tgt);
        let seq = assemble_ego2exo(&grid(1, 3, 4, 0.0), &grid(4, 3, 4, 0.0), &tgt, 0.5).unwrap();
        assert_eq!(seq.target_segment().unwrap().start, 80);
        assert_eq!(extract_target(&seq.tokens, &seq).unwrap(), tgt);
    }

    #[test]
    fn channel_concat_shapes() {
        let cond = grid(4, 3, 4, 0.0);
        let tgt = grid(4, 3, 4, 100.0);
        let stacked = channel_concat_variant(&cond, &tgt).unwrap();
        assert_eq!(stacked.channels(), 6);
        let seq = assemble_channel_concat(Task::Exo2Ego, &stacked, None, 0.4).unwrap();
        assert_eq!(seq.len(), 64);
        assert_eq!(seq.extra.as_ref().unwrap(), &cond.to_tokens());
        assert_eq!(seq.tokens, tgt.to_tokens());
    }

    #[test]
    fn set_target_updates_only_target() {
        let mut seq = assemble_exo2ego(&grid(1, 2, 2, 0.0), &grid(1, 2, 2, 0.0), 0.5).unwrap();
        let before = seq.tokens.slice_rows(0, 4).unwrap();
        seq.set_target(&Tensor::full([4, 2], 9.0), 0.25).unwrap();
        assert_eq!(seq.tokens.slice_rows(0, 4).unwrap(), before);
        assert_eq!(seq.tokens.slice_rows(4, 4).unwrap(), Tensor::full([4, 2], 9.0));
        assert_eq!(seq.segments[1].timestep, 0.25);
    }
}

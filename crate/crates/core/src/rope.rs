//! Three-axis rotary position encoding.
//!
//! The per-head dimension is split into frame, height and width chunks. Pair
//! `l` of a chunk of size `2m` rotates by `pos · base^(−2l / 2m)`, where `pos`
//! is the token's index along that chunk's axis.

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use xview_tensor::{Element, Tensor, Var};

use crate::error::{Error, Result};

/// Grid coordinates of a token: `i` height, `j` width, `k` frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Position {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl Position {
    pub fn new(i: usize, j: usize, k: usize) -> Self {
        Self { i, j, k }
    }
}

/// Sizes of the frame/height/width chunks of a head dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisSplit {
    pub frame: usize,
    pub height: usize,
    pub width: usize,
}

impl AxisSplit {
    /// Closest split to 2:1:1 with every chunk even.
    pub fn for_head_dim(head_dim: usize) -> Result<Self> {
        if head_dim % 2 != 0 || head_dim < 6 {
            return Err(Error::Config(format!("head dim {head_dim} cannot host three even rotary chunks")));
        }
        let pairs = head_dim / 2;
        let spatial = (pairs / 4).max(1);
        Ok(Self { frame: 2 * (pairs - 2 * spatial), height: 2 * spatial, width: 2 * spatial })
    }

    pub fn total(&self) -> usize {
        self.frame + self.height + self.width
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        for (name, v) in [("frame", self.frame), ("height", self.height), ("width", self.width)] {
            if v % 2 != 0 {
                return Err(Error::Config(format!("rotary {name} chunk {v} is odd")));
            }
        }
        if self.total() != head_dim {
            return Err(Error::Config(format!("rotary chunks sum to {} but head dim is {head_dim}", self.total())));
        }
        Ok(())
    }
}

/// Per-token rotation angles `[L, D/2]` and their cosines/sines.
#[derive(Clone, Debug)]
pub struct RotaryTable<T> {
    split: AxisSplit,
    angles: Tensor<f64>,
    cos: Rc<Tensor<T>>,
    sin: Rc<Tensor<T>>,
}

/// Angles for one token, laid out frame pairs first, then height, then width.
pub fn phases(pos: Position, split: AxisSplit, base: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(split.total() / 2);
    for (size, p) in [(split.frame, pos.k), (split.height, pos.i), (split.width, pos.j)] {
        let m = size / 2;
        for l in 0..m {
            let freq = base.powf(-(2.0 * l as f64) / size as f64);
            out.push(p as f64 * freq);
        }
    }
    out
}

pub fn build_rotary<T: Element>(positions: &[Position], split: AxisSplit, base: f64) -> Result<RotaryTable<T>> {
    split.validate(split.total())?;
    let half = split.total() / 2;
    let mut angles = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        angles.extend(phases(p, split, base));
    }
    let angles = Tensor::new([positions.len(), half], angles)?;
    let cos = Rc::new(angles.map(f64::cos).cast());
    let sin = Rc::new(angles.map(f64::sin).cast());
    Ok(RotaryTable { split, angles, cos, sin })
}

impl<T: Element> RotaryTable<T> {
    pub fn len(&self) -> usize {
        self.angles.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head_dim(&self) -> usize {
        self.split.total()
    }

    pub fn angles(&self) -> &Tensor<f64> {
        &self.angles
    }

    /// Angles of the frame-axis pairs of one token.
    pub fn temporal_phases(&self, token: usize) -> &[f64] {
        let half = self.head_dim() / 2;
        &self.angles.data()[token * half..token * half + self.split.frame / 2]
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.len(), self.head_dim()] {
            return Err(Error::Shape {
                what: "rotary input",
                expected: format!("[{}, {}]", self.len(), self.head_dim()),
                actual: format!("{shape:?}"),
            });
        }
        Ok(())
    }

    /// Rotates each row of `x` (`[L, D]`) by its token's phases.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x.shape())?;
        Ok(x.rotate_pairs(&self.cos, &self.sin, false)?)
    }

    pub fn apply_inverse(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x.shape())?;
        Ok(x.rotate_pairs(&self.cos, &self.sin, true)?)
    }

    pub fn apply_var<'g>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check(&x.shape())?;
        Ok(x.rotate_pairs(self.cos.clone(), self.sin.clone())?)
    }
}

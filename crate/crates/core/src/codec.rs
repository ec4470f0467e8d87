//! Lossless latent codec.
//!
//! Temporal compression packs four pixel frames into one latent frame along
//! channels (the first frame is replicated four times), then space-to-depth
//! folds each `p × p` pixel patch into channels. Everything is a pure
//! rearrangement, so `decode(encode(v)) == v` bit for bit.

use xview_tensor::{Element, Tensor};

use crate::error::{shape_err, Error, Result};

/// Frames packed into one latent frame.
pub const TEMPORAL_STRIDE: usize = 4;

/// Pixel video `[F, C, H, W]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor<T = f32> {
    tensor: Tensor<T>,
}

/// Latent video `[f, C', h', w']`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid<T = f32> {
    tensor: Tensor<T>,
}

fn dims4<T: Element>(t: &Tensor<T>, what: &'static str) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] if a > 0 && b > 0 && c > 0 && d > 0 => Ok([a, b, c, d]),
        s => Err(shape_err(what, "four positive extents", s)),
    }
}

impl<T: Element> VideoTensor<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        dims4(&tensor, "video")?;
        Ok(Self { tensor })
    }

    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { tensor: Tensor::zeros([frames, channels, height, width]) }
    }

    fn dims(&self) -> [usize; 4] {
        let s = self.tensor.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn frames(&self) -> usize {
        self.dims()[0]
    }
    pub fn channels(&self) -> usize {
        self.dims()[1]
    }
    pub fn height(&self) -> usize {
        self.dims()[2]
    }
    pub fn width(&self) -> usize {
        self.dims()[3]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    /// One frame as a `[C, H, W]` slice.
    pub fn frame(&self, index: usize) -> &[T] {
        let n = self.channels() * self.height() * self.width();
        &self.tensor.data()[index * n..(index + 1) * n]
    }

    pub fn clamp01(&self) -> Self {
        Self { tensor: self.tensor.map(|v| v.max(T::zero()).min(T::one())) }
    }
}

impl<T: Element> LatentGrid<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        dims4(&tensor, "latent grid")?;
        Ok(Self { tensor })
    }

    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { tensor: Tensor::zeros([frames, channels, height, width]) }
    }

    fn dims(&self) -> [usize; 4] {
        let s = self.tensor.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn frames(&self) -> usize {
        self.dims()[0]
    }
    pub fn channels(&self) -> usize {
        self.dims()[1]
    }
    pub fn height(&self) -> usize {
        self.dims()[2]
    }
    pub fn width(&self) -> usize {
        self.dims()[3]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn token_count(&self) -> usize {
        self.frames() * self.height() * self.width()
    }

    /// Flattens to one row per `(frame, row, col)` in that nesting order,
    /// each row holding the `C'` channel vector of its slot.
    pub fn to_tokens(&self) -> Tensor<T> {
        let [f, c, h, w] = self.dims();
        let src = self.tensor.data();
        let mut out = Vec::with_capacity(src.len());
        for k in 0..f {
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        out.push(src[((k * c + ch) * h + i) * w + j]);
                    }
                }
            }
        }
        Tensor::new([f * h * w, c], out).expect("token count matches grid")
    }

    /// Inverse of [`to_tokens`](Self::to_tokens).
    pub fn from_tokens(tokens: &Tensor<T>, frames: usize, height: usize, width: usize) -> Result<Self> {
        let (l, c) = tokens.dims2("from_tokens")?;
        if l != frames * height * width || l == 0 {
            return Err(shape_err("token grid", [frames, height, width], tokens.shape()));
        }
        let src = tokens.data();
        let mut out = vec![T::zero(); src.len()];
        for k in 0..frames {
            for i in 0..height {
                for j in 0..width {
                    let t = (k * height + i) * width + j;
                    for ch in 0..c {
                        out[((k * c + ch) * height + i) * width + j] = src[t * c + ch];
                    }
                }
            }
        }
        Self::new(Tensor::new([frames, c, height, width], out)?)
    }
}

/// `f = (F − 1) / 4 + 1` for `F ≡ 1 (mod 4)`.
pub fn latent_frame_count(frames: usize) -> Result<usize> {
    if frames == 0 || (frames - 1) % TEMPORAL_STRIDE != 0 {
        return Err(Error::InvalidLength { frames });
    }
    Ok((frames - 1) / TEMPORAL_STRIDE + 1)
}

/// Latent channels for `channels` pixel channels and patch size `patch`.
pub fn latent_channels(channels: usize, patch: usize) -> usize {
    TEMPORAL_STRIDE * channels * patch * patch
}

/// Pixel frame feeding sub-slot `s` of latent frame `j`.
fn source_frame(j: usize, s: usize) -> usize {
    if j == 0 {
        0
    } else {
        TEMPORAL_STRIDE * j - (TEMPORAL_STRIDE - 1) + s
    }
}

pub fn encode<T: Element>(video: &VideoTensor<T>, patch: usize) -> Result<LatentGrid<T>> {
    let [frames, c, h, w] = video.dims();
    let f = latent_frame_count(frames)?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(shape_err("spatial extent divisible by patch", patch, [h, w]));
    }
    let (hp, wp) = (h / patch, w / patch);
    let cl = latent_channels(c, patch);
    let src = video.tensor.data();
    let mut out = vec![T::zero(); f * cl * hp * wp];
    for j in 0..f {
        for s in 0..TEMPORAL_STRIDE {
            let fr = source_frame(j, s);
            for ch in 0..c {
                for y in 0..h {
                    let (i, dy) = (y / patch, y % patch);
                    for x in 0..w {
                        let (jj, dx) = (x / patch, x % patch);
                        let lc = ((s * c + ch) * patch + dy) * patch + dx;
                        out[((j * cl + lc) * hp + i) * wp + jj] = src[((fr * c + ch) * h + y) * w + x];
                    }
                }
            }
        }
    }
    LatentGrid::new(Tensor::new([f, cl, hp, wp], out)?)
}

/// Inverse of [`encode`]. The four replicas of pixel frame 0 are averaged,
/// which is exact when they are equal.
pub fn decode<T: Element>(latent: &LatentGrid<T>, patch: usize) -> Result<VideoTensor<T>> {
    let [f, cl, hp, wp] = latent.dims();
    let per = TEMPORAL_STRIDE * patch * patch;
    if patch == 0 || cl % per != 0 {
        return Err(shape_err("latent channels divisible by 4·p²", per, cl));
    }
    let c = cl / per;
    let (h, w) = (hp * patch, wp * patch);
    let frames = (f - 1) * TEMPORAL_STRIDE + 1;
    let src = latent.tensor.data();
    let at = |j: usize, s: usize, ch: usize, y: usize, x: usize| {
        let lc = ((s * c + ch) * patch + y % patch) * patch + x % patch;
        src[((j * cl + lc) * hp + y / patch) * wp + x / patch]
    };
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); frames * c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sum = (at(0, 0, ch, y, x) + at(0, 1, ch, y, x)) + (at(0, 2, ch, y, x) + at(0, 3, ch, y, x));
                out[(ch * h + y) * w + x] = sum * quarter;
            }
        }
    }
    for j in 1..f {
        for s in 0..TEMPORAL_STRIDE {
            let fr = source_frame(j, s);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[((fr * c + ch) * h + y) * w + x] = at(j, s, ch, y, x);
                    }
                }
            }
        }
    }
    VideoTensor::new(Tensor::new([frames, c, h, w], out)?)
}

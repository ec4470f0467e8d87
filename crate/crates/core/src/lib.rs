//! Cross-view video translation with a rectified-flow diffusion transformer.
//!
//! Videos pass through a lossless [`codec`] into latent grids. Condition and
//! noisy target latents are joined into one token sequence ([`incontext`]),
//! a transformer ([`backbone`]) with three-axis [`rope`] predicts the flow
//! velocity ([`flow`]), and [`lora`] adapters fine-tune a frozen prior.

pub mod backbone;
pub mod check;
pub mod codec;
mod error;
pub mod flow;
pub mod incontext;
pub mod lora;
pub mod rope;

pub use backbone::{attention, patchify, unpatchify, AttentionVars, Dit, Init, ModelConfig, TokenSequence};
pub use codec::{decode, encode, latent_frame_count, LatentGrid, VideoTensor};
pub use error::{Error, Result};
pub use flow::{euler_integrate, euler_sample, flow_matching_loss, FlowSample, VelocityField};
pub use incontext::{PositionMode, Role, Segment, Task, UnifiedSequence};
pub use lora::{lora_forward, LoraAdapter, LoraConfig};
pub use rope::{build_rotary, AxisSplit, Position, RotaryTable};

//! Data generation, two-phase training, sampling, evaluation, ablations and
//! gradient audits for the cross-view video model.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod prior;
pub mod sample;
pub mod train;

pub use checkpoint::{load_base, load_checkpoint, save_checkpoint, Checkpoint, SeedRange};
pub use config::{Attention, TrainConfig, Variant};
pub use data::{encode_all, TripletLatents};
pub use error::{HarnessError, Result};
pub use eval::{evaluate, MetricsReport};
pub use metrics::{psnr, ssim, video_ssim};
pub use model::FlowModel;
pub use train::{finetune, pretrain_base, train, LossRecord, Phase, TrainRun};

//! Training configuration, read from and echoed as JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use xview_core::{LoraConfig, ModelConfig, PositionMode, Task};

use crate::error::{HarnessError, Result};

/// How the condition video enters the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attention {
    /// Condition and target tokens share one sequence.
    #[default]
    TokenConcat,
    /// Condition latents are stacked onto the target's channels.
    ChannelConcat,
}

/// The ablation flags. Each takes exactly one value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Variant {
    pub attention: Attention,
    pub positions: PositionMode,
    pub role_embedding: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Self { attention: Attention::TokenConcat, positions: PositionMode::Collaborative, role_embedding: true }
    }
}

impl Variant {
    pub const FULL: Variant =
        Variant { attention: Attention::TokenConcat, positions: PositionMode::Collaborative, role_embedding: true };
    pub const CHANNEL_CONCAT: Variant = Variant { attention: Attention::ChannelConcat, ..Variant::FULL };
    pub const UNIFORM_POSITIONS: Variant = Variant { positions: PositionMode::Uniform, ..Variant::FULL };

    /// Short label used in reports.
    pub fn label(&self) -> String {
        if *self == Self::FULL {
            return "full".into();
        }
        let mut parts = Vec::new();
        if self.attention == Attention::ChannelConcat {
            parts.push("channel_concat");
        }
        if self.positions == PositionMode::Uniform {
            parts.push("uniform_positions");
        }
        if !self.role_embedding {
            parts.push("no_role_embedding");
        }
        parts.join("+")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    /// Learning rate of the full-parameter base pretrain.
    pub base_lr: f64,
    /// Learning rate of the adapter phase.
    pub lr: f64,
    pub weight_decay: f64,
    pub base_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    /// Start the adapter phase from this base checkpoint instead of
    /// pretraining.
    pub base_checkpoint: Option<PathBuf>,
    /// Loss is logged every `log_every` steps (1 logs every step).
    pub log_every: usize,
    pub sample_steps: usize,
    /// Add the closed-form Gaussian velocity fitted to the training tokens
    /// to the transformer's prediction.
    pub velocity_prior: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Exo2Ego,
            model: ModelConfig::default(),
            lora: LoraConfig::default(),
            base_lr: 1e-3,
            lr: 1e-4,
            weight_decay: 0.01,
            base_steps: 2000,
            steps: 2000,
            batch_size: 4,
            seed: 0,
            variant: Variant::default(),
            dataset: PathBuf::from("data/train"),
            checkpoint: PathBuf::from("runs/model.ckpt"),
            base_checkpoint: None,
            log_every: 1,
            sample_steps: xview_core::flow::DEFAULT_SAMPLE_STEPS,
            velocity_prior: true,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.model.validate()?;
        if self.model.extra_channels != 0 {
            return bad("model.extra_channels is derived from the variant; leave it 0".into());
        }
        if self.model.role_embedding != self.variant.role_embedding {
            return bad(format!(
                "model.role_embedding ({}) disagrees with variant.role_embedding ({})",
                self.model.role_embedding, self.variant.role_embedding
            ));
        }
        self.lora.validate_for(self.model.dim, self.model.dim)?;
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1".into());
        }
        if self.sample_steps == 0 {
            return bad("sample_steps must be at least 1".into());
        }
        for (name, lr) in [("base_lr", self.base_lr), ("lr", self.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        Ok(())
    }

    /// Sets the variant and keeps the model's role-embedding flag in sync.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.model.role_embedding = variant.role_embedding;
        self
    }

    /// SHA-256 over every field except the variant flags, the derived
    /// role-embedding switch and the output paths. Ablation runs of one seed
    /// must agree on it.
    pub fn hash_without_variant(&self) -> String {
        let mut c = self.clone().with_variant(Variant::default());
        c.checkpoint = PathBuf::new();
        let digest = Sha256::digest(serde_json::to_vec(&c).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

//! Checkpoint files: an 8-byte little-endian header length, a JSON header
//! indexing every tensor, then the tensors as raw little-endian `f32` blobs.
//! Adapter tensors carry the `lora/` prefix so a base model can be loaded
//! without them; the velocity prior, when present, is stored under `prior/`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xview_core::backbone::LORA_PREFIX;
use xview_core::{Dit, Init, LoraConfig, ModelConfig};
use xview_tensor::{DType, Tensor};

use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};
use crate::model::FlowModel;
use crate::prior::GaussianPrior;

pub const CHECKPOINT_VERSION: u32 = 1;

const PRIOR_MEAN: &str = "prior/mean";
const PRIOR_BASIS: &str = "prior/basis";
const PRIOR_EIGENVALUES: &str = "prior/eigenvalues";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the blob section.
    pub offset: u64,
}

/// Seeds of the triplets a model was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub start: u64,
    pub count: usize,
}

impl SeedRange {
    pub fn overlaps(&self, other: &SeedRange) -> bool {
        let end = |r: &SeedRange| r.start + r.count as u64;
        self.count > 0 && other.count > 0 && self.start < end(other) && other.start < end(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: TrainConfig,
    /// The model as built, including any channel-concat input width.
    pub model: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub train_seeds: Option<SeedRange>,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: FlowModel,
}

/// Serializes `model` with a config echo. Tensors are written in parameter
/// order, so equal models give byte-identical files.
pub fn checkpoint_bytes(flow: &FlowModel, config: &TrainConfig, train_seeds: Option<SeedRange>) -> Vec<u8> {
    let model = &flow.dit;
    let mut tensors = Vec::new();
    let mut blobs = Vec::new();
    let mut push = |name: &str, value: &Tensor<f32>| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            dtype: DType::F32.as_str().to_string(),
            offset: blobs.len() as u64,
        });
        for v in value.data() {
            blobs.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (_, p) in model.params().iter() {
        push(&p.name, &p.value);
    }
    if let Some(prior) = &flow.prior {
        push(PRIOR_MEAN, &prior.mean);
        push(PRIOR_BASIS, &prior.basis);
        push(PRIOR_EIGENVALUES, &prior.eigenvalues);
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config: config.clone(),
        model: model.config().clone(),
        lora: model.lora_config(),
        train_seeds,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + blobs.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    out
}

pub fn save_checkpoint(
    path: &Path,
    model: &FlowModel,
    config: &TrainConfig,
    train_seeds: Option<SeedRange>,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    std::fs::write(path, checkpoint_bytes(model, config, train_seeds)).map_err(HarnessError::io(path))
}

fn split(path: &Path, bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let bad = |message: String| HarnessError::Checkpoint { path: path.to_path_buf(), message };
    if bytes.len() < 8 {
        return Err(bad(format!("file is {} bytes, shorter than the length prefix", bytes.len())));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if n > bytes.len() - 8 {
        return Err(bad(format!("header length {n} exceeds file size {}", bytes.len())));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + n]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(bad(format!("format version {} (expected {CHECKPOINT_VERSION})", header.format_version)));
    }
    Ok((header, 8 + n))
}

fn read_tensor(path: &Path, blobs: &[u8], e: &TensorEntry) -> Result<Tensor<f32>> {
    let bad = |message: String| HarnessError::Checkpoint { path: path.to_path_buf(), message };
    if e.dtype != DType::F32.as_str() {
        return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
    }
    let numel: usize = e.shape.iter().product();
    let start = e.offset as usize;
    let end = start + 4 * numel;
    if end > blobs.len() {
        return Err(bad(format!("{}: blob [{start}, {end}) past end of data ({} bytes)", e.name, blobs.len())));
    }
    let data = blobs[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(Tensor::new(e.shape.clone(), data)?)
}

fn load(path: &Path, with_adapters: bool) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(HarnessError::io(path))?;
    let (mut header, start) = split(path, &bytes)?;
    let blobs = &bytes[start..];
    let bad = |message: String| HarnessError::Checkpoint { path: path.to_path_buf(), message };

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Dit::new(header.model.clone(), Init::Standard, &mut rng)?;
    if !with_adapters {
        header.lora = None;
        header.tensors.retain(|e| !e.name.starts_with(LORA_PREFIX));
    }
    if let Some(cfg) = header.lora {
        model.attach_lora(cfg, &mut rng)?;
    }
    let expected = model.params().len();
    let mut seen = std::collections::BTreeSet::new();
    let (mut mean, mut basis, mut eigenvalues) = (None, None, None);
    for e in &header.tensors {
        if !seen.insert(e.name.as_str()) {
            return Err(bad(format!("tensor {} listed twice", e.name)));
        }
        let t = read_tensor(path, blobs, e)?;
        match e.name.as_str() {
            PRIOR_MEAN => mean = Some(t),
            PRIOR_BASIS => basis = Some(t),
            PRIOR_EIGENVALUES => eigenvalues = Some(t),
            name => model.set_param(name, t).map_err(|err| bad(format!("{name}: {err}")))?,
        }
    }
    let prior = match (mean, basis, eigenvalues) {
        (None, None, None) => None,
        (Some(mean), Some(basis), Some(eigenvalues)) => {
            Some(GaussianPrior::from_parts(mean, basis, eigenvalues).map_err(|err| bad(format!("prior: {err}")))?)
        }
        _ => return Err(bad("prior is missing some of mean, basis, eigenvalues".into())),
    };
    let expected = expected + if prior.is_some() { 3 } else { 0 };
    if seen.len() != expected {
        let missing: Vec<_> =
            model.params().iter().map(|(_, p)| p.name.clone()).filter(|n| !seen.contains(n.as_str())).collect();
        return Err(bad(format!("missing tensors: {}", missing.join(", "))));
    }
    Ok(Checkpoint { header, model: FlowModel { dit: model, prior } })
}

/// Loads base weights and adapters.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    load(path, true)
}

/// Loads only the base weights; adapters in the file are ignored and every
/// parameter is trainable.
pub fn load_base(path: &Path) -> Result<Checkpoint> {
    load(path, false)
}

//! On-disk dataset layout:
//!
//! ```text
//! manifest.json
//! triplet_00000/ego.f32   [F, 3, H, W] little-endian f32
//! triplet_00000/exo.f32   [F, 3, H, W]
//! triplet_00000/ref.f32   [3, H, W]
//! triplet_00000/meta.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xview_core::VideoTensor;
use xview_tensor::Tensor;

use crate::error::{GridError, Result};
use crate::triplet::{GridConfig, Triplet, TripletMeta};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed_base: u64,
    pub generator_config: GridConfig,
}

impl Manifest {
    pub fn new(count: usize, seed_base: u64, config: &GridConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            count,
            frames: config.frames,
            height: config.height,
            width: config.width,
            channels: 3,
            seed_base,
            generator_config: config.clone(),
        }
    }

    /// Seeds covered by this dataset.
    pub fn seeds(&self) -> std::ops::Range<u64> {
        self.seed_base..self.seed_base + self.count as u64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub triplets: Vec<Triplet>,
}

pub fn triplet_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("triplet_{index:05}"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GridError + '_ {
    move |source| GridError::Io { path: path.to_path_buf(), source }
}

fn write_blob(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_blob(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != expected * 4 {
        return Err(GridError::Truncated { path: path.to_path_buf(), expected: expected * 4, actual: bytes.len() });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| GridError::Malformed { path: path.to_path_buf(), message: e.to_string() })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| GridError::Malformed { path: path.to_path_buf(), message: e.to_string() })
}

fn is_triplet_dir(name: &str) -> bool {
    name.strip_prefix("triplet_").is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

/// Writes `triplets` under `root`. A non-empty `root` is refused unless
/// `force`, in which case the previous manifest and triplet directories are
/// removed first.
pub fn write_dataset(
    root: &Path,
    triplets: &[Triplet],
    seed_base: u64,
    config: &GridConfig,
    force: bool,
) -> Result<Manifest> {
    if root.exists() {
        let entries: Vec<_> =
            fs::read_dir(root).map_err(io_err(root))?.collect::<std::io::Result<_>>().map_err(io_err(root))?;
        if !entries.is_empty() {
            if !force {
                return Err(GridError::NotEmpty { path: root.to_path_buf() });
            }
            for e in entries {
                let name = e.file_name().to_string_lossy().into_owned();
                let path = e.path();
                if name == MANIFEST {
                    fs::remove_file(&path).map_err(io_err(&path))?;
                } else if is_triplet_dir(&name) {
                    fs::remove_dir_all(&path).map_err(io_err(&path))?;
                }
            }
        }
    }
    fs::create_dir_all(root).map_err(io_err(root))?;
    for (i, t) in triplets.iter().enumerate() {
        let dir = triplet_dir(root, i);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_blob(&dir.join("ego.f32"), t.ego.tensor().data())?;
        write_blob(&dir.join("exo.f32"), t.exo.tensor().data())?;
        write_blob(&dir.join("ref.f32"), t.reference.data())?;
        write_json(&dir.join("meta.json"), &t.meta)?;
    }
    let manifest = Manifest::new(triplets.len(), seed_base, config);
    write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let m: Manifest = read_json(&path)?;
    if m.format_version != FORMAT_VERSION {
        return Err(GridError::Mismatch {
            path,
            field: "format_version",
            expected: FORMAT_VERSION.to_string(),
            actual: m.format_version.to_string(),
        });
    }
    if m.channels != 3 {
        return Err(GridError::Mismatch {
            path,
            field: "channels",
            expected: "3".into(),
            actual: m.channels.to_string(),
        });
    }
    Ok(m)
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let on_disk = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok())
        .filter(|e| is_triplet_dir(&e.file_name().to_string_lossy()))
        .count();
    if on_disk != manifest.count {
        return Err(GridError::Mismatch {
            path: root.join(MANIFEST),
            field: "count",
            expected: manifest.count.to_string(),
            actual: format!("{on_disk} triplet directories"),
        });
    }
    let (f, h, w) = (manifest.frames, manifest.height, manifest.width);
    let mut triplets = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let dir = triplet_dir(root, i);
        let video = |name: &str| -> Result<VideoTensor<f32>> {
            let data = read_blob(&dir.join(name), f * 3 * h * w)?;
            Ok(VideoTensor::new(Tensor::new([f, 3, h, w], data).expect("blob length checked")).expect("rank-4 video"))
        };
        let ego = video("ego.f32")?;
        let exo = video("exo.f32")?;
        let reference =
            Tensor::new([3, h, w], read_blob(&dir.join("ref.f32"), 3 * h * w)?).expect("blob length checked");
        let meta_path = dir.join("meta.json");
        let meta: TripletMeta = read_json(&meta_path)?;
        if meta.trajectory.len() != f {
            return Err(GridError::Mismatch {
                path: meta_path,
                field: "trajectory length",
                expected: f.to_string(),
                actual: meta.trajectory.len().to_string(),
            });
        }
        triplets.push(Triplet { ego, exo, reference, meta });
    }
    Ok(Dataset { manifest, triplets })
}

/// Reads a dataset and checks its frame count and resolution against
/// `config`.
pub fn read_dataset_expecting(root: &Path, config: &GridConfig) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let path = root.join(MANIFEST);
    for (field, expected, actual) in [
        ("frames", config.frames, manifest.frames),
        ("height", config.height, manifest.height),
        ("width", config.width, manifest.width),
    ] {
        if expected != actual {
            return Err(GridError::Mismatch {
                path,
                field,
                expected: expected.to_string(),
                actual: actual.to_string(),
            });
        }
    }
    read_dataset(root)
}

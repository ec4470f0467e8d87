use serde::{Deserialize, Serialize};
use xview_core::VideoTensor;
use xview_tensor::Tensor;

use crate::agent::{generate_trajectory, AgentState, Heading};
use crate::error::{GridError, Result};
use crate::render::{render_ego, render_exo, render_reference};
use crate::world::generate_world;

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// Map side `G` in tiles.
    pub grid: usize,
    /// Ego window side `K` in tiles (odd).
    pub window: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Single-color worlds, for tests.
    pub uniform_world: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { grid: 32, window: 7, frames: 13, height: 32, width: 32, uniform_world: false }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.height == 0 || self.width == 0 {
            return Err(GridError::Config("grid, height and width must be positive".into()));
        }
        if self.window % 2 == 0 {
            return Err(GridError::Config(format!("window {} must be odd", self.window)));
        }
        if self.frames == 0 || self.frames % 4 != 1 {
            return Err(GridError::Config(format!("frames {} must satisfy F ≡ 1 (mod 4)", self.frames)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletMeta {
    pub seed: u64,
    pub world_seed: u64,
    pub trajectory: Vec<(usize, usize, Heading)>,
}

/// Synchronized ego video, exo video and reference image.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    /// `[F, 3, H, W]`.
    pub ego: VideoTensor<f32>,
    /// `[F, 3, H, W]`.
    pub exo: VideoTensor<f32>,
    /// `[3, H, W]`.
    pub reference: Tensor<f32>,
    pub meta: TripletMeta,
}

fn stack(frames: Vec<Tensor<f32>>) -> VideoTensor<f32> {
    let f = frames.len();
    let shape = frames[0].shape().to_vec();
    let data: Vec<f32> = frames.into_iter().flat_map(Tensor::into_data).collect();
    VideoTensor::new(Tensor::new([f, shape[0], shape[1], shape[2]], data).expect("frames share a shape"))
        .expect("rank-4 video")
}

/// Renders both views of every trajectory state.
pub fn render_triplet(seed: u64, world: &crate::World, trajectory: &[AgentState], config: &GridConfig) -> Triplet {
    let (h, w) = (config.height, config.width);
    let ego = stack(trajectory.iter().map(|&s| render_ego(world, s, config.window, h, w)).collect());
    let exo = stack(trajectory.iter().map(|&s| render_exo(world, s, h, w)).collect());
    let reference = render_reference(world, trajectory[0], config.window, h, w);
    Triplet {
        ego,
        exo,
        reference,
        meta: TripletMeta {
            seed,
            world_seed: world.seed,
            trajectory: trajectory.iter().map(|s| (s.x, s.y, s.heading)).collect(),
        },
    }
}

/// World and trajectory both derive from `seed` on separate RNG streams.
pub fn make_triplet(seed: u64, config: &GridConfig) -> Result<Triplet> {
    config.validate()?;
    let world = generate_world(seed, config.grid, config.uniform_world);
    let trajectory = generate_trajectory(seed, config.frames, &world);
    Ok(render_triplet(seed, &world, &trajectory, config))
}

/// Triplets for seeds `seed_base .. seed_base + count`.
pub fn generate_triplets(count: usize, seed_base: u64, config: &GridConfig) -> Result<Vec<Triplet>> {
    (0..count as u64).map(|i| make_triplet(seed_base + i, config)).collect()
}

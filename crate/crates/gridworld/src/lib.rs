//! Procedural paired-view gridworld videos.
//!
//! An agent walks a tile map. The exocentric view shows the whole map with
//! an agent glyph; the egocentric view is a heading-aligned window ahead of
//! the agent. Both are rendered from the same state at every frame, so the
//! cross-view mapping is exact and checkable pixel by pixel.

mod agent;
mod dataset;
mod error;
mod render;
mod triplet;
mod world;

pub use agent::{generate_trajectory, Action, AgentState, Heading, TURN_PROBABILITY};
pub use dataset::{
    read_dataset, read_dataset_expecting, read_manifest, triplet_dir, write_dataset, Dataset, Manifest, FORMAT_VERSION,
    MANIFEST,
};
pub use error::{GridError, Result};
pub use render::{glyph_tiles, render_ego, render_exo, render_reference};
pub use triplet::{generate_triplets, make_triplet, render_triplet, GridConfig, Triplet, TripletMeta};
pub use world::{generate_world, World, BORDER, MARKER, PALETTE};

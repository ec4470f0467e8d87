use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Saturated tile colors, RGB in `[0, 1]`.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.3, 0.95],
    [0.95, 0.85, 0.1],
    [0.85, 0.2, 0.8],
    [0.1, 0.85, 0.85],
    [1.0, 0.5, 0.05],
    [0.95, 0.95, 0.95],
];

/// Agent glyph color; never used for tiles.
pub const MARKER: [f32; 3] = [0.0, 0.0, 0.0];

/// Fill for tiles outside the map.
pub const BORDER: [f32; 3] = [0.3, 0.3, 0.3];

/// Square map of palette indices, row-major (`y` rows, `x` columns).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    pub size: usize,
    pub tiles: Vec<u8>,
    pub seed: u64,
}

impl World {
    pub fn uniform(size: usize, color: u8, seed: u64) -> Self {
        Self { size, tiles: vec![color; size * size], seed }
    }

    pub fn tile(&self, x: usize, y: usize) -> u8 {
        self.tiles[y * self.size + x]
    }

    /// Color at signed tile coordinates, border fill outside the map.
    pub fn color_at(&self, x: i64, y: i64) -> [f32; 3] {
        let n = self.size as i64;
        if x < 0 || y < 0 || x >= n || y >= n {
            BORDER
        } else {
            PALETTE[self.tile(x as usize, y as usize) as usize]
        }
    }

    pub fn distinct_colors(&self) -> usize {
        let mut seen = [false; PALETTE.len()];
        for &t in &self.tiles {
            seen[t as usize] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }
}

/// Random rectangles over a random base color, with at least four colors
/// present. `uniform` yields a single-color map.
pub fn generate_world(seed: u64, size: usize, uniform: bool) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = rng.random_range(0..PALETTE.len()) as u8;
    let mut world = World::uniform(size, base, seed);
    if uniform || size == 0 {
        return world;
    }
    let max_side = (size / 3).max(2);
    let mut placed = 0;
    while placed < 8 || (world.distinct_colors() < 4 && placed < 256) {
        let color = rng.random_range(0..PALETTE.len()) as u8;
        let w = rng.random_range(2..=max_side).min(size);
        let h = rng.random_range(2..=max_side).min(size);
        let x0 = rng.random_range(0..=size - w);
        let y0 = rng.random_range(0..=size - h);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                world.tiles[y * size + x] = color;
            }
        }
        placed += 1;
    }
    world
}

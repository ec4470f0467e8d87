//! Nearest-neighbor tile renderers. All geometry is integer arithmetic.

use xview_tensor::Tensor;

use crate::agent::AgentState;
use crate::world::{World, MARKER};

/// Tiles covered by the agent glyph: the agent's tile, the tile ahead and
/// the tile to its left.
pub fn glyph_tiles(state: AgentState) -> [(i64, i64); 3] {
    let (x, y) = (state.x as i64, state.y as i64);
    let (fx, fy) = state.heading.forward();
    let (rx, ry) = state.heading.right();
    [(x, y), (x + fx, y + fy), (x - rx, y - ry)]
}

/// Channel-major `[3, H, W]` image of the tile window starting at
/// `(x0, y0)` spanning `span × span` tiles, north up, with the agent glyph.
fn render_topdown(
    world: &World,
    state: AgentState,
    x0: i64,
    y0: i64,
    span: usize,
    height: usize,
    width: usize,
) -> Tensor<f32> {
    let glyph = glyph_tiles(state);
    let plane = height * width;
    let mut data = vec![0.0f32; 3 * plane];
    for py in 0..height {
        let ty = y0 + (py * span / height) as i64;
        for px in 0..width {
            let tx = x0 + (px * span / width) as i64;
            let rgb = if glyph.contains(&(tx, ty)) { MARKER } else { world.color_at(tx, ty) };
            for (ch, v) in rgb.iter().enumerate() {
                data[ch * plane + py * width + px] = *v;
            }
        }
    }
    Tensor::new([3, height, width], data).expect("length matches shape")
}

/// Whole map with the agent glyph.
pub fn render_exo(world: &World, state: AgentState, height: usize, width: usize) -> Tensor<f32> {
    render_topdown(world, state, 0, 0, world.size, height, width)
}

/// `2K × 2K` north-up crop centered on the agent, glyph drawn.
pub fn render_reference(world: &World, state: AgentState, window: usize, height: usize, width: usize) -> Tensor<f32> {
    let k = window as i64;
    render_topdown(world, state, state.x as i64 - k, state.y as i64 - k, 2 * window, height, width)
}

/// First-person `K × K` window: the agent sits at the bottom-center tile,
/// the view extends `K − 1` tiles ahead, and heading points up.
pub fn render_ego(world: &World, state: AgentState, window: usize, height: usize, width: usize) -> Tensor<f32> {
    let (fx, fy) = state.heading.forward();
    let (rx, ry) = state.heading.right();
    let (x, y) = (state.x as i64, state.y as i64);
    let half = (window / 2) as i64;
    let plane = height * width;
    let mut data = vec![0.0f32; 3 * plane];
    for py in 0..height {
        let ahead = window as i64 - 1 - (py * window / height) as i64;
        for px in 0..width {
            let side = (px * window / width) as i64 - half;
            let rgb = world.color_at(x + ahead * fx + side * rx, y + ahead * fy + side * ry);
            for (ch, v) in rgb.iter().enumerate() {
                data[ch * plane + py * width + px] = *v;
            }
        }
    }
    Tensor::new([3, height, width], data).expect("length matches shape")
}

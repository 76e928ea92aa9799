//! Ego-centric top-down raster, 32 x 32 RGB at 1 m per pixel, heading up.
//! The ego occupies rows 23..=24 and columns 15..=16.

use super::dynamics::SceneState;
use super::geometry::{road_distance, LANE_HALF_WIDTH};

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_BYTES: usize = IMAGE_SIZE * IMAGE_SIZE * 3;
pub const BACKGROUND_RGB: [u8; 3] = [34, 110, 50];
pub const ROAD_RGB: [u8; 3] = [96, 96, 96];
pub const EGO_RGB: [u8; 3] = [40, 90, 230];
pub const AGENT_RGB: [u8; 3] = [230, 40, 40];

const EGO_ROW: f64 = 23.5;
const EGO_COL: f64 = 15.5;

/// Ego-frame (forward, left) offset of a pixel centre.
fn pixel_local(r: usize, c: usize) -> [f64; 2] {
    [EGO_ROW - r as f64, EGO_COL - c as f64]
}

fn put(img: &mut [u8], r: usize, c: usize, rgb: [u8; 3]) {
    let i = (r * IMAGE_SIZE + c) * 3;
    img[i..i + 3].copy_from_slice(&rgb);
}

/// Paints the 2 x 2 block whose centre is nearest to `local`; returns the
/// number of pixels that landed inside the frame.
fn block(img: &mut [u8], local: [f64; 2], rgb: [u8; 3]) -> usize {
    let r0 = (EGO_ROW - local[0]).floor();
    let c0 = (EGO_COL - local[1]).floor();
    let mut n = 0;
    for dr in 0..2 {
        for dc in 0..2 {
            let (r, c) = (r0 + dr as f64, c0 + dc as f64);
            if (0.0..IMAGE_SIZE as f64).contains(&r) && (0.0..IMAGE_SIZE as f64).contains(&c) {
                put(img, r as usize, c as usize, rgb);
                n += 1;
            }
        }
    }
    n
}

pub fn render_frame(state: &SceneState) -> Vec<u8> {
    let mut img = vec![0u8; IMAGE_BYTES];
    for r in 0..IMAGE_SIZE {
        for c in 0..IMAGE_SIZE {
            let w = state.ego.to_world(pixel_local(r, c));
            let rgb = if road_distance(w) <= LANE_HALF_WIDTH {
                ROAD_RGB
            } else {
                BACKGROUND_RGB
            };
            put(&mut img, r, c, rgb);
        }
    }
    for a in &state.agents {
        block(&mut img, state.ego.to_local([a.pose.x, a.pose.y]), AGENT_RGB);
    }
    block(&mut img, [0.0, 0.0], EGO_RGB);
    img
}

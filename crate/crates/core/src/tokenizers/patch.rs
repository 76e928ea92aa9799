//! 4 x 4 RGB patches of the 32 x 32 frame, row-major over an 8 x 8 grid.
//! Within a patch values run over pixel rows, pixel columns, then channels.

use rand::Rng;

use crate::gridworld::{IMAGE_BYTES, IMAGE_SIZE};
use crate::tensor::{Graph, ParamId, ParamStore, Result, Scalar, Tensor};

pub const PATCH_SIZE: usize = 4;
pub const PATCH_GRID: usize = IMAGE_SIZE / PATCH_SIZE;
pub const PATCHES: usize = PATCH_GRID * PATCH_GRID;
pub const PATCH_DIM: usize = PATCH_SIZE * PATCH_SIZE * 3;

fn for_each_patch_byte(mut f: impl FnMut(usize, usize, usize)) {
    for p in 0..PATCHES {
        let (pr, pc) = (p / PATCH_GRID, p % PATCH_GRID);
        for dr in 0..PATCH_SIZE {
            for dc in 0..PATCH_SIZE {
                for ch in 0..3 {
                    let j = (dr * PATCH_SIZE + dc) * 3 + ch;
                    let pix = ((pr * PATCH_SIZE + dr) * IMAGE_SIZE + pc * PATCH_SIZE + dc) * 3 + ch;
                    f(p, j, pix);
                }
            }
        }
    }
}

/// Raw patch bytes, `PATCHES` rows of `PATCH_DIM`.
pub fn patch_bytes(image: &[u8]) -> Vec<[u8; PATCH_DIM]> {
    assert_eq!(image.len(), IMAGE_BYTES);
    let mut out = vec![[0u8; PATCH_DIM]; PATCHES];
    for_each_patch_byte(|p, j, pix| out[p][j] = image[pix]);
    out
}

/// Patch values scaled to [0, 1], flattened `[PATCHES, PATCH_DIM]`.
pub fn image_patches(image: &[u8]) -> Vec<f64> {
    let mut out = vec![0.0; PATCHES * PATCH_DIM];
    for_each_patch_byte(|p, j, pix| out[p * PATCH_DIM + j] = image[pix] as f64 / 255.0);
    out
}

/// Inverse of [`image_patches`], rounding and clamping to bytes.
pub fn image_from_patches(patches: &[f64]) -> Vec<u8> {
    assert_eq!(patches.len(), PATCHES * PATCH_DIM);
    let mut img = vec![0u8; IMAGE_BYTES];
    for_each_patch_byte(|p, j, pix| img[pix] = (patches[p * PATCH_DIM + j] * 255.0).round().clamp(0.0, 255.0) as u8);
    img
}

/// Learned affine map from a patch to the model width.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbed {
    pub w: ParamId,
    pub b: ParamId,
}

impl PatchEmbed {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (PATCH_DIM as f64).sqrt();
        Ok(Self {
            w: store.insert(&format!("{prefix}.w"), Tensor::randn(&[PATCH_DIM, d_model], std, rng))?,
            b: store.insert(&format!("{prefix}.b"), Tensor::zeros(&[d_model]))?,
        })
    }

    /// `[PATCHES, d_model]` features of flattened patch values.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, patches: &[f64]) -> Result<crate::tensor::Var> {
        let x = g.constant(Tensor::from_f64(&[patches.len() / PATCH_DIM, PATCH_DIM], patches)?);
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, Some(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_round_trip() {
        let img: Vec<u8> = (0..IMAGE_BYTES).map(|i| (i * 7 % 256) as u8).collect();
        assert_eq!(image_from_patches(&image_patches(&img)), img);
        let b = patch_bytes(&img);
        // Patch 9 is grid (1, 1): pixel (4, 4) is its first entry.
        assert_eq!(b[9][0], img[(4 * IMAGE_SIZE + 4) * 3]);
    }
}

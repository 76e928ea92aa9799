//! Seeded k-means codebook over 4 x 4 RGB patches.

use std::collections::HashMap;

use rand::Rng;

use super::patch::{patch_bytes, PATCHES, PATCH_DIM};
use super::{Result, TokenizerError, VISUAL_BASE, VISUAL_TOKENS};
use crate::par::Exec;
use crate::rng::{self, streams};
use crate::tensor::CheckpointEntry;

pub const CODEBOOK_K: usize = VISUAL_TOKENS;
pub const CODEBOOK_PARAM: &str = "codebook.centroids";
const ITERATIONS: usize = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct VisualCodebook {
    /// `CODEBOOK_K` centroids of `PATCH_DIM` values in [0, 1].
    pub centroids: Vec<[f64; PATCH_DIM]>,
}

/// Result of a codebook fit.
#[derive(Clone, Debug)]
pub struct CodebookFit {
    pub codebook: VisualCodebook,
    /// Weighted sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub distinct_patches: usize,
    /// Fewer distinct patches than centroids: the surplus centroids repeat.
    pub duplicated: bool,
}

fn dist2(a: &[f64; PATCH_DIM], b: &[f64; PATCH_DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn scaled(p: &[u8; PATCH_DIM]) -> [f64; PATCH_DIM] {
    std::array::from_fn(|i| p[i] as f64 / 255.0)
}

/// Nearest centroid index and squared distance; ties go to the lower index.
fn nearest(centroids: &[[f64; PATCH_DIM]], p: &[f64; PATCH_DIM]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = dist2(c, p);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

impl VisualCodebook {
    /// Fits `CODEBOOK_K` centroids to the patches of `images`.
    ///
    /// Identical patches are merged into weighted points, ordered by their
    /// bytes, so the fit depends only on the multiset of patches and `seed`.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a [u8]>, seed: u64, exec: Exec) -> Result<CodebookFit> {
        let mut counts: HashMap<[u8; PATCH_DIM], u64> = HashMap::new();
        for img in images {
            for p in patch_bytes(img) {
                *counts.entry(p).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(TokenizerError::Invalid("no patches to fit".into()));
        }
        let mut distinct: Vec<([u8; PATCH_DIM], u64)> = counts.into_iter().collect();
        distinct.sort_unstable_by_key(|a| a.0);
        let points: Vec<[f64; PATCH_DIM]> = distinct.iter().map(|(p, _)| scaled(p)).collect();
        let weights: Vec<f64> = distinct.iter().map(|&(_, w)| w as f64).collect();
        let n = points.len();

        if n <= CODEBOOK_K {
            let centroids: Vec<_> = (0..CODEBOOK_K).map(|k| points[k % n]).collect();
            return Ok(CodebookFit {
                codebook: VisualCodebook { centroids },
                inertia: 0.0,
                distinct_patches: n,
                duplicated: n < CODEBOOK_K,
            });
        }

        // k-means++ seeding over weighted points.
        let mut r = rng::rng(seed, streams::CODEBOOK, 0);
        let mut centroids: Vec<[f64; PATCH_DIM]> = Vec::with_capacity(CODEBOOK_K);
        let total_w: f64 = weights.iter().sum();
        let mut pick = r.gen::<f64>() * total_w;
        let first = weights.iter().position(|&w| {
            pick -= w;
            pick < 0.0
        });
        centroids.push(points[first.unwrap_or(n - 1)]);
        let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
        while centroids.len() < CODEBOOK_K {
            let mass: f64 = d2.iter().zip(&weights).map(|(d, w)| d * w).sum();
            let idx = if mass > 0.0 {
                let mut pick = r.gen::<f64>() * mass;
                let mut chosen = n - 1;
                for i in 0..n {
                    pick -= d2[i] * weights[i];
                    if pick < 0.0 {
                        chosen = i;
                        break;
                    }
                }
                chosen
            } else {
                r.gen_range(0..n)
            };
            let c = points[idx];
            for (d, p) in d2.iter_mut().zip(&points) {
                *d = d.min(dist2(p, &c));
            }
            centroids.push(c);
        }

        let mut inertia = 0.0;
        for _ in 0..ITERATIONS {
            let assign = exec.map(&points, |p| nearest(&centroids, p));
            let mut sums = vec![[0.0; PATCH_DIM]; CODEBOOK_K];
            let mut mass = vec![0.0; CODEBOOK_K];
            inertia = 0.0;
            for ((p, w), &(k, d)) in points.iter().zip(&weights).zip(&assign) {
                for (s, v) in sums[k].iter_mut().zip(p) {
                    *s += w * v;
                }
                mass[k] += w;
                inertia += w * d;
            }
            for k in 0..CODEBOOK_K {
                if mass[k] > 0.0 {
                    centroids[k] = std::array::from_fn(|j| sums[k][j] / mass[k]);
                }
            }
        }
        let assign = exec.map(&points, |p| nearest(&centroids, p));
        let final_inertia: f64 = assign.iter().zip(&weights).map(|(&(_, d), w)| d * w).sum();
        debug_assert!(final_inertia <= inertia + 1e-9);
        Ok(CodebookFit {
            codebook: VisualCodebook { centroids },
            inertia: final_inertia,
            distinct_patches: n,
            duplicated: false,
        })
    }

    /// Token ids (visual range) of the 64 patches, row-major.
    pub fn encode(&self, image: &[u8]) -> Vec<usize> {
        patch_bytes(image)
            .iter()
            .map(|p| VISUAL_BASE + nearest(&self.centroids, &scaled(p)).0)
            .collect()
    }

    /// Encodes many frames, reusing assignments of repeated patches.
    pub fn encode_many(&self, images: &[&[u8]], exec: Exec) -> Vec<Vec<usize>> {
        let mut cache: HashMap<[u8; PATCH_DIM], usize> = HashMap::new();
        let mut todo: Vec<[u8; PATCH_DIM]> = Vec::new();
        let all: Vec<Vec<[u8; PATCH_DIM]>> = images.iter().map(|im| patch_bytes(im)).collect();
        for p in all.iter().flatten() {
            if !cache.contains_key(p) {
                cache.insert(*p, usize::MAX);
                todo.push(*p);
            }
        }
        let ids = exec.map(&todo, |p| VISUAL_BASE + nearest(&self.centroids, &scaled(p)).0);
        for (p, id) in todo.iter().zip(ids) {
            cache.insert(*p, id);
        }
        all.iter().map(|ps| ps.iter().map(|p| cache[p]).collect()).collect()
    }

    /// Patch values in [0, 1] for 64 visual ids.
    pub fn decode_patches(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if ids.len() != PATCHES {
            return Err(TokenizerError::Length {
                expected: PATCHES,
                got: ids.len(),
            });
        }
        let range = VISUAL_BASE..VISUAL_BASE + CODEBOOK_K;
        let mut out = Vec::with_capacity(PATCHES * PATCH_DIM);
        for &id in ids {
            if !range.contains(&id) {
                return Err(TokenizerError::OutOfRange { id, range });
            }
            out.extend_from_slice(&self.centroids[id - VISUAL_BASE]);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<u8>> {
        Ok(super::image_from_patches(&self.decode_patches(ids)?))
    }

    /// Mean squared error in [0, 1] units between a frame and its reconstruction.
    pub fn reconstruction_mse(&self, image: &[u8]) -> f64 {
        let x = super::image_patches(image);
        let y = self
            .decode_patches(&self.encode(image))
            .expect("encode yields valid ids");
        x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
    }

    pub fn to_entry(&self) -> CheckpointEntry {
        CheckpointEntry {
            name: CODEBOOK_PARAM.into(),
            shape: vec![CODEBOOK_K, PATCH_DIM],
            values: self.centroids.iter().flatten().copied().collect(),
        }
    }

    pub fn from_entries(entries: &[CheckpointEntry]) -> Option<Self> {
        let e = entries.iter().find(|e| e.name == CODEBOOK_PARAM)?;
        if e.shape != [CODEBOOK_K, PATCH_DIM] {
            return None;
        }
        Some(Self {
            centroids: e
                .values
                .chunks(PATCH_DIM)
                .map(|c| std::array::from_fn(|j| c[j]))
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::patch::image_from_patches;
    use super::*;

    /// Frames whose patches are solid colours `base..base + count`.
    fn solid_frames(count: usize) -> Vec<Vec<u8>> {
        (0..count.div_ceil(PATCHES))
            .map(|f| {
                let vals: Vec<f64> = (0..PATCHES)
                    .flat_map(|p| {
                        let c = ((f * PATCHES + p) % count) as f64;
                        [c / 255.0, 0.0, (255.0 - c) / 255.0].repeat(16)
                    })
                    .collect();
                image_from_patches(&vals)
            })
            .collect()
    }

    #[test]
    fn exact_when_patches_equal_k() {
        let frames = solid_frames(CODEBOOK_K);
        let fit = VisualCodebook::fit(frames.iter().map(|f| f.as_slice()), 1, Exec::Sequential).unwrap();
        assert!(!fit.duplicated);
        assert_eq!(fit.distinct_patches, CODEBOOK_K);
        for f in &frames {
            assert_eq!(fit.codebook.reconstruction_mse(f), 0.0);
            assert_eq!(&fit.codebook.decode(&fit.codebook.encode(f)).unwrap(), f);
        }
    }

    #[test]
    fn few_patches_flag_duplicates() {
        let frames = solid_frames(10);
        let fit = VisualCodebook::fit(frames.iter().map(|f| f.as_slice()), 1, Exec::Sequential).unwrap();
        assert!(fit.duplicated);
        assert_eq!(fit.codebook.centroids.len(), CODEBOOK_K);
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let frames = solid_frames(10);
        let cb = VisualCodebook::fit(frames.iter().map(|f| f.as_slice()), 1, Exec::Sequential)
            .unwrap()
            .codebook;
        assert!(cb.decode(&[3; PATCHES]).is_err());
        assert!(cb.decode(&[VISUAL_BASE; 63]).is_err());
    }
}

//! Latent diffusion world model: a noise predictor on the next frame's
//! block-mean latent, conditioned on pooled visual and action features.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::gridworld::{IMAGE_BYTES, IMAGE_SIZE};
use crate::nn::{sinusoidal, Linear};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

pub const STEPS: usize = 100;
/// The 1e-4 to 0.02 range of a 1000-step schedule rescaled by 1000 / STEPS,
/// so that the terminal `abar` is near zero.
pub const BETA_START: f64 = 1e-3;
pub const BETA_END: f64 = 0.2;
/// Latent grid side and dimension (4 x 4 x 3).
pub const LATENT_GRID: usize = 4;
pub const LATENT_DIM: usize = LATENT_GRID * LATENT_GRID * 3;
const BLOCK: usize = IMAGE_SIZE / LATENT_GRID;
pub const TIME_DIM: usize = 32;
pub const HIDDEN: usize = 256;

pub const IMAGE_DUMP_MAGIC: &[u8; 4] = b"DW0I";

/// Linear beta schedule indexed by `k` in `1..=STEPS`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(STEPS, BETA_START, BETA_END)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, start: f64, end: f64) -> Self {
        let betas: Vec<f64> = (0..steps)
            .map(|i| start + (end - start) * i as f64 / (steps - 1).max(1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bar.push(acc);
        }
        Self {
            betas,
            alphas,
            alpha_bar,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.steps() {
            return Err(invalid(format!("diffusion step {k} outside 1..={}", self.steps())));
        }
        Ok(k - 1)
    }

    pub fn beta(&self, k: usize) -> Result<f64> {
        Ok(self.betas[self.check(k)?])
    }

    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check(k)?])
    }

    /// `sqrt(abar_k) z + sqrt(1 - abar_k) eps`.
    pub fn noising(&self, z: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
        if z.len() != eps.len() {
            return Err(invalid(format!(
                "latent of {} values with noise of {}",
                z.len(),
                eps.len()
            )));
        }
        let ab = self.alpha_bar(k)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
    }

    /// Posterior variance of step `k`; zero at `k = 1`.
    pub fn posterior_variance(&self, k: usize) -> Result<f64> {
        let i = self.check(k)?;
        if i == 0 {
            return Ok(0.0);
        }
        Ok(self.betas[i] * (1.0 - self.alpha_bar[i - 1]) / (1.0 - self.alpha_bar[i]))
    }
}

/// 8 x 8 block means mapped affinely to [-1, 1].
pub fn encode_latent(image: &[u8]) -> Result<[f64; LATENT_DIM]> {
    if image.len() != IMAGE_BYTES {
        return Err(invalid(format!("image of {} bytes", image.len())));
    }
    let mut z = [0.0; LATENT_DIM];
    for by in 0..LATENT_GRID {
        for bx in 0..LATENT_GRID {
            for c in 0..3 {
                let mut s = 0u32;
                for r in by * BLOCK..(by + 1) * BLOCK {
                    for col in bx * BLOCK..(bx + 1) * BLOCK {
                        s += image[(r * IMAGE_SIZE + col) * 3 + c] as u32;
                    }
                }
                let mean = s as f64 / (BLOCK * BLOCK) as f64;
                z[(by * LATENT_GRID + bx) * 3 + c] = mean / 127.5 - 1.0;
            }
        }
    }
    Ok(z)
}

/// Nearest-neighbour upsampling of a latent, clipped to [-1, 1] and rounded.
pub fn decode_latent(z: &[f64]) -> Result<Vec<u8>> {
    if z.len() != LATENT_DIM {
        return Err(invalid(format!("latent of {} values", z.len())));
    }
    let mut img = vec![0u8; IMAGE_BYTES];
    for r in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            for c in 0..3 {
                let v = z[((r / BLOCK) * LATENT_GRID + col / BLOCK) * 3 + c].clamp(-1.0, 1.0);
                img[(r * IMAGE_SIZE + col) * 3 + c] = ((v + 1.0) * 127.5).round() as u8;
            }
        }
    }
    Ok(img)
}

/// Three-layer MLP noise predictor.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cond_dim: usize,
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
}

impl Denoiser {
    /// `cond_dim` is the width of each pooled feature (the backbone width).
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cond_dim: usize, rng: &mut R) -> Result<Self> {
        let din = LATENT_DIM + TIME_DIM + 2 * cond_dim;
        Ok(Self {
            cond_dim,
            l1: Linear::init(store, "diffusion.l1", din, HIDDEN, 1.0 / (din as f64).sqrt(), true, rng)?,
            l2: Linear::init(
                store,
                "diffusion.l2",
                HIDDEN,
                HIDDEN,
                1.0 / (HIDDEN as f64).sqrt(),
                true,
                rng,
            )?,
            l3: Linear::init(
                store,
                "diffusion.l3",
                HIDDEN,
                LATENT_DIM,
                1.0 / (HIDDEN as f64).sqrt(),
                true,
                rng,
            )?,
        })
    }

    /// Predicted noise `[rows, 48]` for noisy latents `z_k: [rows, 48]` and
    /// conditioning `fv, fa: [rows, cond_dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, z_k: Var, steps: &[usize], fv: Var, fa: Var) -> Result<Var> {
        let emb: Vec<f64> = steps
            .iter()
            .flat_map(|&k| sinusoidal(k as f64, TIME_DIM, 10_000.0))
            .collect();
        let t = g.constant(Tensor::from_f64(&[steps.len(), TIME_DIM], &emb)?);
        let x = g.concat_cols(&[z_k, t, fv, fa])?;
        let h = self.l1.forward(g, x)?;
        let h = g.gelu(h);
        let h = self.l2.forward(g, h)?;
        let h = g.gelu(h);
        Ok(self.l3.forward(g, h)?)
    }

    /// Noise prediction with constant inputs, for sampling.
    pub fn predict<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        z: &[f64],
        k: usize,
        fv: &[f64],
        fa: &[f64],
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let zv = g.constant(Tensor::from_f64(&[1, LATENT_DIM], z)?);
        let fvv = g.constant(Tensor::from_f64(&[1, fv.len()], fv)?);
        let fav = g.constant(Tensor::from_f64(&[1, fa.len()], fa)?);
        let out = self.forward(&mut g, zv, &[k], fvv, fav)?;
        Ok(g.value(out).iter().map(|v| v.as_f64()).collect())
    }
}

/// Noise draw for one training term.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub k: usize,
    pub eps: Vec<f64>,
}

impl NoiseDraw {
    pub fn sample<R: Rng + ?Sized>(schedule: &NoiseSchedule, rng: &mut R) -> Self {
        Self {
            k: rng.gen_range(1..=schedule.steps()),
            eps: (0..LATENT_DIM).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }
}

/// `mean (eps - eps_hat)^2` on the next frame's latent; gradients reach the
/// denoiser and both conditioning features.
pub fn loss_wm_diff<T: Scalar>(
    g: &mut Graph<'_, T>,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    fv: Var,
    fa: Var,
    next_image: &[u8],
    draw: &NoiseDraw,
) -> Result<Var> {
    let z = encode_latent(next_image)?;
    let zk = schedule.noising(&z, draw.k, &draw.eps)?;
    let zk = g.constant(Tensor::from_f64(&[1, LATENT_DIM], &zk)?);
    let pred = denoiser.forward(g, zk, &[draw.k], fv, fa)?;
    let eps = g.constant(Tensor::from_f64(&[1, LATENT_DIM], &draw.eps)?);
    Ok(g.mse(pred, eps)?)
}

/// Ancestral sampling from `z_T ~ N(0, I)`; `predict(z_k, k)` returns the
/// predicted noise. The final latent is clipped to [-1, 1].
pub fn sample_latent<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    rng: &mut R,
    mut predict: impl FnMut(&[f64], usize) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let mut z: Vec<f64> = (0..LATENT_DIM).map(|_| rng.sample(StandardNormal)).collect();
    for k in (1..=schedule.steps()).rev() {
        let eps = predict(&z, k)?;
        if eps.len() != LATENT_DIM {
            return Err(invalid(format!("noise prediction of {} values", eps.len())));
        }
        let beta = schedule.beta(k)?;
        let ab = schedule.alpha_bar(k)?;
        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / (1.0 - beta).sqrt();
        let sigma = schedule.posterior_variance(k)?.sqrt();
        for (zi, ei) in z.iter_mut().zip(&eps) {
            *zi = inv * (*zi - coef * ei);
        }
        if k > 1 {
            for zi in z.iter_mut() {
                let xi: f64 = rng.sample(StandardNormal);
                *zi += sigma * xi;
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite latent at diffusion step {k}")));
        }
    }
    z.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(z)
}

/// Samples a future frame from pooled features.
pub fn sample_future<T: Scalar, R: Rng + ?Sized>(
    store: &ParamStore<T>,
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    fv: &[f64],
    fa: &[f64],
    rng: &mut R,
) -> Result<Vec<u8>> {
    let z = sample_latent(schedule, rng, |z, k| denoiser.predict(store, z, k, fv, fa))?;
    decode_latent(&z)
}

/// `DW0I` dump: magic, then width, height and channels as u32 LE, then raw bytes.
pub fn encode_image_dump(image: &[u8]) -> Result<Vec<u8>> {
    if image.len() != IMAGE_BYTES {
        return Err(invalid(format!("image of {} bytes", image.len())));
    }
    let mut out = Vec::with_capacity(16 + IMAGE_BYTES);
    out.extend_from_slice(IMAGE_DUMP_MAGIC);
    for v in [IMAGE_SIZE as u32, IMAGE_SIZE as u32, 3] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(image);
    Ok(out)
}

pub fn decode_image_dump(bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() < 16 || &bytes[..4] != IMAGE_DUMP_MAGIC {
        return Err(invalid("not an image dump"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (w, h, c) = (word(4), word(8), word(12));
    if bytes.len() != 16 + w * h * c {
        return Err(invalid(format!(
            "{w}x{h}x{c} dump with {} payload bytes",
            bytes.len() - 16
        )));
    }
    Ok(bytes[16..].to_vec())
}

pub fn write_image_dump(path: &Path, image: &[u8]) -> Result<()> {
    let bytes = encode_image_dump(image)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn schedule_bounds() {
        let s = NoiseSchedule::default();
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(1).unwrap() > 0.99);
        assert!(s.alpha_bar(STEPS).unwrap() < 0.05);
        assert!(s.alpha_bar(0).is_err());
        assert!(s.alpha_bar(STEPS + 1).is_err());
    }

    #[test]
    fn noising_limits() {
        let s = NoiseSchedule::default();
        let z: Vec<f64> = (0..LATENT_DIM).map(|i| (i as f64 / 47.0) * 2.0 - 1.0).collect();
        let zero = vec![0.0; LATENT_DIM];
        let zk = s.noising(&z, 5, &zero).unwrap();
        let a = s.alpha_bar(5).unwrap().sqrt();
        for (x, y) in zk.iter().zip(&z) {
            assert_eq!(*x, a * y);
        }
        let one = vec![1.0; LATENT_DIM];
        let z1 = s.noising(&z, 1, &one).unwrap();
        let ab = s.alpha_bar(1).unwrap();
        for (x, y) in z1.iter().zip(&z) {
            assert!((x - y).abs() <= (1.0 - ab.sqrt()) * y.abs() + (1.0 - ab).sqrt() + 1e-12);
            assert!((x - y).abs() < 0.04);
        }
    }

    #[test]
    fn latent_round_trip_is_block_mean() {
        let img: Vec<u8> = (0..IMAGE_BYTES).map(|i| (i * 31 % 251) as u8).collect();
        let z = encode_latent(&img).unwrap();
        assert!(z.iter().all(|v| (-1.0..=1.0).contains(v)));
        let back = decode_latent(&z).unwrap();
        for r in 0..IMAGE_SIZE {
            for c in 0..IMAGE_SIZE {
                for ch in 0..3 {
                    let (br, bc) = (r / BLOCK * BLOCK, c / BLOCK * BLOCK);
                    let mut s = 0.0;
                    for rr in br..br + BLOCK {
                        for cc in bc..bc + BLOCK {
                            s += img[(rr * IMAGE_SIZE + cc) * 3 + ch] as f64;
                        }
                    }
                    let mean = s / 64.0;
                    assert!((back[(r * IMAGE_SIZE + c) * 3 + ch] as f64 - mean).abs() <= 0.5 + 1e-9);
                }
            }
        }
        let flat = vec![77u8; IMAGE_BYTES];
        let zf = encode_latent(&flat).unwrap();
        assert!(zf.iter().all(|&v| v == zf[0]));
    }

    #[test]
    fn encode_superposition() {
        let a: Vec<u8> = (0..IMAGE_BYTES).map(|i| (i % 100) as u8).collect();
        let b: Vec<u8> = (0..IMAGE_BYTES).map(|i| (i * 7 % 100) as u8).collect();
        let ab: Vec<u8> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let zero = vec![0u8; IMAGE_BYTES];
        let (za, zb, zab, z0) = (
            encode_latent(&a).unwrap(),
            encode_latent(&b).unwrap(),
            encode_latent(&ab).unwrap(),
            encode_latent(&zero).unwrap(),
        );
        for i in 0..LATENT_DIM {
            assert!((zab[i] - (za[i] + zb[i] - z0[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn planted_denoiser_recovers_latent() {
        let s = NoiseSchedule::default();
        let target: Vec<f64> = (0..LATENT_DIM).map(|i| ((i as f64) * 0.37).sin() * 0.9).collect();
        let mut r = rng::rng(11, rng::streams::NOISE, 0);
        let z = sample_latent(&s, &mut r, |zk, k| {
            let ab = s.alpha_bar(k)?;
            Ok(zk
                .iter()
                .zip(&target)
                .map(|(x, t)| (x - ab.sqrt() * t) / (1.0 - ab).sqrt())
                .collect())
        })
        .unwrap();
        for (a, b) in z.iter().zip(&target) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn dump_round_trip() {
        let img: Vec<u8> = (0..IMAGE_BYTES).map(|i| (i % 256) as u8).collect();
        let bytes = encode_image_dump(&img).unwrap();
        assert_eq!(&bytes[..4], b"DW0I");
        assert_eq!(bytes.len(), 16 + IMAGE_BYTES);
        assert_eq!(decode_image_dump(&bytes).unwrap(), img);
    }
}

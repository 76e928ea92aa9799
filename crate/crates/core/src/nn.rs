//! Parameterised layers shared by the backbone, the action expert and the
//! diffusion denoiser.

use rand::Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Result, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        std: f64,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.insert(&format!("{name}.w"), Tensor::randn(&[din, dout], std, rng))?;
        let b = if bias {
            Some(store.insert(&format!("{name}.b"), Tensor::zeros(&[dout]))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize) -> Result<Self> {
        let w = store.insert(&format!("{name}.w"), Tensor::zeros(&[din, dout]))?;
        let b = Some(store.insert(&format!("{name}.b"), Tensor::zeros(&[dout]))?);
        Ok(Self { w, b })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.insert(&format!("{name}.g"), Tensor::filled(&[d], T::one()))?,
            bias: store.insert(&format!("{name}.b"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Pre-norm transformer block whose attention runs at width `attn`, which
/// may differ from the residual width `d`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Attention inputs of one block.
#[derive(Clone, Copy, Debug)]
pub struct Qkv {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

impl Block {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        attn: usize,
        mlp: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let s_in = 1.0 / (d as f64).sqrt();
        let s_out = |fan: usize| 1.0 / (fan as f64).sqrt() / (2.0 * depth as f64).sqrt();
        Ok(Self {
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), d)?,
            wq: Linear::init(store, &format!("{name}.wq"), d, attn, s_in, true, rng)?,
            wk: Linear::init(store, &format!("{name}.wk"), d, attn, s_in, true, rng)?,
            wv: Linear::init(store, &format!("{name}.wv"), d, attn, s_in, true, rng)?,
            wo: Linear::init(store, &format!("{name}.wo"), attn, d, s_out(attn), true, rng)?,
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), d)?,
            fc1: Linear::init(store, &format!("{name}.fc1"), d, mlp, s_in, true, rng)?,
            fc2: Linear::init(store, &format!("{name}.fc2"), mlp, d, s_out(mlp), true, rng)?,
        })
    }

    pub fn qkv<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Qkv> {
        let h = self.ln1.forward(g, x)?;
        Ok(Qkv {
            q: self.wq.forward(g, h)?,
            k: self.wk.forward(g, h)?,
            v: self.wv.forward(g, h)?,
        })
    }

    /// Residual attention output followed by the residual MLP.
    pub fn finish<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, attended: Var) -> Result<Var> {
        let a = self.wo.forward(g, attended)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}

/// Sinusoidal embedding of a scalar, `dim` values (sines then cosines).
pub fn sinusoidal(t: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_at_zero() {
        let e = sinusoidal(0.0, 8, 10_000.0);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}

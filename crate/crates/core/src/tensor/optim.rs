//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use super::{ParamStore, Result, Scalar, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN or infinity; nothing was updated.
    SkippedNonFinite,
}

/// Optimizer state: one pair of moment buffers per parameter.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    /// Per-parameter learning-rate multiplier.
    lr_scale: Vec<f64>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Self {
        let first = params
            .entries()
            .iter()
            .map(|e| vec![T::zero(); e.tensor.len()])
            .collect::<Vec<_>>();
        Self {
            config,
            second: first.clone(),
            lr_scale: vec![1.0; first.len()],
            first,
            step: 0,
        }
    }

    /// Multiplies the learning rate of every parameter whose name starts with `prefix`.
    pub fn scale_lr_prefix(&mut self, params: &ParamStore<T>, prefix: &str, scale: f64) {
        for (s, e) in self.lr_scale.iter_mut().zip(params.entries()) {
            if e.name.starts_with(prefix) {
                *s = scale;
            }
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` is indexed like the parameter store; `None`
    /// entries receive no gradient step but still decay; frozen parameters are untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: f64) -> Result<StepOutcome> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(TensorError::Invalid {
                op: "optimizer_step",
                msg: format!(
                    "state for {} params, {} gradients, store holds {}",
                    self.first.len(),
                    grads.len(),
                    params.len()
                ),
            });
        }
        let finite = grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let eps = T::lit(c.eps);
        let (ibc1, ibc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        for id in params.ids().collect::<Vec<_>>() {
            if !params.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let lr_t = T::lit(lr * self.lr_scale[i]);
            let decay = T::lit(lr * self.lr_scale[i] * c.weight_decay);
            let p = params.get_mut(id).data_mut();
            if let Some(g) = &grads[i] {
                let (m, v) = (&mut self.first[i], &mut self.second[i]);
                for j in 0..p.len() {
                    m[j] = b1 * m[j] + ob1 * g[j];
                    v[j] = b2 * v[j] + ob2 * g[j] * g[j];
                    let mhat = m[j] * ibc1;
                    let vhat = v[j] * ibc2;
                    p[j] = p[j] - decay * p[j] - lr_t * mhat / (vhat.sqrt() + eps);
                }
            } else if c.weight_decay != 0.0 {
                for x in p.iter_mut() {
                    *x = *x - decay * *x;
                }
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Linear warmup to `peak` over `warmup_steps`, then cosine decay to
/// `floor_frac * peak` at `total_steps`.
pub fn cosine_lr(step: u64, warmup_steps: u64, total_steps: u64, peak: f64, floor_frac: f64) -> Result<f64> {
    if total_steps <= warmup_steps {
        return Err(TensorError::Invalid {
            op: "cosine_lr",
            msg: format!("total steps {total_steps} must exceed warmup {warmup_steps}"),
        });
    }
    if step > total_steps {
        return Err(TensorError::Invalid {
            op: "cosine_lr",
            msg: format!("step {step} beyond total {total_steps}"),
        });
    }
    if step < warmup_steps {
        return Ok(peak * step as f64 / warmup_steps as f64);
    }
    let floor = floor_frac * peak;
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(x)).unwrap();
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut s = scalar_store(0.7);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&s, cfg);
        for _ in 0..5 {
            opt.step(&mut s, &[Some(vec![0.0])], 1e-2).unwrap();
        }
        assert_eq!(s.entries()[0].tensor.data(), &[0.7]);
    }

    #[test]
    fn moves_against_gradient_sign() {
        let mut s = scalar_store(0.0);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        opt.step(&mut s, &[Some(vec![1.0])], 1e-3).unwrap();
        assert!(s.entries()[0].tensor.data()[0] < 0.0);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        let out = opt.step(&mut s, &[Some(vec![f64::NAN])], 1e-3).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(opt.step_count(), 0);
        assert_eq!(s.entries()[0].tensor.data(), &[1.0]);
    }

    #[test]
    fn quadratic_converges_in_100_steps() {
        // Direct simulation on f(x) = x^2 from x = 1.
        let mut s = scalar_store(1.0);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        let id = s.id("x").unwrap();
        for _ in 0..100 {
            let grads = {
                let mut g = Graph::new(&s);
                let x = g.param(id);
                let sq = g.mul(x, x).unwrap();
                let l = g.sum(sq);
                g.backward(l).unwrap().into_param_grads()
            };
            opt.step(&mut s, &grads, 0.05).unwrap();
        }
        assert!(s.get(id).data()[0].abs() < 0.05, "{}", s.get(id).data()[0]);
    }

    #[test]
    fn cosine_schedule_landmarks() {
        let (peak, floor) = (2e-4, 0.1);
        assert_eq!(cosine_lr(100, 100, 1100, peak, floor).unwrap(), peak);
        assert!((cosine_lr(1100, 100, 1100, peak, floor).unwrap() - floor * peak).abs() < 1e-18);
        let mid = cosine_lr(600, 100, 1100, peak, floor).unwrap();
        assert!((mid - (peak + floor * peak) / 2.0).abs() < 1e-9);
        assert!((cosine_lr(50, 100, 1100, peak, floor).unwrap() - peak / 2.0).abs() < 1e-18);
        assert!(cosine_lr(0, 100, 100, peak, floor).is_err());
    }
}

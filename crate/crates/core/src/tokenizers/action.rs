//! Trajectory tokens: orthonormal DCT-II per axis over the six waypoints,
//! uniform quantisation `round(gamma * c)` clamped to [-128, 127].

use std::f64::consts::PI;

use super::{Result, TokenizerError, ACTION_BASE, ACTION_TOKENS};
use crate::gridworld::{Trajectory, HORIZON, WORKSPACE_BOUND};

pub const COEFFS: usize = 2 * HORIZON;
pub const SYMBOL_MIN: i32 = -128;
pub const SYMBOL_MAX: i32 = 127;

fn basis(k: usize, n: usize) -> f64 {
    let len = HORIZON as f64;
    let s = if k == 0 { (1.0 / len).sqrt() } else { (2.0 / len).sqrt() };
    s * (PI * (n as f64 + 0.5) * k as f64 / len).cos()
}

pub fn dct_forward(x: &[f64; HORIZON]) -> [f64; HORIZON] {
    std::array::from_fn(|k| (0..HORIZON).map(|n| basis(k, n) * x[n]).sum())
}

pub fn dct_inverse(c: &[f64; HORIZON]) -> [f64; HORIZON] {
    std::array::from_fn(|n| (0..HORIZON).map(|k| basis(k, n) * c[k]).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionTokenizer {
    pub gamma: f64,
}

impl ActionTokenizer {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(TokenizerError::Invalid(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self { gamma })
    }

    /// Coefficients x0..x5 then y0..y5.
    pub fn coefficients(t: &Trajectory) -> [f64; COEFFS] {
        let xs: [f64; HORIZON] = std::array::from_fn(|i| t.0[i][0]);
        let ys: [f64; HORIZON] = std::array::from_fn(|i| t.0[i][1]);
        let (cx, cy) = (dct_forward(&xs), dct_forward(&ys));
        std::array::from_fn(|i| if i < HORIZON { cx[i] } else { cy[i - HORIZON] })
    }

    pub fn symbols(&self, t: &Trajectory) -> Result<[i32; COEFFS]> {
        if !t.is_finite() || !t.in_bounds(WORKSPACE_BOUND) {
            return Err(TokenizerError::OutOfBounds { bound: WORKSPACE_BOUND });
        }
        let c = Self::coefficients(t);
        Ok(std::array::from_fn(|i| {
            ((self.gamma * c[i]).round() as i64).clamp(SYMBOL_MIN as i64, SYMBOL_MAX as i64) as i32
        }))
    }

    pub fn tokenize(&self, t: &Trajectory) -> Result<[usize; COEFFS]> {
        let s = self.symbols(t)?;
        Ok(std::array::from_fn(|i| ACTION_BASE + (s[i] - SYMBOL_MIN) as usize))
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<Trajectory> {
        if ids.len() != COEFFS {
            return Err(TokenizerError::Length {
                expected: COEFFS,
                got: ids.len(),
            });
        }
        let range = ACTION_BASE..ACTION_BASE + ACTION_TOKENS;
        let mut c = [0.0; COEFFS];
        for (ci, &id) in c.iter_mut().zip(ids) {
            if !range.contains(&id) {
                return Err(TokenizerError::OutOfRange { id, range });
            }
            *ci = ((id - ACTION_BASE) as i32 + SYMBOL_MIN) as f64 / self.gamma;
        }
        let cx: [f64; HORIZON] = std::array::from_fn(|i| c[i]);
        let cy: [f64; HORIZON] = std::array::from_fn(|i| c[HORIZON + i]);
        let (xs, ys) = (dct_inverse(&cx), dct_inverse(&cy));
        Ok(Trajectory(std::array::from_fn(|i| [xs[i], ys[i]])))
    }

    /// Largest |coordinate| for which no coefficient can clamp:
    /// |c_k| <= ||x||_2 <= sqrt(6) * max|x_n|.
    pub fn unclamped_bound(&self) -> f64 {
        SYMBOL_MAX as f64 / (self.gamma * (HORIZON as f64).sqrt())
    }

    /// Bound on the root-mean-square per-waypoint round-trip error, and so
    /// on the ADE, of unclamped trajectories: every coefficient errs by at
    /// most 0.5/gamma and the DCT is orthonormal. A single waypoint can err
    /// by up to about 2.3x this.
    pub fn error_bound(&self) -> f64 {
        std::f64::consts::SQRT_2 * 0.5 / self.gamma
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_trajectory_is_symbol_zero() {
        let tok = ActionTokenizer::new(10.0).unwrap();
        let ids = tok.tokenize(&Trajectory::zeros()).unwrap();
        assert!(ids.iter().all(|&i| i == ACTION_BASE + 128));
        assert_eq!(tok.detokenize(&ids).unwrap(), Trajectory::zeros());
    }

    #[test]
    fn constant_trajectory_has_only_dc() {
        let t = Trajectory([[1.7, 0.0]; HORIZON]);
        let c = ActionTokenizer::coefficients(&t);
        assert!((c[0] - 1.7 * 6f64.sqrt()).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dct_inverts() {
        let x = [0.3, -1.2, 4.0, 2.5, -0.7, 9.1];
        let y = dct_inverse(&dct_forward(&x));
        for i in 0..HORIZON {
            assert!((x[i] - y[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let tok = ActionTokenizer::new(10.0).unwrap();
        assert!(tok.tokenize(&Trajectory([[30.0, 0.0]; HORIZON])).is_err());
        assert!(tok.detokenize(&[ACTION_BASE; 11]).is_err());
        assert!(tok.detokenize(&[ACTION_BASE - 1; 12]).is_err());
        assert!(ActionTokenizer::new(0.0).is_err());
    }

    #[test]
    fn max_symbol_decodes_finite() {
        let tok = ActionTokenizer::new(10.0).unwrap();
        let t = tok.detokenize(&[ACTION_BASE + 255; 12]).unwrap();
        assert!(t.is_finite());
        let c = ActionTokenizer::coefficients(&t);
        assert!(c.iter().all(|v| (v - 12.7).abs() < 1e-9));
    }
}

//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// One Adam update of `param` in place.
pub fn adam_step<T: Scalar>(
    cfg: &AdamConfig,
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    param.same_shape(grad, "adam_step")?;
    param.same_shape(&state.m, "adam_step")?;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one, lr, eps) = (T::one(), T::of(cfg.lr), T::of(cfg.eps));
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let m = state.m.data_mut().iter_mut();
    let v = state.v.data_mut().iter_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::<f64>::from_fn(&[3], |i| i as f64);
        let before = p.clone();
        let mut st = AdamState::new(&[3]);
        adam_step(&cfg, &mut p, &Tensor::zeros(&[3]), &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = AdamConfig::default();
        for g in [3.7, -0.02] {
            let mut p = Tensor::<f64>::scalar(1.0);
            let mut st = AdamState::new(&[1]);
            adam_step(&cfg, &mut p, &Tensor::scalar(g), &mut st).unwrap();
            let expected = 1.0 - cfg.lr * g.signum();
            assert!((p.item() - expected).abs() < 1e-7, "{} vs {expected}", p.item());
        }
    }

    #[test]
    fn three_steps_on_square_match_hand_recurrence() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::<f64>::scalar(1.0);
        let mut st = AdamState::new(&[1]);

        // f(x) = x^2, f'(x) = 2x, unrolled by hand.
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.95 * v + 0.05 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.95f64.powi(t));
            x -= 0.001 * m_hat / (v_hat.sqrt() + 1e-8);

            let grad = Tensor::scalar(2.0 * p.item());
            adam_step(&cfg, &mut p, &grad, &mut st).unwrap();
            assert!((p.item() - x).abs() < 1e-9);
        }
        assert_eq!(st.t, 3);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let mut st = AdamState::new(&[2]);
        assert!(adam_step(&AdamConfig::default(), &mut p, &Tensor::zeros(&[3]), &mut st).is_err());
    }

    #[test]
    fn step_is_bit_deterministic() {
        let cfg = AdamConfig::default();
        let run = || {
            let mut p = Tensor::<f32>::from_fn(&[5], |i| (i as f32).sin());
            let g = Tensor::<f32>::from_fn(&[5], |i| (i as f32 * 1.3).cos());
            let mut st = AdamState::new(&[5]);
            for _ in 0..4 {
                adam_step(&cfg, &mut p, &g, &mut st).unwrap();
            }
            p.into_data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}

//! Bias-corrected Adam.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::Parameters;
use crate::tensor::{ParamKey, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers keyed by parameter, plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub m: BTreeMap<ParamKey, Vec<T>>,
    pub v: BTreeMap<ParamKey, Vec<T>>,
    pub step: u64,
}

/// One update of every selected trainable parameter from its gradient buffer.
pub fn adam_step<T: Scalar, P: Parameters<T> + ?Sized>(
    params: &mut P,
    state: &mut OptimizerState<T>,
    cfg: &AdamConfig,
    lr_t: f64,
    select: &dyn Fn(ParamKey) -> bool,
) -> Result<()> {
    let keys: Vec<ParamKey> = params.keys().into_iter().filter(|k| select(*k)).collect();
    for &k in &keys {
        let p = params.param_mut(k).expect("listed key");
        if let Some(g) = p.grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {k:?} at index {i} is {}", g[i])));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (one, lr, eps) = (T::one(), T::lit(lr_t), T::lit(cfg.eps));
    for k in keys {
        let p = params.param_mut(k).expect("listed key");
        if !p.requires_grad() {
            continue;
        }
        let Some(g) = p.grad().map(|g| g.to_vec()) else { continue };
        let n = g.len();
        let m = state.m.entry(k).or_insert_with(|| vec![T::zero(); n]);
        let v = state.v.entry(k).or_insert_with(|| vec![T::zero(); n]);
        if m.len() != n || v.len() != n {
            return dim_err(format!("optimizer buffers of {k:?} do not match the parameter"));
        }
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamList;
    use crate::tensor::Tensor;

    fn one_param(w: f64, g: f64) -> ParamList<f64> {
        let mut t = Tensor::parameter(vec![1], vec![w]).unwrap();
        t.accumulate_grad(&[g]).unwrap();
        ParamList(vec![t])
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let mut p = one_param(0.0, 1.0);
        let mut s = OptimizerState::default();
        adam_step(&mut p, &mut s, &AdamConfig::default(), 0.1, &|_| true).unwrap();
        // m̂ = 1, v̂ = 1, so w = −0.1 / (1 + 1e-8)
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((p.0[0].data()[0] - expect).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_alone() {
        let mut p = one_param(0.7, 0.0);
        let mut s = OptimizerState::default();
        adam_step(&mut p, &mut s, &AdamConfig::default(), 0.1, &|_| true).unwrap();
        assert_eq!(p.0[0].data()[0], 0.7);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = one_param(0.0, f64::NAN);
        let err = adam_step(&mut p, &mut OptimizerState::default(), &AdamConfig::default(), 0.1, &|_| true);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p.0[0].data()[0], 0.0);
    }

    #[test]
    fn recurrence_matches_a_hand_evaluation_over_three_steps() {
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.01);
        let grads = [0.5, -1.0, 2.0];
        let mut p = one_param(1.0, 0.0);
        let mut s = OptimizerState::default();
        let (mut m, mut v, mut w) = (0.0, 0.0, 1.0);
        for (t, g) in grads.iter().enumerate() {
            p.0[0].zero_grad();
            p.0[0].accumulate_grad(&[*g]).unwrap();
            adam_step(&mut p, &mut s, &AdamConfig::default(), lr, &|_| true).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let k = (t + 1) as i32;
            w -= lr * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + eps);
            assert!((p.0[0].data()[0] - w).abs() < 1e-14);
        }
    }
}

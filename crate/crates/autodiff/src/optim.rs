use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Moment estimates and step counter of the Adam optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update of every parameter present in `grads`.
///
/// All gradients are validated before any parameter moves, so a failed step
/// leaves both the store and the state untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(AutodiffError::Contract(format!("learning rate must be > 0, got {lr}")));
    }
    for (name, g) in grads {
        let p = params.param(name)?;
        if p.shape() != g.shape() {
            return Err(AutodiffError::Dimension {
                op: "adam_step",
                detail: format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
        if !g.all_finite() {
            return Err(AutodiffError::NonFiniteGradient(name.clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let p = params.param_mut(name)?;
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert_param("w", Tensor::scalar(w));
        s
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = scalar_store(0.5);
        let mut st = AdamState::default();
        adam_step(&mut p, &grad(0.0), &mut st, 0.01).unwrap();
        assert_eq!(p.param("w").unwrap().data(), &[0.5]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_store(0.0);
        let mut st = AdamState::default();
        adam_step(&mut p, &grad(1.0), &mut st, 0.01).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let expected = -0.01 * 1.0 / (1.0 + 1e-8);
        assert!((p.param("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn minimizes_square() {
        let mut p = scalar_store(1.0);
        let mut st = AdamState::default();
        for _ in 0..200 {
            let w = p.param("w").unwrap().data()[0];
            adam_step(&mut p, &grad(2.0 * w), &mut st, 0.1).unwrap();
        }
        assert!(p.param("w").unwrap().data()[0].abs() < 1e-2);
        assert_eq!(st.t, 200);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut p = scalar_store(1.0);
        let mut st = AdamState::default();
        let err = adam_step(&mut p, &grad(f64::NAN), &mut st, 0.1).unwrap_err();
        assert!(matches!(&err, AutodiffError::NonFiniteGradient(n) if n == "w"));
        assert_eq!(st.t, 0);
        assert_eq!(p.param("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_positive_learning_rate_is_rejected() {
        let mut p = scalar_store(1.0);
        let mut st = AdamState::default();
        assert!(adam_step(&mut p, &grad(1.0), &mut st, 0.0).is_err());
    }
}

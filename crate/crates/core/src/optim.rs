//! Adaptive-moment optimizer with bias correction.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("adam eps must be > 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates per parameter, plus the update count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T: Real = f32> {
    pub t: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn zeros_like(params: &BTreeMap<String, Tensor<T>>) -> Self {
        let zeros: BTreeMap<_, _> = params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        Self {
            t: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// Outcome of one optimizer call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN/Inf; parameters and state were left untouched.
    SkippedNonFinite,
}

/// One Adam update. Parameters without a gradient entry are treated as
/// having zero gradient.
pub fn adam_step<T: Real>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    config: &AdamConfig,
) -> Result<StepOutcome> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(shape_err!("gradient of {name} has shape {:?}", g.shape()));
        }
        if !g.data().iter().all(|v| v.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
    }

    state.t += 1;
    let t = state.t as f64;
    let b1 = T::from_f64_lossy(config.beta1);
    let b2 = T::from_f64_lossy(config.beta2);
    let one = T::one();
    let bias1 = T::from_f64_lossy(1.0 - config.beta1.powf(t));
    let bias2 = T::from_f64_lossy(1.0 - config.beta2.powf(t));
    let lr = T::from_f64_lossy(config.learning_rate);
    let eps = T::from_f64_lossy(config.eps);

    for (name, p) in params.iter_mut() {
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let zeros;
        let g = match grads.get(name) {
            Some(g) => g.data(),
            None => {
                zeros = vec![T::zero(); p.len()];
                &zeros
            }
        };
        for (((w, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g)
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(StepOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([(name.to_string(), Tensor::full(&[1], v))])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single("w", 0.7);
        let mut state = AdamState::zeros_like(&p);
        let out = adam_step(&mut p, &single("w", 0.0), &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(out, StepOutcome::Applied);
        assert_eq!(p["w"].data(), &[0.7]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let config = AdamConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        let mut p = single("w", 1.0);
        let mut state = AdamState::default();
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let w = p["w"].data()[0];
            assert!(w.abs() < prev);
            prev = w.abs();
            adam_step(&mut p, &single("w", 2.0 * w), &mut state, &config).unwrap();
        }
        // Early Adam steps have magnitude close to the learning rate.
        assert!((p["w"].data()[0] - 0.5).abs() < 0.05);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = single("w", 1.0);
        let mut state = AdamState::zeros_like(&p);
        let mut g = single("w", 0.0);
        g.get_mut("w").unwrap().data_mut()[0] = f64::NAN;
        let out = adam_step(&mut p, &g, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(p["w"].data(), &[1.0]);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn rejects_unknown_or_misshaped_gradients() {
        let mut p = single("w", 1.0);
        let mut state = AdamState::default();
        assert!(adam_step(&mut p, &single("u", 1.0), &mut state, &AdamConfig::default()).is_err());
        let g = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        assert!(adam_step(&mut p, &g, &mut state, &AdamConfig::default()).is_err());
    }
}

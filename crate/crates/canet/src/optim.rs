//! Adam optimizer over named parameters.
//!
//! Moment buffers are keyed by parameter name and created lazily on the
//! first gradient a parameter receives, so frozen sub-networks never grow
//! state. Every gradient is validated finite before anything mutates: a bad
//! step is rejected whole.

use crate::error::{Error, Result};
use crate::params::{Kind, ParamSet};
use crate::scalar::Scalar;
use std::collections::BTreeMap;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

pub struct Adam<S: Scalar> {
    pub lr: f64,
    t: u64,
    m: BTreeMap<String, Vec<S>>,
    v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update from named gradients. Parameters without a gradient
    /// entry are untouched; a non-finite gradient aborts before any mutation.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &BTreeMap<String, Vec<S>>) -> Result<()> {
        for (name, g) in grads {
            if !g.iter().all(|v| v.as_f64().is_finite()) {
                return Err(Error::Train(format!("non-finite gradient for parameter {name}")));
            }
            assert_eq!(
                params.kind(name),
                Kind::Param,
                "gradient supplied for non-learnable entry {name}"
            );
            assert_eq!(
                params.get(name).numel(),
                g.len(),
                "gradient length mismatch for {name}"
            );
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![S::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![S::zero(); g.len()]);
            let p = params.get_mut(name).data_mut();
            for i in 0..g.len() {
                let gi = g[i].as_f64();
                let mi = BETA1 * m[i].as_f64() + (1.0 - BETA1) * gi;
                let vi = BETA2 * v[i].as_f64() + (1.0 - BETA2) * gi * gi;
                m[i] = S::fr(mi);
                v[i] = S::fr(vi);
                let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + EPS);
                p[i] = S::fr(p[i].as_f64() - update);
            }
        }
        Ok(())
    }

    // ── checkpoint access ───────────────────────────────────────────────

    pub fn moments(&self) -> (&BTreeMap<String, Vec<S>>, &BTreeMap<String, Vec<S>>) {
        (&self.m, &self.v)
    }

    pub fn restore(lr: f64, t: u64, m: BTreeMap<String, Vec<S>>, v: BTreeMap<String, Vec<S>>) -> Self {
        Adam { lr, t, m, v }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_params(w: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(w), Kind::Param);
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_bit_unchanged() {
        let mut p = scalar_params(0.7312591);
        let before = p.get("w").data()[0].to_bits();
        let mut opt = Adam::new(0.01);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0]);
        opt.step(&mut p, &grads).unwrap();
        assert_eq!(p.get("w").data()[0].to_bits(), before);
    }

    #[test]
    fn absent_gradient_means_no_touch_and_no_state() {
        let mut p = scalar_params(1.0);
        p.insert("frozen", Tensor::scalar(2.0), Kind::Param);
        let mut opt = Adam::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.5]);
        opt.step(&mut p, &grads).unwrap();
        assert_eq!(p.get("frozen").data()[0], 2.0);
        assert!(!opt.moments().0.contains_key("frozen"));
        assert!(opt.moments().0.contains_key("w"));
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        let mut p = scalar_params(1.0);
        let mut opt = Adam::new(0.01);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.5]);
        opt.step(&mut p, &grads).unwrap();
        let delta = 1.0 - p.get("w").data()[0];
        // bias-corrected first step: lr * g / (|g| + eps) ~= lr
        assert!((delta - 0.01).abs() < 1e-6, "delta {delta}");
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn hundred_steps_shrink_quadratic() {
        let mut p = scalar_params(1.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..100 {
            let w = p.get("w").data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), vec![2.0 * w]);
            opt.step(&mut p, &grads).unwrap();
        }
        let w = p.get("w").data()[0];
        assert!(w.abs() < 0.1, "w after 100 steps: {w}");
    }

    #[test]
    fn nan_gradient_aborts_naming_parameter() {
        let mut p = scalar_params(1.0);
        p.insert("bad.w", Tensor::scalar(1.0), Kind::Param);
        let mut opt = Adam::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.1]);
        grads.insert("bad.w".to_string(), vec![f64::NAN]);
        let err = opt.step(&mut p, &grads).unwrap_err();
        assert!(err.to_string().contains("bad.w"), "{err}");
        // nothing moved, step counter untouched
        assert_eq!(p.get("w").data()[0], 1.0);
        assert_eq!(opt.step_count(), 0);
    }
}

//! Bias-corrected Adam with optional global-norm gradient clipping.

use super::{ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip threshold; 0 disables clipping.
    pub clip: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 5.0,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            ..Default::default()
        }
    }
}

/// First/second moment estimates per parameter, plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect::<Vec<_>>();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One optimizer step over every parameter in the store. Gradients are
/// clipped by global norm first, consumed, and zeroed on success. Non-finite
/// gradients abort the step with the parameters untouched.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, hyper: &AdamHyper) -> Result<()> {
    if !store.grads_finite() {
        return Err(Error::Numeric("non-finite gradient, step aborted".into()));
    }
    if hyper.clip > 0.0 {
        let norm = store.global_grad_norm();
        if norm > hyper.clip {
            store.scale_grads(hyper.clip / norm);
        }
    }
    state.t += 1;
    let bc1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.value(id).len();
        for j in 0..n {
            let g = store.grad(id).data()[j];
            let m = &mut state.m[id.0].data_mut()[j];
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            let mj = *m;
            let v = &mut state.v[id.0].data_mut()[j];
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            let vj = *v;
            let update = hyper.lr * (mj / bc1) / ((vj / bc2).sqrt() + hyper.eps);
            store.value_mut(id).data_mut()[j] -= update;
        }
    }
    store.zero_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, &AdamHyper::default()).unwrap();
        assert_eq!(store.value(p).data(), &[1.0, -2.0]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // With g=1 the bias-corrected update is lr/(1+eps) on step one.
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::vector(vec![0.5])).unwrap();
        store.grad_mut(p).data_mut()[0] = 1.0;
        let mut state = AdamState::new(&store);
        let hyper = AdamHyper {
            clip: 0.0,
            ..AdamHyper::with_lr(0.001)
        };
        adam_step(&mut store, &mut state, &hyper).unwrap();
        let delta = store.value(p).data()[0] - 0.5;
        assert!((delta + 0.001 / (1.0 + 1e-8)).abs() < 1e-12);
        // grads consumed
        assert_eq!(store.grad(p).data(), &[0.0]);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::vector(vec![0.3])).unwrap();
        let b = store.register("b", Tensor::vector(vec![0.3])).unwrap();
        store.grad_mut(a).data_mut()[0] = -0.7;
        store.grad_mut(b).data_mut()[0] = -0.7;
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &mut state, &AdamHyper::default()).unwrap();
        assert_eq!(store.value(a).data(), store.value(b).data());
    }

    #[test]
    fn non_finite_grad_aborts() {
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::vector(vec![1.0])).unwrap();
        store.grad_mut(p).data_mut()[0] = f64::NAN;
        let mut state = AdamState::new(&store);
        assert!(adam_step(&mut store, &mut state, &AdamHyper::default()).is_err());
        assert_eq!(store.value(p).data(), &[1.0]);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn clipping_bounds_update_norm() {
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::vector(vec![0.0; 4])).unwrap();
        for j in 0..4 {
            store.grad_mut(p).data_mut()[j] = 100.0;
        }
        let mut state = AdamState::new(&store);
        let hyper = AdamHyper {
            clip: 1.0,
            ..Default::default()
        };
        // After clipping, each grad is 0.5 (norm 1), so Adam sees finite
        // moderate values; just check the step ran and moved params.
        adam_step(&mut store, &mut state, &hyper).unwrap();
        assert!(store.value(p).data().iter().all(|&x| x < 0.0 && x > -0.01));
    }
}

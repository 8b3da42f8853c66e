use serde::{Deserialize, Serialize};

use super::{NetworkSpec, NnError, Parameters, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub m: Parameters<T>,
    pub v: Parameters<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(spec: &NetworkSpec, config: AdamConfig) -> Self {
        Self { config, m: Parameters::zeros(spec), v: Parameters::zeros(spec), step: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Real>(params: &mut Parameters<T>, grads: &Parameters<T>, state: &mut AdamState<T>) -> Result<()> {
    let same = |a: &Parameters<T>, b: &Parameters<T>| {
        a.layers.len() == b.layers.len()
            && a.layers.iter().zip(&b.layers).all(|(x, y)| {
                x.len() == y.len() && x.iter().zip(y).all(|(s, t)| s.shape() == t.shape())
            })
    };
    if !same(params, grads) || !same(params, &state.m) || !same(params, &state.v) {
        return Err(NnError::ShapeMismatch("optimizer state, gradients and parameters differ".into()));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as f64;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    // bias corrections folded into the step size
    let lr_t = T::of(c.lr * (1.0 - c.beta2.powf(t)).sqrt() / (1.0 - c.beta1.powf(t)));
    let eps_t = T::of(c.eps * (1.0 - c.beta2.powf(t)).sqrt());
    for (((p, g), m), v) in params.iter_mut().zip(grads.iter()).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *p -= lr_t * *m / (v.sqrt() + eps_t);
        }
    }
    Ok(())
}

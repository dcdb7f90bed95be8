//! Adam with decoupled weight decay.

use crate::autograd::Mat;
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Moment estimates, one tensor per parameter tensor across all sets.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(sets: &[&ParamSet]) -> Self {
        let zeros: Vec<Mat> = sets.iter().flat_map(|s| s.zeros_like()).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One update: `p ← p − lr·wd·p`, then `p ← p − lr·m̂/(sqrt(v̂) + eps)`.
/// `grads` is laid out like the sets, flattened in order.
pub fn optimizer_step(sets: &mut [&mut ParamSet], grads: &[Mat], state: &mut OptimizerState, cfg: &AdamWConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut idx = 0;
    for set in sets.iter_mut() {
        for p in set.iter_mut() {
            let g = &grads[idx];
            let m = &mut state.m[idx];
            let v = &mut state.v[idx];
            ndarray::Zip::from(&mut p.value).and(g).and(m).and(v).for_each(|w, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *w -= cfg.learning_rate * cfg.weight_decay * *w;
                *w -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            });
            idx += 1;
        }
    }
}

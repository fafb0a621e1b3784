use serde::{Deserialize, Serialize};

use crate::error::{MtnError, Result};

use super::params::{Gradients, ParamStore};
use super::real::Real;

/// Inverse-square-root schedule with linear warmup.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub model_dim: usize,
    pub warmup_steps: u64,
}

impl ScheduleConfig {
    pub fn new(model_dim: usize, warmup_steps: u64) -> Result<Self> {
        if warmup_steps == 0 {
            return Err(MtnError::config("train.warmup_steps", "must be at least 1"));
        }
        if model_dim == 0 {
            return Err(MtnError::config("model.dim", "must be positive"));
        }
        Ok(ScheduleConfig {
            model_dim,
            warmup_steps,
        })
    }
}

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`; `step` is 1-based.
pub fn noam_lr(step: u64, cfg: &ScheduleConfig) -> f64 {
    let step = step.max(1) as f64;
    let d = cfg.model_dim as f64;
    let w = cfg.warmup_steps as f64;
    d.powf(-0.5) * step.powf(-0.5).min(step * w.powf(-1.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moment accumulators, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || -> Vec<Vec<T>> {
            store
                .iter()
                .map(|(_, p)| vec![T::zero(); p.value.numel()])
                .collect()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, applied in place.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(MtnError::contract(format!("learning rate must be positive, got {lr}")));
    }
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(MtnError::contract("optimizer state does not match parameter set"));
    }
    for (id, g) in grads.iter() {
        if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
            return Err(MtnError::NonFinite(format!(
                "gradient of {} has a non-finite entry at index {pos}",
                store.name(id)
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let lr = T::lit(lr);
    let eps = T::lit(cfg.eps);
    for (id, g) in grads.iter() {
        let i = id.index();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = store.get_mut(id).data_mut();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().to_f64().unwrap_or(f64::NAN);
    if norm.is_finite() && norm > max_norm {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_store(x: f64) -> (ParamStore<f64>, crate::numerics::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(x)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut store, id) = scalar_store(1.25);
        let grads = Gradients::zeros_like(&store);
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &grads, &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(store.get(id).data(), &[1.25]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02] {
            let (mut store, id) = scalar_store(0.0);
            let mut grads = Gradients::zeros_like(&store);
            grads.get_mut(id)[0] = g;
            let mut st = AdamState::new(&store);
            adam_step(&mut store, &grads, &mut st, 1e-3, &AdamConfig::default()).unwrap();
            // mhat = g, vhat = g², so the step is lr·g/(|g| + eps).
            let moved = store.get(id).data()[0];
            assert!((moved + 1e-3 * f64::signum(g)).abs() < 1e-9, "{moved}");
        }
    }

    #[test]
    fn nan_gradient_aborts() {
        let (mut store, id) = scalar_store(0.0);
        let mut grads = Gradients::zeros_like(&store);
        grads.get_mut(id)[0] = f64::NAN;
        let mut st = AdamState::new(&store);
        let err = adam_step(&mut store, &grads, &mut st, 1e-3, &AdamConfig::default());
        assert!(matches!(err, Err(MtnError::NonFinite(_))));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_peaks_at_warmup() {
        let cfg = ScheduleConfig::new(512, 9660).unwrap();
        let peak = noam_lr(9660, &cfg);
        assert!((peak - 4.49652e-4).abs() < 1e-9);
        assert!(noam_lr(9659, &cfg) < peak && noam_lr(9661, &cfg) < peak);
        assert!((noam_lr(4830, &cfg) - peak / 2.0).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_norm() {
        let (store, id) = scalar_store(0.0);
        let mut grads = Gradients::zeros_like(&store);
        grads.get_mut(id)[0] = -12.0;
        assert_eq!(clip_grad_norm(&mut grads, 5.0), 12.0);
        assert_eq!(grads.get(id)[0], -5.0);
    }
}

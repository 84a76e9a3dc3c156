//! Adam with bias correction.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::params::{ParamGrads, ParamId, ParamStore};

/// Optimizer hyperparameters. Defaults are the published setting:
/// lr 1e-4, beta1 0.5, beta2 0.999, eps 1e-8.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("adam lr must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// Adam state: first/second moment accumulators per parameter plus the step
/// counter. Moment shapes mirror parameter shapes.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect::<Vec<_>>();
        let v = m.clone();
        Adam { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Parameters in `frozen` are skipped entirely (values and
    /// moments untouched). Gradients are validated before anything mutates,
    /// so an abort always leaves the store at its last finite state; the
    /// step counter advances regardless, keeping lockstep with a clean run.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &ParamGrads,
        frozen: &HashSet<ParamId>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let ids: Vec<ParamId> = store.ids().collect();
        for &id in &ids {
            if !frozen.contains(&id) && grads.get(id).iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { name: store.name(id).to_string(), step: t });
            }
        }

        let bias1 = 1.0 - self.cfg.beta1.powi(t as i32);
        let bias2 = 1.0 - self.cfg.beta2.powi(t as i32);
        for id in ids {
            if frozen.contains(&id) {
                continue;
            }
            let g = grads.get(id);
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let diverged = {
                let theta = store.get_mut(id).data_mut();
                let backup = theta.to_vec();
                for j in 0..theta.len() {
                    m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g[j];
                    v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g[j] * g[j];
                    let m_hat = m[j] / bias1;
                    let v_hat = v[j] / bias2;
                    theta[j] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                }
                if theta.iter().any(|x| !x.is_finite()) {
                    theta.copy_from_slice(&backup);
                    true
                } else {
                    false
                }
            };
            if diverged {
                return Err(Error::Diverged {
                    step: t,
                    what: format!("parameter `{}` became non-finite", store.name(id)),
                });
            }
        }
        Ok(())
    }
}

/// Scale gradients so their global L2 norm (over non-frozen parameters) does
/// not exceed `max_norm`. No-op when already within bounds.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: Real, frozen: &HashSet<ParamId>) {
    let norm = grads.global_norm(frozen);
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_store(value: Real) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("theta", Tensor::scalar(value).unwrap());
        (store, id)
    }

    fn grads_with(store: &ParamStore, id: ParamId, g: Real) -> ParamGrads {
        let mut grads = ParamGrads::zeros_like(store);
        grads.get_mut(id)[0] = g;
        grads
    }

    #[test]
    fn hand_executed_first_step() {
        // theta = 0, g = 1, step 1: m_hat = 1, v_hat = 1, update ~ -lr.
        let (mut store, id) = scalar_store(0.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let grads = grads_with(&store, id, 1.0);
        adam.step(&mut store, &grads, &HashSet::new()).unwrap();
        let theta = store.get(id).as_scalar();
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((theta - expected).abs() < 1e-18, "theta = {theta}");
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = scalar_store(0.75);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let grads = ParamGrads::zeros_like(&store);
        adam.step(&mut store, &grads, &HashSet::new()).unwrap();
        assert_eq!(store.get(id).as_scalar(), 0.75);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let (mut store, id) = scalar_store(0.3);
            let mut adam = Adam::new(&store, AdamConfig::default());
            for i in 0..50 {
                let grads = grads_with(&store, id, (i as Real * 0.37).sin());
                adam.step(&mut store, &grads, &HashSet::new()).unwrap();
            }
            store.get(id).as_scalar().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut store, id) = scalar_store(0.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let grads = grads_with(&store, id, Real::NAN);
        let err = adam.step(&mut store, &grads, &HashSet::new()).unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
    }

    #[test]
    fn frozen_parameters_are_bitwise_constant() {
        let (mut store, id) = scalar_store(0.5);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let grads = grads_with(&store, id, 2.0);
        let frozen: HashSet<ParamId> = [id].into_iter().collect();
        adam.step(&mut store, &grads, &frozen).unwrap();
        assert_eq!(store.get(id).as_scalar().to_bits(), (0.5 as Real).to_bits());
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::vector(vec![0.0, 0.0]).unwrap());
        let mut grads = ParamGrads::zeros_like(&store);
        grads.get_mut(id).copy_from_slice(&[3.0, 4.0]);
        clip_grad_norm(&mut grads, 1.0, &HashSet::new());
        let n = grads.global_norm(&HashSet::new());
        assert!((n - 1.0).abs() < 1e-12);
    }
}

//! Adam-style optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::numerics::{DenseArray, Gradients, ParamStore};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// First-moment decay.
    pub momentum_decay: f64,
    /// Second-moment decay.
    pub variance_decay: f64,
    pub eps: f64,
    /// Decoupled decay: pulled off the parameter directly, not through the
    /// adaptive scaling.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            momentum_decay: 0.9,
            variance_decay: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Optimizer state is keyed by parameter index in the store, so it survives
/// serialization as long as parameters are registered in the same order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    steps: u64,
    first: Vec<DenseArray>,
    second: Vec<DenseArray>,
}

impl Optimizer {
    pub fn new(store: &ParamStore, config: OptimizerConfig) -> Self {
        let first: Vec<DenseArray> = store
            .ids()
            .map(|id| DenseArray::zeros_like(store.get(id)))
            .collect();
        let second = first.clone();
        Self {
            config,
            steps: 0,
            first,
            second,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update over every parameter. With `learning_rate == 0` the
    /// parameters are left untouched (moments still advance).
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.steps += 1;
        let c = self.config;
        let bias1 = 1.0 - c.momentum_decay.powi(self.steps as i32);
        let bias2 = 1.0 - c.variance_decay.powi(self.steps as i32);
        for (idx, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads.get(id);
            let m = &mut self.first[idx];
            for (mv, gv) in m.data_mut().iter_mut().zip(g.iter()) {
                *mv = c.momentum_decay * *mv + (1.0 - c.momentum_decay) * gv;
            }
            let v = &mut self.second[idx];
            for (vv, gv) in v.data_mut().iter_mut().zip(g.iter()) {
                *vv = c.variance_decay * *vv + (1.0 - c.variance_decay) * gv * gv;
            }
            let m = &self.first[idx];
            let v = &self.second[idx];
            let p = store.get_mut(id);
            for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m.iter()).zip(v.iter()) {
                let m_hat = mv / bias1;
                let v_hat = vv / bias2;
                *pv -= c.learning_rate * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *pv);
            }
        }
    }
}

/// Rounds every parameter through f32, the storage format of the reduced
/// precision mode. Applied after each optimizer step so the whole run sees
/// f32-representable parameters while gradients stay in f64.
pub fn round_store_to_f32(store: &mut ParamStore) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

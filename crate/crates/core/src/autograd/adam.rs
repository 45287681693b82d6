use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter and clears gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| p.requires_grad && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id);
            if !param.requires_grad {
                param.grad = None;
                continue;
            }
            let grad = param.grad.take().expect("checked above");
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (((w, &g), mi), vi) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *w -= lr * (update + weight_decay * *w);
            }
        }
        Ok(())
    }
}

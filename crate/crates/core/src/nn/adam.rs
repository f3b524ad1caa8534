use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. One moment slot per registered parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect(),
            v: store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// Applies one update to every parameter that has a gradient. A
    /// non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} grads, {} slots, {} params", grads.len(), self.m.len(), store.len()),
            ));
        }
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                let p = store.get(id);
                if g.len() != p.value.len() {
                    return Err(Error::shape("adam_step", format!("gradient length for {}", p.name)));
                }
                if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::numeric(
                        "adam_step",
                        format!("non-finite gradient {} in {}[{}]", g[bad], p.name, bad),
                    ));
                }
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let theta = store.value_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

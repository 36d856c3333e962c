use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::{GradMap, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.99,
            weight_decay: 1e-4,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * p
/// p <- p - lr * v
/// ```
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Applies one update. Parameters absent from `grads` are treated as
    /// having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<()> {
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for (name, param) in params.iter_mut() {
            let p = param.value.data_mut();
            let g = grads.get(name);
            if let Some(g) = g {
                if g.len() != p.len() {
                    return Err(shape_err("sgd_step", format!("gradient for `{name}`")));
                }
            }
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                v[i] = momentum * v[i] + gi + weight_decay * p[i];
                p[i] -= lr * v[i];
            }
            if !p.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite { op: "sgd_step" });
            }
        }
        Ok(())
    }
}

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Weights;
use crate::tensor::Tensor;

/// Cosine annealing from `base` at iteration 0 to `floor` at `horizon`, flat afterwards.
pub fn cosine_lr(base: f64, floor: f64, horizon: u64, iter: u64) -> f64 {
    if horizon == 0 {
        return floor;
    }
    let t = iter.min(horizon) as f64 / horizon as f64;
    floor + 0.5 * (base - floor) * (1.0 + (PI * t).cos())
}

/// Gradient key of a conv weight, conv bias or scaling-factor site.
pub fn weight_key(layer: &str) -> String {
    format!("{layer}.weight")
}
pub fn bias_key(layer: &str) -> String {
    format!("{layer}.bias")
}
pub fn gamma_key(site: &str) -> String {
    format!("gamma/{site}")
}

/// Gradients keyed like [`weight_key`], [`bias_key`] and [`gamma_key`].
#[derive(Clone, Debug, Default)]
pub struct Grads(pub BTreeMap<String, Tensor>);

impl Grads {
    /// Adds `other * factor` into `self`.
    pub fn accumulate(&mut self, other: Grads, factor: f32) -> Result<()> {
        for (k, g) in other.0 {
            match self.0.get_mut(&k) {
                Some(acc) => {
                    acc.expect_shape(g.shape(), &k)?;
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += factor * b);
                }
                None => {
                    self.0.insert(k, g.map(|v| v * factor));
                }
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(Tensor::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.99
}
fn adam_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }
}

/// Adam with separate step sizes for conv parameters and scaling factors.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    fn update(&mut self, key: &str, param: &mut [f32], grad: &Tensor, lr: f64) -> Result<()> {
        if grad.numel() != param.len() {
            return Err(Error::shape(
                key,
                format!("gradient has {} entries for {} parameters", grad.numel(), param.len()),
            ));
        }
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let (m, v) = self
            .moments
            .entry(key.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, (p, &g)) in param.iter_mut().zip(grad.data()).enumerate() {
            let g = g as f64;
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            *p = (*p as f64 - step) as f32;
        }
        Ok(())
    }

    /// One step over every parameter that has a gradient.
    pub fn step(
        &mut self,
        weights: &mut Weights,
        gammas: Option<&mut BTreeMap<String, Vec<f32>>>,
        grads: &Grads,
        lr: f64,
        gamma_lr: f64,
    ) -> Result<()> {
        self.t += 1;
        for (id, k) in weights.0.iter_mut() {
            if let Some(g) = grads.0.get(&weight_key(id)) {
                self.update(&weight_key(id), k.weight.data_mut(), g, lr)?;
            }
            if let (Some(b), Some(g)) = (k.bias.as_mut(), grads.0.get(&bias_key(id))) {
                self.update(&bias_key(id), b, g, lr)?;
            }
        }
        if let Some(gammas) = gammas {
            for (site, v) in gammas.iter_mut() {
                if let Some(g) = grads.0.get(&gamma_key(site)) {
                    self.update(&gamma_key(site), v, g, gamma_lr)?;
                }
            }
        }
        Ok(())
    }
}

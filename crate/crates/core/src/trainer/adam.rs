use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over any number of parameter stores. Moments
/// are keyed by (store group, tensor index) and allocated on first use.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    cfg: AdamConfig,
    t: i32,
    moments: HashMap<(u32, usize), (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, cfg: AdamConfig) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Adam {
            lr,
            cfg,
            t: 0,
            moments: HashMap::new(),
        })
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// First and second moments of a tensor, if it has been stepped.
    pub fn moments(&self, group: u32, index: usize) -> Option<(&[f64], &[f64])> {
        self.moments.get(&(group, index)).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Updates every tensor that requires a gradient and holds one, then
    /// clears all gradient buffers. A non-finite gradient aborts before any
    /// tensor is touched.
    pub fn step(&mut self, stores: &mut [&mut ParamStore<f64>]) -> Result<()> {
        for s in stores.iter() {
            for (name, t) in s.iter() {
                if let Some(g) = t.grad().filter(|_| t.requires_grad()) {
                    if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                        return Err(Error::Diverged(format!(
                            "non-finite gradient {} in {name}[{i}] at step {}",
                            g[i],
                            self.t + 1
                        )));
                    }
                }
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for s in stores.iter_mut() {
            let group = s.group();
            for i in 0..s.len() {
                let t = s.get_mut(i);
                if !t.requires_grad() {
                    t.zero_grad();
                    continue;
                }
                let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
                let (m, v) = self
                    .moments
                    .entry((group, i))
                    .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                for (((w, &gi), mi), vi) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                }
                t.zero_grad();
            }
        }
        Ok(())
    }
}

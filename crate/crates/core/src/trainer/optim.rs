use std::f64::consts::PI;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Blob, ParamStore};
use crate::numcore::Tensor;

/// Linear warmup from 0 to `lr_max` over `warmup` steps, then a half cosine
/// down to 0 by the end of the period; restarts every `period` steps.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let p = step % cfg.period;
    if p <= cfg.warmup {
        if cfg.warmup == 0 {
            return cfg.lr_max;
        }
        return cfg.lr_max * p as f64 / cfg.warmup as f64;
    }
    let frac = (p - cfg.warmup) as f64 / (cfg.period - cfg.warmup) as f64;
    cfg.lr_max * (1.0 + (PI * frac).cos()) / 2.0
}

/// Adaptive moments with decoupled weight decay. Moments are stored in f32
/// and combined in f64.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

const M_PREFIX: &str = "train/m/";
const V_PREFIX: &str = "train/v/";

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    /// Updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update to every trainable parameter from its gradient slot,
    /// with gradients multiplied by `grad_scale` first.
    pub fn update(&mut self, params: &mut ParamStore, lr: f64, grad_scale: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        if self.m.len() < params.len() {
            self.m.resize(params.len(), Vec::new());
            self.v.resize(params.len(), Vec::new());
        }
        for (i, p) in params.iter_mut().enumerate() {
            if !p.tensor.requires_grad() {
                continue;
            }
            let n = p.tensor.numel();
            let grad = match p.tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != n {
                *m = vec![0.0; n];
                *v = vec![0.0; n];
            }
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = f64::from(grad[j]) * grad_scale;
                let mj = self.beta1 * f64::from(m[j]) + (1.0 - self.beta1) * g;
                let vj = self.beta2 * f64::from(v[j]) + (1.0 - self.beta2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let step = (mj / c1) / ((vj / c2).sqrt() + self.eps);
                *w = (f64::from(*w) * decay - lr * step) as f32;
            }
        }
    }

    /// Moment tensors as checkpoint blobs keyed by parameter name.
    pub fn state_blobs(&self, params: &ParamStore) -> Result<Vec<Blob>> {
        let mut out = Vec::new();
        for (id, p) in params.iter() {
            let i = id.index();
            if let Some(m) = self.m.get(i).filter(|m| !m.is_empty()) {
                for (prefix, data) in [(M_PREFIX, m), (V_PREFIX, &self.v[i])] {
                    out.push(Blob {
                        name: format!("{prefix}{}", p.name),
                        tensor: Tensor::new(p.tensor.shape(), data.clone())?,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Rebuild moments from [`AdamW::state_blobs`] output.
    pub fn restore(&mut self, t: u64, params: &ParamStore, blobs: &[Blob]) -> Result<()> {
        self.t = t;
        self.m = vec![Vec::new(); params.len()];
        self.v = vec![Vec::new(); params.len()];
        for b in blobs {
            let (slot, name) = if let Some(n) = b.name.strip_prefix(M_PREFIX) {
                (&mut self.m, n)
            } else if let Some(n) = b.name.strip_prefix(V_PREFIX) {
                (&mut self.v, n)
            } else {
                continue;
            };
            let id = params
                .id(name)
                .ok_or_else(|| Error::State(format!("optimizer state for unknown parameter {name}")))?;
            if params.get(id).shape() != b.tensor.shape() {
                return Err(Error::State(format!("optimizer state shape mismatch for {name}")));
            }
            slot[id.index()] = b.tensor.data().to_vec();
        }
        if self.m.iter().zip(&self.v).any(|(m, v)| m.len() != v.len()) {
            return Err(Error::State("optimizer state has unpaired moments".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(50, &cfg), cfg.lr_max / 2.0);
        assert_eq!(lr_at(100, &cfg), cfg.lr_max);
        assert!(lr_at(999, &cfg) < 1e-9);
        assert_eq!(lr_at(1000, &cfg), 0.0);
    }
}

//! AdamW and the epoch-granular linear warmup/decay schedule.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moments are kept in f32 alongside f32 parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
    t: i32,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Array2<f32>]) -> Self {
        AdamW {
            config,
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            t: 0,
        }
    }

    /// One update at learning rate `lr`. Tensors with `trainable[i] == false`
    /// are left untouched, moments included.
    pub fn step(
        &mut self,
        params: &mut [Array2<f32>],
        grads: &[Array2<f32>],
        lr: f64,
        trainable: &[bool],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() || trainable.len() != params.len() {
            return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let decay = (lr * c.weight_decay) as f32;
        let eps = c.eps as f32;
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            Zip::from(&mut params[i])
                .and(&grads[i])
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step * *m / ((*v * inv_bc2).sqrt() + eps) + decay * *p;
                });
        }
        Ok(())
    }
}

/// Linear warmup over the first `warmup` epochs, then linear decay to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub epochs: usize,
    pub warmup: usize,
}

impl LinearSchedule {
    /// Warmup length as a fraction of the run, at least one epoch.
    pub fn with_warmup_fraction(peak: f64, epochs: usize, fraction: f64) -> Self {
        let warmup = ((epochs as f64 * fraction).round() as usize).clamp(1, epochs.max(1));
        LinearSchedule { peak, epochs, warmup }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.warmup {
            self.peak * (epoch + 1) as f64 / self.warmup as f64
        } else if self.epochs > self.warmup {
            self.peak * (self.epochs - epoch) as f64 / (self.epochs - self.warmup) as f64
        } else {
            self.peak
        }
    }
}

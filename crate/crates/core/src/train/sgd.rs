//! SGD with momentum 0.9 and step decay: the learning rate is multiplied by
//! 0.1 on entering 60% and 85% of the configured epochs.

use crate::error::Result;
use crate::nn::ParamSet;

pub const MOMENTUM: f64 = 0.9;
pub const DECAY_FACTOR: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    /// Epoch indices (0-based) at which the decay factor applies.
    pub decay_epochs: Vec<usize>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, total_epochs: usize) -> Self {
        let mut decay_epochs = Vec::new();
        for frac in [0.6, 0.85] {
            let e = (total_epochs as f64 * frac).floor() as usize;
            if e > 0 && e < total_epochs {
                decay_epochs.push(e);
            }
        }
        Sgd { lr, decay_epochs, velocity: Vec::new() }
    }

    /// Apply any decay boundary scheduled for this (0-based) epoch.
    pub fn begin_epoch(&mut self, epoch: usize) {
        for &e in &self.decay_epochs {
            if e == epoch {
                self.lr *= DECAY_FACTOR;
            }
        }
    }

    /// v <- 0.9 v + g; p <- p - lr * v. Consumes parameter gradients.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), Vec::new());
        }
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let t = params.tensor_mut(id);
            let Some(grad) = t.grad.take() else { continue };
            let v = &mut self.velocity[i];
            if v.is_empty() {
                v.resize(t.data.len(), 0.0);
            }
            for ((p, vel), g) in t.data.iter_mut().zip(v.iter_mut()).zip(&grad) {
                *vel = MOMENTUM * *vel + g;
                *p -= self.lr * *vel;
            }
        }
        Ok(())
    }
}

//! SGD with (Nesterov) momentum and coupled weight decay, plus step schedules.

use crate::error::{Error, Result};
use crate::params::{GradSet, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Momentum buffers, same names as the parameters.
    pub velocity: ParamSet,
}

impl Sgd {
    pub fn new(momentum: f64, nesterov: bool, weight_decay: f64) -> Self {
        Self {
            momentum,
            nesterov,
            weight_decay,
            velocity: ParamSet::new(),
        }
    }

    /// `g ← g + λw; v ← μv + g; w ← w − lr·(g + μv | v)`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet, lr: f64) -> Result<()> {
        for (name, w) in params.iter_mut() {
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != w.shape() {
                    return Err(Error::Shape(format!("gradient of {name} has shape {:?}", g.shape())));
                }
            }
            if self.velocity.get(name).is_none() {
                self.velocity.insert(name.clone(), Tensor::zeros(w.shape()));
            }
            let v = self.velocity.get_mut(name).expect("just inserted");
            let gd = g.map(|t| t.data());
            for (i, (wi, vi)) in w.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
                let gi = gd.map_or(0.0, |d| d[i]) + self.weight_decay * *wi;
                *vi = self.momentum * *vi + gi;
                let update = if self.nesterov { gi + self.momentum * *vi } else { *vi };
                *wi -= lr * update;
            }
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: multiplied by `factor` each time a
/// milestone (fraction of total iterations) is passed.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub milestones: Vec<f64>,
    pub factor: f64,
    pub total: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            milestones: Vec::new(),
            factor: 1.0,
            total: 1,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|m| step >= (**m * self.total as f64).round() as u64)
            .count();
        self.initial * self.factor.powi(passed as i32)
    }
}

use crate::error::{Error, Result};

use super::Model;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- m * v + g + wd * p`, `p <- p - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(num_params: usize, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gradients", params.len()),
                actual: format!("{} gradients", grads.len()),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient entry {i} is {} (max |g| over finite entries {:.3e})",
                grads[i],
                grads.iter().filter(|g| g.is_finite()).fold(0.0f64, |m, g| m.max(g.abs()))
            )));
        }
        for ((p, v), g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(grads) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= lr * *v;
        }
        Ok(())
    }
}

pub fn sgd_step(model: &mut Model, opt: &mut Sgd, grads: &[f64], lr: f64) -> Result<()> {
    opt.step(model.params_mut(), grads, lr)
}

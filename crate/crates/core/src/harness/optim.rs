use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

/// Linearly decayed learning rate `lr0 · (1 − step / total)`.
pub fn lr_schedule(lr0: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    lr0 * (1.0 - step.min(total_steps) as f64 / total_steps as f64)
}

/// SGD with classical momentum and L2 weight decay folded into the
/// gradient: `b ← μ·b + (g + λ·w)`, `w ← w − lr·b`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &BTreeMap<String, Var>, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients carry their autograd history; keeping it in the
            // momentum buffer would chain every step's graph together.
            let w = var.as_tensor().detach();
            let d = (g.detach() + (&w * self.weight_decay)?)?;
            let b = match self.buffers.get(name) {
                Some(b) => ((b * self.momentum)? + d)?,
                None => d,
            }
            .detach();
            var.set(&(&w - (&b * lr)?)?)?;
            self.buffers.insert(name.clone(), b);
        }
        Ok(())
    }

    pub fn state(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn load_state(&mut self, state: BTreeMap<String, Tensor>, params: &BTreeMap<String, Var>) -> Result<()> {
        for (name, b) in &state {
            match params.get(name) {
                Some(v) if v.dims() == b.dims() => {}
                _ => return Err(Error::Checkpoint(format!("momentum buffer {name} has no matching parameter"))),
            }
        }
        self.buffers = state;
        Ok(())
    }
}

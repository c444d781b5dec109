//! First-order optimizers over model parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every tensor from its stored gradient. Tensors without a
    /// gradient are treated as having a zero gradient. Nothing is modified
    /// if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = p.grad() {
                if g.len() != p.numel() {
                    return Err(Error::Shape(format!(
                        "parameter {i}: gradient length {} for {} values",
                        g.len(),
                        p.numel()
                    )));
                }
                if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient at parameter {i}, element {j}"
                    )));
                }
            }
        }
        if self.kind == OptimizerKind::Adam && self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.kind == OptimizerKind::Adam && self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer state holds {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = p.grad().map(|g| g.to_vec()) else {
                continue;
            };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.data_mut().iter_mut().zip(&g) {
                        *w -= lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (k, w) in p.data_mut().iter_mut().enumerate() {
                        let gi = g[k];
                        m[k] = b1 * m[k] + (1.0 - b1) * gi;
                        v[k] = b2 * v[k] + (1.0 - b2) * gi * gi;
                        let mh = m[k] / bias1;
                        let vh = v[k] / bias2;
                        *w -= lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

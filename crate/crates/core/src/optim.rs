//! First-order optimizers over flat parameter vectors.
//!
//! Learning rates are given per coordinate; a zero rate freezes the
//! coordinate, which is then never written.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdamW {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    /// AdamW with the betas used for the large-model runs (0.9, 0.97).
    pub fn adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.97,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adam() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        let moments = matches!(kind, OptimizerKind::AdamW { .. });
        Self {
            kind,
            m: if moments { vec![0.0; len] } else { Vec::new() },
            v: if moments { vec![0.0; len] } else { Vec::new() },
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        debug_assert_eq!(params.len(), lr.len());
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, g), &rate) in params.iter_mut().zip(grad).zip(lr) {
                    if rate != 0.0 {
                        *p -= rate * g;
                    }
                }
            }
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for j in 0..params.len() {
                    let rate = lr[j];
                    if rate == 0.0 {
                        continue;
                    }
                    let g = grad[j];
                    self.m[j] = beta1 * self.m[j] + (1.0 - beta1) * g;
                    self.v[j] = beta2 * self.v[j] + (1.0 - beta2) * g * g;
                    let mhat = self.m[j] / c1;
                    let vhat = self.v[j] / c2;
                    params[j] -= rate * (mhat / (vhat.sqrt() + eps) + weight_decay * params[j]);
                }
            }
        }
    }
}

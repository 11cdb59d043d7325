//! First-order optimizers for the local training loop.
//!
//! State lives for one round only: clients rebuild their weights from the
//! broadcast at every round start, so moment estimates from a previous
//! round would describe a different iterate.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// A single client's optimizer for one round of local steps.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    rate: f64,
    steps: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, rate: f64, dim: usize) -> Result<Self> {
        if !rate.is_finite() || rate < 0.0 {
            return Err(Error::invalid(format!(
                "learning rate must be finite and nonnegative, got {rate}"
            )));
        }
        let moments = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => dim,
        };
        Ok(Optimizer {
            kind,
            rate,
            steps: 0,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Applies one descent step to `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::invalid(format!(
                "gradient has {} entries for {} parameters",
                grad.len(),
                params.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid("gradient contains non-finite values"));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p -= self.rate * g;
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.len() != params.len() {
                    return Err(Error::invalid(format!(
                        "optimizer sized for {} parameters, got {}",
                        self.first_moment.len(),
                        params.len()
                    )));
                }
                let t = self.steps as i32;
                let bias1 = 1.0 - ADAM_BETA1.powi(t);
                let bias2 = 1.0 - ADAM_BETA2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.first_moment[i] = ADAM_BETA1 * self.first_moment[i] + (1.0 - ADAM_BETA1) * g;
                    self.second_moment[i] =
                        ADAM_BETA2 * self.second_moment[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = self.first_moment[i] / bias1;
                    let v_hat = self.second_moment[i] / bias2;
                    params[i] -= self.rate * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                }
            }
        }
        Ok(())
    }
}

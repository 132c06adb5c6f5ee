//! First-order optimizers over named parameter lists.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!(
                "unknown optimizer '{other}' (expected sgd or adam)"
            )),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state. Adam keeps first and second moments per parameter,
/// indexed like the network's parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, sizes: &[usize]) -> Self {
        let slots = || match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam => sizes.iter().map(|&n| vec![0.0; n]).collect(),
        };
        Self {
            kind,
            learning_rate,
            step: 0,
            m: slots(),
            v: slots(),
        }
    }

    /// Restores a saved state; moment vectors must match `sizes`.
    pub fn from_state(
        kind: OptimizerKind,
        learning_rate: f64,
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if kind == OptimizerKind::Adam && m.len() != v.len() {
            return Err(Error::Checkpoint(
                "Adam moment lists differ in length".into(),
            ));
        }
        if kind == OptimizerKind::Sgd && !(m.is_empty() && v.is_empty()) {
            return Err(Error::Checkpoint("SGD state carries moment vectors".into()));
        }
        Ok(Self {
            kind,
            learning_rate,
            step,
            m,
            v,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Applies one update. `grads[i]` is `None` for frozen parameters, which
    /// are left bit-identical. With `clip`, the gradient is rescaled so its
    /// global norm does not exceed it.
    pub fn apply(
        &mut self,
        params: &[Tensor],
        grads: &[Option<&Tensor>],
        clip: Option<f64>,
    ) -> Result<Vec<Tensor>> {
        if params.len() != grads.len() {
            return Err(Error::InvalidInput(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.kind == OptimizerKind::Adam && self.m.len() != params.len() {
            return Err(Error::InvalidInput(format!(
                "optimizer holds {} moment slots for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let factor = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let lr = self.learning_rate;
        let mut out = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let Some(g) = g else {
                out.push(p.clone());
                continue;
            };
            if g.shape() != p.shape() {
                return Err(Error::InvalidInput(format!(
                    "gradient shape {:?} for parameter of shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let data: Vec<f64> = match self.kind {
                OptimizerKind::Sgd => p
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(w, g)| w - lr * factor * g)
                    .collect(),
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    p.data()
                        .iter()
                        .zip(g.data())
                        .enumerate()
                        .map(|(j, (w, g))| {
                            let g = g * factor;
                            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                            w - lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS)
                        })
                        .collect()
                }
            };
            out.push(Tensor::new(p.shape().to_vec(), data)?);
        }
        Ok(out)
    }
}

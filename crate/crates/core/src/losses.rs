//! Metric-learning and classification losses.
//!
//! Every margin term is hinged at zero. Batched triplet terms are averaged
//! over the triplets. The softmax term is weighted per sample by the
//! misclassification probability of its true class, read off a
//! [`SimilarityMatrix`] of expected softmax outputs.
//!
//! Each loss exists in two forms: a `*_on` function that records onto a
//! [`Tape`] (used by training and gradient checks) and a value-level wrapper.

use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, TensorResult, Var};
use crate::{ClassId, Error, Result};

/// Floor applied to the true-class probability inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Margins and weights of the constrained triplet and joint losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    /// Required gap between anchor-negative and anchor-positive squared distances.
    pub mu1: f64,
    /// Cap on the anchor-positive squared distance.
    pub mu2: f64,
    /// Weight of the intra-class cap term.
    pub b: f64,
    /// Softmax share of the joint loss; the triplet term gets `1 - alpha_t`.
    pub alpha_t: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            mu1: 0.5,
            mu2: 0.5,
            b: 1.0,
            alpha_t: 0.55,
        }
    }
}

impl Margins {
    pub fn validate(&self) -> Result<()> {
        let ok = self.mu1 > 0.0
            && self.mu2 > 0.0
            && self.b >= 0.0
            && self.b.is_finite()
            && (0.0..=1.0).contains(&self.alpha_t);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "margins need mu1 > 0, mu2 > 0, b >= 0 and alpha_t in [0, 1], got {self:?}"
            )))
        }
    }
}

/// Row-stochastic `k×k` matrix of expected softmax outputs per true class.
///
/// Entry `(i, j)` estimates the probability that a class-`i` sample is
/// predicted as class `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    k: usize,
    values: Vec<f64>,
    momentum: f64,
}

impl SimilarityMatrix {
    /// Every entry `1/k`.
    pub fn uniform(k: usize, momentum: f64) -> Result<Self> {
        Self::check(k, momentum)?;
        Ok(Self {
            k,
            values: vec![1.0 / k as f64; k * k],
            momentum,
        })
    }

    pub fn identity(k: usize, momentum: f64) -> Result<Self> {
        Self::check(k, momentum)?;
        let mut values = vec![0.0; k * k];
        for i in 0..k {
            values[i * k + i] = 1.0;
        }
        Ok(Self {
            k,
            values,
            momentum,
        })
    }

    /// Validates entries in `[0, 1]` and unit row sums (within 1e-9).
    pub fn from_rows(rows: &[Vec<f64>], momentum: f64) -> Result<Self> {
        let k = rows.len();
        Self::check(k, momentum)?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::InvalidInput(format!(
                    "similarity row {i} has {} entries, expected {k}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput(format!(
                    "similarity row {i} has entries outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "similarity row {i} sums to {sum}"
                )));
            }
        }
        Ok(Self {
            k,
            values: rows.concat(),
            momentum,
        })
    }

    fn check(k: usize, momentum: f64) -> Result<()> {
        if k < 2 {
            return Err(Error::InvalidInput(format!(
                "similarity matrix needs k >= 2, got {k}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "similarity momentum {momentum} outside [0, 1)"
            )));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn get(&self, i: ClassId, j: ClassId) -> f64 {
        self.values[i * self.k + j]
    }

    pub fn row(&self, i: ClassId) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.k).map(<[f64]>::to_vec).collect()
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.k, self.k], self.values.clone()).expect("k×k values")
    }

    /// Blends in the per-class mean of `softmax_outputs` (`B×k`).
    ///
    /// Classes absent from `labels` keep their current row; present ones
    /// become `momentum·old + (1 − momentum)·mean`.
    pub fn update(&self, softmax_outputs: &Tensor, labels: &[ClassId]) -> Result<Self> {
        let k = self.k;
        if softmax_outputs.shape() != [labels.len(), k] {
            return Err(Error::InvalidInput(format!(
                "softmax outputs {:?} do not match {} labels over {k} classes",
                softmax_outputs.shape(),
                labels.len()
            )));
        }
        check_labels(labels, k)?;
        let mut sums = vec![0.0; k * k];
        let mut counts = vec![0usize; k];
        for (row, &label) in softmax_outputs.data().chunks(k).zip(labels) {
            counts[label] += 1;
            for (s, v) in sums[label * k..(label + 1) * k].iter_mut().zip(row) {
                *s += v;
            }
        }
        let mut values = self.values.clone();
        for class in 0..k {
            if counts[class] == 0 {
                continue;
            }
            let n = counts[class] as f64;
            for j in 0..k {
                let idx = class * k + j;
                values[idx] =
                    self.momentum * self.values[idx] + (1.0 - self.momentum) * (sums[idx] / n);
            }
        }
        Ok(Self {
            k,
            values,
            momentum: self.momentum,
        })
    }

    /// `P_i = Σ_{j≠i} S[i][j]`.
    pub fn misclass_prob(&self, i: ClassId) -> Result<f64> {
        if i >= self.k {
            return Err(Error::InvalidInput(format!(
                "class {i} out of range for k = {}",
                self.k
            )));
        }
        Ok(self
            .row(i)
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, v)| v)
            .sum())
    }

    /// Per-sample softmax weights `P_{label}`.
    pub fn weights(&self, labels: &[ClassId]) -> Result<Vec<f64>> {
        labels.iter().map(|&c| self.misclass_prob(c)).collect()
    }
}

pub(crate) fn check_labels(labels: &[ClassId], k: usize) -> Result<()> {
    match labels.iter().find(|&&c| c >= k) {
        Some(c) => Err(Error::InvalidInput(format!(
            "label {c} out of range for k = {k}"
        ))),
        None => Ok(()),
    }
}

fn squared_distances(tape: &mut Tape, x: Var, y: Var) -> TensorResult<Var> {
    let diff = tape.sub(x, y)?;
    let sq = tape.square(diff)?;
    tape.sum_rows(sq)
}

/// `mean(max(0, ‖a−p‖² − ‖a−n‖² + mu1))` over the rows of `N×d` inputs.
pub fn triplet_loss_on(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    negatives: Var,
    mu1: f64,
) -> TensorResult<Var> {
    let d_ap = squared_distances(tape, anchors, positives)?;
    let d_an = squared_distances(tape, anchors, negatives)?;
    let gap = tape.sub(d_ap, d_an)?;
    let shifted = tape.add_scalar(gap, mu1)?;
    let hinge = tape.relu(shifted)?;
    tape.mean(hinge)
}

/// Triplet loss plus `b·mean(max(0, ‖a−p‖² − mu2))`.
pub fn constrained_triplet_loss_on(
    tape: &mut Tape,
    anchors: Var,
    positives: Var,
    negatives: Var,
    margins: &Margins,
) -> TensorResult<Var> {
    let triplet = triplet_loss_on(tape, anchors, positives, negatives, margins.mu1)?;
    if margins.b == 0.0 {
        return Ok(triplet);
    }
    let d_ap = squared_distances(tape, anchors, positives)?;
    let over = tape.add_scalar(d_ap, -margins.mu2)?;
    let hinge = tape.relu(over)?;
    let cap = tape.mean(hinge)?;
    let weighted = tape.scale(cap, margins.b)?;
    tape.add(weighted, triplet)
}

/// `mean_i(−w_i · log(max(p_i[label_i], 1e-12)))` over a `B×k` softmax output.
pub fn weighted_softmax_loss_on(
    tape: &mut Tape,
    probs: Var,
    labels: &[ClassId],
    weights: &[f64],
) -> Result<Var> {
    let k = tape.shape(probs).get(1).copied().unwrap_or(0);
    check_labels(labels, k)?;
    if weights.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} labels",
            weights.len(),
            labels.len()
        )));
    }
    let picked = tape.pick(probs, labels)?;
    let clamped = tape.clamp_min(picked, PROB_FLOOR)?;
    let logp = tape.log(clamped)?;
    let w = tape.constant(Tensor::new(vec![weights.len()], weights.to_vec())?);
    let weighted = tape.mul(logp, w)?;
    let mean = tape.mean(weighted)?;
    Ok(tape.scale(mean, -1.0)?)
}

/// `alpha·softmax_loss + (1 − alpha)·triplet_loss`.
pub fn joint_loss_on(
    tape: &mut Tape,
    softmax_loss: Var,
    triplet_loss: Var,
    alpha_t: f64,
) -> Result<Var> {
    check_alpha(alpha_t)?;
    let s = tape.scale(softmax_loss, alpha_t)?;
    let t = tape.scale(triplet_loss, 1.0 - alpha_t)?;
    Ok(tape.add(s, t)?)
}

fn check_alpha(alpha_t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha_t) {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha_t {alpha_t} outside [0, 1]")))
    }
}

fn as_batch(t: &Tensor) -> Result<Tensor> {
    match t.ndim() {
        1 => Ok(t.reshape(vec![1, t.len()])?),
        2 => Ok(t.clone()),
        _ => Err(Error::InvalidInput(format!(
            "embeddings must be d or N×d, got {:?}",
            t.shape()
        ))),
    }
}

fn triplet_vars(tape: &mut Tape, a: &Tensor, p: &Tensor, n: &Tensor) -> Result<(Var, Var, Var)> {
    let (a, p, n) = (as_batch(a)?, as_batch(p)?, as_batch(n)?);
    if a.shape() != p.shape() || a.shape() != n.shape() {
        return Err(Error::InvalidInput(format!(
            "triplet shapes differ: {:?}, {:?}, {:?}",
            a.shape(),
            p.shape(),
            n.shape()
        )));
    }
    Ok((tape.constant(a), tape.constant(p), tape.constant(n)))
}

/// Value-level [`triplet_loss_on`]; accepts one triplet (`d`) or a batch (`N×d`).
pub fn triplet_loss(
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    mu1: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, p, n) = triplet_vars(&mut tape, anchor, positive, negative)?;
    let loss = triplet_loss_on(&mut tape, a, p, n, mu1)?;
    Ok(tape.value(loss).item()?)
}

/// Value-level [`constrained_triplet_loss_on`].
pub fn constrained_triplet_loss(
    anchor: &Tensor,
    positive: &Tensor,
    negative: &Tensor,
    margins: &Margins,
) -> Result<f64> {
    margins.validate()?;
    let mut tape = Tape::new();
    let (a, p, n) = triplet_vars(&mut tape, anchor, positive, negative)?;
    let loss = constrained_triplet_loss_on(&mut tape, a, p, n, margins)?;
    Ok(tape.value(loss).item()?)
}

/// Value-level similarity-weighted softmax loss.
pub fn weighted_softmax_loss(
    softmax_outputs: &Tensor,
    labels: &[ClassId],
    sm: &SimilarityMatrix,
) -> Result<f64> {
    let weights = sm.weights(labels)?;
    let mut tape = Tape::new();
    let probs = tape.constant(softmax_outputs.clone());
    let loss = weighted_softmax_loss_on(&mut tape, probs, labels, &weights)?;
    Ok(tape.value(loss).item()?)
}

/// Unweighted cross-entropy of softmax outputs.
pub fn cross_entropy(softmax_outputs: &Tensor, labels: &[ClassId]) -> Result<f64> {
    let mut tape = Tape::new();
    let probs = tape.constant(softmax_outputs.clone());
    let loss = weighted_softmax_loss_on(&mut tape, probs, labels, &vec![1.0; labels.len()])?;
    Ok(tape.value(loss).item()?)
}

pub fn joint_loss(softmax_loss: f64, triplet_loss: f64, alpha_t: f64) -> Result<f64> {
    check_alpha(alpha_t)?;
    Ok(alpha_t * softmax_loss + (1.0 - alpha_t) * triplet_loss)
}

//! Online triplet selection inside a mini-batch and class-aware batch sampling.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::losses::SimilarityMatrix;
use crate::tensor::Tensor;
use crate::{ClassId, Error, Result};

/// Indices into a batch: anchor, positive (same class), negative (other class).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn new(anchor: usize, positive: usize, negative: usize) -> Self {
        Self {
            anchor,
            positive,
            negative,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningStrategy {
    Hard,
    SemiHard,
    Random,
}

impl FromStr for MiningStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "hard" => Ok(Self::Hard),
            "semi_hard" | "semi-hard" => Ok(Self::SemiHard),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown mining strategy '{other}'")),
        }
    }
}

impl fmt::Display for MiningStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Hard => "hard",
            Self::SemiHard => "semi_hard",
            Self::Random => "random",
        })
    }
}

/// Which strategy applies at a given epoch of metric training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningSchedule {
    Fixed(MiningStrategy),
    /// Semi-hard for the first epoch that trains the embedding, hard afterwards.
    #[default]
    SemiHardThenHard,
}

impl MiningSchedule {
    /// `metric_epoch` counts epochs since the triplet term became active (0-based).
    pub fn strategy(&self, metric_epoch: usize) -> MiningStrategy {
        match *self {
            Self::Fixed(s) => s,
            Self::SemiHardThenHard if metric_epoch == 0 => MiningStrategy::SemiHard,
            Self::SemiHardThenHard => MiningStrategy::Hard,
        }
    }
}

impl FromStr for MiningSchedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "semi_hard_then_hard" | "schedule" => Ok(Self::SemiHardThenHard),
            other => other.parse().map(Self::Fixed),
        }
    }
}

impl fmt::Display for MiningSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(s) => s.fmt(f),
            Self::SemiHardThenHard => f.write_str("semi_hard_then_hard"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
    pub mining: MiningSchedule,
    pub oversample_with_similarity: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            classes_per_batch: 4,
            samples_per_class: 4,
            mining: MiningSchedule::default(),
            oversample_with_similarity: true,
        }
    }
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes_per_batch < 2 || self.samples_per_class < 2 {
            return Err(Error::Config(format!(
                "batches need at least 2 classes and 2 samples per class, got {}×{}",
                self.classes_per_batch, self.samples_per_class
            )));
        }
        Ok(())
    }
}

/// A mini-batch of images with labels and (possibly not yet mined) triplets.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    /// `B×c×h×w`.
    pub images: Tensor,
    pub labels: Vec<ClassId>,
    pub triplets: Vec<Triplet>,
    /// Dataset index of each batch row.
    pub indices: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Checks every triplet against the label constraints.
    pub fn validate(&self) -> Result<()> {
        validate_triplets(&self.triplets, &self.labels)
    }
}

pub fn validate_triplets(triplets: &[Triplet], labels: &[ClassId]) -> Result<()> {
    let b = labels.len();
    for t in triplets {
        let in_range = t.anchor < b && t.positive < b && t.negative < b;
        if !in_range
            || t.anchor == t.positive
            || labels[t.anchor] != labels[t.positive]
            || labels[t.anchor] == labels[t.negative]
        {
            return Err(Error::InvalidInput(format!(
                "invalid triplet {t:?} for labels {labels:?}"
            )));
        }
    }
    Ok(())
}

/// Squared Euclidean distances between the rows of a `B×d` matrix.
///
/// Computed per pair, so the result is exactly symmetric with a zero diagonal.
pub fn pairwise_distances(embeddings: &Tensor) -> Result<Tensor> {
    let &[b, d] = embeddings.shape() else {
        return Err(Error::InvalidInput(format!(
            "embeddings must be B×d, got {:?}",
            embeddings.shape()
        )));
    };
    let e = embeddings.data();
    let mut out = vec![0.0; b * b];
    for i in 0..b {
        for j in i + 1..b {
            let dist: f64 = e[i * d..(i + 1) * d]
                .iter()
                .zip(&e[j * d..(j + 1) * d])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            out[i * b + j] = dist;
            out[j * b + i] = dist;
        }
    }
    Ok(Tensor::new(vec![b, b], out)?)
}

/// One triplet per anchor that has a same-class partner in the batch.
///
/// Ties are broken by the lowest index. The `rng` is only drawn from by
/// [`MiningStrategy::Random`].
pub fn mine_triplets<R: Rng + ?Sized>(
    distances: &Tensor,
    labels: &[ClassId],
    strategy: MiningStrategy,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    let b = labels.len();
    if distances.shape() != [b, b] {
        return Err(Error::InvalidInput(format!(
            "distance matrix {:?} does not match {b} labels",
            distances.shape()
        )));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::InvalidInput(
            "cannot mine triplets from a single-class batch".into(),
        ));
    }
    let d = distances.data();
    let mut triplets = Vec::with_capacity(b);
    for a in 0..b {
        let row = &d[a * b..(a + 1) * b];
        let positives: Vec<usize> = (0..b)
            .filter(|&j| j != a && labels[j] == labels[a])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let negatives: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[a]).collect();
        let triplet = match strategy {
            MiningStrategy::Random => {
                let p = positives[rng.gen_range(0..positives.len())];
                let n = negatives[rng.gen_range(0..negatives.len())];
                Triplet::new(a, p, n)
            }
            MiningStrategy::Hard => {
                Triplet::new(a, argmax(row, &positives), argmin(row, &negatives))
            }
            MiningStrategy::SemiHard => {
                let p = argmax(row, &positives);
                let harder: Vec<usize> = negatives
                    .iter()
                    .copied()
                    .filter(|&n| row[n] > row[p])
                    .collect();
                let n = if harder.is_empty() {
                    argmin(row, &negatives)
                } else {
                    argmin(row, &harder)
                };
                Triplet::new(a, p, n)
            }
        };
        triplets.push(triplet);
    }
    Ok(triplets)
}

fn argmax(row: &[f64], candidates: &[usize]) -> usize {
    let mut best = candidates[0];
    for &j in &candidates[1..] {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

fn argmin(row: &[f64], candidates: &[usize]) -> usize {
    let mut best = candidates[0];
    for &j in &candidates[1..] {
        if row[j] < row[best] {
            best = j;
        }
    }
    best
}

/// Picks `p` distinct classes out of `k`.
///
/// Without oversampling the choice is uniform. With it, the first pair is
/// drawn with weight `ε + S[i][j] + S[j][i]` and each further class with
/// weight `ε + Σ_c (S[j][c] + S[c][j])` over the classes already chosen,
/// where `ε = 1/k`.
pub fn sample_classes<R: Rng + ?Sized>(
    sm: &SimilarityMatrix,
    p: usize,
    oversample: bool,
    rng: &mut R,
) -> Result<Vec<ClassId>> {
    let k = sm.k();
    if p < 2 || p > k {
        return Err(Error::Config(format!(
            "cannot draw {p} classes per batch from {k} classes"
        )));
    }
    if !oversample {
        return Ok(index::sample(rng, k, p).into_vec());
    }
    let eps = 1.0 / k as f64;
    let mut pairs = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            pairs.push(((i, j), eps + sm.get(i, j) + sm.get(j, i)));
        }
    }
    let (first, second) =
        pairs[weighted_pick(&pairs.iter().map(|p| p.1).collect::<Vec<_>>(), rng)].0;
    let mut chosen = vec![first, second];
    while chosen.len() < p {
        let rest: Vec<ClassId> = (0..k).filter(|c| !chosen.contains(c)).collect();
        let weights: Vec<f64> = rest
            .iter()
            .map(|&j| {
                eps + chosen
                    .iter()
                    .map(|&c| sm.get(j, c) + sm.get(c, j))
                    .sum::<f64>()
            })
            .collect();
        chosen.push(rest[weighted_pick(&weights, rng)]);
    }
    Ok(chosen)
}

fn weighted_pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut target = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if target < *w {
            return i;
        }
        target -= w;
    }
    weights.len() - 1
}

/// Draws `p` classes and `q` samples from each, in class-major order.
///
/// The returned batch has no triplets yet; they are mined from the
/// embeddings of the batch itself during training.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    config: &SamplerConfig,
    sm: &SimilarityMatrix,
    rng: &mut R,
) -> Result<TripletBatch> {
    config.validate()?;
    if sm.k() != dataset.num_classes() {
        return Err(Error::InvalidInput(format!(
            "similarity matrix has {} classes, dataset has {}",
            sm.k(),
            dataset.num_classes()
        )));
    }
    let by_class = dataset.class_indices();
    let q = config.samples_per_class;
    if let Some((c, members)) = by_class.iter().enumerate().find(|(_, m)| m.len() < q) {
        return Err(Error::InvalidInput(format!(
            "class {c} has {} samples, fewer than the {q} per batch",
            members.len()
        )));
    }
    let classes = sample_classes(
        sm,
        config.classes_per_batch,
        config.oversample_with_similarity,
        rng,
    )?;
    let mut indices = Vec::with_capacity(config.batch_size());
    for &c in &classes {
        let members = &by_class[c];
        indices.extend(
            index::sample(rng, members.len(), q)
                .into_iter()
                .map(|i| members[i]),
        );
    }
    dataset.batch(&indices)
}

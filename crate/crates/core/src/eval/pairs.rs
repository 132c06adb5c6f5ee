use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{ClassId, Error, Result};

/// Euclidean distance between two equally sized vectors.
pub fn pair_distance(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "pair_distance: {} vs {} values",
            x.len(),
            y.len()
        )));
    }
    Ok(x.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Two embedding rows and whether their classes agree.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub first: usize,
    pub second: usize,
    pub same_class: bool,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.distance).collect()
    }

    pub fn same(&self) -> Vec<bool> {
        self.pairs.iter().map(|p| p.same_class).collect()
    }
}

/// Unordered index pairs grouped into blocks: one block per class for
/// same-class pairs, one per class pair for cross-class pairs. Any pair can
/// be addressed by a flat index without materialising the list.
struct PairSpace {
    blocks: Vec<Block>,
    total: usize,
}

enum Block {
    Within(Vec<usize>),
    Across(Vec<usize>, Vec<usize>),
}

impl Block {
    fn len(&self) -> usize {
        match self {
            Self::Within(m) => m.len() * m.len().saturating_sub(1) / 2,
            Self::Across(a, b) => a.len() * b.len(),
        }
    }

    fn get(&self, mut t: usize) -> (usize, usize) {
        match self {
            Self::Within(m) => {
                let n = m.len();
                for i in 0..n {
                    let row = n - 1 - i;
                    if t < row {
                        return (m[i], m[i + 1 + t]);
                    }
                    t -= row;
                }
                unreachable!("index inside block")
            }
            Self::Across(a, b) => (a[t / b.len()], b[t % b.len()]),
        }
    }
}

impl PairSpace {
    fn new(blocks: Vec<Block>) -> Self {
        let total = blocks.iter().map(Block::len).sum();
        Self { blocks, total }
    }

    fn get(&self, mut t: usize) -> (usize, usize) {
        for b in &self.blocks {
            if t < b.len() {
                return b.get(t);
            }
            t -= b.len();
        }
        unreachable!("index inside pair space")
    }

    /// `n` pairs, distinct when the space is large enough.
    fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
        if n <= self.total {
            index::sample(rng, self.total, n)
                .into_iter()
                .map(|t| self.get(t))
                .collect()
        } else {
            (0..n)
                .map(|_| self.get(rng.gen_range(0..self.total)))
                .collect()
        }
    }
}

/// `count` pairs of which `round(count·same_fraction)` share a class, drawn
/// without replacement while enough distinct pairs exist, then shuffled.
pub fn build_pair_set<R: Rng + ?Sized>(
    embeddings: &Tensor,
    labels: &[ClassId],
    count: usize,
    same_fraction: f64,
    rng: &mut R,
) -> Result<PairSet> {
    let &[n, _] = embeddings.shape() else {
        return Err(Error::InvalidInput(format!(
            "embeddings must be N×d, got {:?}",
            embeddings.shape()
        )));
    };
    if n != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{n} embeddings for {} labels",
            labels.len()
        )));
    }
    if !(0.0..=1.0).contains(&same_fraction) {
        return Err(Error::InvalidInput(format!(
            "same_fraction {same_fraction} outside [0, 1]"
        )));
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class.retain(|m| !m.is_empty());
    let same_space = PairSpace::new(by_class.iter().cloned().map(Block::Within).collect());
    let mut across = Vec::new();
    for i in 0..by_class.len() {
        for j in i + 1..by_class.len() {
            across.push(Block::Across(by_class[i].clone(), by_class[j].clone()));
        }
    }
    let diff_space = PairSpace::new(across);

    let n_same = (count as f64 * same_fraction).round() as usize;
    let n_diff = count - n_same;
    if n_same > 0 && same_space.total == 0 {
        return Err(Error::InvalidInput(
            "no class has two samples to form a same-class pair".into(),
        ));
    }
    if n_diff > 0 && diff_space.total == 0 {
        return Err(Error::InvalidInput(
            "need at least two classes to form different-class pairs".into(),
        ));
    }
    let row = |i: usize| embeddings.index_axis0(i);
    let mut pairs = Vec::with_capacity(count);
    for (space, want, same) in [(&same_space, n_same, true), (&diff_space, n_diff, false)] {
        for (a, b) in space.draw(want, rng) {
            pairs.push(Pair {
                first: a,
                second: b,
                same_class: same,
                distance: pair_distance(&row(a)?, &row(b)?)?,
            });
        }
    }
    pairs.shuffle(rng);
    Ok(PairSet { pairs })
}

/// Outcome of one held-out fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    /// Pairs `start..end` form the held-out fold.
    pub start: usize,
    pub end: usize,
    pub threshold: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KFoldResult {
    /// Mean held-out accuracy over folds.
    pub mean_accuracy: f64,
    pub folds: Vec<FoldResult>,
}

impl KFoldResult {
    pub fn thresholds(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.threshold).collect()
    }

    /// Fold index of pair `i`.
    pub fn fold_of(&self, i: usize) -> Option<usize> {
        self.folds
            .iter()
            .position(|f| (f.start..f.end).contains(&i))
    }
}

/// Threshold maximising accuracy of "same class iff `d < t`" over the given
/// pairs. Candidates are `±∞` and midpoints between consecutive distinct
/// distances; ties go to the smallest threshold.
pub fn select_threshold(distances: &[f64], same: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
    let total_diff = same.iter().filter(|&&s| !s).count();
    // Threshold −∞: nothing is called same.
    let mut best = (total_diff, f64::NEG_INFINITY);
    let (mut same_below, mut diff_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let d = distances[order[i]];
        while i < order.len() && distances[order[i]] == d {
            if same[order[i]] {
                same_below += 1;
            } else {
                diff_below += 1;
            }
            i += 1;
        }
        let t = match order.get(i) {
            Some(&next) => d + (distances[next] - d) / 2.0,
            None => f64::INFINITY,
        };
        let correct = same_below + (total_diff - diff_below);
        if correct > best.0 {
            best = (correct, t);
        }
    }
    best.1
}

fn fold_accuracy(distances: &[f64], same: &[bool], t: f64) -> f64 {
    let hits = distances
        .iter()
        .zip(same)
        .filter(|(&d, &s)| (d < t) == s)
        .count();
    hits as f64 / distances.len() as f64
}

/// Splits pairs into `folds` contiguous near-equal folds; each fold is scored
/// with the threshold chosen on the remaining folds.
pub fn kfold_pair_eval(distances: &[f64], same: &[bool], folds: usize) -> Result<KFoldResult> {
    let n = distances.len();
    if same.len() != n {
        return Err(Error::InvalidInput(format!(
            "{n} distances for {} labels",
            same.len()
        )));
    }
    if folds < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    if n < folds {
        return Err(Error::InvalidInput(format!(
            "{n} pairs cannot fill {folds} folds"
        )));
    }
    if distances.iter().any(|d| d.is_nan()) {
        return Err(Error::InvalidInput("distances must not be NaN".into()));
    }
    let mut results = Vec::with_capacity(folds);
    for f in 0..folds {
        let (start, end) = (f * n / folds, (f + 1) * n / folds);
        let train_d: Vec<f64> = distances[..start]
            .iter()
            .chain(&distances[end..])
            .copied()
            .collect();
        let train_s: Vec<bool> = same[..start].iter().chain(&same[end..]).copied().collect();
        let threshold = select_threshold(&train_d, &train_s);
        results.push(FoldResult {
            start,
            end,
            threshold,
            accuracy: fold_accuracy(&distances[start..end], &same[start..end], threshold),
        });
    }
    let mean_accuracy = results.iter().map(|r| r.accuracy).sum::<f64>() / folds as f64;
    Ok(KFoldResult {
        mean_accuracy,
        folds: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn distance_examples() {
        let x = Tensor::vector(&[0.0, 0.0]).unwrap();
        let y = Tensor::vector(&[3.0, 4.0]).unwrap();
        assert_eq!(pair_distance(&x, &y).unwrap(), 5.0);
        assert_eq!(pair_distance(&y, &y).unwrap(), 0.0);
        assert!(pair_distance(&x, &Tensor::vector(&[1.0]).unwrap()).is_err());
    }

    fn embeddings(n_per: usize, k: usize) -> (Tensor, Vec<ClassId>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..k {
            for i in 0..n_per {
                rows.push(vec![c as f64, i as f64 * 0.01]);
                labels.push(c);
            }
        }
        (Tensor::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn composition_and_determinism() {
        let (e, l) = embeddings(10, 3);
        let set = build_pair_set(&e, &l, 100, 0.6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(set.len(), 100);
        assert_eq!(set.pairs.iter().filter(|p| p.same_class).count(), 60);
        for p in &set.pairs {
            assert_eq!(l[p.first] == l[p.second], p.same_class);
            assert_ne!(p.first, p.second);
        }
        let again = build_pair_set(&e, &l, 100, 0.6, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(set, again);
        let all_same = build_pair_set(&e, &l, 30, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(all_same.pairs.iter().all(|p| p.same_class));
    }

    #[test]
    fn distinct_pairs_when_available() {
        let (e, l) = embeddings(5, 2);
        // 2·C(5,2) = 20 same-class pairs exist; ask for exactly 20.
        let set = build_pair_set(&e, &l, 20, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut keys: Vec<(usize, usize)> = set.pairs.iter().map(|p| (p.first, p.second)).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), 20);
        // More than exist: drawn with replacement rather than failing.
        assert_eq!(
            build_pair_set(&e, &l, 50, 1.0, &mut ChaCha8Rng::seed_from_u64(3))
                .unwrap()
                .len(),
            50
        );
    }

    #[test]
    fn insufficient_samples() {
        let e = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(build_pair_set(&e, &[0, 1], 10, 0.6, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(build_pair_set(&e, &[0, 0], 10, 0.6, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn separable_distances_score_one() {
        let d: Vec<f64> = (0..40)
            .map(|i| {
                if i % 3 == 0 {
                    2.0 + i as f64 * 0.01
                } else {
                    i as f64 * 0.01
                }
            })
            .collect();
        let s: Vec<bool> = (0..40).map(|i| i % 3 != 0).collect();
        for folds in [2, 5, 10] {
            assert_eq!(kfold_pair_eval(&d, &s, folds).unwrap().mean_accuracy, 1.0);
        }
    }

    #[test]
    fn two_folds_by_hand() {
        // Fold 0 = pairs 0,1; fold 1 = pairs 2,3.
        let d = [0.2, 0.9, 0.4, 0.6];
        let s = [true, false, true, false];
        let r = kfold_pair_eval(&d, &s, 2).unwrap();
        // Trained on {0.4 same, 0.6 diff}: candidates −∞, 0.5, ∞ score 1, 2, 1.
        assert_eq!(r.folds[0].threshold, 0.5);
        // Trained on {0.2 same, 0.9 diff}: best midpoint 0.55.
        assert!((r.folds[1].threshold - 0.55).abs() < 1e-15);
        assert_eq!(r.folds[0].accuracy, 1.0);
        assert_eq!(r.folds[1].accuracy, 1.0);
        assert_eq!(r.fold_of(3), Some(1));
    }

    #[test]
    fn ties_pick_smallest_threshold() {
        // Every candidate scores 1 of 2 except none; −∞ already scores 1.
        assert_eq!(
            select_threshold(&[1.0, 2.0], &[false, true]),
            f64::NEG_INFINITY
        );
        assert_eq!(
            select_threshold(&[1.0, 1.0, 1.0], &[true, true, false]),
            f64::INFINITY
        );
    }

    #[test]
    fn bad_fold_counts() {
        assert!(kfold_pair_eval(&[0.1], &[true], 2).is_err());
        assert!(kfold_pair_eval(&[0.1, 0.2], &[true, false], 1).is_err());
    }
}

use serde::{Deserialize, Serialize};

use crate::{ClassId, Error, Result};

/// `k×k` counts; rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_predictions(truth: &[ClassId], predicted: &[ClassId], k: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::InvalidInput(format!(
                "{} true labels for {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(k);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidInput(
                "confusion matrix must be square".into(),
            ));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn add(&mut self, truth: ClassId, predicted: ClassId) -> Result<()> {
        if truth >= self.k || predicted >= self.k {
            return Err(Error::InvalidInput(format!(
                "class pair ({truth}, {predicted}) out of range for k = {}",
                self.k
            )));
        }
        self.counts[truth * self.k + predicted] += 1;
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: ClassId, predicted: ClassId) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.k.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, c: ClassId) -> u64 {
        (0..self.k).map(|j| self.get(c, j)).sum()
    }

    pub fn col_sum(&self, c: ClassId) -> u64 {
        (0..self.k).map(|i| self.get(i, c)).sum()
    }

    /// Overall fraction on the diagonal; `None` for an empty matrix.
    pub fn accuracy(&self) -> Option<f64> {
        let diag: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        ratio(diag, self.total())
    }

    /// Binary counts of class `c` against all others.
    pub fn one_vs_rest(&self, c: ClassId) -> BinaryCounts {
        let tp = self.get(c, c);
        let fn_ = self.row_sum(c) - tp;
        let fp = self.col_sum(c) - tp;
        BinaryCounts {
            tp,
            fp,
            tn: self.total() - tp - fn_ - fp,
            fn_,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// Rates of a binary reduction; `None` marks a zero denominator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryRates {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

impl BinaryCounts {
    pub fn rates(&self) -> BinaryRates {
        BinaryRates {
            accuracy: ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_),
            sensitivity: ratio(self.tp, self.tp + self.fn_),
            specificity: ratio(self.tn, self.tn + self.fp),
        }
    }
}

pub fn binary_rates(cm: &ConfusionMatrix, c: ClassId) -> Result<BinaryRates> {
    if c >= cm.k() {
        return Err(Error::InvalidInput(format!(
            "class {c} out of range for k = {}",
            cm.k()
        )));
    }
    Ok(cm.one_vs_rest(c).rates())
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counts() {
        let r = BinaryCounts {
            tp: 90,
            fn_: 10,
            tn: 100,
            fp: 0,
        }
        .rates();
        assert_eq!(r.sensitivity, Some(0.9));
        assert_eq!(r.specificity, Some(1.0));
        assert_eq!(r.accuracy, Some(0.95));
    }

    #[test]
    fn perfect_diagonal() {
        let cm = ConfusionMatrix::from_predictions(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        for c in 0..3 {
            let r = binary_rates(&cm, c).unwrap();
            assert_eq!(
                (r.accuracy, r.sensitivity, r.specificity),
                (Some(1.0), Some(1.0), Some(1.0))
            );
        }
    }

    #[test]
    fn rows_are_truth_and_undefined_rates() {
        let cm = ConfusionMatrix::from_predictions(&[0, 0, 1], &[1, 1, 1], 3).unwrap();
        assert_eq!(cm.get(0, 1), 2);
        assert_eq!(cm.row_sum(0), 2);
        // Class 2 never occurs and is never predicted.
        let r = binary_rates(&cm, 2).unwrap();
        assert_eq!(r.sensitivity, None);
        assert_eq!(r.specificity, Some(1.0));
        assert!(ConfusionMatrix::from_predictions(&[3], &[0], 3).is_err());
        assert_eq!(ConfusionMatrix::new(2).accuracy(), None);
    }
}

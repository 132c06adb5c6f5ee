use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, SplitName};
use crate::{Error, Result};

/// Stratified train/validation/test proportions.
///
/// Per class of `n` samples: `test = max(1, round(test_fraction·n))`,
/// `val = max(1, round(validation_fraction_of_train·(n − test)))`, the rest
/// trains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub validation_fraction_of_train: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            validation_fraction_of_train: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Five sevenths train, one seventh validation, one seventh test.
    pub fn sevenths(seed: u64) -> Self {
        Self {
            test_fraction: 1.0 / 7.0,
            validation_fraction_of_train: 1.0 / 6.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0)
            || !(self.validation_fraction_of_train > 0.0 && self.validation_fraction_of_train < 1.0)
        {
            return Err(Error::Config(format!(
                "split fractions must lie in (0, 1): {self:?}"
            )));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes for a class of `n` samples.
    pub fn class_counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        let test = ((self.test_fraction * n as f64).round() as usize).max(1);
        let val = ((self.validation_fraction_of_train * n.saturating_sub(test) as f64).round()
            as usize)
            .max(1);
        if n < 3 || test + val >= n {
            return Err(Error::InvalidInput(format!(
                "a class of {n} samples is too small to stratify"
            )));
        }
        Ok((n - test - val, val, test))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    /// Split name per sample of a dataset of `len` samples.
    pub fn assignment(&self, len: usize) -> Vec<SplitName> {
        let mut out = vec![SplitName::Train; len];
        for &i in &self.val {
            out[i] = SplitName::Val;
        }
        for &i in &self.test {
            out[i] = SplitName::Test;
        }
        out
    }

    pub fn from_assignment(assignment: &[SplitName]) -> Self {
        let mut out = Self::default();
        for (i, s) in assignment.iter().enumerate() {
            match s {
                SplitName::Train => out.train.push(i),
                SplitName::Val => out.val.push(i),
                SplitName::Test => out.test.push(i),
            }
        }
        out
    }
}

/// Stratified partition; each class is shuffled with its own seeded stream.
/// Index lists come back sorted.
pub fn split_indices(ds: &Dataset, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let mut out = SplitIndices::default();
    for (class, mut members) in ds.class_indices().into_iter().enumerate() {
        let (_, val, test) = spec.class_counts(members.len()).map_err(|_| {
            Error::InvalidInput(format!(
                "class {} has {} samples, too few to stratify",
                ds.class_names()[class],
                members.len()
            ))
        })?;
        members.shuffle(&mut crate::rng::stream(spec.seed, &[0x5711, class as u64]));
        out.test.extend_from_slice(&members[..test]);
        out.val.extend_from_slice(&members[test..test + val]);
        out.train.extend_from_slice(&members[test + val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// `(train, validation, test)` datasets.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let idx = split_indices(ds, spec)?;
    Ok((
        ds.subset(&idx.train),
        ds.subset(&idx.val),
        ds.subset(&idx.test),
    ))
}

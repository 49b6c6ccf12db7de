//! Deterministic train/validation/test splitting.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.2,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Parameter(format!("split ratios must lie in [0, 1], got {all:?}")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("split ratios must sum to 1, got {sum}")));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes: val and test are rounded, train takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let val = ((n as f64) * self.val).round() as usize;
        let test = ((n as f64) * self.test).round() as usize;
        let val = val.min(n);
        let test = test.min(n - val);
        (n - val - test, val, test)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSet {
    pub n_splits: usize,
    pub ratios: SplitRatios,
    pub seed: u64,
    pub splits: Vec<Split>,
}

/// Draws `n_splits` independent random partitions of `ids`.
///
/// Split `k` shuffles the ids with a stream derived from `(seed, k)`; the
/// first `test` ids of the permutation form the test set, the next `val`
/// the validation set, and the rest the training set.
pub fn make_splits(ids: &[String], ratios: SplitRatios, seed: u64, n_splits: usize) -> Result<SplitSet> {
    if ids.is_empty() {
        return Err(Error::Parameter("cannot split an empty id list".into()));
    }
    if ids.len() < 3 {
        return Err(Error::Parameter(format!("need at least 3 ids to split, got {}", ids.len())));
    }
    if n_splits == 0 {
        return Err(Error::Parameter("n_splits must be >= 1".into()));
    }
    ratios.validate()?;
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::Parameter(format!("duplicate id `{dup}`")));
    }
    let (_, n_val, n_test) = ratios.sizes(ids.len());
    let splits = (0..n_splits)
        .map(|k| {
            let mut perm: Vec<String> = ids.to_vec();
            perm.shuffle(&mut rng_for(seed, &[k as u64]));
            let test = perm[..n_test].to_vec();
            let val = perm[n_test..n_test + n_val].to_vec();
            let train = perm[n_test + n_val..].to_vec();
            Split { train, val, test }
        })
        .collect();
    Ok(SplitSet {
        n_splits,
        ratios,
        seed,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("case_{i:03}")).collect()
    }

    #[test]
    fn default_ratios_on_ten_and_131() {
        let s = make_splits(&ids(10), SplitRatios::default(), 3, 4).unwrap();
        for sp in &s.splits {
            assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (7, 2, 1));
        }
        assert_eq!(SplitRatios::default().sizes(131), (92, 26, 13));
        assert_eq!(s.splits.len(), 4);
    }

    #[test]
    fn deterministic_and_split_dependent() {
        let a = make_splits(&ids(20), SplitRatios::default(), 11, 2).unwrap();
        let b = make_splits(&ids(20), SplitRatios::default(), 11, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.splits[0], a.splits[1]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(make_splits(&[], SplitRatios::default(), 0, 1).is_err());
        assert!(make_splits(&ids(2), SplitRatios::default(), 0, 1).is_err());
        let bad = SplitRatios { train: 0.5, val: 0.2, test: 0.1 };
        assert!(make_splits(&ids(10), bad, 0, 1).is_err());
    }

    proptest! {
        #[test]
        fn splits_partition_ids(n in 3usize..200, seed in any::<u64>(), k in 1usize..4) {
            let all = ids(n);
            let s = make_splits(&all, SplitRatios::default(), seed, k).unwrap();
            prop_assert_eq!(s.splits.len(), k);
            for sp in &s.splits {
                let mut joined: Vec<String> = sp.train.iter().chain(&sp.val).chain(&sp.test).cloned().collect();
                joined.sort();
                prop_assert_eq!(&joined, &all);
            }
        }
    }
}

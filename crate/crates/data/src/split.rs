//! Seeded train/val/test partitions and per-epoch orderings.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DataError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let s = Self { train, val, test, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DataError::InvalidSplit(format!("fractions must be non-negative, got {f:?}")));
        }
        let total: f64 = f.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidSplit(format!("fractions sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Subset sizes for `n` items: train and val are floored, test takes the
    /// remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let take = |f: f64| ((n as f64 * f) + 1e-9).floor() as usize;
        let train = take(self.train).min(n);
        let val = take(self.val).min(n - train);
        (train, val, n - train - val)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Partitions `ids`. The result depends only on the set of ids and the seed,
/// not on their input order.
pub fn split(ids: &[String], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(DataError::DuplicateId(id.clone()));
        }
    }
    let mut ids = ids.to_vec();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let (tr, va, _) = spec.sizes(ids.len());
    let test = ids.split_off(tr + va);
    let val = ids.split_off(tr);
    Ok(Split { train: ids, val, test })
}

impl Split {
    /// One `subset<TAB>id` line per id.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for id in ids {
                let _ = writeln!(s, "{name}\t{id}");
            }
        }
        s
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, self.manifest()).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn parse_manifest(text: &str) -> Result<Self> {
        let mut out = Split {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (subset, id) = line
                .split_once('\t')
                .ok_or_else(|| DataError::InvalidSplit(format!("line {}: expected `subset<TAB>id`", n + 1)))?;
            match subset {
                "train" => out.train.push(id.to_string()),
                "val" => out.val.push(id.to_string()),
                "test" => out.test.push(id.to_string()),
                other => return Err(DataError::InvalidSplit(format!("line {}: unknown subset `{other}`", n + 1))),
            }
        }
        Ok(out)
    }
}

/// Visiting order of `n` items for one epoch; a pure function of
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::frame::Dataset;
use crate::error::{Error, Result};

/// Operator whose assemblies are used for training and validation.
pub const TRAIN_OPERATOR: u32 = 1;

/// Assembly ids of the train, validation and test sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl DatasetSplit {
    /// Checks that no assembly sits in two sets.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(*id) {
                return Err(Error::Data(format!("assembly {id} appears in two splits")));
            }
        }
        Ok(())
    }
}

/// Held-out test assemblies and the training pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    /// Assemblies of the training operator available for train/val folds.
    pub pool: Vec<u32>,
    /// `test_per_operator` assemblies of every operator.
    pub test: Vec<u32>,
}

/// Draws `test_per_operator` test assemblies per operator. The remaining
/// assemblies of the training operator form the pool; those of other
/// operators are unused.
pub fn partition(ds: &Dataset, test_per_operator: usize, seed: u64) -> Result<Partition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = Vec::new();
    let mut test = Vec::new();
    let ops = ds.operators();
    if !ops.contains(&TRAIN_OPERATOR) {
        return Err(Error::Data(format!(
            "dataset has no assemblies of operator {TRAIN_OPERATOR}"
        )));
    }
    for op in ops {
        let mut ids: Vec<u32> = ds
            .recordings
            .iter()
            .filter(|r| r.operator_id == op)
            .map(|r| r.assembly_id)
            .collect();
        if ids.len() < test_per_operator {
            return Err(Error::Data(format!(
                "operator {op} has {} assemblies, fewer than the {test_per_operator} test assemblies requested",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        let mut held: Vec<u32> = ids[..test_per_operator].to_vec();
        held.sort_unstable();
        test.extend(held);
        if op == TRAIN_OPERATOR {
            pool.extend_from_slice(&ids[test_per_operator..]);
        }
    }
    pool.sort_unstable();
    Ok(Partition { pool, test })
}

/// Assembly-level k-fold over `part.pool`: fold `i` validates on every
/// `k`-th assembly of a seeded permutation starting at `i`.
pub fn kfold(part: &Partition, k: usize, seed: u64) -> Result<Vec<DatasetSplit>> {
    if k < 2 || k > part.pool.len() {
        return Err(Error::Config(format!(
            "cannot make {k} folds from {} assemblies",
            part.pool.len()
        )));
    }
    let mut ids = part.pool.clone();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k)
        .map(|fold| {
            let (mut val, mut train): (Vec<u32>, Vec<u32>) = (Vec::new(), Vec::new());
            for (j, id) in ids.iter().enumerate() {
                if j % k == fold {
                    val.push(*id);
                } else {
                    train.push(*id);
                }
            }
            train.sort_unstable();
            val.sort_unstable();
            DatasetSplit {
                train,
                val,
                test: part.test.clone(),
            }
        })
        .collect())
}

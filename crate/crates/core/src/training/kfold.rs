use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::fit::{fit, FitOutput, TrainSet};
use crate::data::{
    idle_pool, kfold, pad, partition, segment, Dataset, DatasetSplit, PadKind, PadSources,
    PaddedSequence, Partition, Recording, TaskModuleSequence,
};
use crate::error::{Error, Result};
use crate::{par, seed};

fn recordings<'a>(ds: &'a Dataset, ids: &[u32]) -> Result<Vec<&'a Recording>> {
    ids.iter()
        .map(|id| {
            ds.recording(*id)
                .ok_or_else(|| Error::Data(format!("assembly {id} is not in the dataset")))
        })
        .collect()
}

/// Human modules of the given assemblies, each keeping `t_max` frames of
/// history so real padding never runs short inside a recording.
pub fn modules_of(ds: &Dataset, ids: &[u32], t_max: usize) -> Result<Vec<TaskModuleSequence>> {
    let mut out = Vec::new();
    for rec in recordings(ds, ids)? {
        out.extend(segment(rec, t_max)?);
    }
    Ok(out)
}

/// Pads the modules of `ids` for evaluation. Idle and random padding draw
/// from the same assemblies, seeded per sequence.
pub fn pad_assemblies(
    ds: &Dataset,
    ids: &[u32],
    kind: PadKind,
    t_max: usize,
    pad_seed: u64,
) -> Result<Vec<PaddedSequence>> {
    let recs = recordings(ds, ids)?;
    let seqs = modules_of(ds, ids, t_max)?;
    let pool = idle_pool(&recs);
    let sources = PadSources {
        idle_pool: &pool,
        corpus: &seqs,
    };
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(pad_seed, "pad", i as u64));
            pad(s, kind, t_max, sources, &mut rng)
        })
        .collect()
}

/// Trains the model of one fold.
pub fn train_fold(cfg: &ModelConfig, ds: &Dataset, split: &DatasetSplit, t_max: usize, fold: usize) -> Result<FitOutput> {
    split.validate()?;
    let train_recs = recordings(ds, &split.train)?;
    let train = modules_of(ds, &split.train, t_max)?;
    let pool = idle_pool(&train_recs);
    let val_seed = seed::derive_indexed(cfg.seed, "val-pad", fold as u64);
    let val = pad_assemblies(ds, &split.val, cfg.pad_kind, t_max, val_seed)?;
    fit(
        cfg,
        TrainSet {
            sequences: &train,
            idle_pool: &pool,
            t_max,
        },
        &val,
        fold,
    )
}

/// Trains every fold, up to `jobs` at a time (0 = all cores).
pub fn run_kfold(cfg: &ModelConfig, ds: &Dataset, splits: &[DatasetSplit], jobs: usize) -> Result<Vec<FitOutput>> {
    if splits.len() < 2 {
        return Err(Error::Config("k-fold needs at least two folds".into()));
    }
    let t_max = ds.t_max();
    par::with_jobs(jobs, || {
        par::map_range(splits.len(), |k| train_fold(cfg, ds, &splits[k], t_max, k))
    })
    .into_iter()
    .collect()
}

/// SHA-256 of the fold assignment, for checking that runs share folds.
pub fn fold_hash(splits: &[DatasetSplit]) -> String {
    let mut h = Sha256::new();
    for s in splits {
        for (tag, ids) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
            h.update(tag.as_bytes());
            for id in ids {
                h.update(id.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Test partition and k-fold assignment derived from one master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub partition: Partition,
    pub splits: Vec<DatasetSplit>,
    pub fold_hash: String,
}

pub fn plan_folds(ds: &Dataset, test_per_operator: usize, folds: usize, master: u64) -> Result<FoldPlan> {
    let partition = partition(ds, test_per_operator, seed::derive(master, "partition"))?;
    let splits = kfold(&partition, folds, seed::derive(master, "folds"))?;
    Ok(FoldPlan {
        seed: master,
        fold_hash: fold_hash(&splits),
        partition,
        splits,
    })
}

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ModelConfig;
use super::optim::{cross_entropy, cross_entropy_var, Adam};
use crate::data::{
    AugmentationPolicy, LandmarkFrame, PadSources, PaddedSequence, TaskModuleSequence,
};
use crate::error::{Error, Result};
use crate::models::{argmax, Network};
use crate::numerics::{Dropout, Graph, Tensor};
use crate::{par, seed};

/// A padded sequence ready for a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub mask: Vec<bool>,
    pub label: usize,
    pub operator_id: u32,
    pub assembly_id: u32,
}

/// Standardises the unmasked rows of `x` to zero mean and unit variance over
/// all their entries. Masked rows stay zero.
pub fn standardize_rows(x: &Tensor, mask: &[bool]) -> Tensor {
    let cols = x.cols();
    let rows: Vec<usize> = (0..x.rows()).filter(|&r| mask[r]).collect();
    let n = (rows.len() * cols) as f64;
    if rows.is_empty() {
        return x.clone();
    }
    let mean = rows.iter().flat_map(|&r| x.row_slice(r)).sum::<f64>() / n;
    let var = rows
        .iter()
        .flat_map(|&r| x.row_slice(r))
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n;
    let sd = var.sqrt().max(1e-12);
    let mut out = x.clone();
    let data = out.data_mut();
    for &r in &rows {
        for v in &mut data[r * cols..(r + 1) * cols] {
            *v = (*v - mean) / sd;
        }
    }
    out
}

impl Sample {
    pub fn from_padded(p: &PaddedSequence, standardize: bool) -> Self {
        let mask = p.mask();
        let input = if standardize {
            standardize_rows(&p.frames, &mask)
        } else {
            p.frames.clone()
        };
        Self {
            input,
            mask,
            label: p.label,
            operator_id: p.operator_id,
            assembly_id: p.assembly_id,
        }
    }
}

/// Anything that maps a window to a class posterior.
pub trait Classifier: Sync {
    fn classify(&self, input: &Tensor, mask: &[bool]) -> Result<Vec<f64>>;
}

impl Classifier for Network {
    fn classify(&self, input: &Tensor, mask: &[bool]) -> Result<Vec<f64>> {
        self.posterior(input, mask)
    }
}

/// Mean loss and accuracy of `model` on `samples`, in evaluation mode.
pub fn score(model: &dyn Classifier, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let results = par::map(samples, |s| -> Result<(f64, bool)> {
        let p = model.classify(&s.input, &s.mask)?;
        Ok((cross_entropy(&p, s.label)?, argmax(&p) == s.label))
    });
    let (mut loss, mut correct) = (0.0, 0usize);
    for r in results {
        let (l, c) = r?;
        loss += l;
        correct += usize::from(c);
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Running loss over the epoch's augmented, dropout-active batches.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub fold: usize,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    /// Index into `epochs` of the retained model.
    pub best_epoch: usize,
    pub wall_clock_secs: f64,
    pub augmentations_applied: usize,
    /// Augmentations that fired while validation ran; always zero.
    pub eval_augmentations: usize,
}

/// Equality ignores wall-clock time.
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.fold == other.fold
            && self.seed == other.seed
            && self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.augmentations_applied == other.augmentations_applied
            && self.eval_augmentations == other.eval_augmentations
    }
}

impl TrainReport {
    pub fn best(&self) -> &EpochMetrics {
        &self.epochs[self.best_epoch]
    }
}

/// Training data: raw modules, re-padded (and augmented) every epoch.
#[derive(Debug, Clone, Copy)]
pub struct TrainSet<'a> {
    pub sequences: &'a [TaskModuleSequence],
    pub idle_pool: &'a [LandmarkFrame],
    pub t_max: usize,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
}

struct SampleStep {
    loss: f64,
    correct: bool,
    grads: Vec<Tensor>,
}

fn sample_step(net: &Network, s: &Sample, dropout_seed: u64) -> Result<SampleStep> {
    let mut g = Graph::with_params(&net.store);
    let mut dropout = Dropout::new(dropout_seed);
    let p = net.forward(&mut g, &s.input, &s.mask, Some(&mut dropout))?;
    let correct = argmax(g.value(p).data()) == s.label;
    let loss = cross_entropy_var(&mut g, p, s.label)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?.param_grads(&net.store);
    Ok(SampleStep {
        loss: value,
        correct,
        grads,
    })
}

fn better(candidate: &EpochMetrics, best: &EpochMetrics) -> bool {
    candidate.val_accuracy > best.val_accuracy
        || (candidate.val_accuracy == best.val_accuracy && candidate.val_loss < best.val_loss)
}

/// Trains one model with Adam and keeps the parameters of the epoch with the
/// best validation accuracy (ties go to the lower validation loss).
pub fn fit(cfg: &ModelConfig, train: TrainSet<'_>, val: &[PaddedSequence], fold: usize) -> Result<FitOutput> {
    cfg.validate()?;
    if train.sequences.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let train_keys: std::collections::BTreeSet<u32> =
        train.sequences.iter().map(|s| s.assembly_id).collect();
    if val.iter().any(|v| train_keys.contains(&v.assembly_id)) {
        return Err(Error::Data("training and validation share an assembly".into()));
    }
    let started = Instant::now();
    let fold_seed = seed::derive_indexed(cfg.seed, "fold", fold as u64);
    let mut net = Network::build(&cfg.network, seed::derive(fold_seed, "init"))?;
    let mut adam = Adam::new(cfg.learning_rate, &net.store);
    let policy = AugmentationPolicy::new(cfg.augmentation)?;
    let val_samples: Vec<Sample> = val.iter().map(|p| Sample::from_padded(p, cfg.standardize)).collect();
    let sources = PadSources {
        idle_pool: train.idle_pool,
        corpus: train.sequences,
    };
    let mut epochs: Vec<EpochMetrics> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, crate::numerics::ParamStore)> = None;
    let mut eval_augmentations = 0;
    let mut order: Vec<usize> = (0..train.sequences.len()).collect();
    for epoch in 0..cfg.epochs {
        let epoch_seed = seed::derive_indexed(fold_seed, "epoch", epoch as u64);
        let aug_seed = seed::derive(epoch_seed, "augment");
        let padded = par::map_range(train.sequences.len(), |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(aug_seed, "sample", i as u64));
            policy
                .augment(&train.sequences[i], cfg.pad_kind, train.t_max, sources, &mut rng)
                .map(|p| Sample::from_padded(&p, cfg.standardize))
        });
        let samples = padded.into_iter().collect::<Result<Vec<_>>>()?;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(epoch_seed, "shuffle")));
        let dropout_seed = seed::derive(epoch_seed, "dropout");
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let steps = par::map(batch, |&i| sample_step(&net, &samples[i], seed::derive_indexed(dropout_seed, "sample", i as u64)));
            let mut total: Option<Vec<Tensor>> = None;
            for step in steps {
                let step = step?;
                if !step.loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        seed: cfg.seed,
                        fold,
                        detail: format!("non-finite loss {}", step.loss),
                    });
                }
                loss_sum += step.loss;
                correct += usize::from(step.correct);
                match &mut total {
                    None => total = Some(step.grads),
                    Some(t) => {
                        for (a, b) in t.iter_mut().zip(&step.grads) {
                            a.add_assign(b);
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = total
                .expect("non-empty batch")
                .into_iter()
                .map(|t| t.map(|v| v * inv))
                .collect();
            if grads.iter().any(|t| !t.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    seed: cfg.seed,
                    fold,
                    detail: "non-finite gradient".into(),
                });
            }
            adam.step(&mut net.store, &grads)?;
        }
        let before = policy.applied();
        let (val_loss, val_accuracy) = score(&net, &val_samples)?;
        eval_augmentations += policy.applied() - before;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                seed: cfg.seed,
                fold,
                detail: format!("non-finite validation loss {val_loss}"),
            });
        }
        let n = train.sequences.len() as f64;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
        };
        let improved = match &best {
            None => true,
            Some((b, _)) => better(&metrics, &epochs[*b]),
        };
        epochs.push(metrics);
        if improved {
            best = Some((epoch, net.store.clone()));
        }
    }
    let (best_epoch, store) = best.expect("at least one epoch");
    net.store = store;
    let report = TrainReport {
        fold,
        seed: cfg.seed,
        epochs,
        best_epoch,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        augmentations_applied: policy.applied(),
        eval_augmentations,
    };
    let checkpoint = Checkpoint::new(cfg, &net, train.t_max, fold, best_epoch);
    Ok(FitOutput { report, checkpoint })
}

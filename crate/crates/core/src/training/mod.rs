//! Loss, optimiser, training loop, k-fold runs, checkpoints and evaluation.

mod checkpoint;
mod config;
mod eval;
mod fit;
mod kfold;
mod optim;


pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use config::{desk_preset, preset, preset_names, ModelConfig};
pub(crate) use eval::write_csv;
pub use eval::{epochs_csv, evaluate, evaluate_checkpoints, EvalTable};
pub use fit::{fit, score, standardize_rows, Classifier, EpochMetrics, FitOutput, Sample, TrainReport, TrainSet};
pub use kfold::{fold_hash, modules_of, pad_assemblies, plan_folds, run_kfold, train_fold, FoldPlan};
pub use optim::{cross_entropy, cross_entropy_var, Adam, PROB_FLOOR};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::fit::{Classifier, EpochMetrics, Sample, TrainReport};
use super::kfold::pad_assemblies;
use crate::data::{Dataset, TRAIN_OPERATOR};
use crate::error::{Error, Result};
use crate::models::argmax;
use crate::{par, seed};

/// Test accuracy per operator, averaged over fold models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub operators: Vec<u32>,
    /// `per_fold[f][o]`: accuracy of fold model `f` on operator `operators[o]`.
    pub per_fold: Vec<Vec<f64>>,
    pub per_operator: Vec<f64>,
    /// Mean over operators.
    pub average: f64,
    /// Mean over operators other than the training operator.
    pub new_operators: Option<f64>,
}

/// Accuracy of one model per operator: the mean over that operator's
/// assemblies of each assembly's accuracy.
fn operator_accuracy(model: &dyn Classifier, test: &[Sample]) -> Result<BTreeMap<u32, f64>> {
    let hits = par::map(test, |s| -> Result<bool> {
        Ok(argmax(&model.classify(&s.input, &s.mask)?) == s.label)
    });
    let mut per_assembly: BTreeMap<(u32, u32), (usize, usize)> = BTreeMap::new();
    for (s, hit) in test.iter().zip(hits) {
        let e = per_assembly.entry((s.operator_id, s.assembly_id)).or_default();
        e.0 += usize::from(hit?);
        e.1 += 1;
    }
    let mut per_op: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for ((op, _), (c, n)) in per_assembly {
        per_op.entry(op).or_default().push(c as f64 / n as f64);
    }
    Ok(per_op
        .into_iter()
        .map(|(op, v)| (op, v.iter().sum::<f64>() / v.len() as f64))
        .collect())
}

/// Evaluates every fold model on `test`.
pub fn evaluate<C: Classifier>(models: &[C], test: &[Sample]) -> Result<EvalTable> {
    if models.is_empty() || test.is_empty() {
        return Err(Error::Data("evaluation needs models and test sequences".into()));
    }
    let per_fold_maps = models
        .iter()
        .map(|m| operator_accuracy(m, test))
        .collect::<Result<Vec<_>>>()?;
    let operators: Vec<u32> = per_fold_maps[0].keys().copied().collect();
    let per_fold: Vec<Vec<f64>> = per_fold_maps
        .iter()
        .map(|m| operators.iter().map(|o| m[o]).collect())
        .collect();
    let per_operator: Vec<f64> = (0..operators.len())
        .map(|o| per_fold.iter().map(|f| f[o]).sum::<f64>() / per_fold.len() as f64)
        .collect();
    let average = per_operator.iter().sum::<f64>() / per_operator.len() as f64;
    let new: Vec<f64> = operators
        .iter()
        .zip(&per_operator)
        .filter(|(o, _)| **o != TRAIN_OPERATOR)
        .map(|(_, a)| *a)
        .collect();
    let new_operators = (!new.is_empty()).then(|| new.iter().sum::<f64>() / new.len() as f64);
    Ok(EvalTable {
        operators,
        per_fold,
        per_operator,
        average,
        new_operators,
    })
}

/// Pads the test assemblies as the checkpoints were trained and evaluates.
pub fn evaluate_checkpoints(checkpoints: &[Checkpoint], ds: &Dataset, test_ids: &[u32], eval_seed: u64) -> Result<EvalTable> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::Data("no checkpoints to evaluate".into()))?;
    let (kind, t_max, standardize) = (first.config.pad_kind, first.t_max, first.config.standardize);
    if checkpoints
        .iter()
        .any(|c| c.config.pad_kind != kind || c.t_max != t_max || c.config.standardize != standardize)
    {
        return Err(Error::Data("checkpoints disagree on padding or T_max".into()));
    }
    let padded = pad_assemblies(ds, test_ids, kind, t_max, seed::derive(eval_seed, "test-pad"))?;
    let test: Vec<Sample> = padded.iter().map(|p| Sample::from_padded(p, standardize)).collect();
    let models = checkpoints
        .iter()
        .map(Checkpoint::network)
        .collect::<Result<Vec<_>>>()?;
    evaluate(&models, &test)
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl EvalTable {
    /// One row per model: operator columns, the average, and the new-operator
    /// aggregate.
    pub fn csv(rows: &[(String, &EvalTable)]) -> Result<Vec<u8>> {
        let ops = rows.first().map(|(_, t)| t.operators.clone()).unwrap_or_default();
        let mut header = vec!["model".to_string()];
        header.extend(ops.iter().map(|o| format!("operator_{o}")));
        header.extend(strings(&["average", "new_operators"]));
        csv_bytes(
            &header,
            rows.iter().map(|(name, t)| {
                let mut r = vec![name.clone()];
                r.extend(t.per_operator.iter().map(|a| format!("{a:.6}")));
                r.push(format!("{:.6}", t.average));
                r.push(t.new_operators.map(|a| format!("{a:.6}")).unwrap_or_default());
                r
            }),
        )
    }
}

/// Per-epoch metrics of every fold.
pub fn epochs_csv(reports: &[TrainReport]) -> Result<Vec<u8>> {
    let header = strings(&["fold", "epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy", "best"]);
    csv_bytes(
        &header,
        reports.iter().flat_map(|r| {
            r.epochs.iter().map(move |e: &EpochMetrics| {
                vec![
                    r.fold.to_string(),
                    e.epoch.to_string(),
                    format!("{:.9}", e.train_loss),
                    format!("{:.6}", e.train_accuracy),
                    format!("{:.9}", e.val_loss),
                    format!("{:.6}", e.val_accuracy),
                    u8::from(e.epoch == r.best_epoch).to_string(),
                ]
            })
        }),
    )
}

pub(crate) fn write_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    csv_bytes(&strings(header), rows)
}

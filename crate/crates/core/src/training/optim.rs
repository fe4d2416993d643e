use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Posterior entries are clamped to this before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-ln(posterior[label])` with the posterior clamped at [`PROB_FLOOR`].
pub fn cross_entropy(posterior: &[f64], label: usize) -> Result<f64> {
    if label >= posterior.len() {
        return Err(Error::Contract(format!(
            "label {label} outside {} classes",
            posterior.len()
        )));
    }
    let total: f64 = posterior.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("posterior sums to {total}, not 1")));
    }
    Ok(-posterior[label].max(PROB_FLOOR).ln())
}

/// Graph form of [`cross_entropy`] on a `1 x classes` posterior.
pub fn cross_entropy_var(g: &mut Graph<'_>, posterior: Var, label: usize) -> Result<Var> {
    let classes = g.value(posterior).len();
    if label >= classes {
        return Err(Error::Contract(format!("label {label} outside {classes} classes")));
    }
    let p = g.pick(posterior, label);
    let p = g.clamp_min(p, PROB_FLOOR);
    let lp = g.log(p);
    Ok(g.scale(lp, -1.0))
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, store: &ParamStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from gradients aligned with the store's parameters.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != store.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.learning_rate;
        for (i, (p, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                if lr != 0.0 {
                    *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

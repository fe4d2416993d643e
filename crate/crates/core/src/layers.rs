//! Small building blocks shared by the three classifiers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cells::uniform_init;
use crate::error::{Error, Result};
use crate::numerics::{maybe_dropout, Dropout, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub input_dim: usize,
    pub output_dim: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            uniform_init(rng, input_dim, output_dim, input_dim),
        );
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[1, output_dim]));
        Self {
            input_dim,
            output_dim,
            w,
            b,
        }
    }

    pub fn num_scalars(input_dim: usize, output_dim: usize) -> usize {
        (input_dim + 1) * output_dim
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub dim: usize,
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            dim,
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[1, dim], 1.0)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, eps: f64) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, eps)
    }
}

/// How a sequence of hidden rows is reduced to one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Mean over unmasked positions.
    Mean,
    /// The last unmasked position.
    LastUnmasked,
}

pub fn pool(g: &mut Graph<'_>, hs: Var, mask: &[bool], pooling: Pooling) -> Result<Var> {
    match pooling {
        Pooling::Mean => g.mean_rows_masked(hs, mask),
        Pooling::LastUnmasked => {
            let last = mask
                .iter()
                .rposition(|&k| k)
                .ok_or_else(|| Error::Contract("pooling over an empty unmasked region".into()))?;
            Ok(g.select_row(hs, last))
        }
    }
}

/// `Dense(units, relu) -> dropout -> Dense(classes) -> softmax`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl ClassifierHead {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        dense_units: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Linear::init(store, &format!("{prefix}.dense"), input_dim, dense_units, rng),
            out: Linear::init(store, &format!("{prefix}.out"), dense_units, num_classes, rng),
        }
    }

    pub fn num_scalars(input_dim: usize, dense_units: usize, num_classes: usize) -> usize {
        Linear::num_scalars(input_dim, dense_units) + Linear::num_scalars(dense_units, num_classes)
    }

    /// Class posterior as a `1 x classes` row.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        pooled: Var,
        dense_dropout: f64,
        dropout: Option<&mut Dropout>,
    ) -> Var {
        let h = self.hidden.forward(g, pooled);
        let h = g.relu(h);
        let h = maybe_dropout(g, h, dense_dropout, dropout);
        let logits = self.out.forward(g, h);
        g.softmax_rows(logits)
    }
}

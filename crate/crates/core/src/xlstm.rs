//! xLSTM classifier: a stack of mLSTM and sLSTM blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{
    unroll, CellKind, ForgetMode, MlstmParams, RecurrentCell, SlstmGating, SlstmParams,
};
use crate::error::{Error, Result};
use crate::layers::{pool, ClassifierHead, LayerNorm, Linear, Pooling};
use crate::numerics::{maybe_dropout, Dropout, Graph, ParamStore, Var};

/// Wiring around each cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockStyle {
    /// The cell output replaces the block input.
    Bare,
    /// `x + W_out cell(LayerNorm(x)) + b_out`.
    #[default]
    ResidualPrenorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XlstmStackConfig {
    pub num_blocks: usize,
    /// 1-based block positions that hold sLSTM cells.
    pub slstm_positions: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub forget_mode: ForgetMode,
    pub slstm_gating: SlstmGating,
    pub dropout: f64,
    pub style: BlockStyle,
}

impl XlstmStackConfig {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::Config("xLSTM stack needs at least one block".into()));
        }
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("xLSTM heads and head dim must be positive".into()));
        }
        for &p in &self.slstm_positions {
            if p == 0 || p > self.num_blocks {
                return Err(Error::Config(format!(
                    "sLSTM position {p} outside blocks 1..={}",
                    self.num_blocks
                )));
            }
        }
        let mut sorted = self.slstm_positions.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.slstm_positions.len() {
            return Err(Error::Config("duplicate sLSTM position".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("xLSTM dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn block_kinds(&self) -> Vec<CellKind> {
        (1..=self.num_blocks)
            .map(|i| {
                if self.slstm_positions.contains(&i) {
                    CellKind::Slstm
                } else {
                    CellKind::Mlstm
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum BlockCell {
    Slstm(SlstmParams),
    Mlstm(MlstmParams),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct XlstmBlock {
    pub style: BlockStyle,
    pub norm: Option<LayerNorm>,
    pub cell: BlockCell,
    pub out_proj: Option<Linear>,
}

impl XlstmBlock {
    pub fn kind(&self) -> CellKind {
        match self.cell {
            BlockCell::Slstm(_) => CellKind::Slstm,
            BlockCell::Mlstm(_) => CellKind::Mlstm,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct XlstmNet {
    pub config: XlstmStackConfig,
    pub input_dim: usize,
    pub input_proj: Linear,
    pub blocks: Vec<XlstmBlock>,
    pub final_norm: Option<LayerNorm>,
    pub head: ClassifierHead,
}

/// Builds the stack. Blocks at `cfg.slstm_positions` are sLSTM, the rest
/// mLSTM. Input features are first projected to `heads * head_dim`.
pub fn build_stack(
    store: &mut ParamStore,
    cfg: &XlstmStackConfig,
    input_dim: usize,
    dense_units: usize,
    num_classes: usize,
    rng: &mut impl Rng,
) -> Result<XlstmNet> {
    cfg.validate()?;
    let d = cfg.model_dim();
    let input_proj = Linear::init(store, "xlstm.in", input_dim, d, rng);
    let mut blocks = Vec::with_capacity(cfg.num_blocks);
    for (i, kind) in cfg.block_kinds().into_iter().enumerate() {
        let prefix = format!("xlstm.block{}", i + 1);
        let residual = cfg.style == BlockStyle::ResidualPrenorm;
        let norm = residual.then(|| LayerNorm::init(store, &format!("{prefix}.norm"), d));
        let cell = match kind {
            CellKind::Slstm => BlockCell::Slstm(SlstmParams::init(
                store,
                &format!("{prefix}.slstm"),
                d,
                d,
                cfg.heads,
                cfg.forget_mode,
                cfg.slstm_gating,
                rng,
            )?),
            _ => BlockCell::Mlstm(MlstmParams::init(
                store,
                &format!("{prefix}.mlstm"),
                d,
                cfg.heads,
                cfg.head_dim,
                cfg.forget_mode,
                rng,
            )?),
        };
        let out_proj = residual.then(|| Linear::init(store, &format!("{prefix}.out"), d, d, rng));
        blocks.push(XlstmBlock {
            style: cfg.style,
            norm,
            cell,
            out_proj,
        });
    }
    let final_norm =
        (cfg.style == BlockStyle::ResidualPrenorm).then(|| LayerNorm::init(store, "xlstm.norm", d));
    let head = ClassifierHead::init(store, "xlstm.head", d, dense_units, num_classes, rng);
    Ok(XlstmNet {
        config: cfg.clone(),
        input_dim,
        input_proj,
        blocks,
        final_norm,
        head,
    })
}

/// Closed-form parameter count of [`build_stack`].
pub fn stack_num_scalars(
    cfg: &XlstmStackConfig,
    input_dim: usize,
    dense_units: usize,
    num_classes: usize,
) -> usize {
    let d = cfg.model_dim();
    let residual = cfg.style == BlockStyle::ResidualPrenorm;
    let wrap = if residual { 2 * d + Linear::num_scalars(d, d) } else { 0 };
    let blocks: usize = cfg
        .block_kinds()
        .iter()
        .map(|k| {
            wrap + match k {
                CellKind::Slstm => SlstmParams::num_scalars(d, d, cfg.heads),
                _ => MlstmParams::num_scalars(d, cfg.heads, cfg.head_dim),
            }
        })
        .sum();
    Linear::num_scalars(input_dim, d)
        + blocks
        + if residual { 2 * d } else { 0 }
        + ClassifierHead::num_scalars(d, dense_units, num_classes)
}

fn run_cell<C: RecurrentCell>(g: &mut Graph<'_>, cell: &C, xs: Var) -> Result<Var> {
    let s0 = cell.zero_state(g);
    Ok(unroll(g, cell, xs, s0)?.0)
}

/// Class posterior (`1 x classes`) for one sequence `xs` (`T x input_dim`).
/// Recurrences run over every position; pooling averages the unmasked ones.
pub fn xlstm_forward(
    g: &mut Graph<'_>,
    net: &XlstmNet,
    xs: Var,
    pad_mask: &[bool],
    layer_norm_eps: f64,
    dense_dropout: f64,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let (t, width) = g.value(xs).dims2();
    if width != net.input_dim || pad_mask.len() != t {
        return Err(Error::Shape(format!(
            "xLSTM input {:?} with mask length {}, expected width {}",
            g.value(xs).shape(),
            pad_mask.len(),
            net.input_dim
        )));
    }
    if !pad_mask.iter().any(|&k| k) {
        return Err(Error::Contract("xLSTM input has no unmasked positions".into()));
    }
    let mut x = net.input_proj.forward(g, xs);
    for block in &net.blocks {
        let inner = match &block.norm {
            Some(norm) => norm.forward(g, x, layer_norm_eps),
            None => x,
        };
        let hs = match &block.cell {
            BlockCell::Slstm(p) => {
                let bound = p.bind(g);
                run_cell(g, &bound, inner)?
            }
            BlockCell::Mlstm(p) => {
                let bound = p.bind(g);
                run_cell(g, &bound, inner)?
            }
        };
        let y = match &block.out_proj {
            Some(proj) => proj.forward(g, hs),
            None => hs,
        };
        let y = maybe_dropout(g, y, net.config.dropout, dropout.as_deref_mut());
        x = match block.style {
            BlockStyle::ResidualPrenorm => g.add(x, y),
            BlockStyle::Bare => y,
        };
    }
    if let Some(norm) = &net.final_norm {
        x = norm.forward(g, x, layer_norm_eps);
    }
    let pooled = pool(g, x, pad_mask, Pooling::Mean)?;
    Ok(net.head.forward(g, pooled, dense_dropout, dropout))
}

#[cfg(test)]
mod tests;

//! LSTM, sLSTM and mLSTM cells as graph operations.
//!
//! Every cell keeps its trainable tensors in a [`ParamStore`] and is
//! *bound* to a [`Graph`] before use, so one parameter node is shared by all
//! time steps of an unrolled sequence. Gate columns of fused weight matrices
//! are ordered `[input, forget, candidate, output]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Forget-gate activation for the exponential-gating cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForgetMode {
    #[default]
    Sigmoid,
    Exp,
}

/// Which gates feed the sLSTM cell and normaliser updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlstmGating {
    /// Max-log stabilised gates in both the cell and the normaliser update.
    #[default]
    Stabilized,
    /// Raw exponential gates, no stabiliser state.
    Unstabilized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Slstm,
    Mlstm,
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialisation.
pub fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data)
}

fn check_width(g: &Graph<'_>, x: Var, expected: usize, what: &str) -> Result<()> {
    let got = g.value(x).dims2();
    if got != (1, expected) {
        return Err(Error::Shape(format!(
            "{what}: expected a 1 x {expected} input row, got {:?}",
            g.value(x).shape()
        )));
    }
    Ok(())
}

/// A cell bound to a graph, able to run one step from a pre-projected input.
pub trait RecurrentCell {
    type State: Clone;

    fn input_dim(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn zero_state(&self, g: &mut Graph<'_>) -> Self::State;
    /// Input-dependent pre-activations for every row of `xs` (`T x input_dim`).
    fn project_inputs(&self, g: &mut Graph<'_>, xs: Var) -> Var;
    /// One step given row `t` of [`RecurrentCell::project_inputs`].
    fn step_projected(&self, g: &mut Graph<'_>, pre: Var, s: &Self::State) -> Result<Self::State>;
    fn hidden(state: &Self::State) -> Var;
}

/// Runs `cell` over every row of `xs`, returning the stacked hidden states
/// (`T x hidden_dim`) and the final state.
pub fn unroll<C: RecurrentCell>(
    g: &mut Graph<'_>,
    cell: &C,
    xs: Var,
    s0: C::State,
) -> Result<(Var, C::State)> {
    let (t, width) = g.value(xs).dims2();
    if t == 0 || g.value(xs).is_empty() {
        return Err(Error::Contract("unroll over an empty sequence".into()));
    }
    if width != cell.input_dim() {
        return Err(Error::Shape(format!(
            "unroll: inputs are {:?}, cell expects width {}",
            g.value(xs).shape(),
            cell.input_dim()
        )));
    }
    let pre = cell.project_inputs(g, xs);
    let mut state = s0;
    let mut hs = Vec::with_capacity(t);
    for step in 0..t {
        let row = g.select_row(pre, step);
        state = cell.step_projected(g, row, &state)?;
        hs.push(C::hidden(&state));
    }
    let stacked = g.stack_rows(&hs);
    Ok((stacked, state))
}

// ---------------------------------------------------------------------------
// LSTM

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden: usize,
    /// `input_dim x 4H`
    pub w: ParamId,
    /// `H x 4H`
    pub r: ParamId,
    /// `1 x 4H`
    pub b: ParamId,
}

impl LstmParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            uniform_init(rng, input_dim, 4 * hidden, input_dim),
        );
        let r = store.add(
            format!("{prefix}.r"),
            uniform_init(rng, hidden, 4 * hidden, hidden),
        );
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[1, 4 * hidden]));
        Self {
            input_dim,
            hidden,
            w,
            r,
            b,
        }
    }

    pub fn num_scalars(input_dim: usize, hidden: usize) -> usize {
        4 * hidden * (input_dim + hidden + 1)
    }

    pub fn bind(&self, g: &mut Graph<'_>) -> BoundLstm {
        BoundLstm {
            input_dim: self.input_dim,
            hidden: self.hidden,
            w: g.param(self.w),
            r: g.param(self.r),
            b: g.param(self.b),
            recurrent_mask: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    pub input_dim: usize,
    pub hidden: usize,
    pub w: Var,
    pub r: Var,
    pub b: Var,
    /// Dropout mask applied to `h_{t-1}` before the recurrent product.
    pub recurrent_mask: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub c: Var,
    pub h: Var,
}

impl RecurrentCell for BoundLstm {
    type State = LstmState;

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn hidden_dim(&self) -> usize {
        self.hidden
    }

    fn zero_state(&self, g: &mut Graph<'_>) -> LstmState {
        LstmState {
            c: g.input(Tensor::zeros(&[1, self.hidden])),
            h: g.input(Tensor::zeros(&[1, self.hidden])),
        }
    }

    fn project_inputs(&self, g: &mut Graph<'_>, xs: Var) -> Var {
        let xw = g.matmul(xs, self.w);
        g.add_row(xw, self.b)
    }

    fn step_projected(&self, g: &mut Graph<'_>, pre: Var, s: &LstmState) -> Result<LstmState> {
        let hd = self.hidden;
        let h_prev = match self.recurrent_mask {
            Some(mask) => g.mul(s.h, mask),
            None => s.h,
        };
        let rec = g.matmul(h_prev, self.r);
        let z = g.add(pre, rec);
        let ip = g.slice_cols(z, 0, hd);
        let fp = g.slice_cols(z, hd, hd);
        let cp = g.slice_cols(z, 2 * hd, hd);
        let op = g.slice_cols(z, 3 * hd, hd);
        let i = g.sigmoid(ip);
        let f = g.sigmoid(fp);
        let cand = g.tanh(cp);
        let o = g.sigmoid(op);
        let keep = g.mul(f, s.c);
        let write = g.mul(i, cand);
        let c = g.add(keep, write);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        Ok(LstmState { c, h })
    }

    fn hidden(state: &LstmState) -> Var {
        state.h
    }
}

/// One LSTM step: forget, candidate, input and output gates, then
/// `c = f*c + i*c~` and `h = o*tanh(c)`.
pub fn lstm_step(g: &mut Graph<'_>, p: &BoundLstm, x: Var, s: &LstmState) -> Result<LstmState> {
    check_width(g, x, p.input_dim, "lstm_step")?;
    let pre = p.project_inputs(g, x);
    p.step_projected(g, pre, s)
}

// ---------------------------------------------------------------------------
// sLSTM

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlstmParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub forget_mode: ForgetMode,
    pub gating: SlstmGating,
    /// `input_dim x 4H`
    pub w: ParamId,
    /// Block-diagonal recurrence: `H x 4*(H/heads)`, see
    /// [`Graph::head_block_matmul`].
    pub r: ParamId,
    /// `1 x 4H`
    pub b: ParamId,
}

impl SlstmParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        heads: usize,
        forget_mode: ForgetMode,
        gating: SlstmGating,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "sLSTM hidden size {hidden} is not divisible by {heads} heads"
            )));
        }
        let hd = hidden / heads;
        let w = store.add(
            format!("{prefix}.w"),
            uniform_init(rng, input_dim, 4 * hidden, input_dim),
        );
        let r = store.add(format!("{prefix}.r"), uniform_init(rng, hidden, 4 * hd, hd));
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[1, 4 * hidden]));
        Ok(Self {
            input_dim,
            hidden,
            heads,
            forget_mode,
            gating,
            w,
            r,
            b,
        })
    }

    pub fn num_scalars(input_dim: usize, hidden: usize, heads: usize) -> usize {
        4 * hidden * input_dim + 4 * hidden * (hidden / heads) + 4 * hidden
    }

    pub fn bind(&self, g: &mut Graph<'_>) -> BoundSlstm {
        BoundSlstm {
            input_dim: self.input_dim,
            hidden: self.hidden,
            heads: self.heads,
            forget_mode: self.forget_mode,
            gating: self.gating,
            w: g.param(self.w),
            r: g.param(self.r),
            b: g.param(self.b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundSlstm {
    pub input_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub forget_mode: ForgetMode,
    pub gating: SlstmGating,
    pub w: Var,
    pub r: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SlstmState {
    pub c: Var,
    pub h: Var,
    pub n: Var,
    pub m: Var,
}

/// Intermediate gate values of one sLSTM step.
#[derive(Debug, Clone, Copy)]
pub struct SlstmGates {
    /// Input-gate pre-activation, i.e. `log i_t`.
    pub log_i: Var,
    /// `log f_t` (log-sigmoid or the raw pre-activation in exp mode).
    pub log_f: Var,
    pub m: Var,
    /// Stabilised gates `i'_t`, `f'_t` (raw gates when unstabilised).
    pub i: Var,
    pub f: Var,
}

impl BoundSlstm {
    pub fn step_with_gates(
        &self,
        g: &mut Graph<'_>,
        pre: Var,
        s: &SlstmState,
    ) -> Result<(SlstmState, SlstmGates)> {
        let hd = self.hidden;
        let rec = g.head_block_matmul(s.h, self.r, self.heads, 4);
        let z = g.add(pre, rec);
        let log_i = g.slice_cols(z, 0, hd);
        let fp = g.slice_cols(z, hd, hd);
        let cp = g.slice_cols(z, 2 * hd, hd);
        let op = g.slice_cols(z, 3 * hd, hd);
        let log_f = match self.forget_mode {
            ForgetMode::Sigmoid => g.log_sigmoid(fp),
            ForgetMode::Exp => fp,
        };
        let (i, f, m) = match self.gating {
            SlstmGating::Stabilized => {
                let carried = g.add(log_f, s.m);
                let m = g.maximum(carried, log_i);
                let di = g.sub(log_i, m);
                let i = g.exp(di);
                let df = g.sub(carried, m);
                let f = g.exp(df);
                (i, f, m)
            }
            SlstmGating::Unstabilized => {
                let i = g.exp(log_i);
                let f = g.exp(log_f);
                (i, f, s.m)
            }
        };
        let cand = g.tanh(cp);
        let o = g.sigmoid(op);
        let keep = g.mul(f, s.c);
        let write = g.mul(i, cand);
        let c = g.add(keep, write);
        let nkeep = g.mul(f, s.n);
        let n = g.add(nkeep, i);
        if g.value(n).data().iter().any(|&v| v == 0.0 || !v.is_finite()) {
            return Err(Error::Degenerate(
                "sLSTM normaliser state is zero or non-finite at readout".into(),
            ));
        }
        let ratio = g.div(c, n);
        let tr = g.tanh(ratio);
        let h = g.mul(o, tr);
        Ok((
            SlstmState { c, h, n, m },
            SlstmGates {
                log_i,
                log_f,
                m,
                i,
                f,
            },
        ))
    }
}

impl RecurrentCell for BoundSlstm {
    type State = SlstmState;

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn hidden_dim(&self) -> usize {
        self.hidden
    }

    fn zero_state(&self, g: &mut Graph<'_>) -> SlstmState {
        let z = || Tensor::zeros(&[1, self.hidden]);
        SlstmState {
            c: g.input(z()),
            h: g.input(z()),
            n: g.input(z()),
            m: g.input(z()),
        }
    }

    fn project_inputs(&self, g: &mut Graph<'_>, xs: Var) -> Var {
        let xw = g.matmul(xs, self.w);
        g.add_row(xw, self.b)
    }

    fn step_projected(&self, g: &mut Graph<'_>, pre: Var, s: &SlstmState) -> Result<SlstmState> {
        Ok(self.step_with_gates(g, pre, s)?.0)
    }

    fn hidden(state: &SlstmState) -> Var {
        state.h
    }
}

pub fn slstm_step(g: &mut Graph<'_>, p: &BoundSlstm, x: Var, s: &SlstmState) -> Result<SlstmState> {
    Ok(slstm_step_with_gates(g, p, x, s)?.0)
}

pub fn slstm_step_with_gates(
    g: &mut Graph<'_>,
    p: &BoundSlstm,
    x: Var,
    s: &SlstmState,
) -> Result<(SlstmState, SlstmGates)> {
    check_width(g, x, p.input_dim, "slstm_step")?;
    let pre = p.project_inputs(g, x);
    p.step_with_gates(g, pre, s)
}

// ---------------------------------------------------------------------------
// mLSTM

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlstmParams {
    pub input_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub forget_mode: ForgetMode,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    /// Output-gate matrix and bias (vector gate).
    pub wo: ParamId,
    pub bo: ParamId,
    /// Scalar input gate per head: `input_dim x heads`.
    pub wi: ParamId,
    pub bi: ParamId,
    /// Scalar forget gate per head: `input_dim x heads`.
    pub wf: ParamId,
    pub bf: ParamId,
}

impl MlstmParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        heads: usize,
        head_dim: usize,
        forget_mode: ForgetMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || head_dim == 0 {
            return Err(Error::Config("mLSTM needs at least one head of width >= 1".into()));
        }
        let width = heads * head_dim;
        let mut mat = |name: &str, cols: usize| {
            store.add(
                format!("{prefix}.{name}"),
                uniform_init(rng, input_dim, cols, input_dim),
            )
        };
        let wq = mat("wq", width);
        let wk = mat("wk", width);
        let wv = mat("wv", width);
        let wo = mat("wo", width);
        let wi = mat("wi", heads);
        let wf = mat("wf", heads);
        let mut bias = |name: &str, cols: usize| {
            store.add(format!("{prefix}.{name}"), Tensor::zeros(&[1, cols]))
        };
        Ok(Self {
            input_dim,
            heads,
            head_dim,
            forget_mode,
            wq,
            bq: bias("bq", width),
            wk,
            bk: bias("bk", width),
            wv,
            bv: bias("bv", width),
            wo,
            bo: bias("bo", width),
            wi,
            bi: bias("bi", heads),
            wf,
            bf: bias("bf", heads),
        })
    }

    pub fn num_scalars(input_dim: usize, heads: usize, head_dim: usize) -> usize {
        let width = heads * head_dim;
        4 * width * (input_dim + 1) + 2 * heads * (input_dim + 1)
    }

    pub fn bind(&self, g: &mut Graph<'_>) -> BoundMlstm {
        let mut w_parts = [self.wq, self.wk, self.wv, self.wo, self.wi, self.wf].map(|p| g.param(p));
        // k = W_k x / sqrt(d) + b_k: the scaling is folded into the weight.
        w_parts[1] = g.scale(w_parts[1], 1.0 / (self.head_dim as f64).sqrt());
        let b_parts = [self.bq, self.bk, self.bv, self.bo, self.bi, self.bf].map(|p| g.param(p));
        let w = g.concat_cols(&w_parts);
        let b = g.concat_cols(&b_parts);
        BoundMlstm {
            input_dim: self.input_dim,
            heads: self.heads,
            head_dim: self.head_dim,
            forget_mode: self.forget_mode,
            w,
            b,
        }
    }
}

/// mLSTM bound to a graph. Input weights are fused column-wise as
/// `[q | k | v | o | i | f]`.
#[derive(Debug, Clone, Copy)]
pub struct BoundMlstm {
    pub input_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub forget_mode: ForgetMode,
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct MlstmState {
    /// Per-head `d x d` matrix memories stacked into `(heads*d) x d`.
    pub c: Var,
    pub n: Var,
    pub h: Var,
    /// Stabiliser per head; only advanced in exp-forget mode.
    pub m: Var,
    /// Divisor of the readout per head, in unstabilised units
    /// (`max(|n^T q|, 1)`).
    pub denom: Var,
}

impl BoundMlstm {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

impl RecurrentCell for BoundMlstm {
    type State = MlstmState;

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn hidden_dim(&self) -> usize {
        self.width()
    }

    fn zero_state(&self, g: &mut Graph<'_>) -> MlstmState {
        let w = self.width();
        MlstmState {
            c: g.input(Tensor::zeros(&[w, self.head_dim])),
            n: g.input(Tensor::zeros(&[1, w])),
            h: g.input(Tensor::zeros(&[1, w])),
            m: g.input(Tensor::zeros(&[1, self.heads])),
            denom: g.input(Tensor::full(&[1, self.heads], 1.0)),
        }
    }

    fn project_inputs(&self, g: &mut Graph<'_>, xs: Var) -> Var {
        let xw = g.matmul(xs, self.w);
        g.add_row(xw, self.b)
    }

    fn step_projected(&self, g: &mut Graph<'_>, pre: Var, s: &MlstmState) -> Result<MlstmState> {
        let (heads, d, w) = (self.heads, self.head_dim, self.width());
        let q = g.slice_cols(pre, 0, w);
        let k = g.slice_cols(pre, w, w);
        let v = g.slice_cols(pre, 2 * w, w);
        let op = g.slice_cols(pre, 3 * w, w);
        let log_i = g.slice_cols(pre, 4 * w, heads);
        let fp = g.slice_cols(pre, 4 * w + heads, heads);
        let o = g.sigmoid(op);

        let (i, f, m, floor) = match self.forget_mode {
            ForgetMode::Sigmoid => {
                let i = g.exp(log_i);
                let f = g.sigmoid(fp);
                (i, f, s.m, None)
            }
            ForgetMode::Exp => {
                let carried = g.add(fp, s.m);
                let m = g.maximum(carried, log_i);
                let di = g.sub(log_i, m);
                let i = g.exp(di);
                let df = g.sub(carried, m);
                let f = g.exp(df);
                let neg_m = g.scale(m, -1.0);
                let floor = g.exp(neg_m);
                (i, f, m, Some(floor))
            }
        };

        let keep = g.head_scale(s.c, f, heads);
        let outer = g.head_outer(v, k, heads);
        let write = g.head_scale(outer, i, heads);
        let c = g.add(keep, write);

        let f_rep = g.repeat_heads(f, d);
        let i_rep = g.repeat_heads(i, d);
        let nkeep = g.mul(f_rep, s.n);
        let nwrite = g.mul(i_rep, k);
        let n = g.add(nkeep, nwrite);

        let num = g.head_matvec(c, q, heads);
        let nq = g.head_dot(n, q, heads);
        let nq_abs = g.abs(nq);
        let (den, denom) = match floor {
            None => {
                let den = g.clamp_min(nq_abs, 1.0);
                (den, den)
            }
            Some(floor) => {
                // max(|n q|, e^{-m}) = e^{-m} max(|n~ q|, 1) in unstabilised units.
                let den = g.maximum(nq_abs, floor);
                let e_m = g.exp(m);
                let raw = g.mul(nq_abs, e_m);
                let denom = g.clamp_min(raw, 1.0);
                (den, denom)
            }
        };
        let den_rep = g.repeat_heads(den, d);
        let ratio = g.div(num, den_rep);
        let h = g.mul(o, ratio);
        Ok(MlstmState { c, n, h, m, denom })
    }

    fn hidden(state: &MlstmState) -> Var {
        state.h
    }
}

pub fn mlstm_step(g: &mut Graph<'_>, p: &BoundMlstm, x: Var, s: &MlstmState) -> Result<MlstmState> {
    check_width(g, x, p.input_dim, "mlstm_step")?;
    let pre = p.project_inputs(g, x);
    p.step_projected(g, pre, s)
}

#[cfg(test)]
mod tests;

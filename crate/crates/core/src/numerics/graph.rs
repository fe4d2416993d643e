//! Tape-based reverse-mode differentiation over dense 2-D tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the forward value. [`Graph::backward`] walks the tape in reverse and
//! accumulates vector-Jacobian products. Trainable tensors live in a
//! [`ParamStore`] and are borrowed, not copied, into the graph.
//!
//! Shape errors inside the graph are programming errors and panic with both
//! shapes in the message; user-facing entry points validate shapes first.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{Error, Result};

pub type ParamId = usize;

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Variable,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    Relu(Var),
    Abs(Var),
    Maximum(Var, Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SelectRow {
        x: Var,
        row: usize,
    },
    StackRows(Vec<Var>),
    ShiftDown(Var),
    MeanRowsMasked {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    SumAll(Var),
    Pick {
        x: Var,
        index: usize,
    },
    NegLogClamp {
        x: Var,
        floor: f64,
    },
    HeadOuter {
        v: Var,
        k: Var,
        heads: usize,
    },
    HeadMatVec {
        c: Var,
        q: Var,
        heads: usize,
    },
    HeadDot {
        a: Var,
        b: Var,
        heads: usize,
    },
    RepeatHeads {
        g: Var,
        width: usize,
    },
    HeadScale {
        c: Var,
        g: Var,
        heads: usize,
    },
    HeadBlockMatMul {
        x: Var,
        w: Var,
        heads: usize,
        groups: usize,
    },
}

struct Node<'p> {
    op: Op,
    value: Cow<'p, Tensor>,
    requires_grad: bool,
}

/// Recorded computation. Single-threaded; build one per training replica.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
}

/// Gradients of a scalar loss with respect to every node that required one.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`, if `v` is a leaf that required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    /// One gradient per parameter of `store`, zero for parameters the loss
    /// does not depend on. A parameter bound more than once has its
    /// contributions summed.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        for &(pid, node) in &self.params {
            if let Some(g) = &self.nodes[node] {
                out[pid].add_assign(g);
            }
        }
        out
    }
}

fn shape2(t: &Tensor) -> (usize, usize) {
    t.dims2()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without cancellation.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            value: Cow::Owned(t),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf owned by the graph.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Variable,
            value: Cow::Owned(t),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowed from the attached [`ParamStore`].
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self
            .store
            .expect("graph has no parameter store attached");
        self.nodes.push(Node {
            op: Op::Param(id),
            value: Cow::Borrowed(store.get(id)),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = shape2(self.value(a));
        let (k2, n) = shape2(self.value(b));
        assert_eq!(
            k,
            k2,
            "matmul inner dimensions disagree: {:?} x {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out), &[a, b])
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = shape2(self.value(a));
        let (n, k2) = shape2(self.value(b));
        assert_eq!(
            k,
            k2,
            "matmul_bt inner dimensions disagree: {:?} x {:?}^T",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::MatMulBt(a, b), Tensor::matrix(m, n, out), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(Op::Transpose(a), t, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())
            .unwrap_or_else(|e| panic!("reshape {:?}: {e}", self.value(a).shape()));
        self.push(Op::Reshape(a), t, &[a])
    }

    fn zip_same(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            shape2(ta),
            shape2(tb),
            "{what}: shapes differ {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        ta.same_shape(ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, "add", |x, y| x + y);
        self.push(Op::Add(a, b), t, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, "sub", |x, y| x - y);
        self.push(Op::Sub(a, b), t, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, "mul", |x, y| x * y);
        self.push(Op::Mul(a, b), t, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, "div", |x, y| x / y);
        self.push(Op::Div(a, b), t, &[a, b])
    }

    /// Adds a `1 x c` row to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        let (r, c) = shape2(ta);
        assert_eq!(
            shape2(tr),
            (1, c),
            "add_row: {:?} + row {:?}",
            ta.shape(),
            tr.shape()
        );
        let mut out = ta.data().to_vec();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        let t = Tensor::matrix(r, c, out);
        self.push(Op::AddRow(a, row), t, &[a, row])
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar needs a 1x1 scalar");
        let sv = self.value(s).data()[0];
        let t = self.value(a).map(|x| x * sv);
        self.push(Op::MulScalar(a, s), t, &[a, s])
    }

    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "div_scalar needs a 1x1 scalar");
        let sv = self.value(s).data()[0];
        let t = self.value(a).map(|x| x / sv);
        self.push(Op::DivScalar(a, s), t, &[a, s])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), t, &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(Op::AddConst(a), t, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), t, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), t, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), t, &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        self.push(Op::Log(a), t, &[a])
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(log_sigmoid);
        self.push(Op::LogSigmoid(a), t, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), t, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), t, &[a])
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, "maximum", |x, y| if x >= y { x } else { y });
        self.push(Op::Maximum(a, b), t, &[a, b])
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a).map(|x| x.max(floor));
        self.push(Op::ClampMin(a, floor), t, &[a])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = softmax_rows_masked(self.value(a), None);
        self.push(Op::Softmax(a), t, &[a])
    }

    /// Row-wise softmax over the columns where `keep` is true; the remaining
    /// columns receive exactly zero weight.
    pub fn softmax_rows_masked(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        if keep.len() != self.value(a).cols() {
            return Err(Error::Shape(format!(
                "softmax mask length {} for {:?}",
                keep.len(),
                self.value(a).shape()
            )));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::Contract("softmax over an all-masked row".into()));
        }
        let t = softmax_rows_masked(self.value(a), Some(keep));
        Ok(self.push(Op::Softmax(a), t, &[a]))
    }

    /// Per-row layer normalisation over the feature (column) axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let (r, c) = shape2(tx);
        assert_eq!(shape2(self.value(gain)), (1, c), "layer_norm gain shape");
        assert_eq!(shape2(self.value(bias)), (1, c), "layer_norm bias shape");
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::matrix(r, c, out);
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            t,
            &[x, gain, bias],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        let (r, c) = shape2(tx);
        assert!(start + len <= c, "slice_cols {start}+{len} beyond {c}");
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&tx.row_slice(i)[start..start + len]);
        }
        let t = Tensor::matrix(r, len, out);
        self.push(Op::SliceCols { x, start }, t, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), r, "concat_cols row mismatch");
                self.value(p).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let t = Tensor::matrix(r, total, out);
        self.push(Op::ConcatCols(parts.to_vec()), t, parts)
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Var {
        let t = Tensor::row(self.value(x).row_slice(row).to_vec());
        self.push(Op::SelectRow { x, row }, t, &[x])
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows of nothing");
        let c = self.value(rows[0]).cols();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &v in rows {
            let t = self.value(v);
            assert_eq!(t.rows(), 1, "stack_rows expects rows");
            assert_eq!(t.cols(), c, "stack_rows width mismatch");
            out.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(rows.len(), c, out);
        self.push(Op::StackRows(rows.to_vec()), t, rows)
    }

    /// Row `t` of the output is row `t-1` of the input; row 0 is zero.
    pub fn shift_down(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (r, c) = shape2(tx);
        let mut out = vec![0.0; r * c];
        if r > 1 {
            out[c..].copy_from_slice(&tx.data()[..(r - 1) * c]);
        }
        let t = Tensor::matrix(r, c, out);
        self.push(Op::ShiftDown(x), t, &[x])
    }

    /// Mean over the rows where `keep` is true, as a `1 x c` row.
    pub fn mean_rows_masked(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = shape2(tx);
        if keep.len() != r {
            return Err(Error::Shape(format!(
                "pooling mask length {} for {} rows",
                keep.len(),
                r
            )));
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::Contract("pooling over an empty unmasked region".into()));
        }
        let mut out = vec![0.0; c];
        for i in (0..r).filter(|&i| keep[i]) {
            for (o, v) in out.iter_mut().zip(tx.row_slice(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let t = Tensor::row(out);
        Ok(self.push(
            Op::MeanRowsMasked {
                x,
                mask: keep.to_vec(),
                count,
            },
            t,
            &[x],
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s), &[x])
    }

    /// Element `index` of the flattened tensor as a `1 x 1` scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Var {
        let v = self.value(x).data()[index];
        self.push(Op::Pick { x, index }, Tensor::scalar(v), &[x])
    }

    /// `-ln(max(x, floor))`, elementwise.
    pub fn neg_log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let t = self.value(x).map(|v| -(v.max(floor)).ln());
        self.push(Op::NegLogClamp { x, floor }, t, &[x])
    }

    /// Per-head outer products `v_h k_h^T`, stacked into a `(heads*d) x d`
    /// matrix. `v` and `k` are `1 x (heads*d)` rows.
    pub fn head_outer(&mut self, v: Var, k: Var, heads: usize) -> Var {
        let (tv, tk) = (self.value(v), self.value(k));
        let width = tv.len();
        assert_eq!(tk.len(), width, "head_outer width mismatch");
        assert_eq!(width % heads, 0, "head_outer: {width} not divisible by {heads}");
        let d = width / heads;
        let mut out = vec![0.0; width * d];
        for h in 0..heads {
            for i in 0..d {
                let vi = tv.data()[h * d + i];
                let orow = &mut out[(h * d + i) * d..(h * d + i + 1) * d];
                for (o, kj) in orow.iter_mut().zip(&tk.data()[h * d..(h + 1) * d]) {
                    *o = vi * kj;
                }
            }
        }
        let t = Tensor::matrix(width, d, out);
        self.push(Op::HeadOuter { v, k, heads }, t, &[v, k])
    }

    /// Per-head matrix-vector products `C_h q_h`, concatenated into a row.
    pub fn head_matvec(&mut self, c: Var, q: Var, heads: usize) -> Var {
        let (tc, tq) = (self.value(c), self.value(q));
        let width = tq.len();
        let d = width / heads;
        assert_eq!(shape2(tc), (width, d), "head_matvec: C {:?} q {:?}", tc.shape(), tq.shape());
        let mut out = vec![0.0; width];
        for h in 0..heads {
            let qh = &tq.data()[h * d..(h + 1) * d];
            for i in 0..d {
                let crow = tc.row_slice(h * d + i);
                out[h * d + i] = crow.iter().zip(qh).map(|(a, b)| a * b).sum();
            }
        }
        self.push(Op::HeadMatVec { c, q, heads }, Tensor::row(out), &[c, q])
    }

    /// Per-head dot products, one value per head.
    pub fn head_dot(&mut self, a: Var, b: Var, heads: usize) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let width = ta.len();
        assert_eq!(tb.len(), width, "head_dot width mismatch");
        let d = width / heads;
        let out = (0..heads)
            .map(|h| {
                ta.data()[h * d..(h + 1) * d]
                    .iter()
                    .zip(&tb.data()[h * d..(h + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        self.push(Op::HeadDot { a, b, heads }, Tensor::row(out), &[a, b])
    }

    /// Repeats each of the `heads` values `width` times: `1 x heads` to
    /// `1 x (heads*width)`.
    pub fn repeat_heads(&mut self, g: Var, width: usize) -> Var {
        let out = self
            .value(g)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, width))
            .collect();
        self.push(Op::RepeatHeads { g, width }, Tensor::row(out), &[g])
    }

    /// Scales head block `h` of a `(heads*d) x d` matrix by `g[h]`.
    pub fn head_scale(&mut self, c: Var, g: Var, heads: usize) -> Var {
        let (tc, tg) = (self.value(c), self.value(g));
        assert_eq!(tg.len(), heads, "head_scale needs one gate per head");
        let (r, d) = shape2(tc);
        assert_eq!(r, heads * d, "head_scale: C {:?}", tc.shape());
        let mut out = tc.data().to_vec();
        for h in 0..heads {
            let s = tg.data()[h];
            out[h * d * d..(h + 1) * d * d].iter_mut().for_each(|v| *v *= s);
        }
        let t = Tensor::matrix(r, d, out);
        self.push(Op::HeadScale { c, g, heads }, t, &[c, g])
    }

    /// Block-diagonal product for head-local recurrence.
    ///
    /// `x` is `r x D` with `D = heads*hd`; `w` is `D x (groups*hd)` holding,
    /// for each head, its `hd x hd` block of every group side by side. The
    /// output is `r x (groups*D)` laid out group-major, so group `g` of head
    /// `h` lands at columns `g*D + h*hd ..`.
    pub fn head_block_matmul(&mut self, x: Var, w: Var, heads: usize, groups: usize) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (r, dm) = shape2(tx);
        let hd = dm / heads;
        assert_eq!(
            shape2(tw),
            (dm, groups * hd),
            "head_block_matmul: x {:?} w {:?}",
            tx.shape(),
            tw.shape()
        );
        let oc = groups * dm;
        let mut out = vec![0.0; r * oc];
        for row in 0..r {
            let xr = tx.row_slice(row);
            let orow = &mut out[row * oc..(row + 1) * oc];
            for h in 0..heads {
                for i in 0..hd {
                    let xv = xr[h * hd + i];
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = tw.row_slice(h * hd + i);
                    for g in 0..groups {
                        let base = g * dm + h * hd;
                        for j in 0..hd {
                            orow[base + j] += xv * wrow[g * hd + j];
                        }
                    }
                }
            }
        }
        let t = Tensor::matrix(r, oc, out);
        self.push(Op::HeadBlockMatMul { x, w, heads, groups }, t, &[x, w])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(lt.same_shape(vec![1.0]));
        let mut params = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            match node.op {
                Op::Input => continue,
                Op::Variable => continue,
                Op::Param(pid) => {
                    params.push((pid, i));
                    continue;
                }
                _ => {}
            }
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        params.reverse();
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        // Accumulator for the gradient buffer of `v`, created on first use.
        fn buf<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut [f64] {
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(like.shape()))
                .data_mut()
        }
        let gd = g.data();

        match &self.nodes[i].op {
            Op::Input | Op::Variable | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = shape2(val(*a));
                let n = shape2(val(*b)).1;
                if wants(*a) {
                    // dA = G B^T
                    let bd = val(*b).data();
                    matmul_bt_into(gd, bd, buf(grads, *a, val(*a)), m, n, k);
                }
                if wants(*b) {
                    // dB = A^T G
                    let ad = val(*a).data();
                    matmul_at_into(ad, gd, buf(grads, *b, val(*b)), m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = shape2(val(*a));
                let n = shape2(val(*b)).0;
                if wants(*a) {
                    // dA = G B
                    let bd = val(*b).data();
                    matmul_into(gd, bd, buf(grads, *a, val(*a)), m, n, k);
                }
                if wants(*b) {
                    // dB = G^T A
                    let ad = val(*a).data();
                    matmul_at_into(gd, ad, buf(grads, *b, val(*b)), m, n, k);
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let gt = g.transpose();
                    for (o, v) in buf(grads, *a, val(*a)).iter_mut().zip(gt.data()) {
                        *o += v;
                    }
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    for (o, v) in buf(grads, *a, val(*a)).iter_mut().zip(gd) {
                        *o += v;
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        for (o, x) in buf(grads, v, val(v)).iter_mut().zip(gd) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    for (o, x) in buf(grads, *a, val(*a)).iter_mut().zip(gd) {
                        *o += x;
                    }
                }
                if wants(*b) {
                    for (o, x) in buf(grads, *b, val(*b)).iter_mut().zip(gd) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    for ((o, x), y) in buf(grads, *a, val(*a)).iter_mut().zip(gd).zip(bd) {
                        *o += x * y;
                    }
                }
                if wants(*b) {
                    for ((o, x), y) in buf(grads, *b, val(*b)).iter_mut().zip(gd).zip(ad) {
                        *o += x * y;
                    }
                }
            }
            Op::Div(a, b) => {
                let bd = val(*b).data();
                let od = out.data();
                if wants(*a) {
                    for ((o, x), y) in buf(grads, *a, val(*a)).iter_mut().zip(gd).zip(bd) {
                        *o += x / y;
                    }
                }
                if wants(*b) {
                    for (((o, x), y), q) in
                        buf(grads, *b, val(*b)).iter_mut().zip(gd).zip(bd).zip(od)
                    {
                        *o -= x * q / y;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    for (o, x) in buf(grads, *a, val(*a)).iter_mut().zip(gd) {
                        *o += x;
                    }
                }
                if wants(*row) {
                    let c = val(*row).len();
                    let rb = buf(grads, *row, val(*row));
                    for chunk in gd.chunks(c) {
                        for (o, x) in rb.iter_mut().zip(chunk) {
                            *o += x;
                        }
                    }
                }
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s).data()[0];
                if wants(*a) {
                    for (o, x) in buf(grads, *a, val(*a)).iter_mut().zip(gd) {
                        *o += x * sv;
                    }
                }
                if wants(*s) {
                    let dot: f64 = gd.iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    buf(grads, *s, val(*s))[0] += dot;
                }
            }
            Op::DivScalar(a, s) => {
                let sv = val(*s).data()[0];
                if wants(*a) {
                    for (o, x) in buf(grads, *a, val(*a)).iter_mut().zip(gd) {
                        *o += x / sv;
                    }
                }
                if wants(*s) {
                    let dot: f64 = gd.iter().zip(out.data()).map(|(x, y)| x * y).sum();
                    buf(grads, *s, val(*s))[0] -= dot / sv;
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    for (o, x) in buf(grads, *a, val(*a)).iter_mut().zip(gd) {
                        *o += x * c;
                    }
                }
            }
            Op::AddConst(a) => {
                if wants(*a) {
                    for (o, x) in buf(grads, *a, val(*a)).iter_mut().zip(gd) {
                        *o += x;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    for ((o, x), y) in buf(grads, *a, val(*a)).iter_mut().zip(gd).zip(out.data()) {
                        *o += x * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    for ((o, x), y) in buf(grads, *a, val(*a)).iter_mut().zip(gd).zip(out.data()) {
                        *o += x * (1.0 - y * y);
                    }
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    for ((o, x), y) in buf(grads, *a, val(*a)).iter_mut().zip(gd).zip(out.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::Log(a) => {
                if wants(*a) {
                    let ad = val(*a).data();
                    for ((o, x), y) in buf(grads, *a, val(*a)).iter_mut().zip(gd).zip(ad) {
                        *o += x / y;
                    }
                }
            }
            Op::LogSigmoid(a) => {
                if wants(*a) {
                    let ad = val(*a).data();
                    for ((o, x), y) in buf(grads, *a, val(*a)).iter_mut().zip(gd).zip(ad) {
                        // d/dx log sigmoid(x) = sigmoid(-x)
                        *o += x * sigmoid(-y);
                    }
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let ad = val(*a).data();
                    for ((o, x), y) in buf(grads, *a, val(*a)).iter_mut().zip(gd).zip(ad) {
                        if *y > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::Abs(a) => {
                if wants(*a) {
                    let ad = val(*a).data();
                    for ((o, x), y) in buf(grads, *a, val(*a)).iter_mut().zip(gd).zip(ad) {
                        if *y > 0.0 {
                            *o += x;
                        } else if *y < 0.0 {
                            *o -= x;
                        }
                    }
                }
            }
            Op::Maximum(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let ga = buf(grads, *a, val(*a));
                    for j in 0..gd.len() {
                        if ad[j] >= bd[j] {
                            ga[j] += gd[j];
                        }
                    }
                }
                if wants(*b) {
                    let gb = buf(grads, *b, val(*b));
                    for j in 0..gd.len() {
                        if ad[j] < bd[j] {
                            gb[j] += gd[j];
                        }
                    }
                }
            }
            Op::ClampMin(a, floor) => {
                if wants(*a) {
                    let ad = val(*a).data();
                    for ((o, x), y) in buf(grads, *a, val(*a)).iter_mut().zip(gd).zip(ad) {
                        if y > floor {
                            *o += x;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let c = out.cols();
                    let od = out.data();
                    let ga = buf(grads, *a, val(*a));
                    for r in 0..out.rows() {
                        let y = &od[r * c..(r + 1) * c];
                        let gr = &gd[r * c..(r + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga[r * c + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = shape2(out);
                if wants(*gain) {
                    let gg = buf(grads, *gain, val(*gain));
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += gd[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = buf(grads, *bias, val(*bias));
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += gd[i * c + j];
                        }
                    }
                }
                if wants(*x) {
                    let gain_d = val(*gain).data();
                    let gx = buf(grads, *x, val(*x));
                    let nf = c as f64;
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mut sum = 0.0;
                        let mut sum_xh = 0.0;
                        for j in 0..c {
                            dxhat[j] = gd[i * c + j] * gain_d[j];
                            sum += dxhat[j];
                            sum_xh += dxhat[j] * xh[j];
                        }
                        let k = inv_std[i] / nf;
                        for j in 0..c {
                            gx[i * c + j] += k * (nf * dxhat[j] - sum - xh[j] * sum_xh);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let c = val(*x).cols();
                    let len = out.cols();
                    let gx = buf(grads, *x, val(*x));
                    for r in 0..out.rows() {
                        for j in 0..len {
                            gx[r * c + start + j] += gd[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let gp = buf(grads, p, val(p));
                        for r in 0..out.rows() {
                            for j in 0..w {
                                gp[r * w + j] += gd[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SelectRow { x, row } => {
                if wants(*x) {
                    let c = val(*x).cols();
                    let gx = buf(grads, *x, val(*x));
                    for j in 0..c {
                        gx[row * c + j] += gd[j];
                    }
                }
            }
            Op::StackRows(rows) => {
                let c = out.cols();
                for (r, &v) in rows.iter().enumerate() {
                    if wants(v) {
                        for (o, x) in buf(grads, v, val(v)).iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                            *o += x;
                        }
                    }
                }
            }
            Op::ShiftDown(x) => {
                if wants(*x) {
                    let (r, c) = shape2(out);
                    let gx = buf(grads, *x, val(*x));
                    if r > 1 {
                        for (o, v) in gx[..(r - 1) * c].iter_mut().zip(&gd[c..]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MeanRowsMasked { x, mask, count } => {
                if wants(*x) {
                    let c = out.cols();
                    let inv = 1.0 / *count as f64;
                    let gx = buf(grads, *x, val(*x));
                    for (r, _) in mask.iter().enumerate().filter(|(_, &k)| k) {
                        for j in 0..c {
                            gx[r * c + j] += gd[j] * inv;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if wants(*x) {
                    let s = gd[0];
                    buf(grads, *x, val(*x)).iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Pick { x, index } => {
                if wants(*x) {
                    buf(grads, *x, val(*x))[*index] += gd[0];
                }
            }
            Op::NegLogClamp { x, floor } => {
                if wants(*x) {
                    let xd = val(*x).data();
                    for ((o, gv), v) in buf(grads, *x, val(*x)).iter_mut().zip(gd).zip(xd) {
                        if v > floor {
                            *o -= gv / v;
                        }
                    }
                }
            }
            Op::HeadOuter { v, k, heads } => {
                let (vd, kd) = (val(*v).data(), val(*k).data());
                let width = vd.len();
                let d = width / heads;
                if wants(*v) {
                    let gv = buf(grads, *v, val(*v));
                    for h in 0..*heads {
                        for i in 0..d {
                            let grow = &gd[(h * d + i) * d..(h * d + i + 1) * d];
                            gv[h * d + i] +=
                                grow.iter().zip(&kd[h * d..(h + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if wants(*k) {
                    let gk = buf(grads, *k, val(*k));
                    for h in 0..*heads {
                        for i in 0..d {
                            let vi = vd[h * d + i];
                            let grow = &gd[(h * d + i) * d..(h * d + i + 1) * d];
                            for j in 0..d {
                                gk[h * d + j] += grow[j] * vi;
                            }
                        }
                    }
                }
            }
            Op::HeadMatVec { c, q, heads } => {
                let (cd, qd) = (val(*c).data(), val(*q).data());
                let width = qd.len();
                let d = width / heads;
                if wants(*c) {
                    let gc = buf(grads, *c, val(*c));
                    for h in 0..*heads {
                        for i in 0..d {
                            let gi = gd[h * d + i];
                            for j in 0..d {
                                gc[(h * d + i) * d + j] += gi * qd[h * d + j];
                            }
                        }
                    }
                }
                if wants(*q) {
                    let gq = buf(grads, *q, val(*q));
                    for h in 0..*heads {
                        for i in 0..d {
                            let gi = gd[h * d + i];
                            for j in 0..d {
                                gq[h * d + j] += gi * cd[(h * d + i) * d + j];
                            }
                        }
                    }
                }
            }
            Op::HeadDot { a, b, heads } => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let d = ad.len() / heads;
                if wants(*a) {
                    let ga = buf(grads, *a, val(*a));
                    for j in 0..ad.len() {
                        ga[j] += gd[j / d] * bd[j];
                    }
                }
                if wants(*b) {
                    let gb = buf(grads, *b, val(*b));
                    for j in 0..bd.len() {
                        gb[j] += gd[j / d] * ad[j];
                    }
                }
            }
            Op::RepeatHeads { g: gv, width } => {
                if wants(*gv) {
                    let gg = buf(grads, *gv, val(*gv));
                    for (j, x) in gd.iter().enumerate() {
                        gg[j / width] += x;
                    }
                }
            }
            Op::HeadScale { c, g: gv, heads } => {
                let (cd, sd) = (val(*c).data(), val(*gv).data());
                let block = cd.len() / heads;
                if wants(*c) {
                    let gc = buf(grads, *c, val(*c));
                    for j in 0..cd.len() {
                        gc[j] += gd[j] * sd[j / block];
                    }
                }
                if wants(*gv) {
                    let gg = buf(grads, *gv, val(*gv));
                    for h in 0..*heads {
                        gg[h] += gd[h * block..(h + 1) * block]
                            .iter()
                            .zip(&cd[h * block..(h + 1) * block])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
            Op::HeadBlockMatMul { x, w, heads, groups } => {
                let (xt, wt) = (val(*x), val(*w));
                let (r, dm) = shape2(xt);
                let hd = dm / heads;
                let oc = groups * dm;
                let wc = groups * hd;
                if wants(*x) {
                    let gx = buf(grads, *x, xt);
                    for row in 0..r {
                        let grow = &gd[row * oc..(row + 1) * oc];
                        for h in 0..*heads {
                            for i in 0..hd {
                                let wrow = wt.row_slice(h * hd + i);
                                let mut s = 0.0;
                                for gi in 0..*groups {
                                    let base = gi * dm + h * hd;
                                    for j in 0..hd {
                                        s += grow[base + j] * wrow[gi * hd + j];
                                    }
                                }
                                gx[row * dm + h * hd + i] += s;
                            }
                        }
                    }
                }
                if wants(*w) {
                    let gw = buf(grads, *w, wt);
                    for row in 0..r {
                        let xr = xt.row_slice(row);
                        let grow = &gd[row * oc..(row + 1) * oc];
                        for h in 0..*heads {
                            for i in 0..hd {
                                let xv = xr[h * hd + i];
                                if xv == 0.0 {
                                    continue;
                                }
                                let wrow = &mut gw[(h * hd + i) * wc..(h * hd + i + 1) * wc];
                                for gi in 0..*groups {
                                    let base = gi * dm + h * hd;
                                    for j in 0..hd {
                                        wrow[gi * hd + j] += xv * grow[base + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Row-wise softmax with max subtraction; masked columns get exactly zero.
pub fn softmax_rows_masked(x: &Tensor, keep: Option<&[bool]>) -> Tensor {
    let (r, c) = x.dims2();
    let mut out = vec![0.0; r * c];
    let kept = |j: usize| keep.is_none_or(|k| k[j]);
    for i in 0..r {
        let row = x.row_slice(i);
        let max = (0..c)
            .filter(|&j| kept(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in (0..c).filter(|&j| kept(j)) {
            let e = (row[j] - max).exp();
            out[i * c + j] = e;
            sum += e;
        }
        for j in (0..c).filter(|&j| kept(j)) {
            out[i * c + j] /= sum;
        }
    }
    Tensor::matrix(r, c, out)
}

/// Plain elementwise sigmoid, exposed for reference code and tests.
pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

pub fn log_sigmoid_scalar(x: f64) -> f64 {
    log_sigmoid(x)
}

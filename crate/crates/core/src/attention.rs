//! Scaled dot-product and multi-head attention, and the post-norm encoder
//! block used by the Transformer classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cells::uniform_init;
use crate::error::{Error, Result};
use crate::numerics::{maybe_dropout, Dropout, Graph, ParamId, ParamStore, Tensor, Var};

/// `softmax(Q K^T / sqrt(d_k)) V`. With `key_mask`, keys whose entry is
/// false get zero weight.
pub fn scaled_dot_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    d_k: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    Ok(scaled_dot_attention_weights(g, q, k, v, d_k, key_mask)?.0)
}

/// Like [`scaled_dot_attention`], also returning the attention weights.
pub fn scaled_dot_attention_weights(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    d_k: usize,
    key_mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (
        g.value(q).dims2(),
        g.value(k).dims2(),
        g.value(v).dims2(),
    );
    if d_k == 0 || qs.1 != d_k || ks.1 != d_k || ks.0 != vs.0 {
        return Err(Error::Shape(format!(
            "attention: Q {qs:?}, K {ks:?}, V {vs:?}, d_k {d_k}"
        )));
    }
    let scores = g.matmul_bt(q, k);
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = match key_mask {
        Some(keep) => g.softmax_rows_masked(scores, keep)?,
        None => g.softmax_rows(scores),
    };
    let out = g.matmul(weights, v);
    Ok((out, weights))
}

/// Per-head projections stored fused: head `h` owns columns
/// `h*head_dim..(h+1)*head_dim` of `wq`, `wk` and `wv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionParams {
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// `model_dim x heads*head_dim`
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// `heads*head_dim x model_dim`
    pub wo: ParamId,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        model_dim: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || head_dim == 0 || model_dim == 0 {
            return Err(Error::Config(
                "attention needs positive model dim, heads and head dim".into(),
            ));
        }
        let inner = heads * head_dim;
        let mut mat = |name: &str, rows: usize, cols: usize| {
            store.add(format!("{prefix}.{name}"), uniform_init(rng, rows, cols, rows))
        };
        Ok(Self {
            model_dim,
            heads,
            head_dim,
            wq: mat("wq", model_dim, inner),
            wk: mat("wk", model_dim, inner),
            wv: mat("wv", model_dim, inner),
            wo: mat("wo", inner, model_dim),
        })
    }

    pub fn num_scalars(model_dim: usize, heads: usize, head_dim: usize) -> usize {
        4 * model_dim * heads * head_dim
    }

    pub fn bind(&self, g: &mut Graph<'_>) -> BoundAttention {
        BoundAttention {
            model_dim: self.model_dim,
            heads: self.heads,
            head_dim: self.head_dim,
            wq: g.param(self.wq),
            wk: g.param(self.wk),
            wv: g.param(self.wv),
            wo: g.param(self.wo),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAttention {
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// `Concat(head_1..head_n) W^O` with `head_i = Attention(X W_i^Q, X W_i^K, X W_i^V)`.
pub fn multi_head_attention(
    g: &mut Graph<'_>,
    p: &BoundAttention,
    x: Var,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let (_, width) = g.value(x).dims2();
    if width != p.model_dim {
        return Err(Error::Shape(format!(
            "multi-head attention: input width {width}, model dim {}",
            p.model_dim
        )));
    }
    let q = g.matmul(x, p.wq);
    let k = g.matmul(x, p.wk);
    let v = g.matmul(x, p.wv);
    let d = p.head_dim;
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = g.slice_cols(q, h * d, d);
        let kh = g.slice_cols(k, h * d, d);
        let vh = g.slice_cols(v, h * d, d);
        heads.push(scaled_dot_attention(g, qh, kh, vh, d, key_mask)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    Ok(g.matmul(cat, p.wo))
}

/// Sinusoidal position table: `sin(pos / 10000^(2i/D))` at even columns and
/// the matching cosine at odd columns.
pub fn sinusoidal_table(rows: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; rows * dim];
    for pos in 0..rows {
        for j in 0..dim {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            data[pos * dim + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(rows, dim, data)
}

pub fn positional_encode(g: &mut Graph<'_>, x: Var) -> Var {
    let (rows, dim) = g.value(x).dims2();
    let pe = g.input(sinusoidal_table(rows, dim));
    g.add(x, pe)
}

/// Multi-head attention and a causal width-`conv_width` temporal convolution
/// feed-forward, each followed by residual addition and layer normalisation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderBlockParams {
    pub attention: AttentionParams,
    pub conv_width: usize,
    pub ffn_channels: usize,
    /// `conv_width*model_dim x ffn_channels`; tap `j` multiplies the input
    /// `conv_width - 1 - j` steps in the past.
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    /// `ffn_channels x model_dim`
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl EncoderBlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        model_dim: usize,
        heads: usize,
        head_dim: usize,
        conv_width: usize,
        ffn_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if conv_width == 0 || ffn_channels == 0 {
            return Err(Error::Config(
                "encoder feed-forward needs a positive conv width and channel count".into(),
            ));
        }
        let attention =
            AttentionParams::init(store, &format!("{prefix}.mha"), model_dim, heads, head_dim, rng)?;
        let fan_in = conv_width * model_dim;
        let conv_w = store.add(
            format!("{prefix}.conv_w"),
            uniform_init(rng, fan_in, ffn_channels, fan_in),
        );
        let conv_b = store.add(format!("{prefix}.conv_b"), Tensor::zeros(&[1, ffn_channels]));
        let proj_w = store.add(
            format!("{prefix}.proj_w"),
            uniform_init(rng, ffn_channels, model_dim, ffn_channels),
        );
        let proj_b = store.add(format!("{prefix}.proj_b"), Tensor::zeros(&[1, model_dim]));
        let ones = || Tensor::full(&[1, model_dim], 1.0);
        let zeros = || Tensor::zeros(&[1, model_dim]);
        Ok(Self {
            attention,
            conv_width,
            ffn_channels,
            conv_w,
            conv_b,
            proj_w,
            proj_b,
            ln1_gain: store.add(format!("{prefix}.ln1_gain"), ones()),
            ln1_bias: store.add(format!("{prefix}.ln1_bias"), zeros()),
            ln2_gain: store.add(format!("{prefix}.ln2_gain"), ones()),
            ln2_bias: store.add(format!("{prefix}.ln2_bias"), zeros()),
        })
    }

    pub fn num_scalars(
        model_dim: usize,
        heads: usize,
        head_dim: usize,
        conv_width: usize,
        ffn_channels: usize,
    ) -> usize {
        AttentionParams::num_scalars(model_dim, heads, head_dim)
            + (conv_width * model_dim + 1) * ffn_channels
            + (ffn_channels + 1) * model_dim
            + 4 * model_dim
    }

    pub fn bind(&self, g: &mut Graph<'_>) -> BoundEncoderBlock {
        BoundEncoderBlock {
            attention: self.attention.bind(g),
            conv_width: self.conv_width,
            conv_w: g.param(self.conv_w),
            conv_b: g.param(self.conv_b),
            proj_w: g.param(self.proj_w),
            proj_b: g.param(self.proj_b),
            ln1_gain: g.param(self.ln1_gain),
            ln1_bias: g.param(self.ln1_bias),
            ln2_gain: g.param(self.ln2_gain),
            ln2_bias: g.param(self.ln2_bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundEncoderBlock {
    pub attention: BoundAttention,
    pub conv_width: usize,
    pub conv_w: Var,
    pub conv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

/// Options shared by every block of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BlockOptions {
    pub mask_attention: bool,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

/// Zeroes the rows of `x` where `keep` is false.
fn zero_masked_rows(g: &mut Graph<'_>, x: Var, keep: &[bool]) -> Var {
    if keep.iter().all(|&k| k) {
        return x;
    }
    let (r, c) = g.value(x).dims2();
    let mut m = vec![0.0; r * c];
    for (i, &k) in keep.iter().enumerate() {
        if k {
            m[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = 1.0);
        }
    }
    let mv = g.input(Tensor::matrix(r, c, m));
    g.mul(x, mv)
}

/// Causal temporal convolution over the rows of `x`, followed by ReLU and a
/// width-1 projection back to the model dimension.
fn conv_feed_forward(g: &mut Graph<'_>, p: &BoundEncoderBlock, x: Var) -> Var {
    let mut taps = Vec::with_capacity(p.conv_width);
    let mut shifted = x;
    for _ in 0..p.conv_width {
        taps.push(shifted);
        shifted = g.shift_down(shifted);
    }
    taps.reverse();
    let stacked = if taps.len() == 1 {
        taps[0]
    } else {
        g.concat_cols(&taps)
    };
    let h = g.matmul(stacked, p.conv_w);
    let h = g.add_row(h, p.conv_b);
    let h = g.relu(h);
    let y = g.matmul(h, p.proj_w);
    g.add_row(y, p.proj_b)
}

/// `y = LN(x + MHA(x))`, then `LN(y + FFN(y))`. Masked rows are never
/// attended to and are zeroed before the convolution, so they cannot leak
/// into unmasked positions.
pub fn encoder_block(
    g: &mut Graph<'_>,
    p: &BoundEncoderBlock,
    x: Var,
    pad_mask: &[bool],
    opts: BlockOptions,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let rows = g.value(x).rows();
    if pad_mask.len() != rows {
        return Err(Error::Shape(format!(
            "encoder block: mask length {} for {rows} positions",
            pad_mask.len()
        )));
    }
    if !pad_mask.iter().any(|&k| k) {
        return Err(Error::Contract("encoder block over an all-masked sequence".into()));
    }
    let key_mask = opts.mask_attention.then_some(pad_mask);
    let att = multi_head_attention(g, &p.attention, x, key_mask)?;
    let att = maybe_dropout(g, att, opts.dropout, dropout.as_deref_mut());
    let r1 = g.add(x, att);
    let y = g.layer_norm(r1, p.ln1_gain, p.ln1_bias, opts.layer_norm_eps);

    let conv_in = if opts.mask_attention {
        zero_masked_rows(g, y, pad_mask)
    } else {
        y
    };
    let ff = conv_feed_forward(g, p, conv_in);
    let ff = maybe_dropout(g, ff, opts.dropout, dropout);
    let r2 = g.add(y, ff);
    Ok(g.layer_norm(r2, p.ln2_gain, p.ln2_bias, opts.layer_norm_eps))
}

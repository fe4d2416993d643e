use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{finite_difference_check, sigmoid_scalar};

fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect(),
    )
}

fn lstm_from(g: &mut Graph<'_>, w: Tensor, r: Tensor, b: Tensor) -> BoundLstm {
    BoundLstm {
        input_dim: w.rows(),
        hidden: r.rows(),
        w: g.input(w),
        r: g.input(r),
        b: g.input(b),
        recurrent_mask: None,
    }
}

#[test]
fn lstm_zero_weights_zero_fixed_point() {
    let mut g = Graph::new();
    let p = lstm_from(
        &mut g,
        Tensor::zeros(&[3, 8]),
        Tensor::zeros(&[2, 8]),
        Tensor::zeros(&[1, 8]),
    );
    let s0 = p.zero_state(&mut g);
    let x = g.input(Tensor::row(vec![0.4, -1.0, 2.0]));
    let s1 = lstm_step(&mut g, &p, x, &s0).unwrap();
    assert_eq!(g.value(s1.c).data(), &[0.0, 0.0]);
    assert_eq!(g.value(s1.h).data(), &[0.0, 0.0]);
}

#[test]
fn lstm_saturated_forget_gate_keeps_cell() {
    let mut g = Graph::new();
    let mut b = vec![0.0; 4];
    b[1] = 60.0; // forget gate bias
    let p = lstm_from(
        &mut g,
        Tensor::zeros(&[1, 4]),
        Tensor::zeros(&[1, 4]),
        Tensor::row(b),
    );
    let s0 = LstmState {
        c: g.input(Tensor::row(vec![0.7])),
        h: g.input(Tensor::row(vec![0.0])),
    };
    let x = g.input(Tensor::row(vec![1.0]));
    let s1 = lstm_step(&mut g, &p, x, &s0).unwrap();
    assert!((g.value(s1.c).data()[0] - 0.7).abs() < 1e-12);
}

/// Scalar LSTM evaluated directly from the gate equations.
fn scalar_lstm_oracle(w: [f64; 4], r: [f64; 4], b: [f64; 4], xs: &[f64]) -> Vec<(f64, f64)> {
    let (mut c, mut h) = (0.0, 0.0);
    let mut out = Vec::new();
    for &x in xs {
        let pre = |k: usize| w[k] * x + r[k] * h + b[k];
        let i = sigmoid_scalar(pre(0));
        let f = sigmoid_scalar(pre(1));
        let ct = pre(2).tanh();
        let o = sigmoid_scalar(pre(3));
        c = f * c + i * ct;
        h = o * c.tanh();
        out.push((c, h));
    }
    out
}

#[test]
fn lstm_scalar_matches_oracle() {
    let ones = [1.0; 4];
    let oracle = scalar_lstm_oracle(ones, ones, [0.0; 4], &[1.0]);
    let s = sigmoid_scalar(1.0);
    assert!((oracle[0].0 - s * 1f64.tanh()).abs() < 1e-15);

    let w = [0.3, -0.8, 1.2, 0.5];
    let r = [0.9, 0.1, -0.4, 0.7];
    let b = [0.05, 0.6, -0.2, 0.0];
    let xs = [1.0, -0.5, 0.25, 2.0, 0.0, -1.5];
    let oracle = scalar_lstm_oracle(w, r, b, &xs);

    let mut g = Graph::new();
    let p = lstm_from(
        &mut g,
        Tensor::row(w.to_vec()),
        Tensor::row(r.to_vec()),
        Tensor::row(b.to_vec()),
    );
    let mut s = p.zero_state(&mut g);
    for (k, &x) in xs.iter().enumerate() {
        let xv = g.input(Tensor::row(vec![x]));
        s = lstm_step(&mut g, &p, xv, &s).unwrap();
        assert!((g.value(s.c).data()[0] - oracle[k].0).abs() < 1e-14);
        assert!((g.value(s.h).data()[0] - oracle[k].1).abs() < 1e-14);
    }
}

#[test]
fn lstm_step_rejects_wrong_width() {
    let mut g = Graph::new();
    let p = lstm_from(
        &mut g,
        Tensor::zeros(&[3, 8]),
        Tensor::zeros(&[2, 8]),
        Tensor::zeros(&[1, 8]),
    );
    let s0 = p.zero_state(&mut g);
    let x = g.input(Tensor::row(vec![1.0; 4]));
    assert!(matches!(lstm_step(&mut g, &p, x, &s0), Err(Error::Shape(_))));
}

fn slstm_from(
    g: &mut Graph<'_>,
    w: Tensor,
    r: Tensor,
    b: Tensor,
    heads: usize,
    forget_mode: ForgetMode,
    gating: SlstmGating,
) -> BoundSlstm {
    BoundSlstm {
        input_dim: w.rows(),
        hidden: w.cols() / 4,
        heads,
        forget_mode,
        gating,
        w: g.input(w),
        r: g.input(r),
        b: g.input(b),
    }
}

#[test]
fn slstm_first_step_gate_values() {
    let mut g = Graph::new();
    let p = slstm_from(
        &mut g,
        Tensor::zeros(&[2, 4]),
        Tensor::zeros(&[1, 4]),
        Tensor::zeros(&[1, 4]),
        1,
        ForgetMode::Sigmoid,
        SlstmGating::Stabilized,
    );
    let s0 = p.zero_state(&mut g);
    let x = g.input(Tensor::row(vec![0.3, -0.2]));
    let (_, gates) = slstm_step_with_gates(&mut g, &p, x, &s0).unwrap();
    assert_eq!(g.value(gates.log_i).data()[0], 0.0);
    assert_eq!(g.value(gates.m).data()[0], 0.0);
    assert_eq!(g.value(gates.i).data()[0], 1.0);
    assert!((g.value(gates.f).data()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn slstm_normaliser_converges_to_two() {
    let mut g = Graph::new();
    let p = slstm_from(
        &mut g,
        Tensor::zeros(&[1, 4]),
        Tensor::zeros(&[1, 4]),
        Tensor::zeros(&[1, 4]),
        1,
        ForgetMode::Sigmoid,
        SlstmGating::Stabilized,
    );
    let mut s = p.zero_state(&mut g);
    let x = g.input(Tensor::row(vec![0.0]));
    for _ in 0..64 {
        s = slstm_step(&mut g, &p, x, &s).unwrap();
    }
    assert!((g.value(s.n).data()[0] - 2.0).abs() < 1e-9);
}

#[test]
fn slstm_stabilised_identities_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for mode in [ForgetMode::Sigmoid, ForgetMode::Exp] {
        let mut g = Graph::new();
        let p = slstm_from(
            &mut g,
            rand_tensor(&mut rng, 3, 16, 1.5),
            rand_tensor(&mut rng, 4, 8, 1.0),
            rand_tensor(&mut rng, 1, 16, 1.0),
            2,
            mode,
            SlstmGating::Stabilized,
        );
        let mut s = p.zero_state(&mut g);
        for _ in 0..20 {
            let x = g.input(rand_tensor(&mut rng, 1, 3, 2.0));
            let m_prev = g.value(s.m).data().to_vec();
            let (next, gates) = slstm_step_with_gates(&mut g, &p, x, &s).unwrap();
            let m = g.value(gates.m).data();
            for k in 0..4 {
                let raw_i = g.value(gates.log_i).data()[k].exp();
                let raw_f = g.value(gates.log_f).data()[k].exp();
                let lhs_i = g.value(gates.i).data()[k] * m[k].exp();
                let lhs_f = g.value(gates.f).data()[k] * m[k].exp();
                assert!((lhs_i - raw_i).abs() <= 1e-10 * raw_i.abs());
                let rhs_f = raw_f * m_prev[k].exp();
                assert!((lhs_f - rhs_f).abs() <= 1e-10 * rhs_f.abs());
            }
            s = next;
        }
    }
}

/// Unstabilised multi-head sLSTM written out with explicit loops.
struct SlstmOracle {
    w: Tensor,
    r: Tensor,
    b: Tensor,
    heads: usize,
    exp_forget: bool,
}

impl SlstmOracle {
    fn run(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let hdim = self.w.cols() / 4;
        let hd = hdim / self.heads;
        let (mut c, mut n, mut h) = (vec![0.0; hdim], vec![0.0; hdim], vec![0.0; hdim]);
        let mut out = Vec::new();
        for x in xs {
            let mut pre = vec![0.0; 4 * hdim];
            for (col, p) in pre.iter_mut().enumerate() {
                *p = self.b.data()[col];
                for (row, xv) in x.iter().enumerate() {
                    *p += xv * self.w.get(row, col);
                }
                let (gate, unit) = (col / hdim, col % hdim);
                let head = unit / hd;
                let j = unit % hd;
                for i in 0..hd {
                    *p += h[head * hd + i] * self.r.get(head * hd + i, gate * hd + j);
                }
            }
            let mut hn = vec![0.0; hdim];
            for u in 0..hdim {
                let i = pre[u].exp();
                let f = if self.exp_forget {
                    pre[hdim + u].exp()
                } else {
                    sigmoid_scalar(pre[hdim + u])
                };
                let z = pre[2 * hdim + u].tanh();
                let o = sigmoid_scalar(pre[3 * hdim + u]);
                c[u] = f * c[u] + i * z;
                n[u] = f * n[u] + i;
                hn[u] = o * (c[u] / n[u]).tanh();
            }
            h = hn;
            out.push(h.clone());
        }
        out
    }
}

#[test]
fn slstm_stabilised_matches_unstabilised_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for exp_forget in [false, true] {
        let w = rand_tensor(&mut rng, 3, 16, 0.5);
        let r = rand_tensor(&mut rng, 4, 8, 0.5);
        let b = rand_tensor(&mut rng, 1, 16, 0.5);
        let xs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let oracle = SlstmOracle {
            w: w.clone(),
            r: r.clone(),
            b: b.clone(),
            heads: 2,
            exp_forget,
        }
        .run(&xs);
        let mode = if exp_forget {
            ForgetMode::Exp
        } else {
            ForgetMode::Sigmoid
        };
        for gating in [SlstmGating::Stabilized, SlstmGating::Unstabilized] {
            let mut g = Graph::new();
            let p = slstm_from(&mut g, w.clone(), r.clone(), b.clone(), 2, mode, gating);
            let mut s = p.zero_state(&mut g);
            for (t, x) in xs.iter().enumerate() {
                let xv = g.input(Tensor::row(x.clone()));
                s = slstm_step(&mut g, &p, xv, &s).unwrap();
                for (a, e) in g.value(s.h).data().iter().zip(&oracle[t]) {
                    assert!((a - e).abs() < 1e-8, "{gating:?} step {t}: {a} vs {e}");
                }
            }
        }
    }
}

fn mlstm_from(
    g: &mut Graph<'_>,
    w: Tensor,
    b: Tensor,
    heads: usize,
    head_dim: usize,
    forget_mode: ForgetMode,
) -> BoundMlstm {
    BoundMlstm {
        input_dim: w.rows(),
        heads,
        head_dim,
        forget_mode,
        w: g.input(w),
        b: g.input(b),
    }
}

/// Fused mLSTM weight for `heads x head_dim` from random draws, with the key
/// block already divided by `sqrt(d)` as `MlstmParams::bind` does.
fn random_mlstm_weights(
    rng: &mut impl Rng,
    input_dim: usize,
    heads: usize,
    head_dim: usize,
) -> (Tensor, Tensor) {
    let width = heads * head_dim;
    let cols = 4 * width + 2 * heads;
    (
        rand_tensor(rng, input_dim, cols, 0.8),
        rand_tensor(rng, 1, cols, 0.3),
    )
}

#[test]
fn mlstm_first_write_is_rank_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (w, b) = random_mlstm_weights(&mut rng, 5, 1, 4);
    let mut g = Graph::new();
    let p = mlstm_from(&mut g, w, b, 1, 4, ForgetMode::Sigmoid);
    let s0 = p.zero_state(&mut g);
    let x = g.input(rand_tensor(&mut rng, 1, 5, 1.0));
    let s1 = mlstm_step(&mut g, &p, x, &s0).unwrap();
    let c = g.value(s1.c);
    // Every 2x2 minor of a rank-1 matrix vanishes.
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                for l in 0..4 {
                    let minor = c.get(i, k) * c.get(j, l) - c.get(i, l) * c.get(j, k);
                    assert!(minor.abs() < 1e-12);
                }
            }
        }
    }
}

/// d = 1, one head, identity projections: a hand-checkable scalar recursion.
fn scalar_mlstm_oracle(xs: &[f64], gates: (f64, f64, f64, f64), bo: f64) -> Vec<f64> {
    let (wi, bi, wf, bf) = gates;
    let (mut c, mut n) = (0.0, 0.0);
    xs.iter()
        .map(|&x| {
            let (q, k, v) = (x, x, x);
            let i = (wi * x + bi).exp();
            let f = sigmoid_scalar(wf * x + bf);
            let o = sigmoid_scalar(x + bo);
            c = f * c + i * v * k;
            n = f * n + i * k;
            o * (c * q) / (n * q).abs().max(1.0)
        })
        .collect()
}

#[test]
fn mlstm_scalar_matches_oracle() {
    let (wi, bi, wf, bf, bo) = (0.4, -0.3, 0.9, 0.5, 0.1);
    // Columns: q k v o i f
    let w = Tensor::row(vec![1.0, 1.0, 1.0, 1.0, wi, wf]);
    let b = Tensor::row(vec![0.0, 0.0, 0.0, bo, bi, bf]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xs: Vec<f64> = (0..100).map(|_| rng.random_range(-2.0..2.0)).collect();
    let oracle = scalar_mlstm_oracle(&xs, (wi, bi, wf, bf), bo);
    let mut g = Graph::new();
    let p = mlstm_from(&mut g, w, b, 1, 1, ForgetMode::Sigmoid);
    let mut s = p.zero_state(&mut g);
    for (t, &x) in xs.iter().enumerate() {
        let xv = g.input(Tensor::row(vec![x]));
        s = mlstm_step(&mut g, &p, xv, &s).unwrap();
        let h = g.value(s.h).data()[0];
        assert!((h - oracle[t]).abs() <= 1e-12 * oracle[t].abs().max(1.0));
    }
}

#[test]
fn mlstm_exp_mode_matches_unstabilised_scalar_recursion() {
    let (wi, bi, wf, bf, bo) = (1.7, 0.6, -1.1, 0.8, -0.2);
    let w = Tensor::row(vec![1.0, 1.0, 1.0, 1.0, wi, wf]);
    let b = Tensor::row(vec![0.0, 0.0, 0.0, bo, bi, bf]);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let xs: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (mut c, mut n) = (0.0f64, 0.0f64);
    let mut g = Graph::new();
    let p = mlstm_from(&mut g, w, b, 1, 1, ForgetMode::Exp);
    let mut s = p.zero_state(&mut g);
    for &x in &xs {
        let i = (wi * x + bi).exp();
        let f = (wf * x + bf).exp();
        c = f * c + i * x * x;
        n = f * n + i * x;
        let want = sigmoid_scalar(x + bo) * c * x / (n * x).abs().max(1.0);
        let xv = g.input(Tensor::row(vec![x]));
        s = mlstm_step(&mut g, &p, xv, &s).unwrap();
        let got = g.value(s.h).data()[0];
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
        assert!(g.value(s.denom).data()[0] >= 1.0);
    }
}

#[test]
fn mlstm_denominator_clamps_to_one_when_query_orthogonal() {
    // d = 2. Make q = [1, 0] and k = [0, 1]/sqrt(2) so n^T q = 0.
    // Columns: q(2) k(2) v(2) o(2) i(1) f(1); input x = [1, 1].
    let w = Tensor::from_rows(&[
        vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0],
    ]);
    let b = Tensor::zeros(&[1, 10]);
    let mut g = Graph::new();
    let p = mlstm_from(&mut g, w, b, 1, 2, ForgetMode::Sigmoid);
    let s0 = p.zero_state(&mut g);
    let x = g.input(Tensor::row(vec![1.0, 1.0]));
    let s1 = mlstm_step(&mut g, &p, x, &s0).unwrap();
    assert_eq!(g.value(s1.denom).data()[0], 1.0);
}

/// Singular values by one-sided (Hestenes) Jacobi rotations on the columns.
fn singular_values(a: &Tensor) -> Vec<f64> {
    let (rows, cols) = a.dims2();
    let mut u: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| a.get(i, j)).collect())
        .collect();
    for _ in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = u[p].iter().map(|x| x * x).sum();
                let beta: f64 = u[q].iter().map(|x| x * x).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (u[p][i], u[q][i]);
                    u[p][i] = c * x - s * y;
                    u[q][i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    u.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
}

fn numerical_rank(a: &Tensor, tol: f64) -> usize {
    let sv = singular_values(a);
    let top = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > tol * top.max(1.0)).count()
}

#[test]
fn singular_values_of_known_matrix() {
    let a = Tensor::from_rows(&[vec![3.0, 0.0], vec![4.0, 5.0]]);
    let mut sv = singular_values(&a);
    sv.sort_by(|x, y| y.total_cmp(x));
    // A^T A = [[25, 20], [20, 25]] has eigenvalues 45 and 5.
    assert!((sv[0] - 45f64.sqrt()).abs() < 1e-12);
    assert!((sv[1] - 5f64.sqrt()).abs() < 1e-12);
    let r1 = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]);
    assert_eq!(numerical_rank(&r1, 1e-10), 1);
}

#[test]
fn mlstm_rank_grows_at_most_one_per_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (w, b) = random_mlstm_weights(&mut rng, 6, 1, 5);
    let mut g = Graph::new();
    let p = mlstm_from(&mut g, w, b, 1, 5, ForgetMode::Sigmoid);
    let mut s = p.zero_state(&mut g);
    for t in 1..=7 {
        let x = g.input(rand_tensor(&mut rng, 1, 6, 1.0));
        s = mlstm_step(&mut g, &p, x, &s).unwrap();
        let rank = numerical_rank(g.value(s.c), 1e-10);
        assert!(rank <= t.min(5), "rank {rank} after {t} steps");
    }
}

#[test]
fn unroll_length_one_equals_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = rand_tensor(&mut rng, 4, 12, 0.5);
    let r = rand_tensor(&mut rng, 3, 12, 0.5);
    let b = rand_tensor(&mut rng, 1, 12, 0.5);
    let x = rand_tensor(&mut rng, 1, 4, 1.0);
    let mut g = Graph::new();
    let p = lstm_from(&mut g, w, r, b);
    let s0 = p.zero_state(&mut g);
    let xv = g.input(x);
    let stepped = lstm_step(&mut g, &p, xv, &s0).unwrap();
    let s0 = p.zero_state(&mut g);
    let (hs, last) = unroll(&mut g, &p, xv, s0).unwrap();
    assert_eq!(g.value(hs).data(), g.value(stepped.h).data());
    assert_eq!(g.value(last.c).data(), g.value(stepped.c).data());
}

#[test]
fn unroll_rejects_empty_sequence() {
    let mut g = Graph::new();
    let p = lstm_from(
        &mut g,
        Tensor::zeros(&[2, 4]),
        Tensor::zeros(&[1, 4]),
        Tensor::zeros(&[1, 4]),
    );
    let s0 = p.zero_state(&mut g);
    let xs = g.input(Tensor::zeros(&[0, 2]));
    assert!(matches!(unroll(&mut g, &p, xs, s0), Err(Error::Contract(_))));
}

#[test]
fn zero_padded_tail_keeps_evolving_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new();
    let p = lstm_from(
        &mut g,
        rand_tensor(&mut rng, 2, 8, 0.8),
        rand_tensor(&mut rng, 2, 8, 0.8),
        rand_tensor(&mut rng, 1, 8, 0.8),
    );
    let mut rows = vec![vec![0.9, -0.4], vec![0.2, 0.7]];
    rows.extend(std::iter::repeat_n(vec![0.0, 0.0], 4));
    let xs = g.input(Tensor::from_rows(&rows));
    let s0 = p.zero_state(&mut g);
    let (hs, _) = unroll(&mut g, &p, xs, s0).unwrap();
    let h = g.value(hs);
    // With non-zero biases and recurrence, zero inputs still move h.
    assert_ne!(h.row_slice(2), h.row_slice(3));
}

fn pack(parts: &[&Tensor]) -> Tensor {
    Tensor::row(parts.iter().flat_map(|t| t.data().to_vec()).collect())
}

fn unpack(g: &mut Graph<'_>, theta: Var, shapes: &[(usize, usize)]) -> Vec<Var> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let s = g.slice_cols(theta, offset, r * c);
            offset += r * c;
            g.reshape(s, &[r, c])
        })
        .collect()
}

#[test]
fn unroll_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let w = rand_tensor(&mut rng, 3, 8, 0.6);
    let r = rand_tensor(&mut rng, 2, 8, 0.6);
    let b = rand_tensor(&mut rng, 1, 8, 0.6);
    let xs = rand_tensor(&mut rng, 8, 3, 1.0);
    let theta = pack(&[&w, &r, &b]);
    let check = finite_difference_check(
        |g, th| {
            let v = unpack(g, th, &[(3, 8), (2, 8), (1, 8)]);
            let cell = BoundLstm {
                input_dim: 3,
                hidden: 2,
                w: v[0],
                r: v[1],
                b: v[2],
                recurrent_mask: None,
            };
            let x = g.input(xs.clone());
            let s0 = cell.zero_state(g);
            let (hs, _) = unroll(g, &cell, x, s0).unwrap();
            let sq = g.mul(hs, hs);
            g.sum_all(sq)
        },
        &theta,
        1e-5,
    )
    .unwrap();
    assert!(check.max_rel_error < 1e-4, "{}", check.max_rel_error);
}

#[test]
fn slstm_and_mlstm_unroll_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let xs = rand_tensor(&mut rng, 5, 3, 1.0);
    for mode in [ForgetMode::Sigmoid, ForgetMode::Exp] {
        let w = rand_tensor(&mut rng, 3, 16, 0.6);
        let r = rand_tensor(&mut rng, 4, 8, 0.6);
        let b = rand_tensor(&mut rng, 1, 16, 0.6);
        let theta = pack(&[&w, &r, &b]);
        let check = finite_difference_check(
            |g, th| {
                let v = unpack(g, th, &[(3, 16), (4, 8), (1, 16)]);
                let cell = BoundSlstm {
                    input_dim: 3,
                    hidden: 4,
                    heads: 2,
                    forget_mode: mode,
                    gating: SlstmGating::Stabilized,
                    w: v[0],
                    r: v[1],
                    b: v[2],
                };
                let x = g.input(xs.clone());
                let s0 = cell.zero_state(g);
                let (hs, _) = unroll(g, &cell, x, s0).unwrap();
                let t = g.tanh(hs);
                g.sum_all(t)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "sLSTM {mode:?}: {}", check.max_rel_error);

        let (mw, mb) = random_mlstm_weights(&mut rng, 3, 2, 2);
        let theta = pack(&[&mw, &mb]);
        let cols = mw.cols();
        let check = finite_difference_check(
            |g, th| {
                let v = unpack(g, th, &[(3, cols), (1, cols)]);
                let cell = BoundMlstm {
                    input_dim: 3,
                    heads: 2,
                    head_dim: 2,
                    forget_mode: mode,
                    w: v[0],
                    b: v[1],
                };
                let x = g.input(xs.clone());
                let s0 = cell.zero_state(g);
                let (hs, _) = unroll(g, &cell, x, s0).unwrap();
                let t = g.tanh(hs);
                g.sum_all(t)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "mLSTM {mode:?}: {}", check.max_rel_error);
    }
}

#[test]
fn params_bind_and_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    LstmParams::init(&mut store, "l", 5, 3, &mut rng);
    assert_eq!(store.num_scalars(), LstmParams::num_scalars(5, 3));
    let mut store = ParamStore::new();
    SlstmParams::init(
        &mut store,
        "s",
        5,
        8,
        2,
        ForgetMode::Sigmoid,
        SlstmGating::Stabilized,
        &mut rng,
    )
    .unwrap();
    assert_eq!(store.num_scalars(), SlstmParams::num_scalars(5, 8, 2));
    let mut store = ParamStore::new();
    let m = MlstmParams::init(&mut store, "m", 5, 2, 3, ForgetMode::Sigmoid, &mut rng).unwrap();
    assert_eq!(store.num_scalars(), MlstmParams::num_scalars(5, 2, 3));
    let mut g = Graph::with_params(&store);
    let bound = m.bind(&mut g);
    assert_eq!(g.value(bound.w).shape(), &[5, 4 * 6 + 4]);
}

#[test]
fn slstm_rejects_indivisible_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let r = SlstmParams::init(
        &mut store,
        "s",
        5,
        6,
        4,
        ForgetMode::Sigmoid,
        SlstmGating::Stabilized,
        &mut rng,
    );
    assert!(matches!(r, Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lstm_hidden_is_strictly_bounded(seed in 0u64..10_000, scale in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let p = lstm_from(
            &mut g,
            rand_tensor(&mut rng, 3, 12, scale),
            rand_tensor(&mut rng, 3, 12, scale),
            rand_tensor(&mut rng, 1, 12, scale),
        );
        let xs = g.input(rand_tensor(&mut rng, 6, 3, scale));
        let s0 = p.zero_state(&mut g);
        let (hs, _) = unroll(&mut g, &p, xs, s0).unwrap();
        prop_assert!(g.value(hs).data().iter().all(|h| h.abs() <= 1.0));
    }

    #[test]
    fn slstm_hidden_bounded_by_output_gate(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let p = slstm_from(
            &mut g,
            rand_tensor(&mut rng, 3, 16, 2.0),
            rand_tensor(&mut rng, 4, 8, 2.0),
            rand_tensor(&mut rng, 1, 16, 2.0),
            2,
            ForgetMode::Sigmoid,
            SlstmGating::Stabilized,
        );
        let mut s = p.zero_state(&mut g);
        for _ in 0..5 {
            let x = g.input(rand_tensor(&mut rng, 1, 3, 2.0));
            s = slstm_step(&mut g, &p, x, &s).unwrap();
            prop_assert!(g.value(s.n).data().iter().all(|&n| n > 0.0));
            prop_assert!(g.value(s.h).data().iter().all(|h| h.abs() < 1.0));
        }
    }
}

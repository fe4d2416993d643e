use proptest::prelude::*;

use super::*;

fn row(v: &[f64]) -> Tensor {
    Tensor::row(v.to_vec())
}

#[test]
fn activation_fixed_points() {
    let mut g = Graph::new();
    let z = g.input(Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    let t = g.tanh(z);
    let e = g.exp(z);
    assert_eq!(g.value(s).data()[0], 0.5);
    assert_eq!(g.value(t).data()[0], 0.0);
    assert_eq!(g.value(e).data()[0], 1.0);
}

#[test]
fn activations_stay_in_range_when_saturated() {
    let mut g = Graph::new();
    let x = g.input(row(&[-800.0, -40.0, 0.0, 40.0, 800.0]));
    let s = g.sigmoid(x);
    let t = g.tanh(x);
    assert!(g.value(s).data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(g.value(t).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(g.value(s).is_finite());
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let a = g.input(row(&[0.0, 0.0, 0.0]));
    let b = g.input(row(&[1000.0, 1000.0]));
    let c = g.input(row(&[1.0f64.ln(), 3.0f64.ln()]));
    let (sa, sb, sc) = (g.softmax_rows(a), g.softmax_rows(b), g.softmax_rows(c));
    for v in g.value(sa).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    assert_eq!(g.value(sb).data(), &[0.5, 0.5]);
    let p = g.value(sc).data();
    assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
}

#[test]
fn masked_softmax_rejects_all_masked_row() {
    let mut g = Graph::new();
    let a = g.input(row(&[1.0, 2.0]));
    assert!(g.softmax_rows_masked(a, &[false, false]).is_err());
    let s = g.softmax_rows_masked(a, &[false, true]).unwrap();
    assert_eq!(g.value(s).data(), &[0.0, 1.0]);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let one = g.input(row(&[1.0, 1.0]));
    let zero = g.input(row(&[0.0, 0.0]));
    let x_const = g.input(row(&[4.0, 4.0]));
    let y = g.layer_norm(x_const, one, zero, DEFAULT_LAYER_NORM_EPS);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.input(row(&[1.0, -1.0]));
    let y = g.layer_norm(x, one, zero, 0.0);
    assert_eq!(g.value(y).data(), &[1.0, -1.0]);

    let bias = g.input(row(&[0.3, -0.7]));
    let xr = g.input(row(&[2.0, 9.0]));
    let y = g.layer_norm(xr, zero, bias, DEFAULT_LAYER_NORM_EPS);
    assert_eq!(g.value(y).data(), &[0.3, -0.7]);
}

#[test]
fn layer_norm_normalises_each_row() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_rows(&[vec![1.0, 5.0, -2.0, 0.5], vec![10.0, 11.0, 12.0, 13.0]]));
    let one = g.input(row(&[1.0; 4]));
    let zero = g.input(row(&[0.0; 4]));
    let y = g.layer_norm(x, one, zero, 1e-12);
    for r in 0..2 {
        let v = g.value(y).row_slice(r);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn backward_linear_form() {
    let mut store = ParamStore::new();
    let w = store.add("w", row(&[0.5, -1.0, 2.0]));
    let x = row(&[3.0, 4.0, -5.0]);
    let mut g = Graph::with_params(&store);
    let wv = g.param(w);
    let xv = g.input(x.clone());
    let p = g.mul(wv, xv);
    let loss = g.sum_all(p);
    let grads = g.backward(loss).unwrap().param_grads(&store);
    assert_eq!(grads[w], x);
}

#[test]
fn backward_sigmoid_at_zero() {
    let mut g = Graph::new();
    let w = g.variable(Tensor::scalar(0.0));
    let s = g.sigmoid(w);
    let loss = g.sum_all(s);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(w).unwrap().data()[0], 0.25);
}

#[test]
fn duplicated_parameter_use_accumulates() {
    let mut store = ParamStore::new();
    let w = store.add("w", row(&[1.5, -2.0]));
    let mut g = Graph::with_params(&store);
    let a = g.param(w);
    let b = g.param(w);
    let s1 = g.sum_all(a);
    let s2 = g.sum_all(b);
    let s3 = g.scale(s2, 3.0);
    let loss = g.add(s1, s3);
    let grads = g.backward(loss).unwrap().param_grads(&store);
    assert_eq!(grads[w].data(), &[4.0, 4.0]);
}

#[test]
fn non_scalar_loss_is_a_contract_error() {
    let mut g = Graph::new();
    let w = g.variable(row(&[1.0, 2.0]));
    let t = g.tanh(w);
    assert!(matches!(g.backward(t), Err(crate::Error::Contract(_))));
}

#[test]
fn backward_is_bitwise_deterministic() {
    let build = || {
        let mut g = Graph::new();
        let w = g.variable(Tensor::from_rows(&[vec![0.3, -0.2, 0.9], vec![1.1, 0.4, -0.6]]));
        let x = g.input(Tensor::from_rows(&[vec![0.5, 1.0], vec![-1.0, 0.25], vec![0.1, 0.2]]));
        let y = g.matmul(w, x);
        let s = g.softmax_rows(y);
        let t = g.tanh(s);
        let loss = g.sum_all(t);
        let grads = g.backward(loss).unwrap();
        grads.wrt(w).unwrap().clone()
    };
    let a = build();
    let b = build();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn gradcheck_matmul_chain() {
    let theta = Tensor::from_rows(&[vec![0.2, -0.4], vec![0.7, 0.1], vec![-0.3, 0.5]]);
    let x = Tensor::from_rows(&[vec![1.0, -0.5, 0.3]]);
    let check = finite_difference_check(
        |g, w| {
            let xv = g.input(x.clone());
            let y = g.matmul(xv, w);
            let s = g.softmax_rows(y);
            let l = g.neg_log_clamped(s, 1e-12);
            g.pick(l, 1)
        },
        &theta,
        1e-5,
    )
    .unwrap();
    assert!(check.max_rel_error < 1e-6, "{check:?}");
}

#[test]
fn gradcheck_head_ops() {
    let heads = 2;
    let theta = Tensor::row(vec![0.3, -0.1, 0.8, 0.2, -0.5, 0.6, 0.05, -0.7]);
    let check = finite_difference_check(
        |g, v| {
            let k = g.scale(v, 0.5);
            let k = g.tanh(k);
            let c = g.head_outer(v, k, heads);
            let gate = g.slice_cols(v, 0, heads);
            let gate = g.sigmoid(gate);
            let c = g.head_scale(c, gate, heads);
            let hq = g.head_matvec(c, k, heads);
            let dot = g.head_dot(hq, v, heads);
            let rep = g.repeat_heads(dot, 4);
            let p = g.mul(rep, hq);
            g.sum_all(p)
        },
        &theta,
        1e-5,
    )
    .unwrap();
    assert!(check.max_rel_error < 1e-6, "{check:?}");
}

#[test]
fn gradcheck_head_block_matmul() {
    let w = Tensor::matrix(4, 6, (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect());
    let x = Tensor::row(vec![0.4, -0.3, 0.9, 0.2]);
    let check_w = finite_difference_check(
        |g, wv| {
            let xv = g.input(x.clone());
            let y = g.head_block_matmul(xv, wv, 2, 3);
            let y = g.tanh(y);
            g.sum_all(y)
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(check_w.max_rel_error < 1e-6, "{check_w:?}");
    let check_x = finite_difference_check(
        |g, xv| {
            let wv = g.input(w.clone());
            let y = g.head_block_matmul(xv, wv, 2, 3);
            let y = g.tanh(y);
            g.sum_all(y)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(check_x.max_rel_error < 1e-6, "{check_x:?}");
}

#[test]
fn head_block_matmul_matches_dense_block_diagonal() {
    // heads=2, hd=1, groups=2: w rows are [g0, g1] for each head.
    let mut g = Graph::new();
    let x = g.input(row(&[2.0, 3.0]));
    let w = g.input(Tensor::from_rows(&[vec![1.0, 10.0], vec![100.0, 1000.0]]));
    let y = g.head_block_matmul(x, w, 2, 2);
    // group 0: [2*1, 3*100], group 1: [2*10, 3*1000]
    assert_eq!(g.value(y).data(), &[2.0, 300.0, 20.0, 3000.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-1e4f64..1e4, 1..16)) {
        let s = softmax_rows_masked(&Tensor::row(v), None);
        let sum: f64 = s.data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn zero_learning_signal_on_unused_parameters(a in -3.0f64..3.0) {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::scalar(a));
        let unused = store.add("unused", Tensor::scalar(1.0));
        let mut g = Graph::with_params(&store);
        let u = g.param(used);
        let e = g.exp(u);
        let grads = g.backward(e).unwrap().param_grads(&store);
        prop_assert_eq!(grads[unused].data()[0], 0.0);
        prop_assert!((grads[used].data()[0] - a.exp()).abs() < 1e-12);
    }
}

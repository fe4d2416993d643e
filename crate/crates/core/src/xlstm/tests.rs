use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{finite_difference_check_params, Tensor, DEFAULT_LAYER_NORM_EPS};

fn cfg(num_blocks: usize, slstm_positions: Vec<usize>) -> XlstmStackConfig {
    XlstmStackConfig {
        num_blocks,
        slstm_positions,
        heads: 2,
        head_dim: 2,
        forget_mode: ForgetMode::Sigmoid,
        slstm_gating: SlstmGating::Stabilized,
        dropout: 0.0,
        style: BlockStyle::ResidualPrenorm,
    }
}

fn random_input(rng: &mut impl Rng, t: usize, width: usize) -> Tensor {
    Tensor::matrix(t, width, (0..t * width).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn default_layout_places_slstm_third_and_fifth() {
    use CellKind::{Mlstm as M, Slstm as S};
    let c = cfg(7, vec![3, 5]);
    assert_eq!(c.block_kinds(), vec![M, M, S, M, S, M, M]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let net = build_stack(&mut store, &c, 5, 8, 6, &mut rng).unwrap();
    let kinds: Vec<CellKind> = net.blocks.iter().map(|b| b.kind()).collect();
    assert_eq!(kinds, c.block_kinds());
}

#[test]
fn single_block_stack_is_one_mlstm() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let net = build_stack(&mut store, &cfg(1, vec![]), 5, 8, 6, &mut rng).unwrap();
    assert_eq!(net.blocks.len(), 1);
    assert_eq!(net.blocks[0].kind(), CellKind::Mlstm);
}

#[test]
fn invalid_positions_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for bad in [vec![0], vec![4], vec![2, 2]] {
        let mut store = ParamStore::new();
        let r = build_stack(&mut store, &cfg(3, bad), 5, 8, 6, &mut rng);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}

#[test]
fn parameter_census_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for style in [BlockStyle::Bare, BlockStyle::ResidualPrenorm] {
        let mut c = cfg(7, vec![3, 5]);
        c.style = style;
        let mut store = ParamStore::new();
        build_stack(&mut store, &c, 126, 128, 6, &mut rng).unwrap();
        // Hand count for d = 4, 2 heads of 2: sLSTM 4d*d + 4d*2 + 4d = 112,
        // mLSTM 4d(d+1) + 2*2(d+1) = 100, wrapper 2d + d(d+1) = 28.
        let wrap = if style == BlockStyle::ResidualPrenorm { 28 } else { 0 };
        let final_norm = if style == BlockStyle::ResidualPrenorm { 8 } else { 0 };
        let expected = 127 * 4 + 2 * (112 + wrap) + 5 * (100 + wrap) + final_norm + 5 * 128 + 129 * 6;
        assert_eq!(store.num_scalars(), expected);
        assert_eq!(stack_num_scalars(&c, 126, 128, 6), expected);
    }
}

#[test]
fn architecture_description_round_trips() {
    let c = cfg(7, vec![3, 5]);
    let json = serde_json::to_string(&c).unwrap();
    let back: XlstmStackConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back.block_kinds(), c.block_kinds());
    assert_eq!(back, c);
}

#[test]
fn posterior_is_normalised_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let net = build_stack(&mut store, &cfg(3, vec![2]), 5, 8, 6, &mut rng).unwrap();
    let x = random_input(&mut rng, 9, 5);
    let mut mask = vec![true; 9];
    mask[..3].iter_mut().for_each(|m| *m = false);
    let run = || {
        let mut g = Graph::with_params(&store);
        let xv = g.input(x.clone());
        let p = xlstm_forward(&mut g, &net, xv, &mask, DEFAULT_LAYER_NORM_EPS, 0.0, None).unwrap();
        g.value(p).clone()
    };
    let a = run();
    assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(a, run());
}

#[test]
fn empty_unmasked_region_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let net = build_stack(&mut store, &cfg(1, vec![]), 5, 8, 6, &mut rng).unwrap();
    let mut g = Graph::with_params(&store);
    let xv = g.input(Tensor::zeros(&[4, 5]));
    let r = xlstm_forward(&mut g, &net, xv, &[false; 4], DEFAULT_LAYER_NORM_EPS, 0.0, None);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn two_block_stack_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for mode in [ForgetMode::Sigmoid, ForgetMode::Exp] {
        let mut c = cfg(2, vec![2]);
        c.forget_mode = mode;
        let mut store = ParamStore::new();
        let net = build_stack(&mut store, &c, 3, 5, 6, &mut rng).unwrap();
        // Move biases and norms off their initial constants.
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        let x = random_input(&mut rng, 6, 3);
        let mask = [false, true, true, true, true, true];
        let entries: Vec<(usize, usize)> = (0..store.len())
            .flat_map(|p| {
                let n = store.get(p).len();
                [(p, 0), (p, n / 2), (p, n - 1)]
            })
            .collect();
        let check = finite_difference_check_params(
            |g| {
                let xv = g.input(x.clone());
                let post = xlstm_forward(g, &net, xv, &mask, DEFAULT_LAYER_NORM_EPS, 0.0, None).unwrap();
                let nll = g.neg_log_clamped(post, 1e-12);
                g.pick(nll, 2)
            },
            &store,
            &entries,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{mode:?}: {}", check.max_rel_error);
    }
}

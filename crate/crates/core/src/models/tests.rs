use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::cells::{ForgetMode, SlstmGating};
use crate::numerics::{finite_difference_check_params, DEFAULT_LAYER_NORM_EPS};
use crate::xlstm::BlockStyle;

fn small(arch: Architecture) -> NetworkConfig {
    NetworkConfig {
        architecture: arch,
        input_dim: 4,
        num_classes: 6,
        dense_units: 5,
        dense_dropout: 0.0,
        layer_norm_eps: DEFAULT_LAYER_NORM_EPS,
        lstm: LstmConfig {
            units: 3,
            dropout: 0.0,
            recurrent_dropout: 0.0,
        },
        transformer: TransformerConfig {
            model_dim: Some(6),
            heads: 2,
            head_dim: 3,
            blocks: 1,
            conv_width: 2,
            dropout: 0.0,
            positional_encoding: true,
            mask_padding: true,
            pooling: Pooling::Mean,
        },
        xlstm: XlstmStackConfig {
            num_blocks: 2,
            slstm_positions: vec![2],
            heads: 2,
            head_dim: 2,
            forget_mode: ForgetMode::Sigmoid,
            slstm_gating: SlstmGating::Stabilized,
            dropout: 0.0,
            style: BlockStyle::ResidualPrenorm,
        },
    }
}

fn input(rng: &mut impl Rng, t: usize) -> Tensor {
    Tensor::matrix(t, 4, (0..t * 4).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn every_architecture_yields_a_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = input(&mut rng, 7);
    let mask = [false, false, true, true, true, true, true];
    for arch in Architecture::ALL {
        let net = Network::build(&small(arch), 3).unwrap();
        let p = net.posterior(&x, &mask).unwrap();
        assert_eq!(p.len(), 6);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{arch:?}");
        assert!(p.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn serialisation_preserves_outputs_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = input(&mut rng, 5);
    let mask = [true; 5];
    for arch in Architecture::ALL {
        let net = Network::build(&small(arch), 9).unwrap();
        let json = serde_json::to_string(&net).unwrap();
        let back: Network = serde_json::from_str(&json).unwrap();
        let a = net.posterior(&x, &mask).unwrap();
        let b = back.posterior(&x, &mask).unwrap();
        assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
        assert_eq!(net.description(), back.description());
    }
}

#[test]
fn same_seed_builds_identical_networks() {
    for arch in Architecture::ALL {
        let a = Network::build(&small(arch), 4).unwrap();
        let b = Network::build(&small(arch), 4).unwrap();
        let c = Network::build(&small(arch), 5).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
    }
}

#[test]
fn description_lists_the_layers() {
    let mut cfg = small(Architecture::Xlstm);
    cfg.xlstm.num_blocks = 7;
    cfg.xlstm.slstm_positions = vec![3, 5];
    let d = Network::build(&cfg, 0).unwrap().description();
    assert_eq!(
        d.layers,
        ["mlstm", "mlstm", "slstm", "mlstm", "slstm", "mlstm", "mlstm"]
    );
    let d = Network::build(&small(Architecture::Transformer), 0).unwrap().description();
    assert_eq!(d.layers.len(), 2);
}

#[test]
fn dropout_only_acts_in_training_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = input(&mut rng, 6);
    let mask = [true; 6];
    let mut cfg = small(Architecture::Lstm);
    cfg.lstm.dropout = 0.5;
    cfg.lstm.recurrent_dropout = 0.5;
    cfg.dense_dropout = 0.5;
    let net = Network::build(&cfg, 1).unwrap();
    let eval_a = net.posterior(&x, &mask).unwrap();
    let eval_b = net.posterior(&x, &mask).unwrap();
    assert_eq!(eval_a, eval_b);
    let mut g = Graph::with_params(&net.store);
    let mut d = Dropout::new(7);
    let p = net.forward(&mut g, &x, &mask, Some(&mut d)).unwrap();
    assert_ne!(g.value(p).data(), eval_a.as_slice());
}

#[test]
fn config_validation() {
    let mut cfg = small(Architecture::Transformer);
    cfg.transformer.dropout = 1.0;
    assert!(matches!(Network::build(&cfg, 0), Err(Error::Config(_))));
    let mut cfg = small(Architecture::Lstm);
    cfg.lstm.units = 0;
    assert!(matches!(Network::build(&cfg, 0), Err(Error::Config(_))));
    assert!("gru".parse::<Architecture>().is_err());
    assert_eq!("xlstm".parse::<Architecture>().unwrap(), Architecture::Xlstm);
}

#[test]
fn wrong_input_width_is_a_shape_error() {
    let net = Network::build(&small(Architecture::Lstm), 0).unwrap();
    let x = Tensor::zeros(&[3, 5]);
    assert!(matches!(net.posterior(&x, &[true; 3]), Err(Error::Shape(_))));
}

#[test]
fn argmax_breaks_ties_low() {
    assert_eq!(argmax(&[0.0; 6]), 0);
    assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    assert_eq!(argmax(&[0.1, 0.2, 0.7]), 2);
}

#[test]
fn network_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = input(&mut rng, 6);
    let mask = [false, true, true, true, true, true];
    for arch in [Architecture::Lstm, Architecture::Transformer] {
        let mut net = Network::build(&small(arch), 11).unwrap();
        for t in net.store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        let entries: Vec<(usize, usize)> = (0..net.store.len())
            .flat_map(|p| {
                let n = net.store.get(p).len();
                [(p, 0), (p, n - 1)]
            })
            .collect();
        let check = finite_difference_check_params(
            |g| {
                let post = net.forward(g, &x, &mask, None).unwrap();
                let nll = g.neg_log_clamped(post, 1e-12);
                g.pick(nll, 4)
            },
            &net.store,
            &entries,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{arch:?}: {}", check.max_rel_error);
    }
}

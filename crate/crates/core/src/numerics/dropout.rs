use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Inverted dropout: kept entries are scaled by `1 / (1 - rate)` so the
/// expected activation is unchanged and evaluation needs no rescaling.
#[derive(Debug, Clone)]
pub struct Dropout {
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A `rows x cols` mask tensor of zeros and `1 / (1 - rate)`.
    pub fn mask(&mut self, rows: usize, cols: usize, rate: f64) -> Tensor {
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let data = (0..rows * cols)
            .map(|_| if self.rng.random::<f64>() < keep { scale } else { 0.0 })
            .collect();
        Tensor::matrix(rows, cols, data)
    }

    pub fn apply(&mut self, g: &mut Graph<'_>, x: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let (r, c) = g.value(x).dims2();
        let m = self.mask(r, c, rate);
        let mv = g.input(m);
        g.mul(x, mv)
    }
}

/// Applies dropout only when a training context is present.
pub fn maybe_dropout(g: &mut Graph<'_>, x: Var, rate: f64, ctx: Option<&mut Dropout>) -> Var {
    match ctx {
        Some(d) => d.apply(g, x, rate),
        None => x,
    }
}

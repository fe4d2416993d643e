use super::graph::{Graph, ParamId, ParamStore, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor of the relative error. Components whose gradient is
/// smaller than this are effectively compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

fn eval<F>(f: &F, theta: &Tensor) -> f64
where
    F: Fn(&mut Graph<'_>, Var) -> Var,
{
    let mut g = Graph::new();
    let v = g.variable(theta.clone());
    let out = f(&mut g, v);
    g.value(out).data()[0]
}

/// Compares `backward()` against `(f(θ+h) - f(θ-h)) / 2h`, elementwise.
///
/// `f` builds a scalar loss from the leaf it is handed; it is re-run on a
/// fresh graph for every perturbation.
pub fn finite_difference_check<F>(f: F, theta: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_>, Var) -> Var,
{
    let mut g = Graph::new();
    let v = g.variable(theta.clone());
    let loss = f(&mut g, v);
    let grads = g.backward(loss)?;
    let analytic = grads
        .wrt(v)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; theta.len()]);

    let mut numeric = Vec::with_capacity(theta.len());
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&f, &probe);
        probe.data_mut()[i] = orig - h;
        let down = eval(&f, &probe);
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }

    Ok(summarise(analytic, numeric))
}

fn summarise(analytic: Vec<f64>, numeric: Vec<f64>) -> GradCheck {
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    }
}

/// Central-difference check of selected scalar entries of a parameter store.
///
/// `f` builds a scalar loss on a graph bound to the store it is handed.
/// `entries` lists `(parameter, flat index)` pairs to probe.
pub fn finite_difference_check_params<F>(
    f: F,
    store: &ParamStore,
    entries: &[(ParamId, usize)],
    h: f64,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let grads = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g);
        g.backward(loss)?.param_grads(store)
    };
    let analytic = entries.iter().map(|&(p, i)| grads[p].data()[i]).collect();
    let eval_store = |s: &ParamStore| {
        let mut g = Graph::with_params(s);
        let loss = f(&mut g);
        g.value(loss).data()[0]
    };
    let mut probe = store.clone();
    let numeric = entries
        .iter()
        .map(|&(p, i)| {
            let orig = probe.get(p).data()[i];
            probe.get_mut(p).data_mut()[i] = orig + h;
            let up = eval_store(&probe);
            probe.get_mut(p).data_mut()[i] = orig - h;
            let down = eval_store(&probe);
            probe.get_mut(p).data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect();
    Ok(summarise(analytic, numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        let theta = Tensor::row(vec![0.3, -1.2, 2.5, 0.7]);
        let check = finite_difference_check(
            |g, v| {
                let sq = g.mul(v, v);
                let s = g.scale(sq, 1.5);
                g.sum_all(s)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-9, "{}", check.max_rel_error);
    }
}

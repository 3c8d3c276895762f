use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Elements sampled per tensor when a tensor is larger than this.
const SAMPLE: usize = 200;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error over all checked elements.
    pub max_rel_error: f64,
    /// Worst relative error per parameter tensor.
    pub per_param: Vec<f64>,
    /// Index of the parameter tensor holding the worst element.
    pub worst_param: usize,
    pub checked: usize,
}

/// Compares backward gradients with central finite differences.
///
/// `build` receives a fresh graph plus one leaf per parameter and must return
/// a scalar loss. Every element of tensors with at most 200 entries is
/// checked; larger tensors are subsampled (200 distinct indices drawn from
/// `seed`). Relative error is `|a−b| / max(|a|, |b|, 1e-8)`.
pub fn check_gradients<F>(build: F, params: &[Tensor<f64>], h: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let v = g.value(loss)[0];
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {v} during gradient check")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report =
        GradCheckReport { max_rel_error: 0.0, per_param: vec![0.0; params.len()], worst_param: 0, checked: 0 };
    for (pi, p) in params.iter().enumerate() {
        let idx: Vec<usize> = if p.len() <= SAMPLE {
            (0..p.len()).collect()
        } else {
            let mut v = index::sample(&mut rng, p.len(), SAMPLE).into_vec();
            v.sort_unstable();
            v
        };
        for i in idx {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.per_param[pi] {
                report.per_param[pi] = rel;
            }
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = pi;
            }
        }
    }
    Ok(report)
}

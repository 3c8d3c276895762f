//! Hybrid event embeddings and positional encoding.
//!
//! Page and category IDs go through lookup tables; dwell time is embedded
//! by scaling a single learned vector by the normalized value. The three
//! pieces are concatenated per step, then a positional matrix is added.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMode {
    /// Sinusoidal, a pure function of `(N, d)`.
    Fixed,
    /// Trainable `N×d` matrix.
    Learnable,
    None,
}

/// Bound of the Xavier-uniform distribution for a `rows×cols` table.
pub fn xavier_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

pub fn xavier_uniform<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    uniform(&[rows, cols], xavier_bound(rows, cols), rng)
}

pub(crate) fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Positional matrix of shape `N×d`.
///
/// Fixed mode uses `sin(pos/10000^(2i/d))` on even columns and the matching
/// cosine on odd ones; learnable mode starts from U(−0.02, 0.02); `None`
/// yields zeros.
pub fn positional_matrix<T: Scalar, R: Rng + ?Sized>(
    mode: PeMode,
    n: usize,
    d: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    match mode {
        PeMode::Fixed => {
            if !d.is_multiple_of(2) {
                return Err(Error::Config(format!("fixed positional encoding needs an even model dimension, got {d}")));
            }
            let mut m = Vec::with_capacity(n * d);
            for pos in 0..n {
                for i in 0..d / 2 {
                    let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
                    m.push(T::lit(angle.sin()));
                    m.push(T::lit(angle.cos()));
                }
            }
            Tensor::new(vec![n, d], m)
        }
        PeMode::Learnable => Ok(uniform(&[n, d], 0.02, rng)),
        PeMode::None => Ok(Tensor::zeros(&[n, d])),
    }
}

/// Row lookup: `[B×N]` ids into `table[(V+1)×d_v]`.
pub fn embed_categorical<T: Scalar>(
    g: &mut Graph<T>,
    table: Var,
    ids: &[usize],
    batch: usize,
    len: usize,
) -> Result<Var> {
    g.embedding(table, ids, &[batch, len])
}

/// `t_norm[b,n] × time_table[0,:]`.
pub fn embed_continuous<T: Scalar>(
    g: &mut Graph<T>,
    table: Var,
    t_norm: &[f64],
    batch: usize,
    len: usize,
) -> Result<Var> {
    let values: Vec<T> = t_norm.iter().map(|&v| T::lit(v)).collect();
    g.scale_embedding(table, &values, &[batch, len])
}

/// Feature-axis concatenation in the order page, category, time.
pub fn combine<T: Scalar>(g: &mut Graph<T>, page: Var, category: Var, time: Var) -> Result<Var> {
    g.concat_last(&[page, category, time])
}

/// `s + pe`, broadcast over the batch.
pub fn apply_pe<T: Scalar>(g: &mut Graph<T>, s: Var, pe: Var) -> Result<Var> {
    g.add_positional(s, pe)
}

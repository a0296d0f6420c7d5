//! Dense kernels with paired forward/backward rules.
//!
//! Every differentiable piece of the model is assembled from the primitives
//! here, either as plain value functions or recorded on a [`Tape`] for
//! reverse-mode differentiation.

mod gradcheck;
mod matrix;
mod tape;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use matrix::Matrix;
pub(crate) use matrix::{gemm, View, ViewMut};
pub use tape::{Gradients, Tape, Var};

/// Variance guard inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("dropout rate must lie in [0, 1), got {0}")]
    DropoutRate(f64),
    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,
    #[error("backward root must be a 1x1 scalar, got {0}x{1}")]
    NonScalarRoot(usize, usize),
    #[error("objective is not finite ({0})")]
    NonFinite(f64),
}

/// How the causal mask interacts with a row softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Masking {
    /// Plain softmax over every column.
    None,
    /// Logits above the diagonal are set to −∞ before exponentiation, so
    /// each row is a distribution over the allowed positions.
    #[default]
    Causal,
    /// Softmax over the full row, then entries above the diagonal are zeroed.
    /// Rows no longer sum to one.
    CausalAfterSoftmax,
}

/// Row-wise softmax. With a causal mode the input may be a vertical stack of
/// square `cols x cols` blocks; row `r` is treated as position `r % cols`.
pub fn masked_softmax_rows(logits: &Matrix, masking: Masking) -> Result<Matrix, NumericsError> {
    softmax_forward(logits, masking).map(|(out, _)| out)
}

/// Returns the output and, for `CausalAfterSoftmax`, the unmasked softmax.
pub(crate) fn softmax_forward(
    logits: &Matrix,
    masking: Masking,
) -> Result<(Matrix, Option<Matrix>), NumericsError> {
    let (rows, cols) = logits.shape();
    if masking != Masking::None && (cols == 0 || rows % cols != 0) {
        return Err(NumericsError::Shape(format!(
            "causal softmax needs stacked square blocks, got {rows}x{cols}"
        )));
    }
    let mut out = Matrix::zeros(rows, cols);
    let mut full = (masking == Masking::CausalAfterSoftmax).then(|| Matrix::zeros(rows, cols));
    for r in 0..rows {
        let limit = match masking {
            Masking::Causal => r % cols + 1,
            _ => cols,
        };
        let src = &logits.row(r)[..limit];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out.row_mut(r)[..limit];
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
        if let Some(full) = full.as_mut() {
            full.row_mut(r).copy_from_slice(out.row(r));
            let keep = r % cols + 1;
            for d in &mut out.row_mut(r)[keep..] {
                *d = 0.0;
            }
        }
    }
    Ok((out, full))
}

pub(crate) struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> Result<Matrix, NumericsError> {
    layer_norm_forward(x, gamma, beta).map(|(out, _)| out)
}

pub(crate) fn layer_norm_forward(
    x: &Matrix,
    gamma: &Matrix,
    beta: &Matrix,
) -> Result<(Matrix, LayerNormCache), NumericsError> {
    let cols = x.cols();
    if gamma.len() != cols || beta.len() != cols {
        return Err(NumericsError::Shape(format!(
            "layer norm over {cols} columns with gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let mut normalized = Matrix::zeros(x.rows(), cols);
    let mut out = Matrix::zeros(x.rows(), cols);
    let mut inv_std = Vec::with_capacity(x.rows());
    let n = cols as f64;
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(inv);
        let xh = normalized.row_mut(r);
        for (h, v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * inv;
        }
        let xh = normalized.row(r);
        for (j, y) in out.row_mut(r).iter_mut().enumerate() {
            *y = xh[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

pub fn add(x: &Matrix, y: &Matrix) -> Result<Matrix, NumericsError> {
    if x.shape() != y.shape() {
        return Err(NumericsError::Shape(format!(
            "add {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let mut out = x.clone();
    out.add_assign(y);
    Ok(out)
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, NumericsError> {
    a.matmul(b)
}

/// Inverted dropout. In evaluation mode (`training == false`) this is the identity.
pub fn dropout(x: &Matrix, rate: f64, seed: u64, training: bool) -> Result<Matrix, NumericsError> {
    let scale = dropout_scales(x.len(), rate, seed, training)?;
    Ok(match scale {
        None => x.clone(),
        Some(s) => {
            let mut out = x.clone();
            for (v, k) in out.data_mut().iter_mut().zip(&s) {
                *v *= k;
            }
            out
        }
    })
}

/// Per-entry multipliers (0 or 1/(1−rate)), or `None` when dropout is inactive.
pub(crate) fn dropout_scales(
    len: usize,
    rate: f64,
    seed: u64,
    training: bool,
) -> Result<Option<Vec<f64>>, NumericsError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NumericsError::DropoutRate(rate));
    }
    if !training || rate == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Some(
        (0..len)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect(),
    ))
}

//! Score-kernel discrepancies.
//!
//! Both tests use the parameter-free kernel `k(x, y) = s(x)ᵀ s(y)` where
//! `s = ∇ₓ log p` is the model's input score.

use super::ScoreSet;
use crate::error::{Error, Result};
use crate::models::Model;

pub const MMD: &str = "mmd";
pub const KSD: &str = "ksd";

/// Per-coordinate mean over rows, summed in sorted order so the result is
/// independent of row order.
fn mean_embedding(set: &ScoreSet) -> Vec<f64> {
    let mut column = Vec::with_capacity(set.len());
    (0..set.dim())
        .map(|j| {
            column.clear();
            column.extend(set.iter().map(|row| row[j]));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / set.len() as f64
        })
        .collect()
}

/// Biased (V-statistic) squared MMD under the score dot-product kernel.
///
/// `mean(K_XX) + mean(K_YY) − 2 mean(K_XY)`. For a linear kernel the Gram
/// means collapse to `‖x̄ − ȳ‖²`, which is evaluated directly; it is
/// nonnegative, symmetric, and exactly zero for identical multisets.
pub fn mmd_statistic(x_scores: &ScoreSet, y_scores: &ScoreSet) -> Result<f64> {
    if x_scores.dim() != y_scores.dim() {
        return Err(Error::DimensionMismatch {
            expected: x_scores.dim(),
            got: y_scores.dim(),
        });
    }
    let (mx, my) = (mean_embedding(x_scores), mean_embedding(y_scores));
    Ok(mx.iter().zip(&my).map(|(a, b)| (a - b) * (a - b)).sum())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn basis(d: usize, j: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[j] = 1.0;
    e
}

fn model_dim(model: &dyn Model) -> Result<usize> {
    model.dim().ok_or(Error::Unsupported {
        model: model.kind(),
        capability: "Stein kernel (unknown dimension)",
    })
}

/// Stein kernel `u_p(x, y)` for the score kernel:
///
/// ```text
/// u_p = s(x)ᵀ k s(y) + s(x)ᵀ ∇_y k + s(y)ᵀ ∇ₓ k + tr(∇ₓ ∇_y k)
///     = k² + s(x)ᵀ H(y) s(x) + s(y)ᵀ H(x) s(y) + tr(H(x) H(y))
/// ```
///
/// with `k = s(x)ᵀ s(y)` and `H` the Hessian of `log p`.
pub fn stein_kernel(model: &dyn Model, x: &[f64], y: &[f64]) -> Result<f64> {
    let d = model_dim(model)?;
    let (sx, sy) = (model.score(x)?, model.score(y)?);
    let k = dot(&sx, &sy);
    let grad_y = model.hessian_apply(y, &sx)?;
    let grad_x = model.hessian_apply(x, &sy)?;
    let mut trace = 0.0;
    for j in 0..d {
        let col = model.hessian_apply(y, &basis(d, j))?;
        trace += model.hessian_apply(x, &col)?[j];
    }
    Ok(k * k + dot(&sx, &grad_y) + dot(&sy, &grad_x) + trace)
}

/// Per-example Stein features `B(x) = s(x) s(x)ᵀ + H(x)`, flattened.
///
/// The V-statistic over a set is `tr(B̄²)` with `B̄` the mean feature,
/// which equals the mean of [`stein_kernel`] over all ordered pairs.
/// Building the features once makes each bootstrap replicate `O(M d²)`.
#[derive(Debug, Clone)]
pub struct SteinFeatures {
    dim: usize,
    features: Vec<Vec<f64>>,
}

impl SteinFeatures {
    pub fn new(model: &dyn Model, xs: &[Vec<f64>]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::empty("KSD inputs"));
        }
        let d = model_dim(model)?;
        let features = xs
            .iter()
            .map(|x| {
                let s = model.score(x)?;
                let mut b = vec![0.0; d * d];
                for j in 0..d {
                    let hcol = model.hessian_apply(x, &basis(d, j))?;
                    for i in 0..d {
                        b[i * d + j] = s[i] * s[j] + hcol[i];
                    }
                }
                Ok(b)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim: d, features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// KSD V-statistic of the examples at `indices` (repeats allowed).
    pub fn statistic(&self, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::empty("KSD batch"));
        }
        let d = self.dim;
        let mut mean = vec![0.0; d * d];
        for &i in indices {
            for (m, b) in mean.iter_mut().zip(&self.features[i]) {
                *m += b;
            }
        }
        let n = indices.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let mut trace = 0.0;
        for i in 0..d {
            for j in 0..d {
                trace += mean[i * d + j] * mean[j * d + i];
            }
        }
        Ok(trace)
    }

    pub fn statistic_all(&self) -> Result<f64> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.statistic(&all)
    }
}

/// KSD V-statistic `(1/N²) Σᵢⱼ u_p(xᵢ, xⱼ)`.
///
/// Needs a model exposing both score and Hessian products.
pub fn ksd_statistic(model: &dyn Model, xs: &[Vec<f64>]) -> Result<f64> {
    SteinFeatures::new(model, xs)?.statistic_all()
}

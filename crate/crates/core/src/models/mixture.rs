use super::{check_input, DiagonalGaussian, Model};
use crate::error::{Error, Result};
use crate::rng::{self, NormalStream};

/// Finite mixture of diagonal Gaussians.
///
/// Has no closed-form entropy; use the estimators in [`crate::entropy`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    components: Vec<DiagonalGaussian>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<DiagonalGaussian>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::empty("mixture components"));
        }
        if weights.len() != components.len() {
            return Err(Error::DimensionMismatch {
                expected: components.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("weights", "must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("weights", format!("must sum to 1, got {total}")));
        }
        let d = components[0].d();
        if let Some(c) = components.iter().find(|c| c.d() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: c.d(),
            });
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            weights,
            log_weights,
            components,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[DiagonalGaussian] {
        &self.components
    }

    pub fn d(&self) -> usize {
        self.components[0].d()
    }

    /// Returns `(log p(x), responsibilities)`.
    fn posterior(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let joint: Vec<f64> = self
            .components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.log_prob_unchecked(x))
            .collect();
        let lse = log_sum_exp(&joint);
        let resp = joint.iter().map(|j| (j - lse).exp()).collect();
        (lse, resp)
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Model for GaussianMixture {
    fn kind(&self) -> &'static str {
        "GaussianMixture"
    }

    fn dim(&self) -> Option<usize> {
        Some(self.d())
    }

    fn log_prob(&self, x: &[f64]) -> Result<f64> {
        check_input(x, self.d())?;
        Ok(self.posterior(x).0)
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(Error::invalid("n", "sample count must be at least 1"));
        }
        let mut normals = NormalStream::new(rng::stream(seed, 0));
        let last = self.components.len() - 1;
        Ok((0..n)
            .map(|_| {
                let u = rng::unit(normals.rng_mut());
                let mut acc = 0.0;
                let k = self
                    .weights
                    .iter()
                    .position(|w| {
                        acc += w;
                        u < acc
                    })
                    .unwrap_or(last);
                self.components[k].draw(&mut normals)
            })
            .collect())
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(x, self.d())?;
        let (_, resp) = self.posterior(x);
        let mut out = vec![0.0; self.d()];
        for (c, r) in self.components.iter().zip(&resp) {
            for (o, s) in out.iter_mut().zip(c.score_unchecked(x)) {
                *o += r * s;
            }
        }
        Ok(out)
    }

    // H = Σ_k r_k (s_k s_kᵀ − Λ_k) − s sᵀ
    fn hessian_apply(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_input(x, self.d())?;
        check_input(v, self.d())?;
        let (_, resp) = self.posterior(x);
        let d = self.d();
        let mut out = vec![0.0; d];
        let mut total_score = vec![0.0; d];
        for (c, r) in self.components.iter().zip(&resp) {
            let s_k = c.score_unchecked(x);
            let proj = dot(&s_k, v);
            let prec_v = c.precision_apply(v);
            for i in 0..d {
                out[i] += r * (s_k[i] * proj - prec_v[i]);
                total_score[i] += r * s_k[i];
            }
        }
        let proj = dot(&total_score, v);
        for (o, s) in out.iter_mut().zip(&total_score) {
            *o -= s * proj;
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

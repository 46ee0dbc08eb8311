//! Entropy estimates that anchor the typicality statistic.
//!
//! Two estimators are offered: resubstitution (mean negative
//! log-likelihood of the training data, the default for calibration) and
//! Monte Carlo over model samples. Neither applies a bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::models::{log_probs, Model};

/// Default sample count for [`monte_carlo_entropy`] when the caller has no preference.
pub const DEFAULT_MC_SAMPLES: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMethod {
    ClosedForm,
    Resubstitution,
    MonteCarlo,
}

impl EntropyMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            EntropyMethod::ClosedForm => "closed_form",
            EntropyMethod::Resubstitution => "resubstitution",
            EntropyMethod::MonteCarlo => "monte_carlo",
        }
    }
}

/// An entropy value in nats with its provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub value: f64,
    pub method: EntropyMethod,
    /// Number of log-likelihoods averaged; 0 for closed form.
    pub n_used: usize,
}

impl EntropyEstimate {
    pub fn closed_form(model: &dyn Model) -> Result<Self> {
        Ok(Self {
            value: model.closed_form_entropy()?,
            method: EntropyMethod::ClosedForm,
            n_used: 0,
        })
    }

    /// Assumes `value` is finite; used for fixed reference values.
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            method: EntropyMethod::ClosedForm,
            n_used: 0,
        }
    }
}

/// Mean negative log-likelihood; the shared kernel of both estimators.
pub(crate) fn mean_nll(logliks: &[f64]) -> f64 {
    -logliks.iter().sum::<f64>() / logliks.len() as f64
}

/// Entropy as the mean negative log-likelihood of the training data.
///
/// Values are summed in sorted order, so the estimate depends only on the
/// multiset of likelihoods and not on file order.
pub fn resubstitution_entropy(logliks: &[f64]) -> Result<EntropyEstimate> {
    if logliks.is_empty() {
        return Err(Error::empty("training log-likelihoods"));
    }
    ensure_finite(logliks, "training log-likelihoods")?;
    let mut sorted = logliks.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(EntropyEstimate {
        value: mean_nll(&sorted),
        method: EntropyMethod::Resubstitution,
        n_used: logliks.len(),
    })
}

/// Entropy as the mean negative log-likelihood of `samples` model draws.
pub fn monte_carlo_entropy(model: &dyn Model, samples: usize, seed: u64) -> Result<EntropyEstimate> {
    if samples == 0 {
        return Err(Error::invalid("S", "Monte Carlo sample count must be at least 1"));
    }
    let draws = model.sample(samples, seed)?;
    let logliks = log_probs(model, &draws)?;
    ensure_finite(&logliks, "sampled log-likelihoods")?;
    Ok(EntropyEstimate {
        value: mean_nll(&logliks),
        method: EntropyMethod::MonteCarlo,
        n_used: samples,
    })
}

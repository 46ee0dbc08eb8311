//! The typicality test.
//!
//! A batch of `M` inputs is declared out-of-distribution when the gap
//! between its mean negative log-likelihood and the model entropy,
//!
//! ```text
//! ε̂ = | (1/M) Σ −log p(x̃ₘ) − Ĥ |
//! ```
//!
//! exceeds a threshold `ε^M_α`. The threshold is the α-quantile of ε̂ over
//! `K` bootstrap resamples (with replacement) of size `M` drawn from held-out
//! validation likelihoods. The quantile is the `⌈αK⌉`-th smallest
//! replicate, without interpolation; rejection is strict (`ε̂ > ε^M_α`).
//!
//! Replicate `k` draws its indices from ChaCha20 stream `k` of the
//! calibration seed, so calibrations are reproducible and independent
//! of evaluation order.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::entropy::{mean_nll, EntropyEstimate, EntropyMethod};
use crate::error::{ensure_finite, Error, Result};
use crate::rng;

pub const DEFAULT_ALPHA: f64 = 0.99;
pub const DEFAULT_BOOTSTRAP: usize = 50;
pub const TYPICALITY: &str = "typicality";

/// How the threshold is read off the bootstrap distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum QuantileRule {
    /// The `⌈αK⌉`-th order statistic (1-based) of the `K` replicates.
    #[default]
    #[serde(rename = "ceil-order-statistic")]
    CeilOrderStatistic,
}

/// 1-based rank `⌈αK⌉`, clamped to `1..=k`.
///
/// Alpha is read as the decimal it was written as: a product within a
/// relative `1e-9` of an integer is snapped to it before taking the
/// ceiling, so `⌈0.8·5⌉ = 4` even though the binary `0.8` is slightly
/// larger than 4/5.
pub fn ceil_rank(alpha: f64, k: usize) -> usize {
    let p = alpha * k as f64;
    let nearest = p.round();
    let rank = if (p - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        p.ceil()
    };
    (rank as usize).clamp(1, k.max(1))
}

/// Applies the quantile rule to (unsorted) replicate statistics.
pub fn quantile(stats: &[f64], alpha: f64, rule: QuantileRule) -> f64 {
    match rule {
        QuantileRule::CeilOrderStatistic => {
            let mut sorted = stats.to_vec();
            sorted.sort_by(f64::total_cmp);
            sorted[ceil_rank(alpha, sorted.len()) - 1]
        }
    }
}

/// Frozen test configuration: entropy, batch size, confidence, and the
/// bootstrap distribution the threshold was read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CalibrationFile", into = "CalibrationFile")]
pub struct Calibration {
    pub test_name: String,
    /// Present for the typicality test; baselines do not use one.
    pub entropy: Option<EntropyEstimate>,
    pub batch_size: usize,
    pub alpha: f64,
    pub bootstrap_count: usize,
    pub threshold: f64,
    pub seed: u64,
    pub quantile_rule: QuantileRule,
    pub bootstrap_stats: Vec<f64>,
    /// How baseline replicates are paired with reference data.
    pub pairing: Option<String>,
    pub reference_size: Option<usize>,
    pub latent_dim: Option<usize>,
}

/// Outcome for one batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestVerdict {
    pub statistic: f64,
    pub threshold: f64,
    pub is_ood: bool,
    pub test_name: String,
    pub batch_size: usize,
}

impl Calibration {
    /// Verdict for a statistic computed on a batch of `batch_size` inputs.
    pub fn verdict(&self, statistic: f64, batch_size: usize) -> TestVerdict {
        TestVerdict {
            statistic,
            threshold: self.threshold,
            is_ood: statistic > self.threshold,
            test_name: self.test_name.clone(),
            batch_size,
        }
    }

    /// Checks the stored invariants (used after deserializing).
    pub fn validate(&self) -> Result<()> {
        validate_config(self.batch_size, self.bootstrap_count, self.alpha)?;
        if self.bootstrap_stats.len() != self.bootstrap_count {
            return Err(Error::invalid(
                "bootstrap_stats",
                format!("{} values for K={}", self.bootstrap_stats.len(), self.bootstrap_count),
            ));
        }
        if self.bootstrap_stats.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("bootstrap_stats", "must be finite and nonnegative"));
        }
        let expected = quantile(&self.bootstrap_stats, self.alpha, self.quantile_rule);
        if expected.to_bits() != self.threshold.to_bits() {
            return Err(Error::invalid(
                "threshold",
                format!("{} does not equal the quantile {expected} of bootstrap_stats", self.threshold),
            ));
        }
        if let Some(e) = &self.entropy {
            if !e.value.is_finite() {
                return Err(Error::non_finite("entropy"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_path(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk layout of a calibration.
#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    test_name: String,
    entropy: Option<f64>,
    entropy_method: Option<EntropyMethod>,
    #[serde(default)]
    entropy_n_used: Option<usize>,
    #[serde(rename = "M")]
    m: usize,
    alpha: f64,
    #[serde(rename = "K")]
    k: usize,
    threshold: f64,
    seed: u64,
    quantile_rule: QuantileRule,
    bootstrap_stats: Vec<f64>,
    #[serde(default)]
    pairing: Option<String>,
    #[serde(default)]
    reference_size: Option<usize>,
    #[serde(default)]
    latent_dim: Option<usize>,
}

impl From<Calibration> for CalibrationFile {
    fn from(c: Calibration) -> Self {
        Self {
            test_name: c.test_name,
            entropy: c.entropy.map(|e| e.value),
            entropy_method: c.entropy.map(|e| e.method),
            entropy_n_used: c.entropy.map(|e| e.n_used),
            m: c.batch_size,
            alpha: c.alpha,
            k: c.bootstrap_count,
            threshold: c.threshold,
            seed: c.seed,
            quantile_rule: c.quantile_rule,
            bootstrap_stats: c.bootstrap_stats,
            pairing: c.pairing,
            reference_size: c.reference_size,
            latent_dim: c.latent_dim,
        }
    }
}

impl TryFrom<CalibrationFile> for Calibration {
    type Error = Error;

    fn try_from(f: CalibrationFile) -> Result<Self> {
        let entropy = match (f.entropy, f.entropy_method) {
            (Some(value), Some(method)) => Some(EntropyEstimate {
                value,
                method,
                n_used: f.entropy_n_used.unwrap_or(0),
            }),
            (None, None) => None,
            _ => return Err(Error::invalid("entropy", "entropy and entropy_method must both be set or both null")),
        };
        let cal = Calibration {
            test_name: f.test_name,
            entropy,
            batch_size: f.m,
            alpha: f.alpha,
            bootstrap_count: f.k,
            threshold: f.threshold,
            seed: f.seed,
            quantile_rule: f.quantile_rule,
            bootstrap_stats: f.bootstrap_stats,
            pairing: f.pairing,
            reference_size: f.reference_size,
            latent_dim: f.latent_dim,
        };
        cal.validate()?;
        Ok(cal)
    }
}

fn validate_config(m: usize, k: usize, alpha: f64) -> Result<()> {
    if m == 0 {
        return Err(Error::invalid("M", "batch size must be at least 1"));
    }
    if k == 0 {
        return Err(Error::invalid("K", "bootstrap count must be at least 1"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", format!("must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// ε̂ for a batch of log-likelihoods.
pub fn epsilon_hat(batch_logliks: &[f64], entropy: &EntropyEstimate) -> Result<f64> {
    if batch_logliks.is_empty() {
        return Err(Error::empty("batch"));
    }
    ensure_finite(batch_logliks, "batch log-likelihoods")?;
    Ok((mean_nll(batch_logliks) - entropy.value).abs())
}

/// Indices of bootstrap replicate `replicate`: `m` uniform draws with
/// replacement from `0..n`.
pub fn bootstrap_indices(n: usize, m: usize, seed: u64, replicate: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, replicate);
    (0..m).map(|_| rng.gen_range(0..n)).collect()
}

/// Bootstrap calibration for an arbitrary batch statistic.
///
/// `statistic` receives the resampled validation indices of one replicate
/// and must be pure. The returned calibration has no entropy attached.
pub fn generic_bootstrap_threshold<F>(
    test_name: &str,
    validation_len: usize,
    m: usize,
    k: usize,
    alpha: f64,
    seed: u64,
    statistic: F,
) -> Result<Calibration>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    validate_config(m, k, alpha)?;
    if validation_len == 0 {
        return Err(Error::empty("validation set"));
    }
    if validation_len < m {
        return Err(Error::invalid(
            "M",
            format!("validation set has {validation_len} examples, fewer than M={m}"),
        ));
    }
    let stats = (0..k as u64)
        .into_par_iter()
        .map(|rep| {
            let idx = bootstrap_indices(validation_len, m, seed, rep);
            let s = statistic(&idx)?;
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::invalid(
                    "statistic",
                    format!("replicate {rep} produced {s}; statistics must be finite and nonnegative"),
                ));
            }
            Ok(s)
        })
        .collect::<Result<Vec<f64>>>()?;
    let rule = QuantileRule::CeilOrderStatistic;
    Ok(Calibration {
        test_name: test_name.to_string(),
        entropy: None,
        batch_size: m,
        alpha,
        bootstrap_count: k,
        threshold: quantile(&stats, alpha, rule),
        seed,
        quantile_rule: rule,
        bootstrap_stats: stats,
        pairing: None,
        reference_size: None,
        latent_dim: None,
    })
}

/// Calibrates the typicality threshold `ε^M_α` on validation likelihoods.
pub fn bootstrap_threshold(
    validation_logliks: &[f64],
    entropy: EntropyEstimate,
    m: usize,
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<Calibration> {
    ensure_finite(validation_logliks, "validation log-likelihoods")?;
    let mut cal = generic_bootstrap_threshold(TYPICALITY, validation_logliks.len(), m, k, alpha, seed, |idx| {
        let nll = -idx.iter().map(|&i| validation_logliks[i]).sum::<f64>() / idx.len() as f64;
        Ok((nll - entropy.value).abs())
    })?;
    cal.entropy = Some(entropy);
    Ok(cal)
}

/// Online step: classify one batch against a typicality calibration.
pub fn decide(batch_logliks: &[f64], calibration: &Calibration) -> Result<TestVerdict> {
    if batch_logliks.is_empty() {
        return Err(Error::empty("batch"));
    }
    if batch_logliks.len() != calibration.batch_size {
        return Err(Error::BatchSizeMismatch {
            expected: calibration.batch_size,
            got: batch_logliks.len(),
        });
    }
    let entropy = calibration
        .entropy
        .as_ref()
        .ok_or_else(|| Error::invalid("calibration", format!("{} calibration has no entropy", calibration.test_name)))?;
    let statistic = epsilon_hat(batch_logliks, entropy)?;
    Ok(calibration.verdict(statistic, batch_logliks.len()))
}

/// How to pick a calibration for a batch of a given size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchMode {
    /// The batch size must equal some calibration's `M`.
    #[default]
    Exact,
    /// Use the calibration whose `M` is closest (ties go to the smaller `M`).
    NearestM,
}

pub fn select_calibration(calibrations: &[Calibration], batch_len: usize, mode: MatchMode) -> Result<&Calibration> {
    if calibrations.is_empty() {
        return Err(Error::empty("calibrations"));
    }
    if let Some(c) = calibrations.iter().find(|c| c.batch_size == batch_len) {
        return Ok(c);
    }
    match mode {
        MatchMode::Exact => Err(Error::BatchSizeMismatch {
            expected: calibrations[0].batch_size,
            got: batch_len,
        }),
        MatchMode::NearestM => Ok(calibrations
            .iter()
            .min_by_key(|c| (c.batch_size.abs_diff(batch_len), c.batch_size))
            .expect("nonempty")),
    }
}

/// [`decide`] against a set of calibrations, one per `M`.
pub fn decide_with(batch_logliks: &[f64], calibrations: &[Calibration], mode: MatchMode) -> Result<TestVerdict> {
    if batch_logliks.is_empty() {
        return Err(Error::empty("batch"));
    }
    let cal = select_calibration(calibrations, batch_logliks.len(), mode)?;
    let entropy = cal
        .entropy
        .as_ref()
        .ok_or_else(|| Error::invalid("calibration", "typicality calibration has no entropy"))?;
    Ok(cal.verdict(epsilon_hat(batch_logliks, entropy)?, batch_logliks.len()))
}

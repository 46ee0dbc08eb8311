//! Comparison tests.
//!
//! The t- and KS-tests compare batch likelihoods against training
//! likelihoods directly. MMD, KSD and the annulus method produce a batch
//! statistic whose threshold comes from the same bootstrap over validation
//! data as the typicality test.

mod annulus;
mod kernel;
mod two_sample;

pub use annulus::{annulus_statistic, ANNULUS};
pub use kernel::{ksd_statistic, mmd_statistic, stein_kernel, SteinFeatures, KSD, MMD};
pub use two_sample::{ks_test, t_test, KsReference, KS_TEST, T_TEST};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng;
use crate::typicality::{generic_bootstrap_threshold, Calibration};

/// Default number of training scores MMD compares each batch against.
pub const DEFAULT_REFERENCE_SIZE: usize = 500;

/// RNG stream used to pick the MMD reference subset. Bootstrap replicates
/// use streams `0..K`, so this never collides.
const REFERENCE_STREAM: u64 = u64::MAX;

/// Verdict of a classical two-sample test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoSampleResult {
    pub test_name: String,
    pub statistic: f64,
    pub critical_value: Option<f64>,
    pub p_value: Option<f64>,
    pub reject: bool,
}

/// Input scores `∇ₓ log p(x)`, one row per example, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    dim: usize,
    data: Vec<f64>,
}

impl ScoreSet {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or_else(|| Error::empty("score set"))?;
        if dim == 0 {
            return Err(Error::invalid("score", "score vectors must be nonempty"));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend(row);
        }
        crate::error::ensure_finite(&data, "scores")?;
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Rows at `indices`, repeats allowed.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { dim: self.dim, data }
    }
}

/// Fixed MMD reference: the first `size` rows of a seeded permutation of
/// the training scores (all of them when fewer exist).
pub fn select_reference(train: &ScoreSet, size: usize, seed: u64) -> Result<ScoreSet> {
    if size == 0 {
        return Err(Error::invalid("reference_size", "must be at least 1"));
    }
    let perm = rng::permutation(train.len(), &mut rng::stream(seed, REFERENCE_STREAM));
    Ok(train.select(&perm[..size.min(train.len())]))
}

/// A baseline statistic together with the validation data it resamples.
pub enum BaselineStatistic<'a> {
    /// Each replicate's scores are compared against a fixed reference
    /// subset of the training scores.
    Mmd {
        validation: &'a ScoreSet,
        reference: &'a ScoreSet,
    },
    Ksd { validation: &'a SteinFeatures },
    Annulus { validation_sqnorms: &'a [f64], dim: usize },
}

impl BaselineStatistic<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineStatistic::Mmd { .. } => MMD,
            BaselineStatistic::Ksd { .. } => KSD,
            BaselineStatistic::Annulus { .. } => ANNULUS,
        }
    }

    fn validation_len(&self) -> usize {
        match self {
            BaselineStatistic::Mmd { validation, .. } => validation.len(),
            BaselineStatistic::Ksd { validation } => validation.len(),
            BaselineStatistic::Annulus { validation_sqnorms, .. } => validation_sqnorms.len(),
        }
    }

    /// The statistic on the validation rows at `indices`.
    pub fn on_indices(&self, indices: &[usize]) -> Result<f64> {
        match self {
            BaselineStatistic::Mmd { validation, reference } => mmd_statistic(&validation.select(indices), reference),
            BaselineStatistic::Ksd { validation } => validation.statistic(indices),
            BaselineStatistic::Annulus { validation_sqnorms, dim } => {
                let batch: Vec<f64> = indices.iter().map(|&i| validation_sqnorms[i]).collect();
                annulus_statistic(&batch, *dim)
            }
        }
    }
}

/// Bootstrap calibration of a baseline statistic on validation data.
pub fn bootstrap_baseline(
    statistic: &BaselineStatistic<'_>,
    m: usize,
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<Calibration> {
    let mut cal = generic_bootstrap_threshold(statistic.name(), statistic.validation_len(), m, k, alpha, seed, |idx| {
        statistic.on_indices(idx)
    })?;
    match statistic {
        BaselineStatistic::Mmd { reference, .. } => {
            cal.pairing = Some("bootstrap batch vs fixed training reference".into());
            cal.reference_size = Some(reference.len());
        }
        BaselineStatistic::Ksd { .. } => {
            cal.pairing = Some("bootstrap batch vs model".into());
        }
        BaselineStatistic::Annulus { dim, .. } => {
            cal.pairing = Some("bootstrap batch vs sqrt(d) sphere".into());
            cal.latent_dim = Some(*dim);
        }
    }
    Ok(cal)
}

//! Likelihood sources.
//!
//! Analytic Gaussians and mixtures provide exact densities, scores and
//! Hessian products, and serve as reference oracles for the tests. The
//! [`ExternalModel`] wraps likelihoods computed by some other program.
//! All densities and entropies are in nats.

mod external;
mod gaussian;
mod mixture;

use std::fmt;
use std::str::FromStr;

pub use external::{bits_per_dim_to_nats, fmt_f64, ExternalModel, LikelihoodRecord};
pub use gaussian::{DiagonalGaussian, IsotropicGaussian};
pub use mixture::GaussianMixture;

use crate::error::{Error, Result};

/// A likelihood source.
///
/// Only `log_prob` is mandatory; every other capability defaults to
/// [`Error::Unsupported`]. Implementations are immutable, and sampling
/// takes its seed per call.
pub trait Model: Send + Sync {
    fn kind(&self) -> &'static str;

    fn dim(&self) -> Option<usize>;

    fn log_prob(&self, x: &[f64]) -> Result<f64>;

    fn sample(&self, _n: usize, _seed: u64) -> Result<Vec<Vec<f64>>> {
        Err(self.unsupported("sampling"))
    }

    fn closed_form_entropy(&self) -> Result<f64> {
        Err(self.unsupported("closed-form entropy"))
    }

    /// ∇ₓ log p(x).
    fn score(&self, _x: &[f64]) -> Result<Vec<f64>> {
        Err(self.unsupported("score"))
    }

    /// (∇ₓ² log p(x)) v.
    fn hessian_apply(&self, _x: &[f64], _v: &[f64]) -> Result<Vec<f64>> {
        Err(self.unsupported("hessian_apply"))
    }

    /// Squared norm of the whitened input, as a flow's latent would be.
    fn latent_sqnorm(&self, _x: &[f64]) -> Result<f64> {
        Err(self.unsupported("latent_sqnorm"))
    }

    #[doc(hidden)]
    fn unsupported(&self, capability: &'static str) -> Error {
        Error::Unsupported {
            model: self.kind(),
            capability,
        }
    }
}

pub(crate) fn check_input(x: &[f64], d: usize) -> Result<()> {
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    crate::error::ensure_finite(x, "model input")
}

/// Log-likelihood of every row.
pub fn log_probs(model: &dyn Model, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
    xs.iter().map(|x| model.log_prob(x)).collect()
}

/// Owned analytic model, constructible from a textual spec.
///
/// Spec grammar: `iso:d=<d>,sigma=<s>[,mean=<m>]` or
/// `diag:sigmas=<s1>;<s2>;...[,mean=<m1>;<m2>;...]`. A scalar mean is
/// broadcast over every coordinate.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticModel {
    Isotropic(IsotropicGaussian),
    Diagonal(DiagonalGaussian),
    Mixture(GaussianMixture),
}

impl AnalyticModel {
    fn inner(&self) -> &dyn Model {
        match self {
            AnalyticModel::Isotropic(m) => m,
            AnalyticModel::Diagonal(m) => m,
            AnalyticModel::Mixture(m) => m,
        }
    }

    pub fn d(&self) -> usize {
        match self {
            AnalyticModel::Isotropic(m) => m.d(),
            AnalyticModel::Diagonal(m) => m.d(),
            AnalyticModel::Mixture(m) => m.d(),
        }
    }
}

impl From<IsotropicGaussian> for AnalyticModel {
    fn from(m: IsotropicGaussian) -> Self {
        AnalyticModel::Isotropic(m)
    }
}

impl From<DiagonalGaussian> for AnalyticModel {
    fn from(m: DiagonalGaussian) -> Self {
        AnalyticModel::Diagonal(m)
    }
}

impl From<GaussianMixture> for AnalyticModel {
    fn from(m: GaussianMixture) -> Self {
        AnalyticModel::Mixture(m)
    }
}

impl Model for AnalyticModel {
    fn kind(&self) -> &'static str {
        self.inner().kind()
    }
    fn dim(&self) -> Option<usize> {
        self.inner().dim()
    }
    fn log_prob(&self, x: &[f64]) -> Result<f64> {
        self.inner().log_prob(x)
    }
    fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        self.inner().sample(n, seed)
    }
    fn closed_form_entropy(&self) -> Result<f64> {
        self.inner().closed_form_entropy()
    }
    fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.inner().score(x)
    }
    fn hessian_apply(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.inner().hessian_apply(x, v)
    }
    fn latent_sqnorm(&self, x: &[f64]) -> Result<f64> {
        self.inner().latent_sqnorm(x)
    }
}

impl FromStr for AnalyticModel {
    type Err = Error;

    fn from_str(spec: &str) -> Result<Self> {
        let bad = |msg: String| Error::invalid("model", format!("{spec:?}: {msg}"));
        let (family, params) = spec.split_once(':').ok_or_else(|| bad("missing family prefix".into()))?;
        let mut d = None;
        let mut sigma = None;
        let mut sigmas = None;
        let mut mean = None;
        for kv in params.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {kv:?}")))?;
            let list = || -> Result<Vec<f64>> {
                v.split(';')
                    .map(|x| x.trim().parse::<f64>().map_err(|_| bad(format!("bad number {x:?}"))))
                    .collect()
            };
            match k.trim() {
                "d" => d = Some(v.parse::<usize>().map_err(|_| bad(format!("bad d {v:?}")))?),
                "sigma" => sigma = Some(list()?),
                "sigmas" => sigmas = Some(list()?),
                "mean" => mean = Some(list()?),
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        let broadcast = |mean: Option<Vec<f64>>, d: usize| -> Result<Vec<f64>> {
            match mean {
                None => Ok(vec![0.0; d]),
                Some(m) if m.len() == 1 => Ok(vec![m[0]; d]),
                Some(m) if m.len() == d => Ok(m),
                Some(m) => Err(bad(format!("mean has {} entries for d={d}", m.len()))),
            }
        };
        match family.trim() {
            "iso" => {
                let d = d.ok_or_else(|| bad("iso requires d".into()))?;
                let sigma = match sigma.as_deref() {
                    Some([s]) => *s,
                    None => 1.0,
                    Some(_) => return Err(bad("sigma must be a scalar".into())),
                };
                Ok(IsotropicGaussian::new(broadcast(mean, d)?, sigma)?.into())
            }
            "diag" => {
                let sigmas = sigmas.ok_or_else(|| bad("diag requires sigmas".into()))?;
                let d = sigmas.len();
                Ok(DiagonalGaussian::new(broadcast(mean, d)?, sigmas)?.into())
            }
            other => Err(bad(format!("unknown family {other:?} (expected iso or diag)"))),
        }
    }
}

impl fmt::Display for AnalyticModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(";");
        match self {
            AnalyticModel::Isotropic(m) => {
                write!(f, "iso:d={},sigma={}", m.d(), fmt_f64(m.sigma()))?;
                if m.mean().iter().any(|v| *v != 0.0) {
                    write!(f, ",mean={}", join(m.mean()))?;
                }
                Ok(())
            }
            AnalyticModel::Diagonal(m) => {
                write!(f, "diag:sigmas={}", join(m.sigmas()))?;
                if m.mean().iter().any(|v| *v != 0.0) {
                    write!(f, ",mean={}", join(m.mean()))?;
                }
                Ok(())
            }
            AnalyticModel::Mixture(m) => write!(f, "mixture:k={},d={}", m.components().len(), m.d()),
        }
    }
}

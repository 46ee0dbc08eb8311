use std::f64::consts::PI;

use super::{check_input, Model};
use crate::error::{Error, Result};
use crate::rng::{self, NormalStream};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `N(mean, sigma² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotropicGaussian {
    mean: Vec<f64>,
    sigma: f64,
}

impl IsotropicGaussian {
    pub fn new(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::invalid("d", "dimension must be positive"));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid("sigma", format!("must be positive and finite, got {sigma}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::non_finite("mean"));
        }
        Ok(Self { mean, sigma })
    }

    /// Zero-mean isotropic Gaussian in `d` dimensions.
    pub fn standard(d: usize, sigma: f64) -> Result<Self> {
        Self::new(vec![0.0; d], sigma)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn d(&self) -> usize {
        self.mean.len()
    }

    fn sqdist(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.mean).map(|(xi, mi)| (xi - mi) * (xi - mi)).sum()
    }
}

impl Model for IsotropicGaussian {
    fn kind(&self) -> &'static str {
        "IsotropicGaussian"
    }

    fn dim(&self) -> Option<usize> {
        Some(self.d())
    }

    fn log_prob(&self, x: &[f64]) -> Result<f64> {
        check_input(x, self.d())?;
        let d = self.d() as f64;
        let s2 = self.sigma * self.sigma;
        Ok(-0.5 * d * LN_2PI - d * self.sigma.ln() - 0.5 * self.sqdist(x) / s2)
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(Error::invalid("n", "sample count must be at least 1"));
        }
        let mut normals = NormalStream::new(rng::stream(seed, 0));
        Ok((0..n)
            .map(|_| self.mean.iter().map(|m| m + self.sigma * normals.draw()).collect())
            .collect())
    }

    fn closed_form_entropy(&self) -> Result<f64> {
        let d = self.d() as f64;
        Ok(d * self.sigma.ln() + 0.5 * d * (1.0 + (2.0 * PI).ln()))
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(x, self.d())?;
        let s2 = self.sigma * self.sigma;
        Ok(x.iter().zip(&self.mean).map(|(xi, mi)| -(xi - mi) / s2).collect())
    }

    fn hessian_apply(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_input(x, self.d())?;
        check_input(v, self.d())?;
        let s2 = self.sigma * self.sigma;
        Ok(v.iter().map(|vi| -vi / s2).collect())
    }

    fn latent_sqnorm(&self, x: &[f64]) -> Result<f64> {
        check_input(x, self.d())?;
        Ok(self.sqdist(x) / (self.sigma * self.sigma))
    }
}

/// `N(mean, diag(sigmas²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    sigmas: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, sigmas: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::invalid("d", "dimension must be positive"));
        }
        if mean.len() != sigmas.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: sigmas.len(),
            });
        }
        if let Some(bad) = sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::invalid("sigmas", format!("must be positive and finite, got {bad}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::non_finite("mean"));
        }
        Ok(Self { mean, sigmas })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn d(&self) -> usize {
        self.mean.len()
    }

    fn whitened_sq(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.mean)
            .zip(&self.sigmas)
            .map(|((xi, mi), si)| {
                let z = (xi - mi) / si;
                z * z
            })
            .sum()
    }

    fn log_norm(&self) -> f64 {
        -0.5 * self.d() as f64 * LN_2PI - self.sigmas.iter().map(|s| s.ln()).sum::<f64>()
    }

    /// Same as [`Model::sample`] but drawing from an existing normal stream.
    pub(crate) fn draw<R: rand::Rng>(&self, normals: &mut NormalStream<R>) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.sigmas)
            .map(|(m, s)| m + s * normals.draw())
            .collect()
    }

    pub(crate) fn log_prob_unchecked(&self, x: &[f64]) -> f64 {
        self.log_norm() - 0.5 * self.whitened_sq(x)
    }

    pub(crate) fn score_unchecked(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.sigmas)
            .map(|((xi, mi), si)| -(xi - mi) / (si * si))
            .collect()
    }

    pub(crate) fn precision_apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.sigmas).map(|(vi, si)| vi / (si * si)).collect()
    }
}

impl Model for DiagonalGaussian {
    fn kind(&self) -> &'static str {
        "DiagonalGaussian"
    }

    fn dim(&self) -> Option<usize> {
        Some(self.d())
    }

    fn log_prob(&self, x: &[f64]) -> Result<f64> {
        check_input(x, self.d())?;
        Ok(self.log_prob_unchecked(x))
    }

    fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(Error::invalid("n", "sample count must be at least 1"));
        }
        let mut normals = NormalStream::new(rng::stream(seed, 0));
        Ok((0..n).map(|_| self.draw(&mut normals)).collect())
    }

    fn closed_form_entropy(&self) -> Result<f64> {
        let d = self.d() as f64;
        Ok(self.sigmas.iter().map(|s| s.ln()).sum::<f64>() + 0.5 * d * (1.0 + (2.0 * PI).ln()))
    }

    fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(x, self.d())?;
        Ok(self.score_unchecked(x))
    }

    fn hessian_apply(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_input(x, self.d())?;
        check_input(v, self.d())?;
        Ok(self.precision_apply(v).into_iter().map(|p| -p).collect())
    }

    fn latent_sqnorm(&self, x: &[f64]) -> Result<f64> {
        check_input(x, self.d())?;
        Ok(self.whitened_sq(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn std2() -> IsotropicGaussian {
        IsotropicGaussian::standard(2, 1.0).unwrap()
    }

    #[test]
    fn log_prob_at_mode_and_off_mode() {
        let g = std2();
        let ln2pi = (2.0 * PI).ln();
        assert!(close(g.log_prob(&[0.0, 0.0]).unwrap(), -ln2pi, 1e-15));
        assert!(close(g.log_prob(&[2.0, 0.0]).unwrap(), -ln2pi - 2.0, 1e-15));
        assert!(close(-ln2pi, -1.837877, 1e-6));
    }

    #[test]
    fn log_prob_rejects_bad_input() {
        let g = std2();
        assert!(matches!(g.log_prob(&[0.0]), Err(Error::DimensionMismatch { expected: 2, got: 1 })));
        assert!(matches!(g.log_prob(&[f64::NAN, 0.0]), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn closed_form_entropy_values() {
        let ln2pi = (2.0 * PI).ln();
        assert!(close(std2().closed_form_entropy().unwrap(), 1.0 + ln2pi, 1e-15));
        assert!(close(std2().closed_form_entropy().unwrap(), 2.837877, 1e-6));
        let g = IsotropicGaussian::standard(1, 2.0).unwrap();
        assert!(close(g.closed_form_entropy().unwrap(), 2f64.ln() + 0.5 * (1.0 + ln2pi), 1e-15));
        let diag = DiagonalGaussian::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(close(diag.closed_form_entropy().unwrap(), std2().closed_form_entropy().unwrap(), 1e-15));
    }

    #[test]
    fn score_and_hessian_examples() {
        let g = std2();
        assert_eq!(g.score(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(g.score(&[2.0, 0.0]).unwrap(), vec![-2.0, 0.0]);
        assert_eq!(g.hessian_apply(&[0.3, 0.1], &[1.0, -2.0]).unwrap(), vec![-1.0, 2.0]);
        let g2 = IsotropicGaussian::standard(2, 2.0).unwrap();
        assert_eq!(g2.hessian_apply(&[0.0, 0.0], &[4.0, 0.0]).unwrap(), vec![-1.0, 0.0]);
    }

    #[test]
    fn sampling_contract() {
        let g = std2();
        assert!(g.sample(0, 1).is_err());
        assert_eq!(g.sample(5, 11).unwrap(), g.sample(5, 11).unwrap());
        assert_ne!(g.sample(5, 11).unwrap(), g.sample(5, 12).unwrap());
    }

    #[test]
    fn high_dimensional_norm_concentrates_on_sqrt_d() {
        let g = IsotropicGaussian::standard(1000, 1.0).unwrap();
        let xs = g.sample(10_000, 5).unwrap();
        let mean_norm = xs
            .iter()
            .map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / xs.len() as f64;
        let target = 1000f64.sqrt();
        assert!((mean_norm - target).abs() < 0.01 * target, "mean norm {mean_norm}");
    }

    #[test]
    fn diagonal_validation() {
        assert!(DiagonalGaussian::new(vec![0.0], vec![0.0]).is_err());
        assert!(DiagonalGaussian::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(IsotropicGaussian::standard(0, 1.0).is_err());
        assert!(IsotropicGaussian::standard(3, -1.0).is_err());
    }

    #[test]
    fn latent_sqnorm_whitens() {
        let g = DiagonalGaussian::new(vec![1.0, 0.0], vec![2.0, 0.5]).unwrap();
        assert!(close(g.latent_sqnorm(&[3.0, 1.0]).unwrap(), 1.0 + 4.0, 1e-15));
    }
}

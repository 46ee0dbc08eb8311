//! Likelihood-only two-sample tests: Welch's t and Kolmogorov-Smirnov.
//!
//! Both compare a batch of log-likelihoods against a reference sample
//! (the training likelihoods) and use no validation data or RNG.

use statrs::distribution::{ContinuousCDF, StudentsT};

use super::TwoSampleResult;
use crate::error::{ensure_finite, Error, Result};

pub const T_TEST: &str = "ttest";
pub const KS_TEST: &str = "kstest";

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("alpha", format!("must lie in (0, 1), got {alpha}")))
    }
}

/// Welch two-sample t-test, two-sided at level `1 − alpha`.
///
/// The statistic is `(mean(batch) − mean(reference)) / se`. When both
/// samples have zero variance the test degenerates: equal means give
/// `t = 0` and no rejection, different means give `t = ±∞` and rejection.
pub fn t_test(reference_logliks: &[f64], batch_logliks: &[f64], alpha: f64) -> Result<TwoSampleResult> {
    check_alpha(alpha)?;
    if reference_logliks.len() < 2 || batch_logliks.len() < 2 {
        return Err(Error::invalid("t_test", "both samples need at least two values"));
    }
    ensure_finite(reference_logliks, "reference log-likelihoods")?;
    ensure_finite(batch_logliks, "batch log-likelihoods")?;
    let (ma, va) = mean_var(reference_logliks);
    let (mb, vb) = mean_var(batch_logliks);
    let (na, nb) = (reference_logliks.len() as f64, batch_logliks.len() as f64);
    let (qa, qb) = (va / na, vb / nb);
    let se2 = qa + qb;
    if se2 == 0.0 {
        let differ = ma != mb;
        return Ok(TwoSampleResult {
            test_name: T_TEST.into(),
            statistic: if differ { (mb - ma).signum() * f64::INFINITY } else { 0.0 },
            critical_value: None,
            p_value: Some(if differ { 0.0 } else { 1.0 }),
            reject: differ,
        });
    }
    let t = (mb - ma) / se2.sqrt();
    let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid("df", e.to_string()))?;
    let critical = dist.inverse_cdf(1.0 - (1.0 - alpha) / 2.0);
    let p = 2.0 * dist.sf(t.abs());
    Ok(TwoSampleResult {
        test_name: T_TEST.into(),
        statistic: t,
        critical_value: Some(critical),
        p_value: Some(p.min(1.0)),
        reject: t.abs() > critical,
    })
}

/// A sorted reference sample, reusable across many KS comparisons.
#[derive(Debug, Clone)]
pub struct KsReference {
    sorted: Vec<f64>,
}

impl KsReference {
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::empty("KS reference sample"));
        }
        ensure_finite(values, "KS reference sample")?;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn test(&self, batch: &[f64], alpha: f64) -> Result<TwoSampleResult> {
        check_alpha(alpha)?;
        let other = KsReference::new(batch)?;
        let d = sup_distance(&self.sorted, &other.sorted);
        let (n, m) = (self.sorted.len() as f64, other.sorted.len() as f64);
        let level = 1.0 - alpha;
        let c = (-(level / 2.0).ln() / 2.0).sqrt();
        let critical = c * ((n + m) / (n * m)).sqrt();
        let lambda = d * (n * m / (n + m)).sqrt();
        Ok(TwoSampleResult {
            test_name: KS_TEST.into(),
            statistic: d,
            critical_value: Some(critical),
            p_value: Some(kolmogorov_sf(lambda)),
            reject: d > critical,
        })
    }
}

/// `sup |F₁ − F₂|` over two sorted samples; ties advance both EDFs together.
fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < n && a[i] <= v {
            i += 1;
        }
        while j < m && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    d
}

/// Asymptotic Kolmogorov survival function `Q(λ) = 2 Σ (−1)^{k−1} e^{−2k²λ²}`.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut total = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        total += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * total).clamp(0.0, 1.0)
}

/// Two-sample KS test on log-likelihood EDFs with the asymptotic critical
/// value `c(α)·√((n+m)/(nm))`, `c(α) = √(−ln((1−alpha)/2)/2)`.
pub fn ks_test(reference_logliks: &[f64], batch_logliks: &[f64], alpha: f64) -> Result<TwoSampleResult> {
    KsReference::new(reference_logliks)?.test(batch_logliks, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Oracle: evaluate both EDFs at every pooled point.
    fn brute_ks(a: &[f64], b: &[f64]) -> f64 {
        let edf = |s: &[f64], t: f64| s.iter().filter(|v| **v <= t).count() as f64 / s.len() as f64;
        a.iter()
            .chain(b)
            .map(|&t| (edf(a, t) - edf(b, t)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn t_test_examples() {
        let a = [1.0, 2.0, 3.0];
        let r = t_test(&a, &a, 0.99).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!(!r.reject);

        let zeros = [0.0, 1e-9, -1e-9, 0.0];
        let ones = [1.0, 1.0 + 1e-9, 1.0, 1.0 - 1e-9];
        let r = t_test(&zeros, &ones, 0.99).unwrap();
        assert!(r.reject);
        // direct Welch formula
        let (ma, va) = mean_var(&zeros);
        let (mb, vb) = mean_var(&ones);
        let t = (mb - ma) / (va / 4.0 + vb / 4.0).sqrt();
        assert!((r.statistic - t).abs() <= 1e-9 * t.abs());
    }

    #[test]
    fn t_test_degenerate_and_errors() {
        let r = t_test(&[2.0, 2.0], &[2.0, 2.0, 2.0], 0.99).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!(!r.reject);
        let r = t_test(&[2.0, 2.0], &[3.0, 3.0], 0.99).unwrap();
        assert!(r.reject);
        assert!(t_test(&[1.0], &[1.0, 2.0], 0.99).is_err());
        assert!(t_test(&[1.0, 2.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn t_test_critical_value_matches_known_quantile() {
        // equal sizes and variances: df = 2n − 2 = 18, t_{0.995,18} = 2.8784
        let a: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..10).map(|i| i as f64 + 0.5).collect();
        let r = t_test(&a, &b, 0.99).unwrap();
        assert!((r.critical_value.unwrap() - 2.878_440).abs() < 1e-5);
    }

    #[test]
    fn ks_examples() {
        assert_eq!(ks_test(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0], 0.99).unwrap().statistic, 0.0);
        assert_eq!(ks_test(&[1.0, 2.0], &[3.0, 4.0], 0.99).unwrap().statistic, 1.0);
        assert_eq!(ks_test(&[1.0, 3.0], &[2.0, 4.0], 0.99).unwrap().statistic, 0.5);
        assert!(ks_test(&[], &[1.0], 0.99).is_err());
        assert!(ks_test(&[1.0], &[], 0.99).is_err());
    }

    #[test]
    fn ks_matches_brute_force_with_ties() {
        let mut rng = crate::rng::stream(17, 0);
        for _ in 0..200 {
            use rand::Rng;
            let n = rng.gen_range(1..20);
            let m = rng.gen_range(1..20);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.gen_range(0..6) as f64).collect();
            let d = ks_test(&a, &b, 0.95).unwrap().statistic;
            assert!((d - brute_ks(&a, &b)).abs() < 1e-15, "{a:?} {b:?}");
        }
    }

    #[test]
    fn ks_critical_value() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..50).map(|i| i as f64 * 2.0).collect();
        let r = ks_test(&a, &b, 0.95).unwrap();
        let c = (-(0.05f64 / 2.0).ln() / 2.0).sqrt();
        assert!((c - 1.358_1).abs() < 1e-4);
        let expected = c * (150.0f64 / 5000.0).sqrt();
        assert!((r.critical_value.unwrap() - expected).abs() < 1e-12);
        assert!((kolmogorov_sf(c) - 0.05).abs() < 1e-6);
    }
}

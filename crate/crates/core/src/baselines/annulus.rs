use crate::error::{Error, Result};

pub const ANNULUS: &str = "annulus";

/// Mean distance of latent norms from the `√d` sphere:
/// `(1/M) Σ |√(‖zₘ‖²) − √d|`.
pub fn annulus_statistic(latent_sqnorms: &[f64], d: usize) -> Result<f64> {
    if latent_sqnorms.is_empty() {
        return Err(Error::empty("latent squared norms"));
    }
    if d == 0 {
        return Err(Error::invalid("d", "latent dimension must be at least 1"));
    }
    if let Some(bad) = latent_sqnorms.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::invalid("latent_sqnorm", format!("must be finite and nonnegative, got {bad}")));
    }
    let radius = (d as f64).sqrt();
    Ok(latent_sqnorms.iter().map(|s| (s.sqrt() - radius).abs()).sum::<f64>() / latent_sqnorms.len() as f64)
}

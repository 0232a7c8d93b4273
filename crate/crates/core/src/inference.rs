//! Wald tests and normal-theory confidence intervals on the `√n₂` scale.
//!
//! `sigma_alpha2` throughout is the asymptotic variance of `√n₂ (α̂ − α)`.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// `W = n₂ (α̂ − r)² / σ̂²_α` and its χ²₁ upper-tail p-value.
pub fn wald(alpha_hat: f64, sigma_alpha2: f64, n2: usize, r: f64) -> Result<(f64, f64)> {
    if !(sigma_alpha2 > 0.0) || !sigma_alpha2.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Wald statistic needs a positive finite variance, got {sigma_alpha2}"
        )));
    }
    let w = n2 as f64 * (alpha_hat - r).powi(2) / sigma_alpha2;
    Ok((w, chi2_1_sf(w)))
}

pub(crate) fn chi2_1_sf(w: f64) -> f64 {
    let chi2 = ChiSquared::new(1.0).expect("valid dof");
    chi2.sf(w).clamp(0.0, 1.0)
}

/// Two-sided normal quantile `z_{(1+level)/2}`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level must lie in (0, 1), got {level}")));
    }
    let std = Normal::new(0.0, 1.0).expect("valid normal");
    Ok(std.inverse_cdf((1.0 + level) / 2.0))
}

/// `α̂ ± z_{(1+level)/2} · √(σ̂²_α / n₂)`.
pub fn confidence_interval(alpha_hat: f64, sigma_alpha2: f64, n2: usize, level: f64) -> Result<(f64, f64)> {
    let z = normal_quantile(level)?;
    if !(sigma_alpha2 >= 0.0) || n2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "interval needs a non-negative variance and n2 > 0, got {sigma_alpha2} and {n2}"
        )));
    }
    let half = z * (sigma_alpha2 / n2 as f64).sqrt();
    Ok((alpha_hat - half, alpha_hat + half))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wald_at_null_is_zero() {
        let (w, p) = wald(1.3, 2.0, 50, 1.3).unwrap();
        assert_eq!(w, 0.0);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn wald_arithmetic() {
        let (w, _) = wald(1.2, 4.0, 100, 1.0).unwrap();
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wald_p_value_at_critical_value() {
        // 3.841459 = 1.959964², the 95% quantile of χ²₁
        let (_, p) = wald(3.841459f64.sqrt(), 1.0, 1, 0.0).unwrap();
        assert!((p - 0.05).abs() < 1e-4, "{p}");
    }

    #[test]
    fn wald_rejects_nonpositive_variance() {
        assert!(wald(1.0, 0.0, 10, 0.0).is_err());
        assert!(wald(1.0, -1.0, 10, 0.0).is_err());
    }

    #[test]
    fn interval_examples() {
        assert_eq!(confidence_interval(0.7, 0.0, 10, 0.95).unwrap(), (0.7, 0.7));
        let (lo, hi) = confidence_interval(0.0, 1.0, 4, 0.95).unwrap();
        assert!((lo + 0.97998).abs() < 1e-4 && (hi - 0.97998).abs() < 1e-4);
        let (lo90, hi90) = confidence_interval(0.3, 2.0, 9, 0.90).unwrap();
        let (lo95, hi95) = confidence_interval(0.3, 2.0, 9, 0.95).unwrap();
        assert!(lo95 < lo90 && hi90 < hi95);
    }

    #[test]
    fn interval_rejects_bad_level() {
        assert!(confidence_interval(0.0, 1.0, 4, 0.0).is_err());
        assert!(confidence_interval(0.0, 1.0, 4, 1.0).is_err());
        assert!(confidence_interval(0.0, 1.0, 4, f64::NAN).is_err());
    }

    #[test]
    fn wald_ci_duality() {
        let (alpha, s2, n2, level) = (0.4, 3.0, 40, 0.95);
        let (lo, hi) = confidence_interval(alpha, s2, n2, level).unwrap();
        let crit = normal_quantile(level).unwrap().powi(2);
        for k in 0..=400 {
            let r = -1.0 + k as f64 * 0.0035;
            let (w, _) = wald(alpha, s2, n2, r).unwrap();
            // skip grid points within rounding distance of an endpoint
            if (r - lo).abs() < 1e-9 || (r - hi).abs() < 1e-9 {
                continue;
            }
            assert_eq!(w <= crit, (lo..=hi).contains(&r), "r = {r}");
        }
    }
}

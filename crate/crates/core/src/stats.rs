//! Normal and chi-square distribution helpers used across the crate.
//!
//! Quantiles come from a rational approximation of the inverse normal
//! CDF (accurate to well below 1e-9); tail probabilities go through the
//! complementary error function so deep tails keep relative accuracy.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

/// Inverse standard normal CDF. Panics outside (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile probability must be in (0,1)");
    Normal::standard().inverse_cdf(p)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Two-sided p-value of a standard normal statistic.
pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Survival function of the chi-square distribution with 1 degree of
/// freedom: P(X > x).
pub fn chi_square_1_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    erfc((x / 2.0).sqrt())
}

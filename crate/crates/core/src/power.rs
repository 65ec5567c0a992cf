//! Sample-size calculation and cross-design sensitivity comparison.

use crate::designs::{DesignKind, EffectScale};
use crate::stats;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PowerError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("baseline design `{0}` is not among the compared designs")]
    MissingBaseline(DesignKind),
    #[error("designs are on mixed effect scales; compare on one scale")]
    MixedScales,
}

/// Inputs of the sample-size formula. `variance_per_unit` is the
/// variance of the effect estimate at the n = 1 reference scale, i.e.
/// `Var(δ̂) · n` from a pilot fit or a closed form; the returned `n` is
/// per group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerSpec {
    pub alpha: f64,
    pub power: f64,
    /// minimum detectable effect, on the same scale as the variance
    pub mde: f64,
    pub variance_per_unit: f64,
}

impl Default for PowerSpec {
    fn default() -> Self {
        PowerSpec {
            alpha: 0.05,
            power: 0.8,
            mde: 0.0,
            variance_per_unit: 1.0,
        }
    }
}

/// Sample size with the normal quantiles that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerResult {
    pub n: u64,
    pub n_exact: f64,
    pub z_alpha: f64,
    pub z_power: f64,
}

/// n = (z_{1−α/2} + z_{1−β})² / (δ² / Var(δ̂)), rounded up; `n_exact`
/// keeps the pre-ceiling value so proportionality is exact.
pub fn required_sample_size(spec: &PowerSpec) -> Result<PowerResult, PowerError> {
    let alpha_ok = spec.alpha > 0.0 && spec.alpha < 1.0;
    if !alpha_ok {
        return Err(PowerError::Domain(format!("alpha must be in (0,1), got {}", spec.alpha)));
    }
    let power_ok = spec.power > 0.0 && spec.power < 1.0;
    if !power_ok {
        return Err(PowerError::Domain(format!("power must be in (0,1), got {}", spec.power)));
    }
    if spec.mde == 0.0 || !spec.mde.is_finite() {
        return Err(PowerError::Domain("minimum detectable effect must be nonzero".to_string()));
    }
    let variance_ok = spec.variance_per_unit > 0.0;
    if !variance_ok {
        return Err(PowerError::Domain(format!(
            "per-unit variance must be positive, got {}",
            spec.variance_per_unit
        )));
    }
    let z_alpha = stats::normal_quantile(1.0 - spec.alpha / 2.0);
    let z_power = stats::normal_quantile(spec.power);
    let z = z_alpha + z_power;
    let n_exact = z * z * spec.variance_per_unit / (spec.mde * spec.mde);
    Ok(PowerResult {
        n: n_exact.ceil() as u64,
        n_exact,
        z_alpha,
        z_power,
    })
}

/// One design's effect variance at a common traffic level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignVariance {
    pub kind: DesignKind,
    pub scale: EffectScale,
    pub variance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub kind: DesignKind,
    pub variance: f64,
    /// percent of the baseline's sample size needed for equal sensitivity
    pub percent_of_baseline: f64,
}

/// Percent samples needed per design to reach the baseline's sensitivity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignComparison {
    pub baseline: DesignKind,
    pub scale: EffectScale,
    pub rows: Vec<ComparisonRow>,
}

/// Sample size scales with Var(δ̂) at fixed effect, so the percent of
/// baseline samples needed is 100 · Var_design / Var_baseline.
pub fn compare_designs(
    entries: &[DesignVariance],
    baseline: DesignKind,
) -> Result<DesignComparison, PowerError> {
    let scale = entries.first().map(|e| e.scale).ok_or(PowerError::MissingBaseline(baseline))?;
    if entries.iter().any(|e| e.scale != scale) {
        return Err(PowerError::MixedScales);
    }
    for e in entries {
        let variance_ok = e.variance > 0.0;
        if !variance_ok {
            return Err(PowerError::Domain(format!(
                "variance of `{}` must be positive, got {}",
                e.kind, e.variance
            )));
        }
    }
    let base = entries
        .iter()
        .find(|e| e.kind == baseline)
        .ok_or(PowerError::MissingBaseline(baseline))?
        .variance;
    Ok(DesignComparison {
        baseline,
        scale,
        rows: entries
            .iter()
            .map(|e| ComparisonRow {
                kind: e.kind,
                variance: e.variance,
                percent_of_baseline: 100.0 * e.variance / base,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(alpha: f64, power: f64, mde: f64, var: f64) -> PowerSpec {
        PowerSpec {
            alpha,
            power,
            mde,
            variance_per_unit: var,
        }
    }

    #[test]
    fn textbook_sample_size() {
        // δ²/Var = 0.01 → ceil((1.95996 + 0.84162)² / 0.01) = 785
        let result = required_sample_size(&spec(0.05, 0.8, 0.1, 1.0)).unwrap();
        assert_eq!(result.n, 785);
        assert!((result.n_exact - 784.8879734349089).abs() < 1e-9);
        assert!((result.z_alpha - 1.959963984540054).abs() < 1e-9);
        assert!((result.z_power - 0.8416212335729143).abs() < 1e-9);
    }

    #[test]
    fn doubling_the_effect_quarters_n() {
        let base = required_sample_size(&spec(0.05, 0.8, 0.1, 1.0)).unwrap();
        let doubled = required_sample_size(&spec(0.05, 0.8, 0.2, 1.0)).unwrap();
        assert_eq!(doubled.n_exact / base.n_exact, 0.25);
    }

    #[test]
    fn halved_variance_halves_n() {
        let base = required_sample_size(&spec(0.05, 0.8, 0.1, 1.0)).unwrap();
        let halved = required_sample_size(&spec(0.05, 0.8, 0.1, 0.5)).unwrap();
        assert_eq!(halved.n_exact / base.n_exact, 0.5);
    }

    #[test]
    fn domain_errors() {
        assert!(required_sample_size(&spec(0.05, 0.8, 0.0, 1.0)).is_err());
        assert!(required_sample_size(&spec(0.0, 0.8, 0.1, 1.0)).is_err());
        assert!(required_sample_size(&spec(0.05, 1.0, 0.1, 1.0)).is_err());
        assert!(required_sample_size(&spec(0.05, 0.8, 0.1, 0.0)).is_err());
    }

    fn closed_form_entries(s: f64, rho: f64) -> Vec<DesignVariance> {
        use crate::inference::closed_form_variance;
        [
            DesignKind::TTest,
            DesignKind::Cuped,
            DesignKind::Parallel,
            DesignKind::Cumulative,
            DesignKind::Crossover,
        ]
        .into_iter()
        .map(|kind| DesignVariance {
            kind,
            scale: EffectScale::Relative,
            variance: closed_form_variance(kind, s, s, rho).unwrap(),
        })
        .collect()
    }

    #[test]
    fn baseline_is_always_100_percent() {
        let cmp = compare_designs(&closed_form_entries(1.0, 0.5), DesignKind::Crossover).unwrap();
        let cross = cmp.rows.iter().find(|r| r.kind == DesignKind::Crossover).unwrap();
        assert_eq!(cross.percent_of_baseline, 100.0);
        let parallel = cmp.rows.iter().find(|r| r.kind == DesignKind::Parallel).unwrap();
        assert!((parallel.percent_of_baseline - 300.0).abs() < 1e-9);
    }

    #[test]
    fn missing_baseline_and_mixed_scales_rejected() {
        let mut entries = closed_form_entries(1.0, 0.5);
        assert!(matches!(
            compare_designs(&entries, DesignKind::ReRandomized),
            Err(PowerError::MissingBaseline(_))
        ));
        entries[0].scale = EffectScale::Absolute;
        assert!(matches!(
            compare_designs(&entries, DesignKind::Crossover),
            Err(PowerError::MixedScales)
        ));
    }

    proptest! {
        #[test]
        fn n_is_monotone(mde in 0.01f64..10.0, var in 0.01f64..10.0, power in 0.5f64..0.95) {
            let base = required_sample_size(&spec(0.05, power, mde, var)).unwrap();
            let bigger_effect = required_sample_size(&spec(0.05, power, mde * 1.5, var)).unwrap();
            prop_assert!(bigger_effect.n_exact < base.n_exact);
            let more_variance = required_sample_size(&spec(0.05, power, mde, var * 1.5)).unwrap();
            prop_assert!(more_variance.n_exact > base.n_exact);
            let more_power = required_sample_size(&spec(0.05, power + 0.04, mde, var)).unwrap();
            prop_assert!(more_power.n_exact > base.n_exact);
        }

        /// Swapping the baseline inverts every percentage: a → 100²/a.
        #[test]
        fn comparison_symmetry(rho in 0.0f64..0.95) {
            let entries = closed_form_entries(1.0, rho);
            let by_cross = compare_designs(&entries, DesignKind::Crossover).unwrap();
            let by_par = compare_designs(&entries, DesignKind::Parallel).unwrap();
            let a = by_cross.rows.iter().find(|r| r.kind == DesignKind::Parallel).unwrap();
            let b = by_par.rows.iter().find(|r| r.kind == DesignKind::Crossover).unwrap();
            prop_assert!((b.percent_of_baseline - 100.0 * 100.0 / a.percent_of_baseline).abs() <= 1e-9 * b.percent_of_baseline);
        }
    }
}

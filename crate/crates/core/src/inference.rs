//! Maximum-likelihood fitting of design models to metric moments.
//!
//! The metric means are asymptotically normal around `β(λ)` with a
//! block-diagonal covariance (groups are independent by randomization),
//! and the covariance is plugged in from the moments and treated as
//! known. Affine (absolute-scale) models solve the generalized
//! least-squares normal equations in closed form; relative-scale models
//! run Gauss-Newton to the same stationary condition. The Fisher
//! information `(∂β/∂λ)ᵀ Σ⁻¹ (∂β/∂λ)` supplies the parameter covariance.

use crate::designs::{DesignError, DesignKind, DesignModel, EffectScale};
use crate::moments::MetricMoments;
use crate::stats;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("{0}")]
    DimensionMismatch(String),
    #[error("model is not identifiable: {0}")]
    Identifiability(String),
    #[error("Gauss-Newton did not converge after {iterations} iterations (last iterate {last:?})")]
    Convergence { iterations: usize, last: Vec<f64> },
    #[error("covariance block for group {0} is not positive definite even after ridging")]
    DegenerateCovariance(usize),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid contrast: {0}")]
    InvalidContrast(String),
    #[error(transparent)]
    Design(#[from] DesignError),
}

/// Solver settings; the defaults suit these tiny (≤ 12-dim) problems.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    /// ridge added to a singular covariance block, as a fraction of its trace
    pub ridge_scale: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 100,
            step_tolerance: 1e-10,
            ridge_scale: 1e-12,
        }
    }
}

/// A derived relative effect `δ̂ / μ̂` with its delta-method standard error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DerivedEffect {
    pub parameter: String,
    pub estimate: f64,
    pub std_error: f64,
}

/// MLE fit of a design model: estimates, Fisher-information covariance,
/// Wald statistics, and convergence metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub model: DesignModel,
    pub parameters: Vec<String>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub z_values: Vec<f64>,
    pub p_values: Vec<f64>,
    /// Fisher-information inverse, row-major.
    pub covariance: Vec<Vec<f64>>,
    /// minimized quadratic form (m − β)ᵀ Σ⁻¹ (m − β)
    pub quadratic_form: f64,
    pub iterations: usize,
    pub final_step_norm: f64,
    /// set when the model was refit after dropping the carryover term
    pub reduced: bool,
    /// derived percent effects (absolute-scale fits only)
    pub relative_effects: Vec<DerivedEffect>,
    /// users per group behind the moments, for per-unit variance
    /// extrapolation in power calculations
    pub group_sizes: Vec<u64>,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.model.param_index(name).map(|i| self.estimates[i])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.model.param_index(name).map(|i| self.std_errors[i])
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let p = self.estimates.len();
        DMatrix::from_fn(p, p, |i, j| self.covariance[i][j])
    }
}

/// Result of a Wald test of a linear constraint `c·λ = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestResult {
    pub description: String,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub level: f64,
    pub reject: bool,
}

struct Blocks {
    factors: Vec<Cholesky<f64, Dyn>>,
    stacked_mean: DVector<f64>,
    periods: usize,
    warnings: Vec<String>,
}

fn prepare_blocks(
    model: &DesignModel,
    moments: &MetricMoments,
    options: &FitOptions,
) -> Result<Blocks, FitError> {
    if moments.group_count() != model.group_count() {
        return Err(FitError::DimensionMismatch(format!(
            "model `{}` expects {} groups, moments carry {}",
            model.kind(),
            model.group_count(),
            moments.group_count()
        )));
    }
    if moments.period_count() != model.period_count() {
        return Err(FitError::DimensionMismatch(format!(
            "model `{}` expects {} periods per group, moments carry {}",
            model.kind(),
            model.period_count(),
            moments.period_count()
        )));
    }
    let periods = model.period_count();
    let mut warnings = Vec::new();
    let mut factors = Vec::with_capacity(moments.group_count());
    let mut stacked = DVector::zeros(model.dim());
    for (g, group) in moments.groups.iter().enumerate() {
        stacked.rows_mut(g * periods, periods).copy_from(&group.mean);
        let factor = match Cholesky::new(group.cov.clone()) {
            Some(f) => f,
            None => {
                // singular block: ridge by a sliver of the trace and retry;
                // the floor keeps an all-zero block invertible without overflow
                let ridge = options.ridge_scale * group.cov.trace().max(1e-12);
                let ridged = &group.cov + DMatrix::identity(periods, periods) * ridge;
                warnings.push(format!(
                    "covariance block of group {g} is singular; ridged by {ridge:.3e}"
                ));
                Cholesky::new(ridged).ok_or(FitError::DegenerateCovariance(g))?
            }
        };
        factors.push(factor);
    }
    Ok(Blocks {
        factors,
        stacked_mean: stacked,
        periods,
        warnings,
    })
}

impl Blocks {
    /// Σ⁻¹ x for a stacked vector, block by block.
    fn solve_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(x.len());
        for (g, factor) in self.factors.iter().enumerate() {
            let block = x.rows(g * self.periods, self.periods).into_owned();
            out.rows_mut(g * self.periods, self.periods)
                .copy_from(&factor.solve(&block));
        }
        out
    }

    /// Σ⁻¹ J for a stacked matrix, block by block.
    fn solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for (g, factor) in self.factors.iter().enumerate() {
            let block = m.rows(g * self.periods, self.periods).into_owned();
            out.rows_mut(g * self.periods, self.periods)
                .copy_from(&factor.solve(&block));
        }
        out
    }

    fn quadratic(&self, residual: &DVector<f64>) -> f64 {
        residual.dot(&self.solve_vec(residual))
    }
}

/// Fits `λ` by maximizing the asymptotic Gaussian likelihood.
pub fn fit(model: &DesignModel, moments: &MetricMoments) -> Result<FitResult, FitError> {
    fit_with_options(model, moments, &FitOptions::default())
}

pub fn fit_with_options(
    model: &DesignModel,
    moments: &MetricMoments,
    options: &FitOptions,
) -> Result<FitResult, FitError> {
    let blocks = prepare_blocks(model, moments, options)?;
    let m = &blocks.stacked_mean;
    let p = model.param_count();

    let (lambda, iterations, final_step_norm) = match model.scale() {
        EffectScale::Absolute => {
            // β(λ) = J λ exactly; one GLS solve
            let jac = model.jacobian(&vec![0.0; p])?;
            let siginv_j = blocks.solve_mat(&jac);
            let a = jac.transpose() * &siginv_j;
            let b = siginv_j.transpose() * m;
            let chol = Cholesky::new(a).ok_or_else(|| {
                FitError::Identifiability(format!(
                    "normal matrix of `{}` is rank deficient",
                    model.kind()
                ))
            })?;
            (chol.solve(&b), 0, 0.0)
        }
        EffectScale::Relative => gauss_newton(model, moments, &blocks, options)?,
    };

    let lambda_slice: Vec<f64> = lambda.iter().copied().collect();
    let jac = model.jacobian(&lambda_slice)?;
    let siginv_j = blocks.solve_mat(&jac);
    let info = jac.transpose() * &siginv_j;
    let info_chol = Cholesky::new(info).ok_or_else(|| {
        FitError::Identifiability(format!(
            "Fisher information of `{}` is singular at the fitted point",
            model.kind()
        ))
    })?;
    let mut cov = info_chol.inverse();
    // the inverse is symmetric up to rounding; make it exact
    cov = (&cov + cov.transpose()) * 0.5;

    let residual = m - model.mean_vector(&lambda_slice)?;
    let quadratic_form = blocks.quadratic(&residual);

    let std_errors: Vec<f64> = (0..p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    let z_values: Vec<f64> = lambda_slice
        .iter()
        .zip(&std_errors)
        .map(|(&est, &se)| if se > 0.0 { est / se } else { f64::NAN })
        .collect();
    let p_values: Vec<f64> = z_values.iter().map(|&z| stats::two_sided_p(z)).collect();

    let relative_effects = derived_relative_effects(model, &lambda_slice, &cov);

    Ok(FitResult {
        model: model.clone(),
        parameters: model.param_names().to_vec(),
        estimates: lambda_slice,
        std_errors,
        z_values,
        p_values,
        covariance: (0..p)
            .map(|i| (0..p).map(|j| cov[(i, j)]).collect())
            .collect(),
        quadratic_form,
        iterations,
        final_step_norm,
        reduced: false,
        relative_effects,
        group_sizes: moments.groups.iter().map(|g| g.n).collect(),
        warnings: blocks.warnings,
    })
}

fn gauss_newton(
    model: &DesignModel,
    _moments: &MetricMoments,
    blocks: &Blocks,
    options: &FitOptions,
) -> Result<(DVector<f64>, usize, f64), FitError> {
    let m = &blocks.stacked_mean;
    let p = model.param_count();
    // start at μ = grand mean, every other parameter at zero
    let mut lambda = DVector::zeros(p);
    lambda[0] = m.mean();

    let as_slice = |l: &DVector<f64>| -> Vec<f64> { l.iter().copied().collect() };
    let mut q = blocks.quadratic(&(m - model.mean_vector(&as_slice(&lambda))?));

    for iter in 1..=options.max_iterations {
        let jac = model.jacobian(&as_slice(&lambda))?;
        let residual = m - model.mean_vector(&as_slice(&lambda))?;
        let siginv_j = blocks.solve_mat(&jac);
        let a = jac.transpose() * &siginv_j;
        let grad = siginv_j.transpose() * &residual;
        let chol = Cholesky::new(a).ok_or_else(|| {
            FitError::Identifiability(format!(
                "normal matrix of `{}` is rank deficient at iterate {:?}",
                model.kind(),
                as_slice(&lambda)
            ))
        })?;
        let step = chol.solve(&grad);

        // halve the step while the quadratic form increases
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let candidate = &lambda + &step * t;
            let q_new = blocks.quadratic(&(m - model.mean_vector(&as_slice(&candidate))?));
            if q_new.is_finite() && q_new <= q {
                accepted = Some((candidate, q_new));
                break;
            }
            t *= 0.5;
        }
        let step_norm = (step.norm() * t).abs();
        let rel_step = step_norm / (1.0 + lambda.norm());
        match accepted {
            Some((candidate, q_new)) => {
                lambda = candidate;
                q = q_new;
            }
            // no downhill step left: already at numerical stationarity
            None => return Ok((lambda, iter, step_norm)),
        }
        if rel_step <= options.step_tolerance {
            return Ok((lambda, iter, step_norm));
        }
    }
    Err(FitError::Convergence {
        iterations: options.max_iterations,
        last: as_slice(&lambda),
    })
}

fn derived_relative_effects(
    model: &DesignModel,
    lambda: &[f64],
    cov: &DMatrix<f64>,
) -> Vec<DerivedEffect> {
    if model.scale() != EffectScale::Absolute {
        return Vec::new();
    }
    let mu = lambda[0];
    model
        .delta_indices()
        .into_iter()
        .filter_map(|d| {
            let estimate = lambda[d] / mu;
            // delta-method gradient of δ/μ over (μ, δ)
            let g_mu = -lambda[d] / (mu * mu);
            let g_d = 1.0 / mu;
            let var = g_mu * g_mu * cov[(0, 0)] + 2.0 * g_mu * g_d * cov[(0, d)] + g_d * g_d * cov[(d, d)];
            if !estimate.is_finite() || !var.is_finite() {
                return None;
            }
            Some(DerivedEffect {
                parameter: format!("%{}", model.param_names()[d]),
                estimate,
                std_error: var.max(0.0).sqrt(),
            })
        })
        .collect()
}

/// Wald test of the linear constraint `contrast · λ = 0`.
pub fn wald_test(fit: &FitResult, contrast: &[f64], level: f64) -> Result<TestResult, FitError> {
    let p = fit.estimates.len();
    if contrast.len() != p {
        return Err(FitError::InvalidContrast(format!(
            "contrast has length {}, model has {} parameters",
            contrast.len(),
            p
        )));
    }
    if contrast.iter().all(|&c| c == 0.0) {
        return Err(FitError::InvalidContrast(
            "contrast is the zero vector".to_string(),
        ));
    }
    let estimate: f64 = contrast
        .iter()
        .zip(&fit.estimates)
        .map(|(c, e)| c * e)
        .sum();
    let mut variance = 0.0;
    for i in 0..p {
        for j in 0..p {
            variance += contrast[i] * fit.covariance[i][j] * contrast[j];
        }
    }
    let variance_ok = variance.is_finite() && variance > 0.0;
    if !variance_ok {
        return Err(FitError::InvalidContrast(
            "contrast has zero variance".to_string(),
        ));
    }
    let statistic = estimate * estimate / variance;
    let p_value = stats::chi_square_1_sf(statistic);
    Ok(TestResult {
        description: describe_contrast(&fit.parameters, contrast),
        statistic,
        df: 1,
        p_value,
        level,
        reject: p_value < level,
    })
}

fn describe_contrast(names: &[String], contrast: &[f64]) -> String {
    let mut terms = Vec::new();
    for (c, name) in contrast.iter().zip(names) {
        if *c == 0.0 {
            continue;
        }
        let term = if *c == 1.0 {
            name.clone()
        } else if *c == -1.0 {
            format!("-{name}")
        } else {
            format!("{c}*{name}")
        };
        terms.push(term);
    }
    format!("{} = 0", terms.join(" + ").replace("+ -", "- "))
}

/// Model reduction after the carryover test: when `alpha` is not
/// significant at `level`, drops the term and refits on the same
/// moments, gaining a degree of freedom; otherwise returns the original
/// fit unchanged.
pub fn reduce_model(
    fit_result: &FitResult,
    moments: &MetricMoments,
    level: f64,
) -> Result<FitResult, FitError> {
    if fit_result.model.kind() != DesignKind::ReRandomized {
        return Err(FitError::DimensionMismatch(format!(
            "reduce_model applies to the rerandomized design, got `{}`",
            fit_result.model.kind()
        )));
    }
    let alpha_idx = fit_result
        .model
        .alpha_index()
        .expect("rerandomized model carries alpha");
    // retain the carryover term only when it is significant; a level of 1
    // drops it unconditionally
    if fit_result.p_values[alpha_idx] < level && level < 1.0 {
        return Ok(fit_result.clone());
    }
    let reduced_model = DesignModel::new(
        DesignKind::ReRandomizedNoCarryover,
        fit_result.model.scale(),
        fit_result.model.has_pre_period(),
    );
    let mut reduced = fit(&reduced_model, moments)?;
    reduced.reduced = true;
    Ok(reduced)
}

/// The closed-form treatment-effect variances of the five classic
/// designs, in terms of the per-period standard deviations of the group
/// means and their cross-period correlation.
///
/// Argument conventions: for the t-test `s1`/`s2` are the control and
/// treatment standard deviations; for CUPED `s1` is the experiment
/// period and `s2` the baseline period (which cancels out); for the
/// rest `s1`/`s2` are periods 1 and 2.
pub fn closed_form_variance(
    kind: DesignKind,
    s1: f64,
    s2: f64,
    rho: f64,
) -> Result<f64, FitError> {
    let sd_ok = s1 > 0.0 && s2 > 0.0;
    if !sd_ok {
        return Err(FitError::Domain(format!(
            "standard deviations must be positive (got {s1}, {s2})"
        )));
    }
    let rho_ok = rho > -1.0 && rho < 1.0;
    if !rho_ok {
        return Err(FitError::Domain(format!(
            "correlation must lie in (-1, 1) (got {rho})"
        )));
    }
    let v1 = s1 * s1;
    let v2 = s2 * s2;
    let c = rho * s1 * s2;
    match kind {
        DesignKind::TTest => Ok(v1 + v2),
        DesignKind::Cuped => Ok(2.0 * v1 * (1.0 - rho * rho)),
        DesignKind::Parallel => Ok(2.0 * v1 * v2 * (1.0 - rho * rho) / (v1 + v2 - 2.0 * c)),
        DesignKind::Cumulative => Ok(2.0 * (v1 + v2 + 2.0 * c)),
        DesignKind::Crossover => Ok(2.0 * v1 * v2 * (1.0 - rho * rho) / (v1 + v2 + 2.0 * c)),
        other => Err(FitError::Domain(format!(
            "no closed-form variance for design `{other}`"
        ))),
    }
}

/// Effect variance of the re-randomized design at the same total traffic
/// as the two-group designs: splitting the traffic over four groups
/// doubles each block's covariance, and the carryover term is dropped
/// per the standard reduction (the α-retaining model can be less
/// sensitive than the parallel design).
pub fn rerandomized_reduced_variance(s1: f64, s2: f64, rho: f64) -> Result<f64, FitError> {
    let domain_ok = s1 > 0.0 && s2 > 0.0 && rho > -1.0 && rho < 1.0;
    if !domain_ok {
        return Err(FitError::Domain(format!(
            "need s1, s2 > 0 and rho in (-1,1), got ({s1}, {s2}, {rho})"
        )));
    }
    let c = rho * s1 * s2;
    let cov = DMatrix::from_row_slice(2, 2, &[2.0 * s1 * s1, 2.0 * c, 2.0 * c, 2.0 * s2 * s2]);
    let groups = (0..4)
        .map(|_| crate::moments::GroupMoments {
            n: 100,
            mean: DVector::zeros(2),
            cov: cov.clone(),
        })
        .collect();
    let moments = crate::moments::MetricMoments::synthetic(
        groups,
        vec!["P1".to_string(), "P2".to_string()],
    );
    let model = DesignModel::new(
        DesignKind::ReRandomizedNoCarryover,
        EffectScale::Absolute,
        false,
    );
    let fit_result = fit(&model, &moments)?;
    let d = model.param_index("delta").expect("pooled effect parameter");
    Ok(fit_result.covariance[d][d])
}

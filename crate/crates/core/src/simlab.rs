//! Synthetic data generation and Monte-Carlo validation.
//!
//! The generator draws per-user values `X_ij = μ + effect_ij + u_i + ε_ij`
//! with a user baseline effect `u_i` (normal, or centered Poisson under
//! condition 2), noise `ε_ij`, and an activity level `p_i` that is a
//! monotone transform of `u_i`. Activity drives both the treatment-effect
//! magnitude under condition 3 and the missingness probability, so
//! missingness is informative (not at random) by construction.
//!
//! Five stock conditions:
//!
//! 1. normal noise, no effect, normal user effect
//! 2. normal noise, no effect, centered-Poisson user effect
//! 3. random treatment effect `N(δ, σ_δ²)·p_i` correlated with activity
//! 4. heteroscedastic noise `σ·p_i` with σ = 2
//! 5. heteroscedastic noise `σ·p_i` with σ = 4

use crate::dataset::{DataError, DatasetBuilder, ExperimentDataset, MetricDef};
use crate::designs::{DesignError, DesignKind, DesignModel, EffectScale};
use crate::inference::{self, FitError};
use crate::moments::{MetricMoments, MomentError, MomentSummary};
use crate::stats;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bad simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("{failed} of {total} replications failed (> 1%); first failure: {example}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        example: String,
    },
}

/// Activity model: `p_i = Φ((u_i − offset) / spread)` with the offset
/// calibrated so that `E(p_i)` hits `target_mean`. Larger `spread`
/// concentrates `p_i` around its mean while keeping it perfectly
/// rank-correlated with `u_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivityModel {
    pub target_mean: f64,
    pub spread: f64,
}

/// Per-user, per-period missingness rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum MissingnessRule {
    /// every row present
    None,
    /// missing with probability min(cap, 1 − p_i)
    ActivityDriven { cap: f64 },
}

/// Generator parameters for the Monte-Carlo lab.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub users_per_group: usize,
    /// simulation condition 1–5
    pub condition: u8,
    #[serde(default)]
    pub mu: f64,
    pub sigma: f64,
    pub sigma_user: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub sigma_delta: f64,
    /// carryover added to cells observed on control right after treatment
    #[serde(default)]
    pub carryover: f64,
    /// period-2 effect override, for generating non-equivalent effects
    #[serde(default)]
    pub delta_period2: Option<f64>,
    pub activity: ActivityModel,
    pub missingness: MissingnessRule,
    pub seed: u64,
}

impl SimConfig {
    /// Stock configuration of one of the five conditions.
    pub fn condition_preset(
        condition: u8,
        users_per_group: usize,
        seed: u64,
    ) -> Result<SimConfig, SimError> {
        let sigma_user = 2.0;
        let (sigma, delta, sigma_delta, target_mean, spread) = match condition {
            1 | 2 => (4.0, 0.0, 0.0, 0.5, sigma_user),
            // activity spread is wide so the presence-weighted effect
            // stays within Monte-Carlo noise of δ·E(p); see ground_truth_ate
            3 => (4.0, 10.0, 0.1 * 12.0f64.sqrt(), 0.66, 50.0 * sigma_user),
            4 => (2.0, 0.0, 0.0, 0.5, sigma_user),
            5 => (4.0, 0.0, 0.0, 0.5, sigma_user),
            other => return Err(SimError::Config(format!("condition must be 1..=5, got {other}"))),
        };
        Ok(SimConfig {
            users_per_group,
            condition,
            mu: 0.0,
            sigma,
            sigma_user,
            delta,
            sigma_delta,
            carryover: 0.0,
            delta_period2: None,
            activity: ActivityModel {
                target_mean,
                spread,
            },
            missingness: MissingnessRule::ActivityDriven { cap: 0.9 },
            seed,
        })
    }

    pub fn check(&self) -> Result<(), SimError> {
        if !(1..=5).contains(&self.condition) {
            return Err(SimError::Config(format!(
                "condition must be 1..=5, got {}",
                self.condition
            )));
        }
        if self.users_per_group < 1 {
            return Err(SimError::Config("users_per_group must be at least 1".to_string()));
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("sigma_user", self.sigma_user),
            ("sigma_delta", self.sigma_delta),
        ] {
            let ok = v >= 0.0;
            if !ok {
                return Err(SimError::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        let target_ok = self.activity.target_mean > 0.0 && self.activity.target_mean < 1.0;
        if !target_ok {
            return Err(SimError::Config(format!(
                "activity target mean must be in (0,1), got {}",
                self.activity.target_mean
            )));
        }
        let spread_ok = self.activity.spread > 0.0;
        if !spread_ok {
            return Err(SimError::Config(format!(
                "activity spread must be positive, got {}",
                self.activity.spread
            )));
        }
        if let MissingnessRule::ActivityDriven { cap } = self.missingness {
            if !(0.0..=1.0).contains(&cap) {
                return Err(SimError::Config(format!("missingness cap must be in [0,1], got {cap}")));
            }
        }
        Ok(())
    }

    /// Configured ground-truth average treatment effect on the absolute
    /// scale: `δ·E(p_i)` under condition 3, the period-summed `2δ` for
    /// the cumulative design, plain `δ` otherwise.
    pub fn ground_truth_ate(&self, design: DesignKind) -> f64 {
        let per_period = if self.condition == 3 {
            self.delta * self.activity.target_mean
        } else {
            self.delta
        };
        if design == DesignKind::Cumulative {
            2.0 * per_period
        } else {
            per_period
        }
    }
}

/// Calibrated activity offset so E[Φ((u − offset)/spread)] = target.
fn activity_offset(config: &SimConfig) -> f64 {
    let b = config.activity.spread;
    let target = config.activity.target_mean;
    if config.condition != 2 || config.sigma_user == 0.0 {
        // u ~ N(0, σ_u²):  E[Φ((u − a)/b)] = Φ(−a / √(b² + σ_u²))
        let s = (b * b + config.sigma_user * config.sigma_user).sqrt();
        return -s * stats::normal_quantile(target);
    }
    // centered Poisson user effect: solve E[p](a) = target by bisection
    let lambda = config.sigma_user * config.sigma_user;
    let kmax = (lambda + 12.0 * lambda.sqrt() + 30.0).ceil() as usize;
    let mut pmf = Vec::with_capacity(kmax + 1);
    let mut p = (-lambda).exp();
    for k in 0..=kmax {
        pmf.push(p);
        p *= lambda / (k + 1) as f64;
    }
    let mean_p = |a: f64| -> f64 {
        pmf.iter()
            .enumerate()
            .map(|(k, &w)| w * stats::normal_cdf((k as f64 - lambda - a) / b))
            .sum()
    };
    let (mut lo, mut hi) = (-(lambda + 40.0 * (b + 1.0)), lambda + 40.0 * (b + 1.0));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Per-user generator internals, exposed for diagnostics and the
/// coupling checks.
#[derive(Debug, Clone, Copy)]
pub struct UserDiagnostics {
    pub group: u32,
    pub user_effect: f64,
    pub activity: f64,
}

/// Draws a dataset from the configured model under the given design's
/// treatment sequences (plus a baseline period when requested).
pub fn generate(
    config: &SimConfig,
    design: DesignKind,
    pre_period: bool,
) -> Result<ExperimentDataset, SimError> {
    generate_with_diagnostics(config, design, pre_period).map(|(ds, _)| ds)
}

pub fn generate_with_diagnostics(
    config: &SimConfig,
    design: DesignKind,
    pre_period: bool,
) -> Result<(ExperimentDataset, Vec<UserDiagnostics>), SimError> {
    config.check()?;
    let pre = pre_period || design.has_builtin_baseline();
    let sequences = design.data_sequences();
    let mut labels: Vec<u32> = Vec::new();
    if pre {
        labels.push(0);
    }
    labels.extend(1..=sequences[0].len() as u32);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let offset = activity_offset(config);
    let user_noise = Normal::new(0.0, config.sigma_user).expect("nonnegative sigma_user");
    let effect_noise = Normal::new(config.delta, config.sigma_delta).expect("nonnegative sigma_delta");

    let mut builder = DatasetBuilder::new(design, MetricDef::simple_average("value"), labels.clone());
    let mut diagnostics = Vec::with_capacity(sequences.len() * config.users_per_group);

    for (g, seq) in sequences.iter().enumerate() {
        for i in 0..config.users_per_group {
            let u = if config.condition == 2 && config.sigma_user > 0.0 {
                let lambda = config.sigma_user * config.sigma_user;
                // centered so μ keeps its meaning
                Poisson::new(lambda).expect("positive lambda").sample(&mut rng) - lambda
            } else {
                user_noise.sample(&mut rng)
            };
            let activity = stats::normal_cdf((u - offset) / config.activity.spread);
            let noise_sd = match config.condition {
                4 | 5 => config.sigma * activity,
                _ => config.sigma,
            };
            let noise = Normal::new(0.0, noise_sd).expect("nonnegative noise sd");

            let mut rows = Vec::with_capacity(labels.len());
            for &label in &labels {
                let mut value = config.mu + u + noise.sample(&mut rng);
                if label >= 1 {
                    let e = (label - 1) as usize;
                    if seq[e] {
                        value += match config.condition {
                            3 => effect_noise.sample(&mut rng) * activity,
                            _ => match (e, config.delta_period2) {
                                (1, Some(d2)) => d2,
                                _ => config.delta,
                            },
                        };
                    } else if e >= 1 && seq[e - 1] {
                        // back on control right after treatment
                        value += config.carryover;
                    }
                }
                let present = match config.missingness {
                    MissingnessRule::None => true,
                    MissingnessRule::ActivityDriven { cap } => {
                        rng.random::<f64>() < activity.max(1.0 - cap)
                    }
                };
                rows.push(if present {
                    (true, vec![value])
                } else {
                    (false, vec![0.0])
                });
            }
            builder.push_user(format!("g{g}-u{i}"), g as u32, rows)?;
            diagnostics.push(UserDiagnostics {
                group: g as u32,
                user_effect: u,
                activity,
            });
        }
    }
    Ok((builder.build()?, diagnostics))
}

/// What to fit in each replication of a Monte-Carlo run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MonteCarloSpec {
    pub design: DesignKind,
    #[serde(default)]
    pub scale: EffectScale,
    #[serde(default)]
    pub pre_period: bool,
    pub replications: usize,
    /// override for the ground truth the estimates are judged against
    /// (defaults to the config's absolute-scale ATE)
    #[serde(default)]
    pub ground_truth: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub estimate: f64,
    pub std_error: f64,
    pub covered: bool,
}

/// Bias, variance-calibration, and coverage summary over K replications.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub design: DesignKind,
    pub scale: EffectScale,
    pub condition: u8,
    pub replications: usize,
    pub failures: usize,
    pub ground_truth: f64,
    pub mean_estimate: f64,
    /// Monte-Carlo standard error of the mean estimate
    pub mcse: f64,
    pub empirical_variance: f64,
    pub mean_fisher_variance: f64,
    /// empirical variance over mean Fisher variance
    pub variance_ratio: f64,
    /// fraction of 95% Wald intervals covering the ground truth
    pub coverage95: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloRun {
    pub report: MonteCarloReport,
    pub records: Vec<ReplicationRecord>,
}

fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 step keyed by replication index
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// One generate → moments → fit pass; returns the effect estimate and
/// its standard error.
pub fn replicate_once(
    config: &SimConfig,
    design: DesignKind,
    scale: EffectScale,
    pre_period: bool,
) -> Result<(f64, f64), SimError> {
    let ds = generate(config, design, pre_period)?;
    let acc = MomentSummary::from_dataset(&ds)?;
    let moments = finalize_for(&acc, design, ds.metric())?;
    let model = DesignModel::new(design, scale, pre_period);
    let fit = inference::fit(&model, &moments)?;
    let d = model
        .param_index("delta")
        .ok_or_else(|| SimError::Config(format!("design `{design}` has no pooled effect parameter")))?;
    Ok((fit.estimates[d], fit.std_errors[d]))
}

/// Cumulative designs fit the period-summed moments; everything else the
/// per-period moments.
pub fn finalize_for(
    acc: &MomentSummary,
    design: DesignKind,
    metric: &MetricDef,
) -> Result<MetricMoments, MomentError> {
    if design == DesignKind::Cumulative {
        acc.finalize_cumulative(metric)
    } else {
        acc.finalize(metric)
    }
}

/// Repeats generate → moments → fit K times and aggregates bias,
/// empirical vs Fisher variance, and CI coverage. Replications run in
/// parallel on derived seeds; results are reduced in replication order.
/// Fails when more than 1% of replications fail.
pub fn run_monte_carlo(config: &SimConfig, spec: &MonteCarloSpec) -> Result<MonteCarloRun, SimError> {
    config.check()?;
    let k = spec.replications;
    if k < 2 {
        return Err(SimError::Config("at least 2 replications required".to_string()));
    }
    let truth = spec
        .ground_truth
        .unwrap_or_else(|| config.ground_truth_ate(spec.design));
    let z95 = stats::normal_quantile(0.975);

    let outcomes: Vec<Result<(f64, f64), SimError>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let mut child = config.clone();
            child.seed = derive_seed(config.seed, i as u64);
            replicate_once(&child, spec.design, spec.scale, spec.pre_period)
        })
        .collect();

    let mut records = Vec::with_capacity(k);
    let mut failures = 0usize;
    let mut first_failure = None;
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok((estimate, std_error)) => {
                let covered = (estimate - truth).abs() <= z95 * std_error;
                records.push(ReplicationRecord {
                    replication: i,
                    estimate,
                    std_error,
                    covered,
                });
            }
            Err(e) => {
                failures += 1;
                first_failure.get_or_insert_with(|| format!("replication {i}: {e}"));
            }
        }
    }
    if failures * 100 > k {
        return Err(SimError::TooManyFailures {
            failed: failures,
            total: k,
            example: first_failure.unwrap_or_default(),
        });
    }
    let n = records.len() as f64;
    let mean = records.iter().map(|r| r.estimate).sum::<f64>() / n;
    let emp_var = records
        .iter()
        .map(|r| (r.estimate - mean) * (r.estimate - mean))
        .sum::<f64>()
        / (n - 1.0);
    let mean_fisher = records
        .iter()
        .map(|r| r.std_error * r.std_error)
        .sum::<f64>()
        / n;
    let coverage = records.iter().filter(|r| r.covered).count() as f64 / n;

    Ok(MonteCarloRun {
        report: MonteCarloReport {
            design: spec.design,
            scale: spec.scale,
            condition: config.condition,
            replications: k,
            failures,
            ground_truth: truth,
            mean_estimate: mean,
            mcse: (emp_var / n).sqrt(),
            empirical_variance: emp_var,
            mean_fisher_variance: mean_fisher,
            variance_ratio: emp_var / mean_fisher,
            coverage95: coverage,
        },
        records,
    })
}

/// User-level bootstrap validation of the Fisher variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub design: DesignKind,
    pub replications: usize,
    pub skipped: usize,
    pub fisher_variance: f64,
    pub bootstrap_variance: f64,
    /// bootstrap variance over Fisher variance
    pub ratio: f64,
}

/// Resamples entire user trajectories with replacement (within group),
/// refits the model per resample, and compares the sampled variance of
/// the effect against the full-data Fisher variance. Degenerate
/// resamples are skipped and counted; more than 1% skipped is an error.
pub fn bootstrap(
    ds: &ExperimentDataset,
    design: DesignKind,
    scale: EffectScale,
    pre_period: bool,
    replications: usize,
    seed: u64,
) -> Result<BootstrapReport, SimError> {
    if replications < 100 {
        return Err(SimError::Config("at least 100 bootstrap resamples required".to_string()));
    }
    let template = MomentSummary::new(
        ds.period_labels().to_vec(),
        ds.metric().component_count(),
        ds.group_count(),
    );
    // per-group pool of augmented user vectors
    let mut pools: Vec<Vec<Vec<f64>>> = vec![Vec::new(); ds.group_count()];
    let mut full = template.clone();
    for chunk in ds.user_chunks() {
        let v = full.user_vector(chunk)?;
        full.push_vector(chunk[0].group as usize, &v)?;
        pools[chunk[0].group as usize].push(v);
    }
    let moments = finalize_for(&full, design, ds.metric())?;
    let model = DesignModel::new(design, scale, pre_period);
    let fit = inference::fit(&model, &moments)?;
    let d = model
        .param_index("delta")
        .ok_or_else(|| SimError::Config(format!("design `{design}` has no pooled effect parameter")))?;
    let fisher_variance = fit.covariance[d][d];

    let estimates: Vec<Option<f64>> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, rep as u64));
            let mut acc = template.clone();
            for (g, pool) in pools.iter().enumerate() {
                for _ in 0..pool.len() {
                    let pick = rng.random_range(0..pool.len());
                    acc.push_vector(g, &pool[pick]).expect("pool vectors match");
                }
            }
            let moments = finalize_for(&acc, design, ds.metric()).ok()?;
            let fit = inference::fit(&model, &moments).ok()?;
            Some(fit.estimates[d])
        })
        .collect();

    let kept: Vec<f64> = estimates.iter().flatten().copied().collect();
    let skipped = replications - kept.len();
    if skipped * 100 > replications {
        return Err(SimError::TooManyFailures {
            failed: skipped,
            total: replications,
            example: "degenerate bootstrap resamples".to_string(),
        });
    }
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let boot_var = kept.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1.0);

    Ok(BootstrapReport {
        design,
        replications,
        skipped,
        fisher_variance,
        bootstrap_variance: boot_var,
        ratio: boot_var / fisher_variance,
    })
}

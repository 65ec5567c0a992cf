//! Mean models for repeated-measures experiment designs.
//!
//! Each design is described by a parameter vector `λ`, a mean function
//! `β(λ)` over the stacked per-group, per-period metric means, and the
//! Jacobian `∂β/∂λ`. Group means are stacked group-major, so entry
//! `g * periods + p` of `β` is the expected metric value of group `g`
//! in model period `p`.
//!
//! Canonical sequence-group ordering (also the CSV `group` convention):
//!
//! * two-group designs: group 0 = control sequence, group 1 = treatment
//!   sequence (parallel: CC then TT)
//! * crossover: group 0 = CT, group 1 = TC
//! * re-randomized: group 0 = CT, group 1 = TC, group 2 = CC, group 3 = TT
//!
//! The treatment effect enters additively (`μ + δ`) on the absolute
//! scale and multiplicatively (`μ(1 + δ)`) on the relative scale; period
//! and carryover terms stay additive on both scales.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// The supported experiment designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DesignKind {
    /// Plain two-group comparison over a single period.
    #[serde(rename = "ttest")]
    TTest,
    /// Two-group comparison with a pre-experiment baseline period.
    #[serde(rename = "cuped")]
    Cuped,
    /// Two groups, two periods, constant assignment (CC / TT), pooled effect.
    #[serde(rename = "parallel")]
    Parallel,
    /// Parallel with separate per-period effects, for equivalence testing.
    #[serde(rename = "parallel_two_delta")]
    ParallelTwoDelta,
    /// Two-group comparison of the period-summed (additive) metric.
    #[serde(rename = "cumulative")]
    Cumulative,
    /// Sequence-randomized swap: group 0 = CT, group 1 = TC, pooled effect.
    #[serde(rename = "crossover")]
    Crossover,
    /// Crossover with separate per-period effects.
    #[serde(rename = "crossover_two_delta")]
    CrossoverTwoDelta,
    /// Four sequence groups (CT, TC, CC, TT) with an explicit carryover term.
    #[serde(rename = "rerandomized")]
    ReRandomized,
    /// Re-randomized after the carryover term has been dropped.
    #[serde(rename = "rerandomized_no_carryover")]
    ReRandomizedNoCarryover,
}

impl DesignKind {
    /// Number of sequence groups the design randomizes over.
    pub fn group_count(self) -> usize {
        match self {
            DesignKind::ReRandomized | DesignKind::ReRandomizedNoCarryover => 4,
            _ => 2,
        }
    }

    /// Number of experiment periods in the model (the cumulative design
    /// collapses its two data periods into one summed period).
    pub fn experiment_period_count(self) -> usize {
        match self {
            DesignKind::TTest | DesignKind::Cuped | DesignKind::Cumulative => 1,
            _ => 2,
        }
    }

    /// Whether the design carries a built-in pre-experiment baseline period.
    pub fn has_builtin_baseline(self) -> bool {
        matches!(self, DesignKind::Cuped)
    }

    /// Whether the effect is split per period (`delta1`, `delta2`).
    pub fn two_delta(self) -> bool {
        matches!(
            self,
            DesignKind::ParallelTwoDelta | DesignKind::CrossoverTwoDelta
        )
    }

    /// Whether the model includes the carryover term.
    pub fn has_carryover(self) -> bool {
        matches!(self, DesignKind::ReRandomized)
    }

    /// Treatment assignment per (group, experiment period).
    fn assignment(self) -> &'static [&'static [bool]] {
        match self {
            DesignKind::TTest | DesignKind::Cuped | DesignKind::Cumulative => {
                &[&[false], &[true]]
            }
            DesignKind::Parallel | DesignKind::ParallelTwoDelta => {
                &[&[false, false], &[true, true]]
            }
            DesignKind::Crossover | DesignKind::CrossoverTwoDelta => {
                &[&[false, true], &[true, false]]
            }
            DesignKind::ReRandomized | DesignKind::ReRandomizedNoCarryover => {
                &[&[false, true], &[true, false], &[false, false], &[true, true]]
            }
        }
    }

    /// Treatment assignment over the raw data periods. Identical to the
    /// model assignment except for the cumulative design, which collects
    /// two parallel-assigned periods and sums them before modeling.
    pub fn data_sequences(self) -> Vec<Vec<bool>> {
        let raw: &[&[bool]] = match self {
            DesignKind::Cumulative => &[&[false, false], &[true, true]],
            other => other.assignment(),
        };
        raw.iter().map(|seq| seq.to_vec()).collect()
    }

    /// Human-readable sequence label per group, e.g. `["CT", "TC"]`.
    pub fn sequence_labels(self) -> Vec<String> {
        self.assignment()
            .iter()
            .map(|seq| {
                seq.iter()
                    .map(|&t| if t { 'T' } else { 'C' })
                    .collect::<String>()
            })
            .collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DesignKind::TTest => "ttest",
            DesignKind::Cuped => "cuped",
            DesignKind::Parallel => "parallel",
            DesignKind::ParallelTwoDelta => "parallel_two_delta",
            DesignKind::Cumulative => "cumulative",
            DesignKind::Crossover => "crossover",
            DesignKind::CrossoverTwoDelta => "crossover_two_delta",
            DesignKind::ReRandomized => "rerandomized",
            DesignKind::ReRandomizedNoCarryover => "rerandomized_no_carryover",
        }
    }
}

impl fmt::Display for DesignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DesignKind {
    type Err = DesignError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ttest" => Ok(DesignKind::TTest),
            "cuped" => Ok(DesignKind::Cuped),
            "parallel" => Ok(DesignKind::Parallel),
            "parallel_two_delta" => Ok(DesignKind::ParallelTwoDelta),
            "cumulative" => Ok(DesignKind::Cumulative),
            "crossover" => Ok(DesignKind::Crossover),
            "crossover_two_delta" => Ok(DesignKind::CrossoverTwoDelta),
            "rerandomized" => Ok(DesignKind::ReRandomized),
            "rerandomized_no_carryover" => Ok(DesignKind::ReRandomizedNoCarryover),
            other => Err(DesignError::UnknownKind(other.to_string())),
        }
    }
}

/// Scale on which the treatment effect is expressed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectScale {
    /// `δ` is an additive difference of means.
    #[default]
    Absolute,
    /// `δ` is a relative lift: treated cells have mean `μ(1 + δ)`.
    Relative,
}

impl fmt::Display for EffectScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EffectScale::Absolute => f.write_str("absolute"),
            EffectScale::Relative => f.write_str("relative"),
        }
    }
}

impl std::str::FromStr for EffectScale {
    type Err = DesignError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "absolute" => Ok(EffectScale::Absolute),
            "relative" => Ok(EffectScale::Relative),
            other => Err(DesignError::UnknownScale(other.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("unknown design kind `{0}`")]
    UnknownKind(String),
    #[error("unknown effect scale `{0}`")]
    UnknownScale(String),
    #[error("parameter vector has length {got}, model `{model}` expects {expected}")]
    ParamLength {
        model: String,
        expected: usize,
        got: usize,
    },
}

/// One entry of the stacked mean vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Sequence group index.
    pub group: usize,
    /// Model period index (0 = baseline when the model has one).
    pub period: usize,
    /// Index into the parameter vector of the period shift, if any.
    pub theta: Option<usize>,
    /// Index into the parameter vector of the treatment effect, if any.
    pub delta: Option<usize>,
    /// Whether the carryover term applies to this cell.
    pub carryover: bool,
}

/// A design's parameter vector, mean function and Jacobian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignModel {
    kind: DesignKind,
    scale: EffectScale,
    pre_period: bool,
    params: Vec<String>,
    cells: Vec<Cell>,
    group_count: usize,
    period_count: usize,
    alpha: Option<usize>,
}

/// Builds the model for a design kind on the given effect scale, with the
/// kind's default baseline handling (only CUPED carries one by default).
pub fn build_model(kind: DesignKind, scale: EffectScale) -> DesignModel {
    DesignModel::new(kind, scale, kind.has_builtin_baseline())
}

impl DesignModel {
    /// Builds a model, optionally prefixing a pre-experiment baseline
    /// period shared by all groups. CUPED always has the baseline.
    pub fn new(kind: DesignKind, scale: EffectScale, pre_period: bool) -> DesignModel {
        let pre = pre_period || kind.has_builtin_baseline();
        let assignment = kind.assignment();
        let group_count = kind.group_count();
        let exp_periods = kind.experiment_period_count();
        let period_count = exp_periods + pre as usize;

        let mut params = vec!["mu".to_string()];
        // One shift per non-anchor period; the first model period is the anchor.
        let theta_count = period_count - 1;
        let theta_base = params.len();
        if theta_count == 1 {
            params.push("theta".to_string());
        } else {
            for t in 0..theta_count {
                params.push(format!("theta{}", t + 1));
            }
        }
        let delta_base = params.len();
        if kind.two_delta() {
            params.push("delta1".to_string());
            params.push("delta2".to_string());
        } else {
            params.push("delta".to_string());
        }
        let alpha = kind.has_carryover().then(|| {
            params.push("alpha".to_string());
            params.len() - 1
        });

        let mut cells = Vec::with_capacity(group_count * period_count);
        for (g, seq) in assignment.iter().enumerate() {
            for p in 0..period_count {
                let theta = (p > 0).then(|| theta_base + p - 1);
                let exp_idx = (!pre || p > 0).then(|| p - pre as usize);
                let treated = exp_idx.map(|e| seq[e]).unwrap_or(false);
                // A TC-sequence cell right after the treated period carries α.
                let carryover = kind.has_carryover()
                    && exp_idx == Some(1)
                    && seq[0]
                    && !seq[1];
                let delta = if treated {
                    Some(if kind.two_delta() {
                        delta_base + exp_idx.unwrap()
                    } else {
                        delta_base
                    })
                } else {
                    None
                };
                cells.push(Cell {
                    group: g,
                    period: p,
                    theta,
                    delta,
                    carryover,
                });
            }
        }

        DesignModel {
            kind,
            scale,
            pre_period: pre,
            params,
            cells,
            group_count,
            period_count,
            alpha,
        }
    }

    pub fn kind(&self) -> DesignKind {
        self.kind
    }

    pub fn scale(&self) -> EffectScale {
        self.scale
    }

    /// Whether the model includes a baseline period before the experiment.
    pub fn has_pre_period(&self) -> bool {
        self.pre_period
    }

    /// Ordered parameter names, e.g. `["mu", "theta", "delta"]`.
    pub fn param_names(&self) -> &[String] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Index of a named parameter.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p == name)
    }

    /// Indices of the treatment-effect parameters.
    pub fn delta_indices(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("delta"))
            .map(|(i, _)| i)
            .collect()
    }

    /// Index of the carryover parameter, when the model has one.
    pub fn alpha_index(&self) -> Option<usize> {
        self.alpha
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    /// Model periods per group, including the baseline when present.
    pub fn period_count(&self) -> usize {
        self.period_count
    }

    /// β entries in stacking order.
    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    /// Number of entries of `β`.
    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    fn check_params(&self, lambda: &[f64]) -> Result<(), DesignError> {
        if lambda.len() != self.params.len() {
            return Err(DesignError::ParamLength {
                model: self.kind.to_string(),
                expected: self.params.len(),
                got: lambda.len(),
            });
        }
        Ok(())
    }

    fn cell_mean(&self, cell: &Cell, lambda: &[f64]) -> f64 {
        let mu = lambda[0];
        let mut v = match (self.scale, cell.delta) {
            (EffectScale::Absolute, Some(d)) => mu + lambda[d],
            (EffectScale::Relative, Some(d)) => mu * (1.0 + lambda[d]),
            (_, None) => mu,
        };
        if let Some(t) = cell.theta {
            v += lambda[t];
        }
        if cell.carryover {
            v += lambda[self.alpha.expect("carryover cell without alpha")];
        }
        v
    }

    /// Evaluates `β(λ)`.
    pub fn mean_vector(&self, lambda: &[f64]) -> Result<DVector<f64>, DesignError> {
        self.check_params(lambda)?;
        Ok(DVector::from_iterator(
            self.cells.len(),
            self.cells.iter().map(|c| self.cell_mean(c, lambda)),
        ))
    }

    /// Evaluates `∂β/∂λ`. Constant on the absolute scale, λ-dependent on
    /// the relative scale.
    pub fn jacobian(&self, lambda: &[f64]) -> Result<DMatrix<f64>, DesignError> {
        self.check_params(lambda)?;
        let mut jac = DMatrix::zeros(self.cells.len(), self.params.len());
        for (r, cell) in self.cells.iter().enumerate() {
            match (self.scale, cell.delta) {
                (EffectScale::Absolute, Some(d)) => {
                    jac[(r, 0)] = 1.0;
                    jac[(r, d)] = 1.0;
                }
                (EffectScale::Relative, Some(d)) => {
                    jac[(r, 0)] = 1.0 + lambda[d];
                    jac[(r, d)] = lambda[0];
                }
                (_, None) => jac[(r, 0)] = 1.0,
            }
            if let Some(t) = cell.theta {
                jac[(r, t)] = 1.0;
            }
            if cell.carryover {
                jac[(r, self.alpha.unwrap())] = 1.0;
            }
        }
        Ok(jac)
    }

    /// Label of a model period for reports: `pre`, `P1`, `P2`, or `sum`.
    pub fn period_label(&self, period: usize) -> String {
        if self.pre_period && period == 0 {
            return "pre".to_string();
        }
        let exp = period - self.pre_period as usize;
        if self.kind == DesignKind::Cumulative {
            "sum".to_string()
        } else if self.kind.experiment_period_count() == 1 {
            "P1".to_string()
        } else {
            format!("P{}", exp + 1)
        }
    }

    /// Audit table of the β layout: one `(group, sequence, period, terms)`
    /// row per entry, in stacking order.
    pub fn layout_rows(&self) -> Vec<(usize, String, String, String)> {
        let seqs = self.kind.sequence_labels();
        self.cells
            .iter()
            .map(|c| {
                let mut terms = vec![match (self.scale, c.delta) {
                    (EffectScale::Absolute, Some(d)) => format!("mu+{}", self.params[d]),
                    (EffectScale::Relative, Some(d)) => format!("mu*(1+{})", self.params[d]),
                    (_, None) => "mu".to_string(),
                }];
                if let Some(t) = c.theta {
                    terms.push(self.params[t].clone());
                }
                if c.carryover {
                    terms.push("alpha".to_string());
                }
                (
                    c.group,
                    seqs[c.group].clone(),
                    self.period_label(c.period),
                    terms.join("+"),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn beta(kind: DesignKind, scale: EffectScale, lambda: &[f64]) -> Vec<f64> {
        build_model(kind, scale)
            .mean_vector(lambda)
            .unwrap()
            .iter()
            .copied()
            .collect()
    }

    #[test]
    fn crossover_null_effect() {
        assert_eq!(
            beta(DesignKind::Crossover, EffectScale::Absolute, &[1.0, 0.0, 0.0]),
            vec![1.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn crossover_relative_mean_vector() {
        // (μ, μ(1+δ)+θ, μ(1+δ), μ+θ) at μ=2, θ=0.5, δ=0.1
        let b = beta(DesignKind::Crossover, EffectScale::Relative, &[2.0, 0.5, 0.1]);
        assert_abs_diff_eq!(b[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b[1], 2.7, epsilon = 1e-15);
        assert_abs_diff_eq!(b[2], 2.2, epsilon = 1e-15);
        assert_abs_diff_eq!(b[3], 2.5, epsilon = 1e-15);
    }

    #[test]
    fn parallel_mean_vector() {
        assert_eq!(
            beta(DesignKind::Parallel, EffectScale::Absolute, &[0.0, 0.0, 1.0]),
            vec![0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn cuped_mean_vector() {
        assert_eq!(
            beta(DesignKind::Cuped, EffectScale::Absolute, &[5.0, -1.0, 0.2]),
            vec![5.0, 4.0, 5.0, 4.2]
        );
    }

    #[test]
    fn cumulative_mean_vector() {
        // Cumulative baseline is the control mean of the summed metric;
        // with the two-period decomposition 2μ+θ = 2*3+1 = 7 and δ̃ = 2.
        assert_eq!(
            beta(DesignKind::Cumulative, EffectScale::Absolute, &[7.0, 2.0]),
            vec![7.0, 9.0]
        );
    }

    #[test]
    fn rerandomized_alpha_placement() {
        let model = build_model(DesignKind::ReRandomized, EffectScale::Absolute);
        assert_eq!(model.param_names(), &["mu", "theta", "delta", "alpha"]);
        let carry: Vec<_> = model.cells().iter().filter(|c| c.carryover).collect();
        assert_eq!(carry.len(), 1);
        // group 1 is the TC sequence; carryover sits in its second period
        assert_eq!(carry[0].group, 1);
        assert_eq!(carry[0].period, 1);
        assert_eq!(model.kind().sequence_labels()[1], "TC");
        // §-style full vector: (μ, μ+θ+δ, μ+δ, μ+θ+α, μ, μ+θ, μ+δ, μ+θ+δ)
        let b = model.mean_vector(&[1.0, 10.0, 100.0, 1000.0]).unwrap();
        assert_eq!(
            b.iter().copied().collect::<Vec<_>>(),
            vec![1.0, 111.0, 101.0, 1011.0, 1.0, 11.0, 101.0, 111.0]
        );
    }

    #[test]
    fn crossover_jacobian_delta_column() {
        let model = build_model(DesignKind::Crossover, EffectScale::Absolute);
        let jac = model.jacobian(&[0.3, 0.1, 0.7]).unwrap();
        let d = model.param_index("delta").unwrap();
        assert_eq!(jac.column(d).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 1.0, 0.0]);

        let rel = DesignModel::new(DesignKind::Crossover, EffectScale::Relative, false);
        let jac = rel.jacobian(&[2.0, 0.1, 0.05]).unwrap();
        assert_eq!(jac.column(d).iter().copied().collect::<Vec<_>>(), vec![0.0, 2.0, 2.0, 0.0]);
    }

    #[test]
    fn param_length_mismatch_rejected() {
        let model = build_model(DesignKind::Crossover, EffectScale::Absolute);
        assert!(model.mean_vector(&[1.0, 2.0]).is_err());
        assert!(model.jacobian(&[1.0, 2.0, 3.0, 4.0]).is_err());
    }

    #[test]
    fn null_effect_symmetry_crossover_vs_parallel() {
        let lambda = [3.0, 0.7, 0.0];
        assert_eq!(
            beta(DesignKind::Crossover, EffectScale::Absolute, &lambda),
            beta(DesignKind::Parallel, EffectScale::Absolute, &lambda)
        );
    }

    #[test]
    fn two_delta_and_baseline_layouts() {
        let model = build_model(DesignKind::CrossoverTwoDelta, EffectScale::Absolute);
        assert_eq!(model.param_names(), &["mu", "theta", "delta1", "delta2"]);
        // CT: treated in period 2 -> delta2; TC: treated in period 1 -> delta1
        let b = model.mean_vector(&[0.0, 0.0, 1.0, 2.0]).unwrap();
        assert_eq!(b.iter().copied().collect::<Vec<_>>(), vec![0.0, 2.0, 1.0, 0.0]);

        let with_pre = DesignModel::new(DesignKind::Crossover, EffectScale::Absolute, true);
        assert_eq!(with_pre.param_names(), &["mu", "theta1", "theta2", "delta"]);
        assert_eq!(with_pre.dim(), 6);
        let b = with_pre.mean_vector(&[1.0, 10.0, 100.0, 1000.0]).unwrap();
        // groups CT, TC with a μ-only baseline entry each
        assert_eq!(
            b.iter().copied().collect::<Vec<_>>(),
            vec![1.0, 11.0, 1101.0, 1.0, 1011.0, 101.0]
        );
    }

    fn all_models() -> Vec<DesignModel> {
        let kinds = [
            DesignKind::TTest,
            DesignKind::Cuped,
            DesignKind::Parallel,
            DesignKind::ParallelTwoDelta,
            DesignKind::Cumulative,
            DesignKind::Crossover,
            DesignKind::CrossoverTwoDelta,
            DesignKind::ReRandomized,
            DesignKind::ReRandomizedNoCarryover,
        ];
        let mut models = Vec::new();
        for kind in kinds {
            for scale in [EffectScale::Absolute, EffectScale::Relative] {
                for pre in [false, true] {
                    models.push(DesignModel::new(kind, scale, pre));
                }
            }
        }
        models
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let h = 1e-6;
        for model in all_models() {
            for _ in 0..5 {
                let lambda: Vec<f64> = (0..model.param_count())
                    .map(|i| if i == 0 { 1.0 + next() } else { next() - 0.5 })
                    .collect();
                let jac = model.jacobian(&lambda).unwrap();
                for k in 0..lambda.len() {
                    let mut up = lambda.clone();
                    let mut dn = lambda.clone();
                    up[k] += h;
                    dn[k] -= h;
                    let fd = (model.mean_vector(&up).unwrap()
                        - model.mean_vector(&dn).unwrap())
                        / (2.0 * h);
                    for r in 0..model.dim() {
                        assert!(
                            (jac[(r, k)] - fd[r]).abs() <= 1e-6,
                            "{} {:?} d{}: {} vs {}",
                            model.kind(),
                            model.scale(),
                            k,
                            jac[(r, k)],
                            fd[r]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn absolute_models_are_affine() {
        for model in all_models() {
            if model.scale() != EffectScale::Absolute {
                continue;
            }
            let p = model.param_count();
            let l1: Vec<f64> = (0..p).map(|i| 0.25 * (i as f64 + 1.0)).collect();
            for shift in [0.0, -1.5, 4.0] {
                let l2: Vec<f64> = (0..p).map(|i| shift + 0.1 * i as f64).collect();
                let sum: Vec<f64> = l1.iter().zip(&l2).map(|(a, b)| a + b).collect();
                let diff = model.mean_vector(&sum).unwrap() - model.mean_vector(&l2).unwrap();
                let base = model.mean_vector(&l1).unwrap();
                let zero: Vec<f64> = vec![0.0; p];
                let origin = model.mean_vector(&zero).unwrap();
                for r in 0..model.dim() {
                    assert_abs_diff_eq!(diff[r], base[r] - origin[r], epsilon = 1e-12);
                }
            }
        }
    }
}

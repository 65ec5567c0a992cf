//! Command-line front end: ingestion → moments → fit → report, plus the
//! simulation, power, and design-comparison commands.
//!
//! Exit codes: 0 success, 1 data error, 2 convergence or identifiability
//! error, 3 usage error.

use clap::{Args, Parser, Subcommand, ValueEnum};
use remex_core::{
    bootstrap, closed_form_variance, compare_designs, designs::DesignModel, inference,
    inference::rerandomized_reduced_variance, moments::MetricMoments, parse_dataset,
    required_sample_size, run_monte_carlo, simlab, DataError, DesignKind, DesignVariance,
    EffectScale, FitError, FitResult, MetricDef, MomentError, MomentSummary, MonteCarloSpec,
    ParseOptions, PowerSpec, SimConfig, SimError, TestResult, ValidationReport,
};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "remex", version, about = "Repeated-measures experiment analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze an experiment log: equivalence/carryover tests drive the
    /// choice between pooled, separate-effect, and reduced models.
    Analyze(AnalyzeArgs),
    /// Monte-Carlo study from a JSON config: bias, variance calibration,
    /// and CI coverage against the configured ground truth.
    Simulate(SimulateArgs),
    /// Required sample size for a minimum detectable effect.
    Power(PowerArgs),
    /// Percent samples needed per design for equal sensitivity.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignArg {
    Ttest,
    Cuped,
    Parallel,
    Cumulative,
    Crossover,
    Rerandomized,
}

impl DesignArg {
    fn kind(self) -> DesignKind {
        match self {
            DesignArg::Ttest => DesignKind::TTest,
            DesignArg::Cuped => DesignKind::Cuped,
            DesignArg::Parallel => DesignKind::Parallel,
            DesignArg::Cumulative => DesignKind::Cumulative,
            DesignArg::Crossover => DesignKind::Crossover,
            DesignArg::Rerandomized => DesignKind::ReRandomized,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Absolute,
    Relative,
}

impl ScaleArg {
    fn scale(self) -> EffectScale {
        match self {
            ScaleArg::Absolute => EffectScale::Absolute,
            ScaleArg::Relative => EffectScale::Relative,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// CSV input: user_id,group,period,<components> (period 0 = baseline)
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    design: DesignArg,
    #[arg(long, value_enum, default_value = "absolute")]
    scale: ScaleArg,
    /// metric definition: average:<col> or ratio:<num>/<den>
    #[arg(long)]
    metric: String,
    /// significance level for the workflow tests
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// require and use period 0 as the pre-experiment baseline
    #[arg(long)]
    pre_period: bool,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON simulation config (generator settings + design + replications)
    #[arg(long)]
    config: PathBuf,
    /// override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// write one row per replication for external plotting
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct PowerArgs {
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0.8)]
    power: f64,
    /// minimum detectable effect
    #[arg(long)]
    mde: f64,
    /// variance of the effect estimate at the n = 1 reference scale
    /// (Var(δ̂)·n from a pilot fit or closed form)
    #[arg(long)]
    variance: f64,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct CompareArgs {
    /// period-1 standard deviation of the group means
    #[arg(long)]
    s1: f64,
    /// period-2 standard deviation of the group means
    #[arg(long)]
    s2: f64,
    /// cross-period correlation
    #[arg(long)]
    rho: f64,
    #[arg(long, value_enum, default_value = "crossover")]
    baseline: DesignArg,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

/// Errors carrying the exit-code contract.
enum CliError {
    Data(String),
    Fit(String),
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Data(_) => 1,
            CliError::Fit(_) => 2,
            CliError::Usage(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Data(m) | CliError::Fit(m) | CliError::Usage(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MomentError> for CliError {
    fn from(e: MomentError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        CliError::Fit(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(m) => CliError::Usage(m),
            SimError::Data(e) => e.into(),
            SimError::Moment(e) => e.into(),
            SimError::Fit(e) => e.into(),
            SimError::Design(e) => CliError::Usage(e.to_string()),
            e @ SimError::TooManyFailures { .. } => CliError::Fit(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, anything else is usage
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(3);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let outcome = match cli.command {
        Command::Analyze(args) => cmd_analyze(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Power(args) => cmd_power(&args),
        Command::Compare(args) => cmd_compare(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn parse_metric(spec: &str) -> Result<MetricDef, CliError> {
    let usage = || {
        CliError::Usage(format!(
            "bad metric `{spec}`; expected average:<col> or ratio:<num>/<den>"
        ))
    };
    let (kind, rest) = spec.split_once(':').ok_or_else(usage)?;
    match kind {
        "average" if !rest.is_empty() && !rest.contains('/') => {
            Ok(MetricDef::simple_average(rest))
        }
        "ratio" => {
            let (num, den) = rest.split_once('/').ok_or_else(usage)?;
            if num.is_empty() || den.is_empty() {
                return Err(usage());
            }
            Ok(MetricDef::ratio_of_sums(num, den))
        }
        _ => Err(usage()),
    }
}

/// Which workflow path the analysis took and the tests that drove it.
#[derive(Serialize)]
struct Workflow {
    path: String,
    tests: Vec<TestResult>,
}

#[derive(Serialize)]
struct AnalysisReport {
    design: DesignKind,
    scale: EffectScale,
    alpha: f64,
    validation: ValidationReport,
    workflow: Workflow,
    fit: FitResult,
    /// per-period-effect fit, reported when the effects are not equivalent
    #[serde(skip_serializing_if = "Option::is_none")]
    two_delta_fit: Option<FitResult>,
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let metric = parse_metric(&args.metric)?;
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(CliError::Usage(format!(
            "--alpha must be in (0,1), got {}",
            args.alpha
        )));
    }
    let kind = args.design.kind();
    let scale = args.scale.scale();
    let file = File::open(&args.input)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.input.display())))?;
    let ds = parse_dataset(file, &ParseOptions::new(kind, metric.clone()))?;

    if args.pre_period && !ds.has_pre_period() {
        return Err(CliError::Data(
            "--pre-period was given but the data has no period 0".to_string(),
        ));
    }
    let pre = args.pre_period || ds.has_pre_period() || kind.has_builtin_baseline();
    if kind.has_builtin_baseline() && !ds.has_pre_period() {
        return Err(CliError::Data(
            "the cuped design requires pre-experiment data in period 0".to_string(),
        ));
    }

    let validation = ds.validate();
    if !validation.conforms {
        return Err(CliError::Data(format!(
            "data does not match the {kind} design shape: {}",
            validation.warnings.join("; ")
        )));
    }
    let acc = MomentSummary::from_dataset(&ds)?;
    let moments = simlab::finalize_for(&acc, kind, ds.metric())?;

    let report = run_workflow(kind, scale, pre, args.alpha, &moments, validation)?;
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report).unwrap()),
        Format::Text => print_analysis(&report),
    }
    Ok(())
}

/// The recommended workflow: fit the per-period-effect variant first,
/// test equivalence across time (and the carryover term when present),
/// then pool or reduce only when the tests allow it.
fn run_workflow(
    kind: DesignKind,
    scale: EffectScale,
    pre: bool,
    alpha: f64,
    moments: &MetricMoments,
    validation: ValidationReport,
) -> Result<AnalysisReport, CliError> {
    let mut tests = Vec::new();
    let mut two_delta_fit = None;

    let (path, fit) = match kind {
        DesignKind::Crossover | DesignKind::Parallel => {
            let two_kind = if kind == DesignKind::Crossover {
                DesignKind::CrossoverTwoDelta
            } else {
                DesignKind::ParallelTwoDelta
            };
            let two_model = DesignModel::new(two_kind, scale, pre);
            let two_fit = inference::fit(&two_model, moments)?;
            let mut contrast = vec![0.0; two_model.param_count()];
            contrast[two_model.param_index("delta1").unwrap()] = 1.0;
            contrast[two_model.param_index("delta2").unwrap()] = -1.0;
            let equivalence = inference::wald_test(&two_fit, &contrast, alpha)?;
            let reject = equivalence.reject;
            tests.push(equivalence);
            if reject {
                // effects differ across time: report them separately
                (
                    format!("per-period effects (equivalence rejected at {alpha})"),
                    two_fit,
                )
            } else {
                two_delta_fit = Some(two_fit);
                let model = DesignModel::new(kind, scale, pre);
                (
                    format!("pooled {kind} model (effects equivalent at {alpha})"),
                    inference::fit(&model, moments)?,
                )
            }
        }
        DesignKind::ReRandomized => {
            let model = DesignModel::new(kind, scale, pre);
            let full = inference::fit(&model, moments)?;
            let mut contrast = vec![0.0; model.param_count()];
            contrast[model.alpha_index().unwrap()] = 1.0;
            let carry = inference::wald_test(&full, &contrast, alpha)?;
            let reject = carry.reject;
            tests.push(carry);
            let fit = inference::reduce_model(&full, moments, alpha)?;
            if reject {
                (format!("full rerandomized model (carryover significant at {alpha})"), fit)
            } else {
                (
                    format!("reduced model without carryover (not significant at {alpha})"),
                    fit,
                )
            }
        }
        direct => {
            let model = DesignModel::new(direct, scale, pre);
            (format!("direct {direct} fit"), inference::fit(&model, moments)?)
        }
    };

    Ok(AnalysisReport {
        design: kind,
        scale,
        alpha,
        validation,
        workflow: Workflow { path, tests },
        fit,
        two_delta_fit,
    })
}

fn print_analysis(report: &AnalysisReport) {
    print!("{}", report.validation);
    println!();
    println!("workflow: {}", report.workflow.path);
    for t in &report.workflow.tests {
        println!(
            "  test {}: statistic {:.4}, p = {:.4} -> {}",
            t.description,
            t.statistic,
            t.p_value,
            if t.reject { "reject" } else { "fail to reject" }
        );
    }
    println!();
    print_fit(&report.fit);
    if let Some(two) = &report.two_delta_fit {
        println!("\nper-period effects (diagnostic):");
        print_fit(two);
    }
}

fn print_fit(fit: &FitResult) {
    println!(
        "model: {} ({} scale){}",
        fit.model.kind(),
        fit.model.scale(),
        if fit.reduced { ", reduced" } else { "" }
    );
    println!("  layout:");
    for (group, seq, period, terms) in fit.model.layout_rows() {
        println!("    group {group} ({seq}) {period}: {terms}");
    }
    println!(
        "  {:<10} {:>12} {:>12} {:>9} {:>11}",
        "parameter", "estimate", "std error", "z", "p"
    );
    for i in 0..fit.parameters.len() {
        println!(
            "  {:<10} {:>12.6} {:>12.6} {:>9.3} {:>11.3e}",
            fit.parameters[i], fit.estimates[i], fit.std_errors[i], fit.z_values[i], fit.p_values[i]
        );
    }
    for eff in &fit.relative_effects {
        println!(
            "  {:<10} {:>11.4}% {:>11.4}%",
            eff.parameter,
            100.0 * eff.estimate,
            100.0 * eff.std_error
        );
    }
    for w in &fit.warnings {
        println!("  warning: {w}");
    }
}

/// On-disk simulation config: generator settings plus what to fit.
#[derive(Serialize, Deserialize)]
struct SimulateConfig {
    sim: SimConfig,
    #[serde(flatten)]
    spec: MonteCarloSpec,
    /// run a user-level bootstrap on one generated dataset instead of a
    /// fresh-data Monte Carlo
    #[serde(default)]
    bootstrap: Option<usize>,
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.config.display())))?;
    let mut config: SimulateConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("bad simulation config: {e}")))?;
    if let Some(seed) = args.seed {
        config.sim.seed = seed;
    }

    if let Some(resamples) = config.bootstrap {
        let ds = simlab::generate(&config.sim, config.spec.design, config.spec.pre_period)?;
        let report = bootstrap(
            &ds,
            config.spec.design,
            config.spec.scale,
            config.spec.pre_period,
            resamples,
            config.sim.seed,
        )?;
        match args.format {
            Format::Json => println!("{}", serde_json::to_string_pretty(&report).unwrap()),
            Format::Text => println!(
                "bootstrap {} resamples ({} skipped): Fisher variance {:.6e}, bootstrap variance {:.6e}, ratio {:.4}",
                report.replications, report.skipped, report.fisher_variance, report.bootstrap_variance, report.ratio
            ),
        }
        return Ok(());
    }

    let run = run_monte_carlo(&config.sim, &config.spec)?;
    if let Some(path) = &args.out_csv {
        let mut out = File::create(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        writeln!(out, "replication,estimate,std_error,covered").map_err(DataError::from)?;
        for r in &run.records {
            writeln!(out, "{},{},{},{}", r.replication, r.estimate, r.std_error, r.covered)
                .map_err(DataError::from)?;
        }
    }
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&run.report).unwrap()),
        Format::Text => {
            let r = &run.report;
            println!(
                "{} ({} scale), condition {}: {} replications, {} failures",
                r.design, r.scale, r.condition, r.replications, r.failures
            );
            println!("  ground truth        {:>12.6}", r.ground_truth);
            println!("  mean estimate       {:>12.6} (mcse {:.6})", r.mean_estimate, r.mcse);
            println!("  empirical variance  {:>12.6e}", r.empirical_variance);
            println!("  mean Fisher var     {:>12.6e} (ratio {:.4})", r.mean_fisher_variance, r.variance_ratio);
            println!("  95% CI coverage     {:>12.4}", r.coverage95);
        }
    }
    Ok(())
}

fn cmd_power(args: &PowerArgs) -> Result<(), CliError> {
    let spec = PowerSpec {
        alpha: args.alpha,
        power: args.power,
        mde: args.mde,
        variance_per_unit: args.variance,
    };
    let result = required_sample_size(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&result).unwrap()),
        Format::Text => {
            println!("required sample size (per group): {}", result.n);
            println!(
                "  z_(1-alpha/2) = {:.9}, z_power = {:.9}, exact n = {:.4}",
                result.z_alpha, result.z_power, result.n_exact
            );
        }
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<(), CliError> {
    let baseline = args.baseline.kind();
    let mut entries = Vec::new();
    for kind in [
        DesignKind::TTest,
        DesignKind::Cuped,
        DesignKind::Parallel,
        DesignKind::Cumulative,
        DesignKind::Crossover,
    ] {
        let mut variance = closed_form_variance(kind, args.s1, args.s2, args.rho)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        // the cumulative effect spans both periods (twice the weekly
        // effect), so its percent-scale variance is a quarter of Var(δ̃)
        if kind == DesignKind::Cumulative {
            variance /= 4.0;
        }
        entries.push(DesignVariance {
            kind,
            scale: EffectScale::Relative,
            variance,
        });
    }
    entries.push(DesignVariance {
        kind: DesignKind::ReRandomizedNoCarryover,
        scale: EffectScale::Relative,
        variance: rerandomized_reduced_variance(args.s1, args.s2, args.rho)?,
    });

    let comparison =
        compare_designs(&entries, baseline).map_err(|e| CliError::Usage(e.to_string()))?;
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&comparison).unwrap()),
        Format::Text => {
            println!(
                "percent samples needed for equal sensitivity (baseline: {})",
                comparison.baseline
            );
            println!("  {:<28} {:>12} {:>10}", "design", "Var(effect)", "percent");
            for row in &comparison.rows {
                println!(
                    "  {:<28} {:>12.6} {:>10.1}",
                    row.kind.to_string(),
                    row.variance,
                    row.percent_of_baseline
                );
            }
        }
    }
    Ok(())
}

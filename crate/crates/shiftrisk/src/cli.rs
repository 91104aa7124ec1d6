//! Command-line surface. Every run is described by a serializable
//! [`RunConfig`], which is embedded in the JSON output so that
//! `shiftrisk rerun <output.json>` reproduces it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, Dataset, LossSpec, Schema, ShiftSpec};
use crate::engine::{EngineConfig, PiMode, RiskEstimate, WeightMode};
use crate::error::{Error, Result};
use crate::inference::{calibrate_prediction_threshold, compare_models, specification_test, CalibrationResult, ComparisonResult, Method, TestResult};
use crate::learners::{LearnerSpec, DEFAULT_ODDS_EPS};
use crate::simlab::{monte_carlo_run, EstimatorKind, MetricsTable, MonteCarloConfig, NuisanceMode, Scenario, ScenarioConfig};
use crate::specialized::{ConceptVariance, RiskFit, SpecialCondition, SpecialConfig, SpecialKind};

/// Environment variable holding the default worker-thread cap.
pub const THREADS_ENV: &str = "SHIFTRISK_THREADS";

#[derive(Debug, Parser)]
#[command(name = "shiftrisk", version, about = "Risk estimation for a fixed prediction model under dataset shift")]
pub struct Cli {
    /// Maximum worker threads (default: all available cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the target risk of a loss.
    Estimate(EstimateArgs),
    /// Specification test from an efficient and a nonparametric estimate.
    Test(TestArgs),
    /// Contrast the risks of two losses.
    Compare(CompareArgs),
    /// Run a Monte Carlo simulation.
    Simulate(SimulateArgs),
    /// Calibrate a prediction-set threshold.
    Calibrate(CalibrateArgs),
    /// Re-run the configuration embedded in a previous JSON output.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConditionArg {
    None,
    Xconshift,
    Yconshift,
    Covshift,
    Labelshift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Odds,
    Ratio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PiArg {
    InFold,
    OutOfFold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VarianceArg {
    Robust,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RiskFitArg {
    Pooled,
    TargetOnly,
}

/// Data and estimation-method flags shared by the data-driven subcommands.
#[derive(Debug, Clone, Args)]
pub struct MethodArgs {
    /// Input CSV file.
    #[arg(long)]
    pub data: PathBuf,
    /// Name of the population-label column.
    #[arg(long, default_value = "A")]
    pub pop_column: String,
    /// Named two-population shift condition (`none` = target-only estimate).
    #[arg(long, value_enum, conflicts_with = "shift_spec")]
    pub condition: Option<ConditionArg>,
    /// JSON shift specification for the generic sequential estimator.
    #[arg(long)]
    pub shift_spec: Option<PathBuf>,
    /// Feature columns for a named condition (comma separated; default: all
    /// columns except the population, outcome and loss columns).
    #[arg(long, value_delimiter = ',')]
    pub x: Option<Vec<String>>,
    /// Outcome column for a named condition (default: the loss outcome).
    #[arg(long)]
    pub y: Option<String>,
    /// Number of cross-fitting folds.
    #[arg(long = "folds", visible_alias = "V", default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Miscoverage level of confidence intervals.
    #[arg(long = "ci-alpha", default_value_t = 0.05)]
    pub ci_alpha: f64,
    /// Classifier: `default` or a JSON learner specification.
    #[arg(long, default_value = "default")]
    pub classifier: String,
    /// Regressor: `default` or a JSON learner specification.
    #[arg(long, default_value = "default")]
    pub regressor: String,
    #[arg(long, value_enum, default_value = "odds")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "in-fold")]
    pub pi: PiArg,
    #[arg(long, default_value_t = DEFAULT_ODDS_EPS)]
    pub odds_eps: f64,
    /// Variance for the concept-shift estimators.
    #[arg(long, value_enum, default_value = "robust")]
    pub variance: VarianceArg,
    /// Rows used for the conditional-risk fit under covariate or label shift.
    #[arg(long, value_enum, default_value = "pooled")]
    pub risk_fit: RiskFitArg,
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Write the JSON report here and print a table to standard output
    /// (default: JSON to standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub method: MethodArgs,
    /// Loss: family:outcome:prediction, column:name or difference:<loss>|<loss>.
    #[arg(long)]
    pub loss: String,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TestArgs {
    /// JSON output of the efficient estimate.
    #[arg(long)]
    pub efficient: PathBuf,
    /// JSON output of the nonparametric estimate.
    #[arg(long)]
    pub baseline: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub method: MethodArgs,
    #[arg(long)]
    pub loss1: String,
    #[arg(long)]
    pub loss2: String,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub condition: String,
    #[arg(long)]
    pub scenario: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub reps: usize,
    /// Master seed (required).
    #[arg(long)]
    pub seed: u64,
    /// consistent, misspecified, mis_propensity, fixed_risk or fixed_propensity.
    #[arg(long, default_value = "consistent")]
    pub nuisance: String,
    #[arg(long = "folds", visible_alias = "V", default_value_t = 5)]
    pub folds: usize,
    #[arg(long = "ci-alpha", default_value_t = 0.05)]
    pub ci_alpha: f64,
    /// Also report the plug-in analytic efficiency gain.
    #[arg(long)]
    pub analytic_gain: bool,
    /// Include the truth oracle among the estimators.
    #[arg(long)]
    pub oracle: bool,
    /// Write per-replicate results as CSV.
    #[arg(long)]
    pub replicates_csv: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub method: MethodArgs,
    /// Column holding the conformity score s(x, y).
    #[arg(long)]
    pub score: String,
    /// Target miscoverage level.
    #[arg(long)]
    pub alpha: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    /// A JSON output of a previous run (or a bare run configuration).
    pub config: PathBuf,
}

/// Fully resolved description of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunConfig {
    Estimate {
        data: PathBuf,
        pop_column: String,
        method: Method,
        loss: LossSpec,
        out: Option<PathBuf>,
    },
    Test {
        efficient: PathBuf,
        baseline: PathBuf,
        out: Option<PathBuf>,
    },
    Compare {
        data: PathBuf,
        pop_column: String,
        method: Method,
        loss1: LossSpec,
        loss2: LossSpec,
        out: Option<PathBuf>,
    },
    Simulate {
        monte_carlo: MonteCarloConfig,
        replicates_csv: Option<PathBuf>,
        out: Option<PathBuf>,
    },
    Calibrate {
        data: PathBuf,
        pop_column: String,
        method: Method,
        score: String,
        alpha: f64,
        out: Option<PathBuf>,
    },
}

impl RunConfig {
    fn out(&self) -> Option<&Path> {
        match self {
            RunConfig::Estimate { out, .. }
            | RunConfig::Test { out, .. }
            | RunConfig::Compare { out, .. }
            | RunConfig::Simulate { out, .. }
            | RunConfig::Calibrate { out, .. } => out.as_deref(),
        }
    }
}

/// Report written by every subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report<T> {
    pub config: RunConfig,
    pub result: T,
}

fn parse_learner(text: &str, fallback: LearnerSpec) -> Result<LearnerSpec> {
    if text == "default" {
        return Ok(fallback);
    }
    serde_json::from_str(text).map_err(|e| Error::Parameter(format!("invalid learner specification `{text}`: {e}")))
}

fn read_shift_spec(path: &Path) -> Result<ShiftSpec> {
    let spec = ShiftSpec::from_json(&fs::read_to_string(path)?)?;
    spec.check_structure()?;
    Ok(spec)
}

/// Resolves the estimation method from the flags; `losses` supply the
/// default outcome and excluded columns for named conditions.
fn resolve_method(args: &MethodArgs, losses: &[&LossSpec]) -> Result<Method> {
    let classifier = parse_learner(&args.classifier, LearnerSpec::default_classifier())?;
    let regressor = parse_learner(&args.regressor, LearnerSpec::default_regressor())?;
    if let Some(path) = &args.shift_spec {
        return Ok(Method::Sequential {
            spec: read_shift_spec(path)?,
            config: EngineConfig {
                folds: args.folds,
                seed: args.seed,
                alpha: args.ci_alpha,
                classifier,
                regressor,
                mode: match args.mode {
                    ModeArg::Odds => WeightMode::Odds,
                    ModeArg::Ratio => WeightMode::Ratio,
                },
                pi: match args.pi {
                    PiArg::InFold => PiMode::InFold,
                    PiArg::OutOfFold => PiMode::OutOfFold,
                },
                odds_eps: args.odds_eps,
                overrides: Default::default(),
            },
        });
    }
    let kind = match args.condition.unwrap_or(ConditionArg::None) {
        ConditionArg::None => return Ok(Method::Nonparametric { alpha: args.ci_alpha }),
        ConditionArg::Xconshift => SpecialKind::Xconshift,
        ConditionArg::Yconshift => SpecialKind::Yconshift,
        ConditionArg::Covshift => SpecialKind::Covshift,
        ConditionArg::Labelshift => SpecialKind::Labelshift,
    };
    let y = match &args.y {
        Some(y) => y.clone(),
        None => losses
            .iter()
            .flat_map(|l| l.outcome_columns())
            .next()
            .ok_or_else(|| Error::Validation("pass --y: the loss names no outcome column".into()))?,
    };
    let x = match &args.x {
        Some(x) => x.clone(),
        None => {
            let header = csv::Reader::from_path(&args.data)?.headers()?.clone();
            let excluded: Vec<String> = losses.iter().flat_map(|l| l.auxiliary_columns()).collect();
            header
                .iter()
                .filter(|c| *c != args.pop_column && *c != y && !excluded.iter().any(|e| e == c))
                .map(str::to_string)
                .collect()
        }
    };
    Ok(Method::Special {
        condition: SpecialCondition { kind, x, y },
        config: SpecialConfig {
            folds: args.folds,
            seed: args.seed,
            alpha: args.ci_alpha,
            classifier,
            regressor,
            odds_eps: args.odds_eps,
            variance: match args.variance {
                VarianceArg::Robust => ConceptVariance::Robust,
                VarianceArg::Plain => ConceptVariance::Plain,
            },
            risk_fit: match args.risk_fit {
                RiskFitArg::Pooled => RiskFit::Pooled,
                RiskFitArg::TargetOnly => RiskFit::TargetOnly,
            },
            overrides: Default::default(),
        },
    })
}

/// Turns parsed arguments into a [`RunConfig`].
pub fn resolve(command: &Command) -> Result<RunConfig> {
    Ok(match command {
        Command::Estimate(a) => {
            let loss: LossSpec = a.loss.parse()?;
            RunConfig::Estimate {
                method: resolve_method(&a.method, &[&loss])?,
                data: a.method.data.clone(),
                pop_column: a.method.pop_column.clone(),
                loss,
                out: a.out.out.clone(),
            }
        }
        Command::Test(a) => RunConfig::Test {
            efficient: a.efficient.clone(),
            baseline: a.baseline.clone(),
            out: a.out.out.clone(),
        },
        Command::Compare(a) => {
            let loss1: LossSpec = a.loss1.parse()?;
            let loss2: LossSpec = a.loss2.parse()?;
            RunConfig::Compare {
                method: resolve_method(&a.method, &[&loss1, &loss2])?,
                data: a.method.data.clone(),
                pop_column: a.method.pop_column.clone(),
                loss1,
                loss2,
                out: a.out.out.clone(),
            }
        }
        Command::Simulate(a) => {
            let scenario = ScenarioConfig {
                condition: a.condition.parse()?,
                scenario: a.scenario.parse::<Scenario>()?,
                n: a.n,
                seed: a.seed,
                nuisance: a.nuisance.parse::<NuisanceMode>()?,
            };
            let mut mc = MonteCarloConfig::new(scenario, a.reps);
            mc.folds = a.folds;
            mc.alpha = a.ci_alpha;
            mc.analytic_gain = a.analytic_gain;
            if a.oracle {
                mc.estimators.push(EstimatorKind::Oracle);
            }
            RunConfig::Simulate {
                monte_carlo: mc,
                replicates_csv: a.replicates_csv.clone(),
                out: a.out.out.clone(),
            }
        }
        Command::Calibrate(a) => {
            let probe = LossSpec::Column { column: a.score.clone() };
            RunConfig::Calibrate {
                method: resolve_method(&a.method, &[&probe])?,
                data: a.method.data.clone(),
                pop_column: a.method.pop_column.clone(),
                score: a.score.clone(),
                alpha: a.alpha,
                out: a.out.out.clone(),
            }
        }
        Command::Rerun(a) => {
            let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&a.config)?)?;
            let cfg = value.get("config").cloned().unwrap_or(value);
            serde_json::from_value(cfg).map_err(|e| Error::Validation(format!("invalid run configuration: {e}")))?
        }
    })
}

fn load(path: &Path, pop_column: &str) -> Result<Dataset> {
    load_dataset(path, &Schema::new(pop_column))
}

fn read_estimate(path: &Path) -> Result<RiskEstimate> {
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let inner = value.get("result").cloned().unwrap_or(value);
    serde_json::from_value(inner).map_err(|e| Error::Validation(format!("{} is not a risk estimate: {e}", path.display())))
}

/// Result of one run, ready to be written.
pub enum Outcome {
    Estimate(RiskEstimate),
    Test(TestResult),
    Compare(ComparisonResult),
    Simulate(MetricsTable),
    Calibrate(CalibrationResult),
}

/// Executes a resolved configuration.
pub fn execute(cfg: &RunConfig) -> Result<Outcome> {
    Ok(match cfg {
        RunConfig::Estimate { data, pop_column, method, loss, .. } => Outcome::Estimate(method.estimate(&load(data, pop_column)?, loss)?),
        RunConfig::Test { efficient, baseline, .. } => Outcome::Test(specification_test(&read_estimate(efficient)?, &read_estimate(baseline)?)?),
        RunConfig::Compare { data, pop_column, method, loss1, loss2, .. } => Outcome::Compare(compare_models(&load(data, pop_column)?, loss1, loss2, method)?),
        RunConfig::Simulate { monte_carlo, replicates_csv, .. } => {
            let table = monte_carlo_run(monte_carlo)?;
            if let Some(path) = replicates_csv {
                table.write_replicates_csv(fs::File::create(path)?)?;
            }
            Outcome::Simulate(table)
        }
        RunConfig::Calibrate { data, pop_column, method, score, alpha, .. } => {
            Outcome::Calibrate(calibrate_prediction_threshold(&load(data, pop_column)?, score, *alpha, method)?)
        }
    })
}

fn fmt_estimate(e: &RiskEstimate) -> String {
    format!(
        "{:<14} {:>14.6} {:>12.6} [{:.6}, {:.6}] n = {}\n",
        e.method, e.estimate, e.se, e.ci[0], e.ci[1], e.n
    )
}

impl Outcome {
    fn json(&self, config: &RunConfig) -> Result<String> {
        let config = config.clone();
        Ok(match self {
            Outcome::Estimate(r) => serde_json::to_string_pretty(&Report { config, result: r })?,
            Outcome::Test(r) => serde_json::to_string_pretty(&Report { config, result: r })?,
            Outcome::Compare(r) => serde_json::to_string_pretty(&Report { config, result: r })?,
            Outcome::Simulate(r) => serde_json::to_string_pretty(&Report { config, result: r })?,
            Outcome::Calibrate(r) => serde_json::to_string_pretty(&Report { config, result: r })?,
        })
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        match self {
            Outcome::Estimate(e) => format!("{:<14} {:>14} {:>12} confidence interval\n{}", "method", "estimate", "se", fmt_estimate(e)),
            Outcome::Test(t) => format!(
                "statistic {:.6}  p-value {:.6}  denominator {:.6} ({:?})\nefficient {:.6}  nonparametric {:.6}\n",
                t.statistic, t.p_value, t.denominator, t.denominator_mode, t.efficient, t.nonparametric
            ),
            Outcome::Compare(c) => format!(
                "{}{}difference {:.6}  se {:.6}  ci [{:.6}, {:.6}]  p-value {:.6}\n",
                fmt_estimate(&c.estimates[0]),
                fmt_estimate(&c.estimates[1]),
                c.diff,
                c.se,
                c.ci[0],
                c.ci[1],
                c.p_value
            ),
            Outcome::Simulate(m) => m.to_text(),
            Outcome::Calibrate(c) => match c.threshold {
                Some(t) => format!("threshold {t}  estimated miscoverage {:.6}  (alpha {})\n", c.miscoverage, c.alpha),
                None => format!("threshold -inf (full set)  (alpha {})\n", c.alpha),
            },
        }
    }
}

/// Runs and writes the outputs of one configuration.
pub fn run_config(cfg: &RunConfig) -> Result<()> {
    let outcome = execute(cfg)?;
    let json = outcome.json(cfg)?;
    match cfg.out() {
        Some(path) => {
            fs::write(path, format!("{json}\n"))?;
            print!("{}", outcome.table());
        }
        None => println!("{json}"),
    }
    std::io::stdout().flush()?;
    Ok(())
}

/// Process exit code for an error: 2 for invalid inputs, 3 for numerical failures.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        2
    } else {
        3
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    if let Some(t) = cli.threads {
        // Only the first call can configure the global pool; later calls in
        // the same process keep the existing one.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global();
    }
    let result = resolve(&cli.command).and_then(|cfg| run_config(&cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

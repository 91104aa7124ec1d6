//! Simulation designs for concept shift in the features and covariate shift,
//! with a Monte Carlo harness reporting bias, spread, scaled MSE, coverage,
//! variance ratios and specification-test rejection rates.
//!
//! Features are trivariate standard normal. The target regression is
//! μ(x) = x₁ + x₂ + x₃ + 0.4x₁x₃ − 0.5x₂x₃ + sin(x₁ + x₃), and each scenario
//! fixes a predictor f and a noise level:
//!
//! | scenario | f                  | noise sd |
//! |----------|--------------------|----------|
//! | A        | μ                  | 5        |
//! | B, E     | 1.4x₁ + x₂ + 1.4x₃ | 1        |
//! | C        | −1 − 3x₁ + 0.5x₃   | 1        |
//! | D        | x₁                 | 0        |
//!
//! The loss is squared error of f.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{evaluate_loss, Dataset, LossSpec};
use crate::engine::{nonparametric_from_values, FixedFn, RiskEstimate};
use crate::error::{Error, Result};
use crate::inference::specification_test;
use crate::learners::{expit, LearnerSpec};
use crate::rng::{derive_seed, stream, ROLE_ORACLE, ROLE_REPLICATE};
use crate::specialized::{efficiency_gain, plugin_moments, special_multi, SpecialCondition, SpecialConfig, SpecialKind, SpecialOverrides};
use crate::stats::{mean, sample_variance, stable_sum};

pub const FEATURES: [&str; 3] = ["x1", "x2", "x3"];
pub const OUTCOME: &str = "y";
pub const PREDICTION: &str = "pred";
pub const POPULATION: &str = "A";
/// Draws used by the Monte Carlo truth oracle.
pub const ORACLE_DRAWS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    A,
    B,
    C,
    D,
    E,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [Scenario::A, Scenario::B, Scenario::C, Scenario::D, Scenario::E];

    pub fn noise_sd(self) -> f64 {
        match self {
            Scenario::A => 5.0,
            Scenario::B | Scenario::C | Scenario::E => 1.0,
            Scenario::D => 0.0,
        }
    }

    /// Intercept and slopes of the linear predictor, or `None` for the oracle predictor.
    fn linear_predictor(self) -> Option<(f64, [f64; 3])> {
        match self {
            Scenario::A => None,
            Scenario::B | Scenario::E => Some((0.0, [1.4, 1.0, 1.4])),
            Scenario::C => Some((-1.0, [-3.0, 0.0, 0.5])),
            Scenario::D => Some((0.0, [1.0, 0.0, 0.0])),
        }
    }

    pub fn predictor(self, x: &[f64]) -> f64 {
        match self.linear_predictor() {
            None => mu_star(x),
            Some((c0, c)) => c0 + c[0] * x[0] + c[1] * x[1] + c[2] * x[2],
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Scenario::A),
            "B" => Ok(Scenario::B),
            "C" => Ok(Scenario::C),
            "D" => Ok(Scenario::D),
            "E" => Ok(Scenario::E),
            _ => Err(Error::Parameter(format!("unknown scenario `{s}`"))),
        }
    }
}

/// How the efficient estimator's nuisances are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceMode {
    /// Flexible learners (the configured defaults).
    #[default]
    Consistent,
    /// Inconsistent conditional risk: a fixed wrong function in Scenarios A
    /// and D, a linear-only learner otherwise.
    MisRisk,
    /// Inconsistent propensity (covariate shift only), constructed likewise.
    MisPropensity,
    /// Conditional risk fixed at 1 + x₁² + x₂ in every scenario.
    FixedRisk,
    /// Target propensity fixed at 0.5 in every scenario (covariate shift only).
    FixedPropensity,
}

impl FromStr for NuisanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consistent" => Ok(Self::Consistent),
            "misspecified" | "mis_risk" => Ok(Self::MisRisk),
            "mis_propensity" => Ok(Self::MisPropensity),
            "fixed_risk" => Ok(Self::FixedRisk),
            "fixed_propensity" => Ok(Self::FixedPropensity),
            _ => Err(Error::Parameter(format!("unknown nuisance mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// `xconshift` or `covshift`.
    pub condition: SpecialKind,
    pub scenario: Scenario,
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub nuisance: NuisanceMode,
}

impl ScenarioConfig {
    fn check(&self) -> Result<()> {
        if !matches!(self.condition, SpecialKind::Xconshift | SpecialKind::Covshift) {
            return Err(Error::Parameter(format!(
                "simulations exist for xconshift and covshift, not {}",
                self.condition
            )));
        }
        if self.n == 0 {
            return Err(Error::Parameter("n must be positive".into()));
        }
        if self.condition == SpecialKind::Xconshift && matches!(self.nuisance, NuisanceMode::MisPropensity | NuisanceMode::FixedPropensity) {
            return Err(Error::Parameter("concept shift has no propensity nuisance".into()));
        }
        Ok(())
    }
}

pub fn mu_star(x: &[f64]) -> f64 {
    x[0] + x[1] + x[2] + 0.4 * x[0] * x[2] - 0.5 * x[1] * x[2] + (x[0] + x[2]).sin()
}

/// P(A = 1 | X = x) under the feature-dependent population mechanism.
pub fn source_probability(x: &[f64]) -> f64 {
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    expit((x1 + x2 * x3).cos() + 2.0 * x1 * x1 * x2 * x2 + 3.0 * (x1 * x3).abs() + x2.abs() * (0.5 - x3))
}

/// Source-population outcome mean in covariate-shift Scenario E.
pub fn shifted_mean(x: &[f64]) -> f64 {
    1.0 + 0.5 * x[0] - 1.5 * x[1] + x[0] * x[2] - 1.3 * x[1] * x[2] * x[2]
}

/// Fixed wrong conditional risk used by the misspecified modes.
pub fn wrong_risk(x: &[f64]) -> f64 {
    1.0 + x[0] * x[0] + x[1]
}

fn draw_x(r: &mut ChaCha8Rng) -> [f64; 3] {
    [StandardNormal.sample(r), StandardNormal.sample(r), StandardNormal.sample(r)]
}

fn assemble(pop: Vec<i64>, xs: Vec<[f64; 3]>, y: Vec<f64>, scenario: Scenario) -> Dataset {
    let pred = xs.iter().map(|x| scenario.predictor(x)).collect();
    let mut cols: Vec<(String, Vec<f64>)> = (0..3).map(|j| (FEATURES[j].to_string(), xs.iter().map(|x| x[j]).collect())).collect();
    cols.push((OUTCOME.to_string(), y));
    cols.push((PREDICTION.to_string(), pred));
    Dataset::new(POPULATION, pop, cols).expect("generated columns have equal length")
}

/// Concept shift in the features: A ~ Bernoulli(0.9) independent of X in
/// Scenarios A–D and feature-dependent in E; source outcomes are missing.
pub fn gen_xconshift_scenario(cfg: &ScenarioConfig) -> Dataset {
    let mut r = stream(cfg.seed);
    let sd = cfg.scenario.noise_sd();
    let (mut pop, mut xs, mut y) = (Vec::with_capacity(cfg.n), Vec::with_capacity(cfg.n), Vec::with_capacity(cfg.n));
    for _ in 0..cfg.n {
        let x = draw_x(&mut r);
        let p1 = if cfg.scenario == Scenario::E { source_probability(&x) } else { 0.9 };
        let a = i64::from(r.random::<f64>() < p1);
        let eps: f64 = StandardNormal.sample(&mut r);
        y.push(if a == 0 { mu_star(&x) + sd * eps } else { f64::NAN });
        pop.push(a);
        xs.push(x);
    }
    assemble(pop, xs, y, cfg.scenario)
}

/// Covariate shift: A depends on X through [`source_probability`] in every
/// scenario; outcomes ignore A except in Scenario E, where source outcomes
/// follow [`shifted_mean`] with unit noise.
pub fn gen_covshift_scenario(cfg: &ScenarioConfig) -> Dataset {
    let mut r = stream(cfg.seed);
    let sd = cfg.scenario.noise_sd();
    let (mut pop, mut xs, mut y) = (Vec::with_capacity(cfg.n), Vec::with_capacity(cfg.n), Vec::with_capacity(cfg.n));
    for _ in 0..cfg.n {
        let x = draw_x(&mut r);
        let a = i64::from(r.random::<f64>() < source_probability(&x));
        let eps: f64 = StandardNormal.sample(&mut r);
        let value = if cfg.scenario == Scenario::E && a == 1 {
            shifted_mean(&x) + eps
        } else {
            mu_star(&x) + sd * eps
        };
        y.push(value);
        pop.push(a);
        xs.push(x);
    }
    assemble(pop, xs, y, cfg.scenario)
}

pub fn generate(cfg: &ScenarioConfig) -> Result<Dataset> {
    cfg.check()?;
    Ok(match cfg.condition {
        SpecialKind::Xconshift => gen_xconshift_scenario(cfg),
        _ => gen_covshift_scenario(cfg),
    })
}

pub fn scenario_loss() -> LossSpec {
    LossSpec::squared_error(OUTCOME, PREDICTION)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthMethod {
    ClosedForm,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub value: f64,
    /// Monte Carlo standard error (0 for closed forms).
    pub se: f64,
    pub method: TruthMethod,
}

/// E[(μ(X) − f(X))²] + σ² for linear f under X ~ N(0, I).
fn closed_form_risk(scenario: Scenario) -> f64 {
    let s2 = scenario.noise_sd().powi(2);
    match scenario.linear_predictor() {
        None => s2,
        Some((c0, c)) => {
            let e = (-1.0f64).exp();
            c0 * c0 + c.iter().map(|ci| (1.0 - ci).powi(2)).sum::<f64>() + 0.41 + (1.0 - (-4.0f64).exp()) / 2.0 + 2.0 * e * (2.0 - c[0] - c[2]) + s2
        }
    }
}

/// Importance-weighted oracle: target features are N(0, I) tilted by
/// P(A = 0 | x), so r = E[w h] / E[w] with h the conditional risk.
pub fn oracle_risk(scenario: Scenario, draws: usize, seed: u64) -> Truth {
    let mut r = stream(seed);
    let s2 = scenario.noise_sd().powi(2);
    let (mut w, mut h) = (Vec::with_capacity(draws), Vec::with_capacity(draws));
    for _ in 0..draws {
        let x = draw_x(&mut r);
        w.push(1.0 - source_probability(&x));
        h.push((mu_star(&x) - scenario.predictor(&x)).powi(2) + s2);
    }
    let sw = stable_sum(w.iter().copied());
    let value = stable_sum(w.iter().zip(&h).map(|(a, b)| a * b)) / sw;
    // Delta-method standard error of the ratio estimator.
    let m = draws as f64;
    let wbar = sw / m;
    let resid = stable_sum(w.iter().zip(&h).map(|(a, b)| (a * (b - value)).powi(2))) / m;
    Truth {
        value,
        se: (resid / m).sqrt() / wbar,
        method: TruthMethod::MonteCarlo,
    }
}

/// True target risk of the scenario's predictor.
pub fn true_risk(condition: SpecialKind, scenario: Scenario, draws: usize, seed: u64) -> Truth {
    let tilted = condition == SpecialKind::Covshift || scenario == Scenario::E;
    if tilted {
        oracle_risk(scenario, draws, seed)
    } else {
        Truth {
            value: closed_form_risk(scenario),
            se: 0.0,
            method: TruthMethod::ClosedForm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Nonparametric,
    /// The condition's cross-fit estimator under the configured nuisance mode.
    Efficient,
    /// Reports the true risk with zero standard error.
    Oracle,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Nonparametric => "np",
            Self::Efficient => "efficient",
            Self::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub scenario: ScenarioConfig,
    pub reps: usize,
    pub estimators: Vec<EstimatorKind>,
    pub folds: usize,
    pub alpha: f64,
    /// Learners for the consistent nuisance fits.
    pub classifier: LearnerSpec,
    pub regressor: LearnerSpec,
    /// Also compute the plug-in analytic efficiency gain in each replicate.
    #[serde(default)]
    pub analytic_gain: bool,
    /// Worker threads (`None` = all available cores).
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_oracle_draws")]
    pub oracle_draws: usize,
}

fn default_oracle_draws() -> usize {
    ORACLE_DRAWS
}

impl MonteCarloConfig {
    pub fn new(scenario: ScenarioConfig, reps: usize) -> Self {
        Self {
            scenario,
            reps,
            estimators: vec![EstimatorKind::Nonparametric, EstimatorKind::Efficient],
            folds: 5,
            alpha: 0.05,
            classifier: LearnerSpec::default_classifier(),
            regressor: LearnerSpec::default_regressor(),
            analytic_gain: false,
            threads: None,
            oracle_draws: ORACLE_DRAWS,
        }
    }

    /// Estimator settings for one replicate.
    pub fn special_config(&self, seed: u64) -> SpecialConfig {
        let s = &self.scenario;
        let linear_fit = !matches!(s.scenario, Scenario::A | Scenario::D);
        let mut cfg = SpecialConfig {
            folds: self.folds,
            seed,
            alpha: self.alpha,
            classifier: self.classifier.clone(),
            regressor: self.regressor.clone(),
            ..SpecialConfig::default()
        };
        let risk: FixedFn = Arc::new(wrong_risk);
        let half: FixedFn = Arc::new(|_: &[f64]| 0.5);
        match s.nuisance {
            NuisanceMode::Consistent => {}
            NuisanceMode::MisRisk if linear_fit => cfg.regressor = LearnerSpec::LeastSquares { degree: 1 },
            NuisanceMode::MisPropensity if linear_fit => cfg.classifier = LearnerSpec::Logistic { penalty: 0.0, degree: 1 },
            NuisanceMode::MisRisk | NuisanceMode::FixedRisk => {
                cfg.overrides = SpecialOverrides { risk: Some(risk), ..cfg.overrides };
            }
            NuisanceMode::MisPropensity | NuisanceMode::FixedPropensity => {
                cfg.overrides = SpecialOverrides { propensity: Some(half), ..cfg.overrides };
            }
        }
        cfg
    }
}

/// One estimator's output in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub rep: usize,
    pub seed: u64,
    pub estimator: String,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub covered: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub estimator: String,
    pub reps: usize,
    pub excluded: usize,
    pub mean_estimate: f64,
    /// Mean error (estimate − truth).
    pub bias: f64,
    pub sd: f64,
    pub mse: f64,
    /// n · MSE.
    pub scaled_mse: f64,
    pub coverage: f64,
    pub mean_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRatio {
    pub numerator: String,
    pub denominator: String,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub level: f64,
    pub reps: usize,
    pub rejection_rate: f64,
    /// Rejection rate of the influence-difference variant of the statistic.
    pub influence_difference_rejection_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainMetrics {
    pub reps: usize,
    /// Mean over replicates of the plug-in closed-form gain.
    pub analytic: f64,
    /// 1 − var(efficient)/var(np) over replicates.
    pub empirical: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub config: MonteCarloConfig,
    pub truth: Truth,
    pub estimators: Vec<EstimatorMetrics>,
    pub variance_ratios: Vec<VarianceRatio>,
    pub specification_test: Option<TestMetrics>,
    pub gain: Option<GainMetrics>,
    pub replicates: Vec<ReplicateRecord>,
}

impl PartialEq for MonteCarloConfig {
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_value(self).ok() == serde_json::to_value(other).ok()
    }
}

struct ReplicateOutput {
    records: Vec<ReplicateRecord>,
    test_reject: Option<(bool, bool)>,
    gain: Option<f64>,
}

fn run_replicate(cfg: &MonteCarloConfig, truth: &Truth, rep: usize) -> ReplicateOutput {
    let seed = derive_seed(cfg.scenario.seed, &[ROLE_REPLICATE, rep as u64]);
    let scen = ScenarioConfig {
        seed: derive_seed(seed, &[0]),
        ..cfg.scenario
    };
    let data = generate(&scen).expect("scenario validated before the run");
    let loss = evaluate_loss(&scenario_loss(), &data).expect("scenario columns exist");
    let label = scenario_loss().to_string();
    let est_cfg = cfg.special_config(derive_seed(seed, &[1]));
    let cond = SpecialCondition::new(cfg.scenario.condition, &FEATURES, OUTCOME);

    let mut results: Vec<(EstimatorKind, Result<RiskEstimate>)> = Vec::new();
    for &kind in &cfg.estimators {
        let r = match kind {
            EstimatorKind::Nonparametric => nonparametric_from_values(&data, &loss, &label, cfg.alpha),
            EstimatorKind::Efficient => special_multi(&cond, &data, &[(label.clone(), loss.clone())], &est_cfg).map(|mut v| v.remove(0)),
            EstimatorKind::Oracle => Ok(RiskEstimate {
                method: "oracle".into(),
                estimate: truth.value,
                se: 0.0,
                variance: 0.0,
                ci: [truth.value, truth.value],
                alpha: cfg.alpha,
                n: data.n_rows(),
                folds: Vec::new(),
                diagnostics: Default::default(),
                sample_id: String::new(),
                loss: label.clone(),
                influence: Vec::new(),
            }),
        };
        results.push((kind, r));
    }
    let find = |k: EstimatorKind| results.iter().find(|(kind, _)| *kind == k).and_then(|(_, r)| r.as_ref().ok());
    let test_reject = match (find(EstimatorKind::Efficient), find(EstimatorKind::Nonparametric)) {
        (Some(e), Some(np)) => specification_test(e, np).ok().map(|t| (t.p_value < 0.05, t.influence_difference_p_value < 0.05)),
        _ => None,
    };
    let gain = if cfg.analytic_gain {
        plugin_moments(&cond, &data, &loss, &est_cfg)
            .and_then(|m| efficiency_gain(cond.kind, &m))
            .ok()
    } else {
        None
    };
    let records = results
        .into_iter()
        .map(|(kind, r)| match r {
            Ok(e) => ReplicateRecord {
                rep,
                seed,
                estimator: kind.name().into(),
                estimate: Some(e.estimate),
                se: Some(e.se),
                covered: Some(e.ci[0] <= truth.value && truth.value <= e.ci[1]),
                error: None,
            },
            Err(err) => ReplicateRecord {
                rep,
                seed,
                estimator: kind.name().into(),
                estimate: None,
                se: None,
                covered: None,
                error: Some(err.to_string()),
            },
        })
        .collect();
    ReplicateOutput { records, test_reject, gain }
}

fn summarize(name: &str, records: &[&ReplicateRecord], truth: f64, n: usize) -> EstimatorMetrics {
    let ok: Vec<&&ReplicateRecord> = records.iter().filter(|r| r.estimate.is_some()).collect();
    let est: Vec<f64> = ok.iter().map(|r| r.estimate.unwrap()).collect();
    let reps = est.len();
    let errors: Vec<f64> = est.iter().map(|e| e - truth).collect();
    let mse = if reps > 0 { stable_sum(errors.iter().map(|e| e * e)) / reps as f64 } else { f64::NAN };
    EstimatorMetrics {
        estimator: name.to_string(),
        reps,
        excluded: records.len() - reps,
        mean_estimate: mean(&est),
        bias: mean(&errors),
        sd: if reps > 1 { sample_variance(&est).sqrt() } else { 0.0 },
        mse,
        scaled_mse: n as f64 * mse,
        coverage: mean(&ok.iter().map(|r| f64::from(u8::from(r.covered.unwrap()))).collect::<Vec<_>>()),
        mean_se: mean(&ok.iter().map(|r| r.se.unwrap()).collect::<Vec<_>>()),
    }
}

/// Runs `reps` replicates of the configured design. Results are independent
/// of the thread count.
pub fn monte_carlo_run(cfg: &MonteCarloConfig) -> Result<MetricsTable> {
    cfg.scenario.check()?;
    if cfg.reps == 0 {
        return Err(Error::Parameter("reps must be at least 1".into()));
    }
    if cfg.estimators.is_empty() {
        return Err(Error::Parameter("no estimators requested".into()));
    }
    let truth = true_risk(cfg.scenario.condition, cfg.scenario.scenario, cfg.oracle_draws, derive_seed(cfg.scenario.seed, &[ROLE_ORACLE]));
    let run = || -> Vec<ReplicateOutput> { (0..cfg.reps).into_par_iter().map(|rep| run_replicate(cfg, &truth, rep)).collect() };
    let outputs = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };

    let replicates: Vec<ReplicateRecord> = outputs.iter().flat_map(|o| o.records.iter().cloned()).collect();
    let n = cfg.scenario.n;
    let estimators: Vec<EstimatorMetrics> = cfg
        .estimators
        .iter()
        .map(|k| {
            let recs: Vec<&ReplicateRecord> = replicates.iter().filter(|r| r.estimator == k.name()).collect();
            summarize(k.name(), &recs, truth.value, n)
        })
        .collect();
    let mut variance_ratios = Vec::new();
    for a in &estimators {
        for b in &estimators {
            if a.estimator != b.estimator && b.sd > 0.0 && a.estimator != "np" && b.estimator == "np" {
                variance_ratios.push(VarianceRatio {
                    numerator: a.estimator.clone(),
                    denominator: b.estimator.clone(),
                    ratio: (a.sd / b.sd).powi(2),
                });
            }
        }
    }
    let tests: Vec<(bool, bool)> = outputs.iter().filter_map(|o| o.test_reject).collect();
    let rate = |pick: fn(&(bool, bool)) -> bool| tests.iter().filter(|t| pick(t)).count() as f64 / tests.len() as f64;
    let specification_test = (!tests.is_empty()).then(|| TestMetrics {
        level: 0.05,
        reps: tests.len(),
        rejection_rate: rate(|t| t.0),
        influence_difference_rejection_rate: rate(|t| t.1),
    });
    let gains: Vec<f64> = outputs.iter().filter_map(|o| o.gain).collect();
    let gain = (!gains.is_empty()).then(|| GainMetrics {
        reps: gains.len(),
        analytic: mean(&gains),
        empirical: variance_ratios.iter().find(|v| v.numerator == "efficient").map(|v| 1.0 - v.ratio),
    });
    Ok(MetricsTable {
        config: cfg.clone(),
        truth,
        estimators,
        variance_ratios,
        specification_test,
        gain,
        replicates,
    })
}

impl MetricsTable {
    /// Aligned plain-text summary.
    pub fn to_text(&self) -> String {
        let s = &self.config.scenario;
        let mut out = format!(
            "{} scenario {} (n = {}, reps = {}, nuisance = {:?}); true risk {:.6} (se {:.2e})\n",
            s.condition, s.scenario, s.n, self.config.reps, s.nuisance, self.truth.value, self.truth.se
        );
        out.push_str(&format!(
            "{:<10} {:>5} {:>5} {:>12} {:>12} {:>12} {:>12} {:>9} {:>12}\n",
            "estimator", "reps", "excl", "mean", "bias", "sd", "n*mse", "coverage", "mean se"
        ));
        for e in &self.estimators {
            out.push_str(&format!(
                "{:<10} {:>5} {:>5} {:>12.6} {:>12.6} {:>12.6} {:>12.4} {:>9.3} {:>12.6}\n",
                e.estimator, e.reps, e.excluded, e.mean_estimate, e.bias, e.sd, e.scaled_mse, e.coverage, e.mean_se
            ));
        }
        for v in &self.variance_ratios {
            out.push_str(&format!("variance ratio {}/{}: {:.4}\n", v.numerator, v.denominator, v.ratio));
        }
        if let Some(t) = &self.specification_test {
            out.push_str(&format!(
                "specification test rejection rate at {}: {:.3} ({} reps; influence-difference variant {:.3})\n",
                t.level, t.rejection_rate, t.reps, t.influence_difference_rejection_rate
            ));
        }
        if let Some(g) = &self.gain {
            out.push_str(&format!("analytic gain {:.4}", g.analytic));
            if let Some(e) = g.empirical {
                out.push_str(&format!(", empirical gain {e:.4}"));
            }
            out.push('\n');
        }
        out
    }

    /// Writes one CSV row per replicate and estimator.
    pub fn write_replicates_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["rep", "seed", "estimator", "estimate", "se", "covered", "error"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for r in &self.replicates {
            w.write_record([
                r.rep.to_string(),
                r.seed.to_string(),
                r.estimator.clone(),
                opt(r.estimate),
                opt(r.se),
                r.covered.map(|c| c.to_string()).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

//! Simplified cross-fit estimators for the four two-population shift
//! conditions, plus closed-form efficiency gains over the target-only mean.
//!
//! * concept shift in the features (X ⟂ A): fold estimate
//!   `mean{ 1(A=0)/ρ̂ (ℓ − Ê(X)) + Ê(X) }`, with Ê regressing ℓ on X among
//!   target rows;
//! * covariate shift (Y ⟂ A | X): fold estimate
//!   `(1/ρ̂) mean{ ĝ(X)(ℓ − L̂(X)) + 1(A=0) L̂(X) }`, with ĝ = P(A = 0 | X);
//! * the label variants swap the roles of X and Y.
//!
//! Each estimator fits its nuisances with the same learners and seeds the
//! generic sequential engine would use for the corresponding shift
//! specification, so the two agree to rounding error.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{evaluate_loss, make_folds, Dataset, FoldPlan, LossSpec, ShiftSpec};
use crate::engine::{Diagnostics, EngineConfig, FixedFn, FoldEstimate, RiskEstimate};
use crate::error::{Error, Result};
use crate::learners::{fit_classifier, fit_regressor, odds_from_probability, LearnerSpec, Task, DEFAULT_ODDS_EPS};
use crate::rng::{learner_seed, ROLE_ODDS, ROLE_REGRESSION};
use crate::stats::stable_sum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpecialKind {
    /// The feature marginal is shared: X ⟂ A.
    Xconshift,
    /// The label marginal is shared: Y ⟂ A.
    Yconshift,
    /// The outcome law given features is shared: Y ⟂ A | X.
    Covshift,
    /// The feature law given the label is shared: X ⟂ A | Y.
    Labelshift,
}

impl SpecialKind {
    pub const ALL: [SpecialKind; 4] = [Self::Xconshift, Self::Yconshift, Self::Covshift, Self::Labelshift];

    pub fn name(self) -> &'static str {
        match self {
            Self::Xconshift => "xconshift",
            Self::Yconshift => "yconshift",
            Self::Covshift => "covshift",
            Self::Labelshift => "labelshift",
        }
    }

    /// Concept-shift family (one nuisance) versus conditional family (two).
    pub fn is_concept(self) -> bool {
        matches!(self, Self::Xconshift | Self::Yconshift)
    }

    /// Whether the first conditioning block is the label rather than the features.
    pub fn label_first(self) -> bool {
        matches!(self, Self::Yconshift | Self::Labelshift)
    }
}

impl fmt::Display for SpecialKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpecialKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown shift condition `{s}`")))
    }
}

/// A named two-population shift condition with its column roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialCondition {
    pub kind: SpecialKind,
    pub x: Vec<String>,
    pub y: String,
}

impl SpecialCondition {
    pub fn new(kind: SpecialKind, x: &[&str], y: &str) -> Self {
        Self {
            kind,
            x: x.iter().map(|s| s.to_string()).collect(),
            y: y.to_string(),
        }
    }

    /// Columns of the first conditioning block (X, or Y for the label variants).
    pub fn first_block(&self) -> Vec<String> {
        if self.kind.label_first() {
            vec![self.y.clone()]
        } else {
            self.x.clone()
        }
    }

    fn second_block(&self) -> Vec<String> {
        if self.kind.label_first() {
            self.x.clone()
        } else {
            vec![self.y.clone()]
        }
    }

    /// The equivalent two-level sequential specification.
    pub fn shift_spec(&self) -> ShiftSpec {
        let sources = if self.kind.is_concept() {
            vec![vec![0, 1], vec![0]]
        } else {
            vec![vec![0], vec![0, 1]]
        };
        ShiftSpec {
            k: 2,
            components: vec![self.first_block(), self.second_block()],
            sources,
            target_observed: true,
        }
    }
}

/// Variance for the concept-shift estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConceptVariance {
    /// Influence function that stays valid when Ê is inconsistent.
    #[default]
    Robust,
    /// Efficient influence function evaluated at the fitted Ê.
    Plain,
}

/// Rows used to fit the conditional risk L̂ for the conditional-family estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RiskFit {
    #[default]
    Pooled,
    TargetOnly,
}

/// Fixed nuisance functions of the first conditioning block.
#[derive(Clone, Default)]
pub struct SpecialOverrides {
    /// g = P(A = 0 | first block).
    pub propensity: Option<FixedFn>,
    /// Conditional risk Ê or L̂.
    pub risk: Option<FixedFn>,
}

impl fmt::Debug for SpecialOverrides {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpecialOverrides")
            .field("propensity", &self.propensity.is_some())
            .field("risk", &self.risk.is_some())
            .finish()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecialConfig {
    pub folds: usize,
    pub seed: u64,
    pub alpha: f64,
    pub classifier: LearnerSpec,
    pub regressor: LearnerSpec,
    pub odds_eps: f64,
    #[serde(default)]
    pub variance: ConceptVariance,
    #[serde(default)]
    pub risk_fit: RiskFit,
    #[serde(skip)]
    pub overrides: SpecialOverrides,
}

impl Default for SpecialConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            alpha: 0.05,
            classifier: LearnerSpec::default_classifier(),
            regressor: LearnerSpec::default_regressor(),
            odds_eps: DEFAULT_ODDS_EPS,
            variance: ConceptVariance::Robust,
            risk_fit: RiskFit::Pooled,
            overrides: SpecialOverrides::default(),
        }
    }
}

impl SpecialConfig {
    /// Engine settings that reproduce this estimator on the mapped specification.
    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            folds: self.folds,
            seed: self.seed,
            alpha: self.alpha,
            classifier: self.classifier.clone(),
            regressor: self.regressor.clone(),
            odds_eps: self.odds_eps,
            ..EngineConfig::default()
        }
    }

    fn method_tag(&self, kind: SpecialKind) -> String {
        match (kind.is_concept(), self.variance, self.risk_fit) {
            (true, ConceptVariance::Plain, _) => format!("{kind}-plain"),
            (false, _, RiskFit::TargetOnly) => format!("{kind}-target-fit"),
            _ => kind.to_string(),
        }
    }
}

/// Cross-fitted nuisance values on one fold.
struct FoldValues {
    rows: Vec<usize>,
    rho: f64,
    /// ĝ on the fold rows (all ones for the concept family).
    propensity: Vec<f64>,
    diag: Diagnostics,
}

fn check_condition(cond: &SpecialCondition, data: &Dataset, loss: &[f64]) -> Result<()> {
    if cond.x.is_empty() {
        return Err(Error::Validation("the condition needs at least one feature column".into()));
    }
    let pops = data.populations();
    if let Some(a) = pops.iter().find(|&&a| a != 0 && a != 1) {
        return Err(Error::Validation(format!(
            "{} expects populations {{0, 1}}, found label {a}",
            cond.kind
        )));
    }
    if !pops.contains(&0) {
        return Err(Error::Validation("no target (A = 0) rows".into()));
    }
    for c in cond.x.iter().chain(std::iter::once(&cond.y)) {
        data.column(c)?;
    }
    let first = cond.first_block();
    let second = cond.second_block();
    for i in 0..data.n_rows() {
        let target = data.pop()[i] == 0;
        // The concept family reads only the first block on source rows; the
        // conditional family reads everything on every row.
        let cols: Vec<&String> = if target || !cond.kind.is_concept() {
            first.iter().chain(&second).collect()
        } else {
            first.iter().collect()
        };
        for c in cols {
            if data.is_missing(i, c)? {
                return Err(Error::Missing { row: i, column: c.clone() });
            }
        }
        if (target || !cond.kind.is_concept()) && !loss[i].is_finite() {
            return Err(Error::Validation(format!("loss is undefined at row {i}")));
        }
    }
    Ok(())
}

fn out_rows(plan: &FoldPlan, v: usize) -> Vec<usize> {
    if plan.v == 1 {
        plan.fold(v)
    } else {
        plan.out_of_fold(v)
    }
}

fn fold_population(cond: &SpecialCondition, data: &Dataset, plan: &FoldPlan, v: usize, cfg: &SpecialConfig) -> Result<FoldValues> {
    let rows = plan.fold(v);
    let targets = rows.iter().filter(|&&i| data.pop()[i] == 0).count();
    let rho = targets as f64 / rows.len() as f64;
    if targets == 0 {
        return Err(Error::Degenerate(format!("fold {v} has no target rows")));
    }
    let mut diag = Diagnostics::default();
    let first = cond.first_block();
    let propensity = if cond.kind.is_concept() {
        vec![1.0; rows.len()]
    } else if let Some(g) = &cfg.overrides.propensity {
        let x = data.features(&first, &rows)?;
        (0..rows.len()).map(|j| g(x.row(j))).collect()
    } else {
        let fit = out_rows(plan, v);
        let labels: Vec<f64> = data.pop().iter().map(|&a| if a != 0 { 1.0 } else { 0.0 }).collect();
        let model = fit_classifier(&cfg.classifier, data, &first, &labels, &fit, learner_seed(cfg.seed, v, ROLE_ODDS, 1))?;
        let mut g = Vec::with_capacity(rows.len());
        for p in model.predict(data, &rows)? {
            let o = odds_from_probability(p, cfg.odds_eps)?;
            if o.clipped {
                diag.clipped += 1;
            }
            diag.record_odds(o.value);
            g.push(o.target_share());
        }
        g
    };
    if !cond.kind.is_concept() {
        let tiny = rows
            .iter()
            .zip(&propensity)
            .filter(|&(&i, &g)| data.pop()[i] == 0 && g <= cfg.odds_eps)
            .count();
        if tiny > 0 {
            diag.notes.push(format!(
                "fold {v}: estimated target propensity at or below {} on {tiny} target rows; weights may be unstable",
                cfg.odds_eps
            ));
        }
    }
    Ok(FoldValues { rows, rho, propensity, diag })
}

/// Ê or L̂ on the fold rows.
fn fold_risk(cond: &SpecialCondition, data: &Dataset, loss: &[f64], plan: &FoldPlan, v: usize, cfg: &SpecialConfig, rows: &[usize], diag: &mut Diagnostics) -> Result<Vec<f64>> {
    let first = cond.first_block();
    if let Some(f) = &cfg.overrides.risk {
        let x = data.features(&first, rows)?;
        return Ok((0..rows.len()).map(|j| f(x.row(j))).collect());
    }
    let target_only = cond.kind.is_concept() || cfg.risk_fit == RiskFit::TargetOnly;
    let fit: Vec<usize> = out_rows(plan, v)
        .into_iter()
        .filter(|&i| !target_only || data.pop()[i] == 0)
        .collect();
    if fit.is_empty() {
        return Err(Error::Validation(format!(
            "no out-of-fold rows available for the conditional-risk regression in fold {v}"
        )));
    }
    let model = fit_regressor(&cfg.regressor, data, &first, loss, &fit, learner_seed(cfg.seed, v, ROLE_REGRESSION, 1))?;
    let preds = model.predict(data, rows)?;
    diag.check_support(v, 1, &model, &preds);
    Ok(preds)
}

/// Fold estimate and influence values for one loss.
fn fold_terms(kind: SpecialKind, data: &Dataset, loss: &[f64], fv: &FoldValues, risk: &[f64], variance: ConceptVariance) -> (f64, Vec<f64>) {
    let m = fv.rows.len() as f64;
    let w = 1.0 / fv.rho;
    let is_target = |i: usize| data.pop()[i] == 0;
    if kind.is_concept() {
        let terms: Vec<f64> = fv
            .rows
            .iter()
            .zip(risk)
            .map(|(&i, &e)| if is_target(i) { e + w * (loss[i] - e) } else { e })
            .collect();
        let r = stable_sum(terms.iter().copied()) / m;
        let mean_risk = stable_sum(risk.iter().copied()) / m;
        let infl = fv
            .rows
            .iter()
            .zip(&terms)
            .map(|(&i, &t)| {
                let d = t - r;
                match variance {
                    ConceptVariance::Plain => d,
                    ConceptVariance::Robust => {
                        let indicator = if is_target(i) { 1.0 } else { 0.0 };
                        d + (mean_risk - r) / fv.rho * (indicator - fv.rho)
                    }
                }
            })
            .collect();
        (r, infl)
    } else {
        let terms: Vec<f64> = fv
            .rows
            .iter()
            .zip(risk)
            .zip(&fv.propensity)
            .map(|((&i, &l), &g)| {
                let base = if is_target(i) { w * l } else { 0.0 };
                if g != 0.0 {
                    base + g * w * (loss[i] - l)
                } else {
                    base
                }
            })
            .collect();
        let r = stable_sum(terms.iter().copied()) / m;
        let infl = fv
            .rows
            .iter()
            .zip(&terms)
            .map(|(&i, &t)| if is_target(i) { t - w * r } else { t })
            .collect();
        (r, infl)
    }
}

/// Estimates for several loss vectors sharing the folds and ĝ.
pub fn special_multi(cond: &SpecialCondition, data: &Dataset, losses: &[(String, Vec<f64>)], cfg: &SpecialConfig) -> Result<Vec<RiskEstimate>> {
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0, 1), got {}", cfg.alpha)));
    }
    cfg.classifier.validate(Task::Classification)?;
    cfg.regressor.validate(Task::Regression)?;
    for (_, l) in losses {
        if l.len() != data.n_rows() {
            return Err(Error::Validation("loss vector length differs from the number of rows".into()));
        }
        check_condition(cond, data, l)?;
    }
    let n = data.n_rows();
    let plan = make_folds(n, cfg.folds, cfg.seed)?;
    type FoldOut = (Vec<usize>, Vec<(f64, Vec<f64>, Diagnostics)>);
    let per_fold: Vec<FoldOut> = (0..plan.v)
        .into_par_iter()
        .map(|v| -> Result<FoldOut> {
            let fv = fold_population(cond, data, &plan, v, cfg)?;
            let results = losses
                .iter()
                .map(|(_, loss)| {
                    let mut diag = fv.diag.clone();
                    let risk = fold_risk(cond, data, loss, &plan, v, cfg, &fv.rows, &mut diag)?;
                    let (r, infl) = fold_terms(cond.kind, data, loss, &fv, &risk, cfg.variance);
                    Ok((r, infl, diag))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((fv.rows, results))
        })
        .collect::<Result<_>>()?;
    let sample_id = data.fingerprint();
    let mut out = Vec::with_capacity(losses.len());
    for (li, (label, _)) in losses.iter().enumerate() {
        let mut influence = vec![0.0; n];
        let mut folds = Vec::with_capacity(plan.v);
        let mut diag = Diagnostics::default();
        for (v, (rows, results)) in per_fold.iter().enumerate() {
            let (r, infl, d) = &results[li];
            for (&i, &x) in rows.iter().zip(infl) {
                influence[i] = x;
            }
            folds.push(FoldEstimate { v, size: rows.len(), r_v: *r });
            diag.merge(d.clone());
        }
        out.push(RiskEstimate::assemble(cfg.method_tag(cond.kind), label.clone(), sample_id.clone(), cfg.alpha, folds, influence, diag));
    }
    Ok(out)
}

pub fn special_estimate_values(cond: &SpecialCondition, data: &Dataset, loss: &[f64], label: &str, cfg: &SpecialConfig) -> Result<RiskEstimate> {
    Ok(special_multi(cond, data, &[(label.to_string(), loss.to_vec())], cfg)?.remove(0))
}

pub fn special_estimate(cond: &SpecialCondition, data: &Dataset, loss: &LossSpec, cfg: &SpecialConfig) -> Result<RiskEstimate> {
    let values = evaluate_loss(loss, data)?;
    special_estimate_values(cond, data, &values, &loss.to_string(), cfg)
}

fn with_kind(kind: SpecialKind, cond: &SpecialCondition) -> Result<()> {
    if cond.kind != kind {
        return Err(Error::Parameter(format!("expected a {kind} condition, got {}", cond.kind)));
    }
    Ok(())
}

/// Cross-fit estimator under concept shift in the features.
pub fn xconshift_estimate(cond: &SpecialCondition, data: &Dataset, loss: &LossSpec, cfg: &SpecialConfig) -> Result<RiskEstimate> {
    with_kind(SpecialKind::Xconshift, cond)?;
    special_estimate(cond, data, loss, cfg)
}

/// Cross-fit estimator under concept shift in the labels.
pub fn yconshift_estimate(cond: &SpecialCondition, data: &Dataset, loss: &LossSpec, cfg: &SpecialConfig) -> Result<RiskEstimate> {
    with_kind(SpecialKind::Yconshift, cond)?;
    special_estimate(cond, data, loss, cfg)
}

/// Cross-fit estimator under full-data covariate shift.
pub fn covshift_estimate(cond: &SpecialCondition, data: &Dataset, loss: &LossSpec, cfg: &SpecialConfig) -> Result<RiskEstimate> {
    with_kind(SpecialKind::Covshift, cond)?;
    special_estimate(cond, data, loss, cfg)
}

/// Cross-fit estimator under full-data label shift.
pub fn labelshift_estimate(cond: &SpecialCondition, data: &Dataset, loss: &LossSpec, cfg: &SpecialConfig) -> Result<RiskEstimate> {
    with_kind(SpecialKind::Labelshift, cond)?;
    special_estimate(cond, data, loss, cfg)
}

/// Moments entering the closed-form efficiency gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum GainMoments {
    /// ρ = P(A = 0); `within` = E[Var(ℓ | first block, A = 0)];
    /// `between` = E[(ℰ − r)²] with ℰ the conditional risk.
    Concept { rho: f64, within: f64, between: f64 },
    /// Pooled expectations with g = P(A = 0 | first block), V the conditional
    /// loss variance and L the conditional risk: E[g(1 − g)V], E[gV], E[g(L − r)²].
    Conditional { g_comp_v: f64, g_v: f64, g_bias: f64 },
}

/// Relative efficiency gain 1 − σ²_efficient / σ²_nonparametric.
pub fn efficiency_gain(kind: SpecialKind, moments: &GainMoments) -> Result<f64> {
    let (num, den) = match (kind.is_concept(), *moments) {
        (true, GainMoments::Concept { rho, within, between }) => {
            if !(0.0..=1.0).contains(&rho) {
                return Err(Error::Parameter(format!("target share {rho} outside [0, 1]")));
            }
            ((1.0 - rho) * between, within + between)
        }
        (false, GainMoments::Conditional { g_comp_v, g_v, g_bias }) => (g_comp_v, g_v + g_bias),
        _ => {
            return Err(Error::Parameter(format!("moments do not match the {kind} condition")));
        }
    };
    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::Domain("efficiency gain is undefined: zero denominator".into()));
    }
    Ok(num / den)
}

/// Plug-in moments from cross-fitted nuisances (Ê or ĝ, L̂) on every row.
pub fn plugin_moments(cond: &SpecialCondition, data: &Dataset, loss: &[f64], cfg: &SpecialConfig) -> Result<GainMoments> {
    check_condition(cond, data, loss)?;
    let n = data.n_rows();
    let plan = make_folds(n, cfg.folds, cfg.seed)?;
    let mut g = vec![0.0; n];
    let mut risk = vec![0.0; n];
    for v in 0..plan.v {
        let fv = fold_population(cond, data, &plan, v, cfg)?;
        let mut diag = Diagnostics::default();
        let rv = fold_risk(cond, data, loss, &plan, v, cfg, &fv.rows, &mut diag)?;
        for (j, &i) in fv.rows.iter().enumerate() {
            g[i] = fv.propensity[j];
            risk[i] = rv[j];
        }
    }
    let target: Vec<usize> = (0..n).filter(|&i| data.pop()[i] == 0).collect();
    let rho = target.len() as f64 / n as f64;
    let r = stable_sum(target.iter().map(|&i| loss[i])) / target.len() as f64;
    if cond.kind.is_concept() {
        let within = stable_sum(target.iter().map(|&i| (loss[i] - risk[i]).powi(2))) / target.len() as f64;
        let between = stable_sum(risk.iter().map(|e| (e - r).powi(2))) / n as f64;
        Ok(GainMoments::Concept { rho, within, between })
    } else {
        let mean = |f: &dyn Fn(usize) -> f64| stable_sum((0..n).map(f)) / n as f64;
        let resid2 = |i: usize| (loss[i] - risk[i]).powi(2);
        Ok(GainMoments::Conditional {
            g_comp_v: mean(&|i| g[i] * (1.0 - g[i]) * resid2(i)),
            g_v: mean(&|i| g[i] * resid2(i)),
            g_bias: mean(&|i| g[i] * (risk[i] - r).powi(2)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{crossfit_estimate_values, nonparametric_from_values, WeightMode};
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::sync::Arc;

    fn constant(c: f64) -> FixedFn {
        Arc::new(move |_: &[f64]| c)
    }

    fn cond(kind: SpecialKind) -> SpecialCondition {
        SpecialCondition::new(kind, &["x"], "y")
    }

    fn random_data(n: usize, seed: u64, binary_y: bool) -> (Dataset, Vec<f64>) {
        let mut r = rng::stream(seed);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let a: Vec<i64> = x.iter().map(|v| i64::from(r.random::<f64>() < 0.6 + 0.3 * v)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| {
                if binary_y {
                    f64::from(u8::from(r.random::<f64>() < 0.5 + 0.4 * v))
                } else {
                    v + r.random_range(-0.5..0.5)
                }
            })
            .collect();
        let loss = x.iter().zip(&y).map(|(a, b)| (b - 0.3 * a).powi(2)).collect();
        (Dataset::new("A", a, vec![("x".into(), x), ("y".into(), y)]).unwrap(), loss)
    }

    fn linear_cfg(seed: u64, folds: usize) -> SpecialConfig {
        SpecialConfig {
            folds,
            seed,
            classifier: LearnerSpec::Logistic { penalty: 0.0, degree: 1 },
            regressor: LearnerSpec::LeastSquares { degree: 1 },
            ..SpecialConfig::default()
        }
    }

    #[test]
    fn concept_hand_example() {
        let d = Dataset::new("A", vec![0, 1], vec![("x".into(), vec![0.0, 1.0]), ("y".into(), vec![0.0, f64::NAN])]).unwrap();
        let loss = vec![2.0, f64::NAN];
        let e_hat: FixedFn = Arc::new(|x: &[f64]| if x[0] == 0.0 { 1.0 } else { 3.0 });
        let cfg = SpecialConfig {
            folds: 1,
            overrides: SpecialOverrides { propensity: None, risk: Some(e_hat) },
            ..SpecialConfig::default()
        };
        let e = special_estimate_values(&cond(SpecialKind::Xconshift), &d, &loss, "l", &cfg).unwrap();
        assert_eq!(e.estimate, 3.0);
    }

    #[test]
    fn conditional_hand_example() {
        for kind in [SpecialKind::Covshift, SpecialKind::Labelshift] {
            let d = Dataset::new("A", vec![0, 1], vec![("x".into(), vec![0.0, 1.0]), ("y".into(), vec![0.0, 1.0])]).unwrap();
            let cfg = SpecialConfig {
                folds: 1,
                overrides: SpecialOverrides {
                    propensity: Some(constant(0.5)),
                    risk: Some(constant(0.0)),
                },
                ..SpecialConfig::default()
            };
            let e = special_estimate_values(&cond(kind), &d, &[2.0, 4.0], "l", &cfg).unwrap();
            assert!((e.estimate - 3.0).abs() < 1e-15, "{kind}");
        }
    }

    #[test]
    fn label_shift_with_only_target_rows_is_the_target_mean() {
        let (d, loss) = random_data(40, 2, true);
        let keep: Vec<usize> = (0..40).filter(|&i| d.pop()[i] == 0).collect();
        let td = d.select_rows(&keep);
        let tl: Vec<f64> = keep.iter().map(|&i| loss[i]).collect();
        let e = special_estimate_values(&cond(SpecialKind::Labelshift), &td, &tl, "l", &linear_cfg(1, 3)).unwrap();
        let mean = tl.iter().sum::<f64>() / tl.len() as f64;
        assert!((e.estimate - mean).abs() < 1e-12);
    }

    #[test]
    fn binary_label_concept_fold_value() {
        // Ê_Y from cell means of the target rows; one fold, fit in-sample.
        let y = vec![0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let a = vec![0, 0, 0, 0, 1, 1];
        let loss = vec![1.0, 3.0, 5.0, 9.0, f64::NAN, f64::NAN];
        let d = Dataset::new("A", a, vec![("x".into(), vec![f64::NAN; 6]), ("y".into(), y)]).unwrap();
        let d = {
            // Source rows carry no features for the label-concept estimator.
            let x = vec![0.1, 0.2, 0.3, 0.4, f64::NAN, f64::NAN];
            d.with_column("x", x).unwrap()
        };
        let cfg = SpecialConfig {
            folds: 1,
            regressor: LearnerSpec::LeastSquares { degree: 1 },
            ..SpecialConfig::default()
        };
        let e = special_estimate_values(&cond(SpecialKind::Yconshift), &d, &loss, "l", &cfg).unwrap();
        // Cell means: Ê(0) = 2, Ê(1) = 7; ρ̂ = 4/6.
        let rho = 4.0 / 6.0;
        let by_hand = ((1.0 - 2.0) / rho + 2.0 + (3.0 - 2.0) / rho + 2.0 + (5.0 - 7.0) / rho + 7.0 + (9.0 - 7.0) / rho + 7.0 + 2.0 + 7.0) / 6.0;
        assert!((e.estimate - by_hand).abs() < 1e-12);
    }

    #[test]
    fn constant_concept_risk_equals_nonparametric() {
        for kind in [SpecialKind::Xconshift, SpecialKind::Yconshift] {
            let (d, loss) = random_data(90, 7, false);
            let cfg = SpecialConfig {
                folds: 1,
                regressor: LearnerSpec::Constant,
                ..SpecialConfig::default()
            };
            let e = special_estimate_values(&cond(kind), &d, &loss, "l", &cfg).unwrap();
            let np = nonparametric_from_values(&d, &loss, "l", 0.05).unwrap();
            assert!((e.estimate - np.estimate).abs() < 1e-12);
        }
    }

    fn assert_reduction(kind: SpecialKind, seed: u64) {
        let (d, loss) = random_data(80, seed, kind.label_first());
        let c = cond(kind);
        let cfg = SpecialConfig {
            variance: ConceptVariance::Plain,
            ..linear_cfg(seed, 4)
        };
        let s = special_estimate_values(&c, &d, &loss, "l", &cfg).unwrap();
        let g = crossfit_estimate_values(&c.shift_spec(), &d, &loss, "l", &cfg.engine_config()).unwrap();
        assert!((s.estimate - g.estimate).abs() < 1e-12, "{kind}: {} vs {}", s.estimate, g.estimate);
        for (a, b) in s.influence.iter().zip(&g.influence) {
            assert!((a - b).abs() < 1e-10);
        }
        let ratio = crossfit_estimate_values(
            &c.shift_spec(),
            &d,
            &loss,
            "l",
            &EngineConfig {
                mode: WeightMode::Ratio,
                ..cfg.engine_config()
            },
        )
        .unwrap();
        assert!((ratio.estimate - g.estimate).abs() < 1e-12);
    }

    #[test]
    fn reductions_match_generic_engine() {
        for kind in SpecialKind::ALL {
            assert_reduction(kind, 11);
        }
    }

    #[test]
    fn robust_influence_sums_to_zero_per_fold() {
        let (d, loss) = random_data(100, 4, false);
        let cfg = linear_cfg(3, 5);
        let e = special_estimate_values(&cond(SpecialKind::Xconshift), &d, &loss, "l", &cfg).unwrap();
        let plan = make_folds(100, 5, 3).unwrap();
        for v in 0..5 {
            let s: f64 = plan.fold(v).iter().map(|&i| e.influence[i]).sum();
            assert!(s.abs() < 1e-10);
        }
        assert_eq!(e.method, "xconshift");
    }

    #[test]
    fn gain_examples() {
        let g = efficiency_gain(SpecialKind::Xconshift, &GainMoments::Concept { rho: 0.1, within: 0.0, between: 2.0 }).unwrap();
        assert!((g - 0.9).abs() < 1e-15);
        let g = efficiency_gain(SpecialKind::Xconshift, &GainMoments::Concept { rho: 0.1, within: 25.0, between: 0.0 }).unwrap();
        assert_eq!(g, 0.0);
        assert!(efficiency_gain(SpecialKind::Xconshift, &GainMoments::Concept { rho: 0.1, within: 0.0, between: 0.0 }).is_err());
        assert!(efficiency_gain(SpecialKind::Covshift, &GainMoments::Concept { rho: 0.1, within: 1.0, between: 1.0 }).is_err());
    }

    #[test]
    fn constant_propensity_gain_matches_monte_carlo_variance_ratio() {
        // g ≡ 0.5, X ~ N(0,1), ℓ = X + ε with ε ~ N(0,1): L = x, V = 1, r = 0.
        // Closed form: 0.25 / (0.5 + 0.5) = 0.25.
        let analytic = efficiency_gain(SpecialKind::Covshift, &GainMoments::Conditional { g_comp_v: 0.25, g_v: 0.5, g_bias: 0.5 }).unwrap();
        assert!((analytic - 0.25).abs() < 1e-15);
        let mut r = rng::stream(99);
        let (mut np, mut eff) = (0.0, 0.0);
        let draws = 100_000;
        let rho = 0.5;
        for _ in 0..draws {
            let x: f64 = StandardNormal.sample(&mut r);
            let e: f64 = StandardNormal.sample(&mut r);
            let target = r.random::<f64>() < 0.5;
            let l = x + e;
            let ind = if target { 1.0 } else { 0.0 };
            np += (ind / rho * l).powi(2);
            eff += (0.5 / rho * (l - x) + ind / rho * x).powi(2);
        }
        let mc = 1.0 - eff / np;
        assert!((mc - analytic).abs() < 0.02, "{mc}");
    }

    #[test]
    fn conditional_family_requires_binary_populations() {
        let d = Dataset::new("A", vec![0, 2], vec![("x".into(), vec![0.0, 1.0]), ("y".into(), vec![0.0, 1.0])]).unwrap();
        assert!(special_estimate_values(&cond(SpecialKind::Covshift), &d, &[1.0, 1.0], "l", &SpecialConfig::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn reductions_hold_on_random_data(seed in 0u64..10_000, k in 0usize..4) {
            assert_reduction(SpecialKind::ALL[k], seed);
        }

        #[test]
        fn gains_lie_in_unit_interval(rho in 0.0f64..1.0, w in 0.0f64..10.0, b in 0.0f64..10.0, g in 0.0f64..1.0, v in 0.01f64..5.0) {
            if w + b > 0.0 {
                let x = efficiency_gain(SpecialKind::Xconshift, &GainMoments::Concept { rho, within: w, between: b }).unwrap();
                prop_assert!((0.0..=1.0).contains(&x));
            }
            let c = efficiency_gain(SpecialKind::Labelshift, &GainMoments::Conditional { g_comp_v: g * (1.0 - g) * v, g_v: g * v, g_bias: g * b }).unwrap_or(0.0);
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }
}

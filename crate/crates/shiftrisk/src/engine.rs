//! Cross-fit estimation of the target risk E[ℓ(Z) | A = 0] under sequential
//! conditional invariance, and the nonparametric target-only baseline.
//!
//! For each fold the engine fits, on out-of-fold rows, the conditional odds
//! θ̂^k of the relevant source populations versus the target given Z̄_k, and
//! the backward chain of conditional mean losses ℓ̂^{K−1}, …, ℓ̂^1. Marginal
//! population frequencies π̂ come from the fold itself (or, optionally, from
//! the other folds). The fold estimate averages the pseudo-loss
//!
//! ```text
//! T(o) = Σ_{k=2..K} 1(a ∈ S′_k) w^{k−1}(z̄_{k−1}) [ℓ^k(z̄_k) − ℓ^{k−1}(z̄_{k−1})]
//!        + 1(a ∈ S′_1) w^0 ℓ^1(z_1),
//! ```
//!
//! where in odds mode w^{k−1} = 1/(π⁰(1 + θ^{k−1})) and in ratio mode
//! w^{k−1} = λ^{k−1}/Σ_{b∈S′_k} π^b with λ a density ratio of the target to
//! the relevant sources. The per-row influence value is T(o) − 1(a ∈ S′_1) w⁰ r̂_v.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{evaluate_loss, make_folds, validate_plan, Dataset, FoldPlan, LossSpec, ShiftSpec};
use crate::error::{Error, Result};
use crate::learners::{fit_classifier, fit_regressor, odds_from_probability, FittedModel, LearnerSpec, DEFAULT_ODDS_EPS};
use crate::rng::{learner_seed, ROLE_ODDS, ROLE_RATIO, ROLE_REGRESSION};
use crate::stats::{stable_sum, z_crit};

/// User-supplied nuisance function evaluated on the Z̄_k feature values.
pub type FixedFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// How level weights are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Conditional odds θ^k (requires the target to be observed at every level).
    #[default]
    Odds,
    /// Density ratios λ^k, derived from odds where the target is a relevant
    /// population, from a target-versus-source classifier otherwise, or user-supplied.
    Ratio,
}

/// Where the marginal population probabilities come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PiMode {
    #[default]
    InFold,
    OutOfFold,
}

/// Fixed functions replacing fitted nuisances (keyed by level k).
#[derive(Clone, Default)]
pub struct Overrides {
    /// θ^k as a function of Z̄_k.
    pub odds: BTreeMap<usize, FixedFn>,
    /// λ^k as a function of Z̄_k.
    pub ratios: BTreeMap<usize, FixedFn>,
    /// ℓ^k as a function of Z̄_k.
    pub regressions: BTreeMap<usize, FixedFn>,
}

impl fmt::Debug for Overrides {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Overrides")
            .field("odds", &self.odds.keys().collect::<Vec<_>>())
            .field("ratios", &self.ratios.keys().collect::<Vec<_>>())
            .field("regressions", &self.regressions.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Settings for [`crossfit_estimate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineConfig {
    pub folds: usize,
    pub seed: u64,
    /// CI miscoverage level.
    pub alpha: f64,
    pub classifier: LearnerSpec,
    pub regressor: LearnerSpec,
    #[serde(default)]
    pub mode: WeightMode,
    #[serde(default)]
    pub pi: PiMode,
    pub odds_eps: f64,
    #[serde(skip)]
    pub overrides: Overrides,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            alpha: 0.05,
            classifier: LearnerSpec::default_classifier(),
            regressor: LearnerSpec::default_regressor(),
            mode: WeightMode::Odds,
            pi: PiMode::InFold,
            odds_eps: DEFAULT_ODDS_EPS,
            overrides: Overrides::default(),
        }
    }
}

/// A nuisance function: identically zero, fitted, or fixed.
#[derive(Clone)]
pub enum NuisanceModel {
    Zero,
    Fitted(FittedModel),
    Fixed(FixedFn),
}

impl fmt::Debug for NuisanceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NuisanceModel::Zero => write!(f, "Zero"),
            NuisanceModel::Fitted(m) => write!(f, "Fitted({:?})", m.chosen),
            NuisanceModel::Fixed(_) => write!(f, "Fixed(..)"),
        }
    }
}

impl NuisanceModel {
    fn raw(&self, data: &Dataset, cols: &[String], rows: &[usize]) -> Result<Vec<f64>> {
        match self {
            NuisanceModel::Zero => Ok(vec![0.0; rows.len()]),
            NuisanceModel::Fitted(m) => m.predict(data, rows),
            NuisanceModel::Fixed(f) => {
                let x = data.features(cols, rows)?;
                Ok((0..rows.len()).map(|i| f(x.row(i))).collect())
            }
        }
    }
}

/// Source of the density ratio λ^k in ratio mode.
#[derive(Clone, Debug)]
pub enum RatioModel {
    /// λ^k = Σ_{S′_{k+1}} π / (π⁰ (1 + θ^k)) using the level's odds model.
    FromOdds,
    /// Classifier of 1(A ≠ 0) within {0} ∪ S′_{k+1}, turned into
    /// λ^k = Σ_{S′_{k+1}} π / (π⁰ θ^k).
    TargetClassifier(NuisanceModel),
    Fixed(NuisanceModel),
}

/// Population-side nuisances for one fold (shared across losses).
#[derive(Clone, Debug)]
pub struct PopulationNuisance {
    pub fold: usize,
    /// π̂^a for every label in the data.
    pub pi: BTreeMap<i64, f64>,
    /// θ̂⁰ = Σ_{a∈S_1} π̂^a / π̂⁰ (infinite when π̂⁰ = 0).
    pub theta0: f64,
    /// θ̂^k for k = 1..K−1 (index k − 1).
    pub odds: Vec<NuisanceModel>,
    /// λ̂^k for k = 1..K−1 in ratio mode (empty in odds mode).
    pub ratios: Vec<RatioModel>,
    pub mode: WeightMode,
    pub odds_eps: f64,
}

/// All nuisances for one fold and one loss.
#[derive(Clone, Debug)]
pub struct FoldNuisance {
    pub population: Arc<PopulationNuisance>,
    /// ℓ̂^k for k = 1..K−1 (index k − 1); ℓ̂^K is the loss itself.
    pub chain: Vec<NuisanceModel>,
}

#[derive(Clone, Debug)]
pub struct NuisanceFits {
    pub folds: Vec<FoldNuisance>,
}

/// Support check for one fitted regression level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportCheck {
    pub fold: usize,
    pub level: usize,
    /// Range of predictions on the rows that consume them.
    pub predicted: [f64; 2],
    /// Range of the training targets.
    pub training: [f64; 2],
    /// Predictions outside the training range.
    pub outside: usize,
}

/// Nuisance diagnostics attached to an estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Probabilities clipped into [ε, 1 − ε] before forming odds or weights.
    pub clipped: usize,
    /// Rows whose odds were infinite (weight set to zero).
    pub infinite_odds: usize,
    /// Range of the finite odds evaluated in the folds.
    pub odds_range: Option<[f64; 2]>,
    #[serde(default)]
    pub support: Vec<SupportCheck>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl Diagnostics {
    pub(crate) fn record_odds(&mut self, value: f64) {
        if value.is_finite() {
            self.odds_range = Some(match self.odds_range {
                None => [value, value],
                Some([lo, hi]) => [lo.min(value), hi.max(value)],
            });
        } else {
            self.infinite_odds += 1;
        }
    }

    pub(crate) fn merge(&mut self, other: Diagnostics) {
        self.clipped += other.clipped;
        self.infinite_odds += other.infinite_odds;
        if let Some([lo, hi]) = other.odds_range {
            self.record_odds(lo);
            self.record_odds(hi);
        }
        self.support.extend(other.support);
        self.notes.extend(other.notes);
    }

    pub(crate) fn check_support(&mut self, fold: usize, level: usize, model: &FittedModel, preds: &[f64]) {
        if preds.is_empty() {
            return;
        }
        let (lo, hi) = model.target_range;
        let pmin = preds.iter().copied().fold(f64::INFINITY, f64::min);
        let pmax = preds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let outside = preds.iter().filter(|&&p| p < lo || p > hi).count();
        self.support.push(SupportCheck {
            fold,
            level,
            predicted: [pmin, pmax],
            training: [lo, hi],
            outside,
        });
    }
}

/// Per-fold summary in a [`RiskEstimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEstimate {
    pub v: usize,
    pub size: usize,
    pub r_v: f64,
}

/// A point estimate with its influence values and confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub method: String,
    pub estimate: f64,
    pub se: f64,
    /// σ̂², the mean squared influence value.
    pub variance: f64,
    pub ci: [f64; 2],
    pub alpha: f64,
    pub n: usize,
    pub folds: Vec<FoldEstimate>,
    pub diagnostics: Diagnostics,
    /// Fingerprint of the dataset the estimate was computed on.
    pub sample_id: String,
    /// Loss description.
    pub loss: String,
    pub influence: Vec<f64>,
}

impl RiskEstimate {
    /// Builds the estimate from fold estimates and influence values:
    /// r̂ = Σ_v |I_v| r̂_v / n, σ̂² = mean D², se = √(σ̂²/n), CI = r̂ ± z·se.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        method: impl Into<String>,
        loss: impl Into<String>,
        sample_id: impl Into<String>,
        alpha: f64,
        folds: Vec<FoldEstimate>,
        influence: Vec<f64>,
        diagnostics: Diagnostics,
    ) -> Self {
        let n = influence.len();
        let estimate = stable_sum(folds.iter().map(|f| f.size as f64 * f.r_v)) / n as f64;
        let variance = stable_sum(influence.iter().map(|d| d * d)) / n as f64;
        let se = (variance / n as f64).sqrt();
        let z = z_crit(alpha);
        Self {
            method: method.into(),
            estimate,
            se,
            variance,
            ci: [estimate - z * se, estimate + z * se],
            alpha,
            n,
            folds,
            diagnostics,
            sample_id: sample_id.into(),
            loss: loss.into(),
            influence,
        }
    }
}

/// π̂^a = #{i ∈ rows : A_i = a} / |rows| for every label in the data.
pub fn estimate_marginal_probs(data: &Dataset, rows: &[usize]) -> Result<BTreeMap<i64, f64>> {
    if rows.is_empty() {
        return Err(Error::Validation("marginal probabilities need a nonempty fold".into()));
    }
    let mut counts: BTreeMap<i64, usize> = data.populations().into_iter().map(|a| (a, 0)).collect();
    for &i in rows {
        *counts.entry(data.pop()[i]).or_insert(0) += 1;
    }
    let m = rows.len() as f64;
    Ok(counts.into_iter().map(|(a, c)| (a, c as f64 / m)).collect())
}

fn pi_sum(pi: &BTreeMap<i64, f64>, labels: impl IntoIterator<Item = i64>) -> f64 {
    labels.into_iter().map(|a| pi.get(&a).copied().unwrap_or(0.0)).sum()
}

fn rows_at_level(spec: &ShiftSpec, data: &Dataset, rows: &[usize], k: usize) -> Vec<usize> {
    rows.iter().copied().filter(|&i| spec.contains(k, data.pop()[i])).collect()
}

/// Fits θ̂^k: a classifier of 1(A ≠ 0) on Z̄_k within out-of-fold rows with
/// A ∈ S′_{k+1}. Returns [`NuisanceModel::Zero`] when S_{k+1} is empty.
pub fn fit_conditional_odds(
    spec: &ShiftSpec,
    k: usize,
    data: &Dataset,
    out_rows: &[usize],
    learner: &LearnerSpec,
    seed: u64,
) -> Result<NuisanceModel> {
    if spec.sources_without_target(k + 1).is_empty() {
        return Ok(NuisanceModel::Zero);
    }
    let sub = rows_at_level(spec, data, out_rows, k + 1);
    if sub.is_empty() {
        return Err(Error::Validation(format!(
            "no out-of-fold rows available to fit the level-{k} odds"
        )));
    }
    let labels: Vec<f64> = data.pop().iter().map(|&a| if a != 0 { 1.0 } else { 0.0 }).collect();
    let model = fit_classifier(learner, data, &spec.cumulative_columns(k), &labels, &sub, seed)?;
    Ok(NuisanceModel::Fitted(model))
}

fn fit_target_classifier(
    spec: &ShiftSpec,
    k: usize,
    data: &Dataset,
    out_rows: &[usize],
    learner: &LearnerSpec,
    seed: u64,
) -> Result<NuisanceModel> {
    let sub: Vec<usize> = out_rows
        .iter()
        .copied()
        .filter(|&i| {
            let a = data.pop()[i];
            a == 0 || spec.contains(k + 1, a)
        })
        .collect();
    if !sub.iter().any(|&i| data.pop()[i] == 0) {
        return Err(Error::Validation(format!(
            "level-{k} density ratio needs target rows or a user-supplied ratio"
        )));
    }
    let labels: Vec<f64> = data.pop().iter().map(|&a| if a != 0 { 1.0 } else { 0.0 }).collect();
    let model = fit_classifier(learner, data, &spec.cumulative_columns(k), &labels, &sub, seed)?;
    Ok(NuisanceModel::Fitted(model))
}

/// Backward chain: ℓ̂^k regresses ℓ̂^{k+1}(Z̄_{k+1}) on Z̄_k within out-of-fold
/// rows with A ∈ S′_{k+1}, for k = K−1 down to 1. Returns ℓ̂^1..ℓ̂^{K−1}.
pub fn sequential_regression(
    spec: &ShiftSpec,
    data: &Dataset,
    out_rows: &[usize],
    loss: &[f64],
    learner: &LearnerSpec,
    overrides: &Overrides,
    seed: u64,
    fold: usize,
) -> Result<Vec<NuisanceModel>> {
    let k_max = spec.k;
    let mut chain: Vec<Option<NuisanceModel>> = vec![None; k_max.saturating_sub(1)];
    let mut targets = loss.to_vec();
    for k in (1..k_max).rev() {
        let sub = rows_at_level(spec, data, out_rows, k + 1);
        if sub.is_empty() {
            return Err(Error::Validation(format!(
                "no out-of-fold rows available for the level-{k} regression"
            )));
        }
        if k + 1 < k_max {
            let next = chain[k].as_ref().expect("deeper level fitted first");
            let vals = next.raw(data, &spec.cumulative_columns(k + 1), &sub)?;
            targets = vec![f64::NAN; data.n_rows()];
            for (&i, v) in sub.iter().zip(vals) {
                targets[i] = v;
            }
        }
        let model = match overrides.regressions.get(&k) {
            Some(f) => NuisanceModel::Fixed(f.clone()),
            None => NuisanceModel::Fitted(fit_regressor(
                learner,
                data,
                &spec.cumulative_columns(k),
                &targets,
                &sub,
                learner_seed(seed, fold, ROLE_REGRESSION, k),
            )?),
        };
        chain[k - 1] = Some(model);
    }
    Ok(chain.into_iter().map(|m| m.expect("every level fitted")).collect())
}

fn fit_population(
    spec: &ShiftSpec,
    data: &Dataset,
    plan: &FoldPlan,
    v: usize,
    cfg: &EngineConfig,
) -> Result<PopulationNuisance> {
    let in_rows = plan.fold(v);
    let out_rows = if plan.v == 1 { in_rows.clone() } else { plan.out_of_fold(v) };
    let pi = match cfg.pi {
        PiMode::InFold => estimate_marginal_probs(data, &in_rows)?,
        PiMode::OutOfFold => estimate_marginal_probs(data, &out_rows)?,
    };
    let pi0 = pi.get(&0).copied().unwrap_or(0.0);
    let theta0 = if pi0 > 0.0 {
        pi_sum(&pi, spec.sources_without_target(1)) / pi0
    } else {
        f64::INFINITY
    };
    let mut odds = Vec::new();
    let mut ratios = Vec::new();
    for k in 1..spec.k {
        let need_odds = cfg.mode == WeightMode::Odds || spec.contains(k + 1, 0);
        let o = match cfg.overrides.odds.get(&k) {
            Some(f) => NuisanceModel::Fixed(f.clone()),
            None if need_odds => fit_conditional_odds(
                spec,
                k,
                data,
                &out_rows,
                &cfg.classifier,
                learner_seed(cfg.seed, v, ROLE_ODDS, k),
            )?,
            None => NuisanceModel::Zero,
        };
        odds.push(o);
        if cfg.mode == WeightMode::Ratio {
            let r = match cfg.overrides.ratios.get(&k) {
                Some(f) => RatioModel::Fixed(NuisanceModel::Fixed(f.clone())),
                None if spec.contains(k + 1, 0) => RatioModel::FromOdds,
                None => RatioModel::TargetClassifier(fit_target_classifier(
                    spec,
                    k,
                    data,
                    &out_rows,
                    &cfg.classifier,
                    learner_seed(cfg.seed, v, ROLE_RATIO, k),
                )?),
            };
            ratios.push(r);
        }
    }
    Ok(PopulationNuisance {
        fold: v,
        pi,
        theta0,
        odds,
        ratios,
        mode: cfg.mode,
        odds_eps: cfg.odds_eps,
    })
}

/// Per-row pieces of the pseudo-loss: T(o) and the level-1 weight 1(a ∈ S′_1) w⁰.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowTerms {
    pub t: f64,
    pub base_weight: f64,
}

impl PopulationNuisance {
    fn pi0(&self) -> f64 {
        self.pi.get(&0).copied().unwrap_or(0.0)
    }

    fn level1_weight(&self, spec: &ShiftSpec) -> Result<f64> {
        match self.mode {
            WeightMode::Odds => {
                let pi0 = self.pi0();
                if pi0 <= 0.0 {
                    return Err(Error::Degenerate(format!(
                        "fold {} has no target rows (π̂⁰ = 0)",
                        self.fold
                    )));
                }
                Ok(1.0 / (pi0 * (1.0 + self.theta0)))
            }
            WeightMode::Ratio => {
                let s = pi_sum(&self.pi, spec.relevant(1));
                if s <= 0.0 {
                    return Err(Error::Degenerate(format!(
                        "fold {} has no rows from the level-1 relevant populations",
                        self.fold
                    )));
                }
                Ok(1.0 / s)
            }
        }
    }

    fn odds_values(&self, idx: usize, data: &Dataset, cols: &[String], rows: &[usize], diag: &mut Diagnostics) -> Result<Vec<f64>> {
        let model = &self.odds[idx];
        let raw = model.raw(data, cols, rows)?;
        let mut out = Vec::with_capacity(raw.len());
        for p in raw {
            let theta = match model {
                NuisanceModel::Fitted(_) => {
                    let o = odds_from_probability(p, self.odds_eps)?;
                    if o.clipped {
                        diag.clipped += 1;
                    }
                    o.value
                }
                _ => {
                    if !(p >= 0.0) {
                        return Err(Error::Domain(format!("supplied odds {p} must be nonnegative")));
                    }
                    p
                }
            };
            diag.record_odds(theta);
            out.push(theta);
        }
        Ok(out)
    }

    /// w^{k−1} on `rows` for the term of level `k` (k ≥ 2).
    fn level_weights(&self, spec: &ShiftSpec, k: usize, data: &Dataset, rows: &[usize], diag: &mut Diagnostics) -> Result<Vec<f64>> {
        let cols = spec.cumulative_columns(k - 1);
        let pi0 = self.pi0();
        let share = |theta: f64| if theta.is_infinite() { 0.0 } else { 1.0 / (1.0 + theta) };
        match self.mode {
            WeightMode::Odds => {
                if pi0 <= 0.0 {
                    return Err(Error::Degenerate(format!("fold {} has no target rows (π̂⁰ = 0)", self.fold)));
                }
                let theta = self.odds_values(k - 2, data, &cols, rows, diag)?;
                Ok(theta.into_iter().map(|t| share(t) / pi0).collect())
            }
            WeightMode::Ratio => {
                let s = pi_sum(&self.pi, spec.relevant(k));
                if s <= 0.0 {
                    return Err(Error::Degenerate(format!(
                        "fold {} has no rows from the level-{k} relevant populations",
                        self.fold
                    )));
                }
                let lambda: Vec<f64> = match &self.ratios[k - 2] {
                    RatioModel::FromOdds => {
                        if pi0 <= 0.0 {
                            return Err(Error::Degenerate(format!("fold {} has no target rows (π̂⁰ = 0)", self.fold)));
                        }
                        let theta = self.odds_values(k - 2, data, &cols, rows, diag)?;
                        theta.into_iter().map(|t| s * share(t) / pi0).collect()
                    }
                    RatioModel::TargetClassifier(model) => {
                        if pi0 <= 0.0 {
                            return Err(Error::Degenerate(format!("fold {} has no target rows (π̂⁰ = 0)", self.fold)));
                        }
                        let s_src = pi_sum(&self.pi, spec.sources_without_target(k));
                        let mut out = Vec::with_capacity(rows.len());
                        for p in model.raw(data, &cols, rows)? {
                            let o = odds_from_probability(p, self.odds_eps)?;
                            if o.clipped {
                                diag.clipped += 1;
                            }
                            diag.record_odds(o.value);
                            if o.value == 0.0 {
                                return Err(Error::Degenerate("infinite density ratio".into()));
                            }
                            out.push(s_src / (pi0 * o.value));
                        }
                        out
                    }
                    RatioModel::Fixed(model) => model.raw(data, &cols, rows)?,
                };
                Ok(lambda.into_iter().map(|l| l / s).collect())
            }
        }
    }
}

impl FoldNuisance {
    /// Pseudo-loss pieces on `rows` (any rows of the dataset).
    pub fn row_terms(&self, spec: &ShiftSpec, data: &Dataset, loss: &[f64], rows: &[usize], diag: &mut Diagnostics) -> Result<Vec<RowTerms>> {
        let pop = &self.population;
        let m = rows.len();
        let k_max = spec.k;
        let labels: Vec<i64> = rows.iter().map(|&i| data.pop()[i]).collect();
        // ℓ^k at every row that needs it (k = 1..K).
        let mut level_vals: Vec<Vec<f64>> = vec![vec![f64::NAN; m]; k_max + 1];
        for k in 1..=k_max {
            let need: Vec<usize> = (0..m)
                .filter(|&j| spec.contains(k, labels[j]) || (k < k_max && spec.contains(k + 1, labels[j])))
                .collect();
            if need.is_empty() {
                continue;
            }
            let sub: Vec<usize> = need.iter().map(|&j| rows[j]).collect();
            let vals = if k == k_max {
                sub.iter().map(|&i| loss[i]).collect()
            } else {
                let model = &self.chain[k - 1];
                let vals = model.raw(data, &spec.cumulative_columns(k), &sub)?;
                if let NuisanceModel::Fitted(fm) = model {
                    diag.check_support(pop.fold, k, fm, &vals);
                }
                vals
            };
            for (&j, v) in need.iter().zip(vals) {
                level_vals[k][j] = v;
            }
        }
        let w0 = if labels.iter().any(|&a| spec.contains(1, a)) {
            pop.level1_weight(spec)?
        } else {
            0.0
        };
        let mut out: Vec<RowTerms> = (0..m)
            .map(|j| {
                let base_weight = if spec.contains(1, labels[j]) { w0 } else { 0.0 };
                RowTerms {
                    t: base_weight * if base_weight != 0.0 { level_vals[1][j] } else { 0.0 },
                    base_weight,
                }
            })
            .collect();
        for k in 2..=k_max {
            let need: Vec<usize> = (0..m).filter(|&j| spec.contains(k, labels[j])).collect();
            if need.is_empty() {
                continue;
            }
            let sub: Vec<usize> = need.iter().map(|&j| rows[j]).collect();
            let w = pop.level_weights(spec, k, data, &sub, diag)?;
            for (&j, wk) in need.iter().zip(w) {
                if wk != 0.0 {
                    out[j].t += wk * (level_vals[k][j] - level_vals[k - 1][j]);
                }
            }
        }
        if let Some(j) = out.iter().position(|r| !r.t.is_finite()) {
            return Err(Error::Numerical(format!("non-finite pseudo-loss at row {}", rows[j])));
        }
        Ok(out)
    }
}

/// T(ℓ̂, θ̂, π̂)(O_row) in odds mode or its density-ratio analogue in ratio mode.
pub fn pseudo_loss(nuis: &FoldNuisance, spec: &ShiftSpec, data: &Dataset, loss: &[f64], row: usize) -> Result<f64> {
    let mut diag = Diagnostics::default();
    Ok(nuis.row_terms(spec, data, loss, &[row], &mut diag)?[0].t)
}

fn solve_fold(terms: &[RowTerms], pi: PiMode) -> f64 {
    let total = stable_sum(terms.iter().map(|r| r.t));
    match pi {
        PiMode::InFold => total / terms.len() as f64,
        PiMode::OutOfFold => {
            let w = stable_sum(terms.iter().map(|r| r.base_weight));
            if w == 0.0 {
                0.0
            } else {
                total / w
            }
        }
    }
}

/// r̂_v: mean pseudo-loss over the fold (or, with out-of-fold π̂, the root of
/// the fold's empirical estimating equation).
pub fn foldwise_estimate(nuis: &FoldNuisance, spec: &ShiftSpec, data: &Dataset, loss: &[f64], fold: &[usize], pi: PiMode) -> Result<f64> {
    if fold.is_empty() {
        return Err(Error::Validation("fold is empty".into()));
    }
    let mut diag = Diagnostics::default();
    Ok(solve_fold(&nuis.row_terms(spec, data, loss, fold, &mut diag)?, pi))
}

/// Influence values D(ℓ̂_v, θ̂_v, π̂_v, r̂_v)(O_i) = T − 1(a ∈ S′_1) w⁰ r̂_v.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceSummary {
    pub values: Vec<f64>,
    pub variance: f64,
    pub se: f64,
}

pub fn influence_and_variance(
    fits: &NuisanceFits,
    spec: &ShiftSpec,
    data: &Dataset,
    loss: &[f64],
    plan: &FoldPlan,
    r_v: &[f64],
) -> Result<InfluenceSummary> {
    let n = data.n_rows();
    let mut values = vec![0.0; n];
    let mut diag = Diagnostics::default();
    for (v, fold_fit) in fits.folds.iter().enumerate() {
        let rows = plan.fold(v);
        let terms = fold_fit.row_terms(spec, data, loss, &rows, &mut diag)?;
        for (&i, t) in rows.iter().zip(terms) {
            values[i] = t.t - t.base_weight * r_v[v];
        }
    }
    let variance = stable_sum(values.iter().map(|d| d * d)) / n as f64;
    Ok(InfluenceSummary {
        se: (variance / n as f64).sqrt(),
        values,
        variance,
    })
}

fn method_tag(cfg: &EngineConfig) -> &'static str {
    match cfg.mode {
        WeightMode::Odds => "seqcond-odds",
        WeightMode::Ratio => "seqcond-ratio",
    }
}

/// Fits every fold's nuisances for one loss vector.
pub fn fit_nuisances(spec: &ShiftSpec, data: &Dataset, loss: &[f64], plan: &FoldPlan, cfg: &EngineConfig) -> Result<NuisanceFits> {
    let folds = (0..plan.v)
        .map(|v| {
            let population = Arc::new(fit_population(spec, data, plan, v, cfg)?);
            let out_rows = if plan.v == 1 { plan.fold(v) } else { plan.out_of_fold(v) };
            let chain = sequential_regression(spec, data, &out_rows, loss, &cfg.regressor, &cfg.overrides, cfg.seed, v)?;
            Ok(FoldNuisance { population, chain })
        })
        .collect::<Result<_>>()?;
    Ok(NuisanceFits { folds })
}

/// Cross-fit estimates for several loss vectors on the same folds, sharing the
/// population-side nuisances (π̂, θ̂, λ̂) and refitting only the loss chains.
pub fn crossfit_multi(spec: &ShiftSpec, data: &Dataset, losses: &[(String, Vec<f64>)], cfg: &EngineConfig) -> Result<Vec<RiskEstimate>> {
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0, 1), got {}", cfg.alpha)));
    }
    if cfg.mode == WeightMode::Odds && !spec.target_observed {
        return Err(Error::Validation("odds mode requires target_observed".into()));
    }
    for (_, l) in losses {
        validate_plan(spec, data, l)?;
    }
    cfg.classifier.validate(crate::learners::Task::Classification)?;
    cfg.regressor.validate(crate::learners::Task::Regression)?;
    let n = data.n_rows();
    let plan = make_folds(n, cfg.folds, cfg.seed)?;
    let sample_id = data.fingerprint();

    type FoldOut = (Vec<usize>, Vec<(f64, Vec<RowTerms>, Diagnostics)>);
    let per_fold: Vec<FoldOut> = (0..plan.v)
        .into_par_iter()
        .map(|v| -> Result<FoldOut> {
            let population = Arc::new(fit_population(spec, data, &plan, v, cfg)?);
            let in_rows = plan.fold(v);
            let out_rows = if plan.v == 1 { in_rows.clone() } else { plan.out_of_fold(v) };
            let results = losses
                .iter()
                .map(|(_, loss)| {
                    let chain = sequential_regression(spec, data, &out_rows, loss, &cfg.regressor, &cfg.overrides, cfg.seed, v)?;
                    let nuis = FoldNuisance {
                        population: population.clone(),
                        chain,
                    };
                    let mut diag = Diagnostics::default();
                    let terms = nuis.row_terms(spec, data, loss, &in_rows, &mut diag)?;
                    Ok((solve_fold(&terms, cfg.pi), terms, diag))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((in_rows, results))
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(losses.len());
    for (li, (label, _)) in losses.iter().enumerate() {
        let mut influence = vec![0.0; n];
        let mut folds = Vec::with_capacity(plan.v);
        let mut diag = Diagnostics::default();
        for (v, (rows, results)) in per_fold.iter().enumerate() {
            let (r_v, terms, d) = &results[li];
            for (&i, t) in rows.iter().zip(terms) {
                influence[i] = t.t - t.base_weight * r_v;
            }
            folds.push(FoldEstimate {
                v,
                size: rows.len(),
                r_v: *r_v,
            });
            diag.merge(d.clone());
        }
        out.push(RiskEstimate::assemble(method_tag(cfg), label.clone(), sample_id.clone(), cfg.alpha, folds, influence, diag));
    }
    Ok(out)
}

/// Cross-fit estimate for a precomputed loss vector.
pub fn crossfit_estimate_values(spec: &ShiftSpec, data: &Dataset, loss: &[f64], label: &str, cfg: &EngineConfig) -> Result<RiskEstimate> {
    let mut v = crossfit_multi(spec, data, &[(label.to_string(), loss.to_vec())], cfg)?;
    Ok(v.remove(0))
}

/// End-to-end cross-fit estimate of the target risk.
pub fn crossfit_estimate(spec: &ShiftSpec, data: &Dataset, loss: &LossSpec, cfg: &EngineConfig) -> Result<RiskEstimate> {
    let values = evaluate_loss(loss, data)?;
    crossfit_estimate_values(spec, data, &values, &loss.to_string(), cfg)
}

/// Target-only sample mean with influence values 1(a = 0)/ρ̂ (ℓ − r̂).
pub fn nonparametric_from_values(data: &Dataset, loss: &[f64], label: &str, alpha: f64) -> Result<RiskEstimate> {
    let n = data.n_rows();
    let target: Vec<usize> = (0..n).filter(|&i| data.pop()[i] == 0).collect();
    if target.is_empty() {
        return Err(Error::Validation("the nonparametric estimator needs target (A = 0) rows".into()));
    }
    if let Some(&i) = target.iter().find(|&&i| loss[i].is_nan()) {
        return Err(Error::Validation(format!("loss is undefined at target row {i}")));
    }
    let r = stable_sum(target.iter().map(|&i| loss[i])) / target.len() as f64;
    let rho = target.len() as f64 / n as f64;
    let influence: Vec<f64> = (0..n)
        .map(|i| if data.pop()[i] == 0 { (loss[i] - r) / rho } else { 0.0 })
        .collect();
    let folds = vec![FoldEstimate { v: 0, size: n, r_v: r }];
    let mut est = RiskEstimate::assemble("nonparametric", label, data.fingerprint(), alpha, folds, influence, Diagnostics::default());
    est.estimate = r;
    Ok(est)
}

pub fn nonparametric_estimate(data: &Dataset, loss: &LossSpec, alpha: f64) -> Result<RiskEstimate> {
    let values = evaluate_loss(loss, data)?;
    nonparametric_from_values(data, &values, &loss.to_string(), alpha)
}

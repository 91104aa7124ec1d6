//! Inference built on risk estimates: a Hausman-type specification test of the
//! declared shift condition, model comparison with shared nuisances, and
//! calibration of a prediction-set threshold.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{evaluate_loss, Dataset, LossSpec, ShiftSpec};
use crate::engine::{crossfit_multi, nonparametric_from_values, EngineConfig, RiskEstimate};
use crate::error::{Error, Result};
use crate::specialized::{special_multi, SpecialCondition, SpecialConfig};
use crate::stats::{stable_sum, two_sided_p, z_crit};

/// An estimation method: the target-only baseline, the generic sequential
/// engine, or one of the named two-population conditions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Nonparametric { alpha: f64 },
    Sequential { spec: ShiftSpec, config: EngineConfig },
    Special { condition: SpecialCondition, config: SpecialConfig },
}

impl Method {
    pub fn alpha(&self) -> f64 {
        match self {
            Method::Nonparametric { alpha } => *alpha,
            Method::Sequential { config, .. } => config.alpha,
            Method::Special { config, .. } => config.alpha,
        }
    }

    /// Estimates for several loss vectors; the efficient methods share their
    /// population-side nuisances across the losses.
    pub fn estimate_values(&self, data: &Dataset, losses: &[(String, Vec<f64>)]) -> Result<Vec<RiskEstimate>> {
        match self {
            Method::Nonparametric { alpha } => losses
                .iter()
                .map(|(label, l)| nonparametric_from_values(data, l, label, *alpha))
                .collect(),
            Method::Sequential { spec, config } => crossfit_multi(spec, data, losses, config),
            Method::Special { condition, config } => special_multi(condition, data, losses, config),
        }
    }

    pub fn estimate(&self, data: &Dataset, loss: &LossSpec) -> Result<RiskEstimate> {
        let values = evaluate_loss(loss, data)?;
        Ok(self.estimate_values(data, &[(loss.to_string(), values)])?.remove(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// √(SE²_np − SE²_eff).
    StandardErrorGap,
    /// Root mean square of the per-row influence difference, over √n; used
    /// when the standard-error gap is not positive.
    InfluenceDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// SE²_np − SE²_eff.
    pub se_gap: f64,
    pub denominator: f64,
    pub denominator_mode: DenominatorMode,
    /// Two-sided p-value of the influence-difference statistic, reported
    /// whichever denominator the primary statistic used. It does not rely on
    /// the efficient estimator being exactly efficient in the sample.
    pub influence_difference_p_value: f64,
    pub efficient: f64,
    pub nonparametric: f64,
}

/// (statistic, two-sided p-value) for an estimate gap and its standard error.
/// A zero denominator gives statistic 0 and p = 1 when the gap is zero.
pub fn wald(gap: f64, denominator: f64) -> (f64, f64) {
    if denominator > 0.0 {
        let z = gap / denominator;
        (z, two_sided_p(z))
    } else if gap == 0.0 {
        (0.0, 1.0)
    } else {
        (gap.signum() * f64::INFINITY, 0.0)
    }
}

/// Tests whether the efficient and nonparametric estimates differ by more
/// than sampling noise, which signals a violated shift condition.
pub fn specification_test(efficient: &RiskEstimate, baseline: &RiskEstimate) -> Result<TestResult> {
    if efficient.sample_id != baseline.sample_id || efficient.n != baseline.n {
        return Err(Error::Validation("estimates were computed on different data".into()));
    }
    if efficient.loss != baseline.loss {
        return Err(Error::Validation(format!(
            "estimates use different losses (`{}` vs `{}`)",
            efficient.loss, baseline.loss
        )));
    }
    if baseline.method != "nonparametric" {
        return Err(Error::Validation(format!(
            "the baseline must be the nonparametric estimate, got `{}`",
            baseline.method
        )));
    }
    let se_gap = baseline.se * baseline.se - efficient.se * efficient.se;
    let n = efficient.n as f64;
    let m2 = stable_sum(efficient.influence.iter().zip(&baseline.influence).map(|(a, b)| (a - b) * (a - b))) / n;
    let influence_denominator = (m2 / n).sqrt();
    let (denominator, mode) = if se_gap > 0.0 {
        (se_gap.sqrt(), DenominatorMode::StandardErrorGap)
    } else {
        (influence_denominator, DenominatorMode::InfluenceDifference)
    };
    let gap = efficient.estimate - baseline.estimate;
    let (statistic, p_value) = wald(gap, denominator);
    Ok(TestResult {
        statistic,
        p_value,
        se_gap,
        denominator,
        denominator_mode: mode,
        influence_difference_p_value: wald(gap, influence_denominator).1,
        efficient: efficient.estimate,
        nonparametric: baseline.estimate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    /// r̂⁽¹⁾ − r̂⁽²⁾.
    pub diff: f64,
    pub se: f64,
    pub ci: [f64; 2],
    pub p_value: f64,
    pub alpha: f64,
    pub estimates: [RiskEstimate; 2],
    /// Per-row D⁽¹⁾ − D⁽²⁾.
    pub influence: Vec<f64>,
}

/// Contrasts the risks under two losses on identical folds.
pub fn compare_models(data: &Dataset, loss1: &LossSpec, loss2: &LossSpec, method: &Method) -> Result<ComparisonResult> {
    let l1 = evaluate_loss(loss1, data)?;
    let l2 = evaluate_loss(loss2, data)?;
    let mut est = method.estimate_values(data, &[(loss1.to_string(), l1), (loss2.to_string(), l2)])?;
    let second = est.pop().expect("two estimates");
    let first = est.pop().expect("two estimates");
    let n = first.n as f64;
    let influence: Vec<f64> = first.influence.iter().zip(&second.influence).map(|(a, b)| a - b).collect();
    let variance = stable_sum(influence.iter().map(|d| d * d)) / n;
    let se = (variance / n).sqrt();
    let diff = first.estimate - second.estimate;
    let (_, p_value) = wald(diff, se);
    let alpha = method.alpha();
    let z = z_crit(alpha);
    Ok(ComparisonResult {
        diff,
        se,
        ci: [diff - z * se, diff + z * se],
        p_value,
        alpha,
        estimates: [first, second],
        influence,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// Largest grid score τ with estimated miscoverage P(s < τ | A = 0) ≤ α;
    /// `None` means −∞ (the full set).
    pub threshold: Option<f64>,
    /// Estimated miscoverage at the threshold (0 for the full set).
    pub miscoverage: f64,
    pub alpha: f64,
    pub grid_size: usize,
}

impl CalibrationResult {
    pub fn value(&self) -> f64 {
        self.threshold.unwrap_or(f64::NEG_INFINITY)
    }
}

/// Grid values scanned per batch by the efficient calibration path.
const CALIBRATION_BATCH: usize = 16;

/// Calibrates τ for the prediction set {y : s(x, y) ≥ τ} so that the target
/// miscoverage is at most α. The grid is the sorted distinct observed scores.
/// When α < 1/n_target no target point may be left uncovered and the full set
/// (−∞) is returned; otherwise the smallest score is always feasible.
pub fn calibrate_prediction_threshold(data: &Dataset, score_column: &str, alpha: f64, method: &Method) -> Result<CalibrationResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let scores = data.column(score_column)?;
    let n = data.n_rows();
    let consumed: Vec<usize> = match method {
        Method::Nonparametric { .. } => (0..n).filter(|&i| data.pop()[i] == 0).collect(),
        _ => (0..n).filter(|&i| !scores[i].is_nan()).collect(),
    };
    if let Some(&i) = consumed.iter().find(|&&i| scores[i].is_nan()) {
        return Err(Error::Missing { row: i, column: score_column.to_string() });
    }
    if consumed.is_empty() {
        return Err(Error::Validation("no scores available for calibration".into()));
    }
    let mut grid: Vec<f64> = consumed.iter().map(|&i| scores[i]).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let n_target = (0..n).filter(|&i| data.pop()[i] == 0).count();
    if alpha * (n_target as f64) < 1.0 {
        return Ok(CalibrationResult {
            threshold: None,
            miscoverage: 0.0,
            alpha,
            grid_size: grid.len(),
        });
    }
    let lowest = CalibrationResult {
        threshold: Some(grid[0]),
        miscoverage: 0.0,
        alpha,
        grid_size: grid.len(),
    };
    let found = |tau: f64, risk: f64| CalibrationResult {
        threshold: Some(tau),
        miscoverage: risk,
        alpha,
        grid_size: grid.len(),
    };

    if let Method::Nonparametric { .. } = method {
        let mut sorted: Vec<f64> = consumed.iter().map(|&i| scores[i]).collect();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len() as f64;
        for &tau in grid.iter().skip(1).rev() {
            let below = sorted.partition_point(|&s| s < tau) as f64;
            if below / m <= alpha {
                return Ok(found(tau, below / m));
            }
        }
        return Ok(lowest);
    }

    // Efficient path: scan the grid from the top in batches, sharing
    // population-side nuisances within each batch.
    let descending: Vec<f64> = grid.iter().skip(1).rev().copied().collect();
    for batch in descending.chunks(CALIBRATION_BATCH) {
        let losses: Vec<(String, Vec<f64>)> = batch
            .par_iter()
            .map(|&tau| {
                let l = scores
                    .iter()
                    .map(|&s| if s.is_nan() { f64::NAN } else if s < tau { 1.0 } else { 0.0 })
                    .collect();
                (format!("1({score_column} < {tau})"), l)
            })
            .collect();
        let estimates = method.estimate_values(data, &losses)?;
        for (&tau, e) in batch.iter().zip(&estimates) {
            if e.estimate <= alpha {
                return Ok(found(tau, e.estimate));
            }
        }
    }
    Ok(lowest)
}

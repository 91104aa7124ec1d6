//! Regression and classification primitives for nuisance fitting.
//!
//! Learners are described by a serializable [`LearnerSpec`] and fit on a
//! subset of dataset rows into an immutable [`FittedModel`]. Fitting is a pure
//! function of `(spec, data, features, targets, rows, seed)`; only the
//! cross-validated [`LearnerSpec::Selector`] consumes the seed.

mod basis;
mod knn;
mod linear;
mod logistic;
mod trees;

pub use basis::PolyBasis;
pub use linear::{LinearModel, LooChoice};
pub use logistic::expit;

use serde::{Deserialize, Serialize};

use crate::data::{make_folds, Dataset, Features};
use crate::error::{Error, Result};
use crate::rng;

/// Default clipping level for [`odds_from_probability`].
pub const DEFAULT_ODDS_EPS: f64 = 1e-3;

fn one() -> usize {
    1
}

fn five() -> usize {
    5
}

fn default_min_leaf() -> usize {
    5
}

fn default_penalties() -> Vec<f64> {
    vec![0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0]
}

/// Learner description, expressible in JSON as `{"kind": "...", params…}`.
///
/// Linear-family learners take an optional polynomial `degree` (default 1);
/// their basis columns are standardized on the fit rows and the intercept is
/// never penalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerSpec {
    /// Training mean (regression) or label frequency (classification).
    Constant,
    LeastSquares {
        #[serde(default = "one")]
        degree: usize,
    },
    Ridge {
        penalty: f64,
        #[serde(default = "one")]
        degree: usize,
    },
    /// Ridge with degree in 1..=`max_degree` and penalty chosen by exact
    /// leave-one-out error (regression only).
    PolyRidgeLoo {
        max_degree: usize,
        #[serde(default = "default_penalties")]
        penalties: Vec<f64>,
    },
    Logistic {
        #[serde(default)]
        penalty: f64,
        #[serde(default = "one")]
        degree: usize,
    },
    Knn {
        k: usize,
    },
    BoostedStumps {
        rounds: usize,
        learning_rate: f64,
        max_depth: usize,
        #[serde(default = "default_min_leaf")]
        min_leaf: usize,
    },
    /// Picks the candidate with the lowest K-fold cross-validated loss
    /// (squared error, or log-loss for classification) and refits it on all rows.
    Selector {
        candidates: Vec<LearnerSpec>,
        #[serde(default = "five")]
        folds: usize,
    },
}

impl LearnerSpec {
    pub fn validate(&self, task: Task) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        match self {
            LearnerSpec::Constant | LearnerSpec::LeastSquares { .. } => Ok(()),
            LearnerSpec::Ridge { penalty, .. } | LearnerSpec::Logistic { penalty, .. } if !(*penalty >= 0.0) => {
                bad(format!("penalty must be ≥ 0, got {penalty}"))
            }
            LearnerSpec::Ridge { .. } if task == Task::Classification => {
                bad("ridge is a regression learner".into())
            }
            LearnerSpec::Logistic { .. } if task == Task::Regression => {
                bad("logistic is a classification learner".into())
            }
            LearnerSpec::Ridge { .. } | LearnerSpec::Logistic { .. } => Ok(()),
            LearnerSpec::PolyRidgeLoo { .. } if task == Task::Classification => {
                bad("poly_ridge_loo is a regression learner".into())
            }
            LearnerSpec::PolyRidgeLoo { max_degree, penalties } => {
                if *max_degree < 1 || penalties.is_empty() || penalties.iter().any(|p| !(*p >= 0.0)) {
                    bad("poly_ridge_loo needs max_degree ≥ 1 and nonnegative penalties".into())
                } else {
                    Ok(())
                }
            }
            LearnerSpec::Knn { k } if *k < 1 => bad("knn needs k ≥ 1".into()),
            LearnerSpec::Knn { .. } => Ok(()),
            LearnerSpec::BoostedStumps {
                rounds,
                learning_rate,
                max_depth,
                ..
            } => {
                if *rounds < 1 || !(*learning_rate > 0.0 && *learning_rate <= 1.0) || *max_depth < 1 {
                    bad("boosted_stumps needs rounds ≥ 1, learning_rate in (0, 1], max_depth ≥ 1".into())
                } else {
                    Ok(())
                }
            }
            LearnerSpec::Selector { candidates, folds } => {
                if candidates.is_empty() || *folds < 2 {
                    return bad("selector needs candidates and at least 2 folds".into());
                }
                candidates.iter().try_for_each(|c| c.validate(task))
            }
        }
    }

    /// Default flexible regressor: polynomial ridge tuned by leave-one-out.
    pub fn default_regressor() -> Self {
        LearnerSpec::PolyRidgeLoo {
            max_degree: 4,
            penalties: default_penalties(),
        }
    }

    /// Default flexible classifier: CV selection over polynomial logistic fits.
    pub fn default_classifier() -> Self {
        LearnerSpec::Selector {
            candidates: vec![
                LearnerSpec::Constant,
                LearnerSpec::Logistic { penalty: 1.0, degree: 1 },
                LearnerSpec::Logistic { penalty: 1.0, degree: 2 },
                LearnerSpec::Logistic { penalty: 3.0, degree: 3 },
                LearnerSpec::Logistic { penalty: 10.0, degree: 4 },
            ],
            folds: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

/// Fitted structure behind a [`FittedModel`].
#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    Constant(f64),
    Linear(LinearModel),
    Logistic(LinearModel),
    Knn(knn::Knn),
    Boosted(trees::Boosted),
}

impl Predictor {
    pub fn predict_row(&self, row: &[f64], buf: &mut Vec<f64>) -> f64 {
        match self {
            Predictor::Constant(c) => *c,
            Predictor::Linear(m) => m.linear_predictor(row, buf),
            Predictor::Logistic(m) => expit(m.linear_predictor(row, buf)),
            Predictor::Knn(m) => m.predict(row),
            Predictor::Boosted(m) => m.predict(row),
        }
    }

    pub fn predict(&self, x: &Features) -> Vec<f64> {
        let mut buf = Vec::new();
        (0..x.n_rows()).map(|i| self.predict_row(x.row(i), &mut buf)).collect()
    }
}

/// Immutable fitted learner.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub spec: LearnerSpec,
    pub task: Task,
    pub features: Vec<String>,
    pub fit_rows: Vec<usize>,
    /// Range of the training targets (labels for classifiers).
    pub target_range: (f64, f64),
    /// Candidate actually used when `spec` is a selector.
    pub chosen: LearnerSpec,
    pub predictor: Predictor,
}

impl FittedModel {
    /// One value per requested row; classifiers return probabilities.
    pub fn predict(&self, data: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
        let x = data.features(&self.features, rows)?;
        Ok(self.predictor.predict(&x))
    }

    pub fn predict_features(&self, x: &Features) -> Vec<f64> {
        self.predictor.predict(x)
    }
}

/// Fits `spec` to a feature matrix. Returns the predictor and the concrete
/// (post-selection) learner.
pub fn fit_matrix(spec: &LearnerSpec, task: Task, x: &Features, y: &[f64], seed: u64) -> Result<(Predictor, LearnerSpec)> {
    if y.is_empty() {
        return Err(Error::Validation("cannot fit a learner on zero rows".into()));
    }
    if task == Task::Classification {
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain("classification labels must be 0 or 1".into()));
        }
        let first = y[0];
        if y.iter().all(|&v| v == first) {
            return Ok((Predictor::Constant(first), LearnerSpec::Constant));
        }
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let pred = match spec {
        LearnerSpec::Constant => Predictor::Constant(mean),
        LearnerSpec::LeastSquares { degree } => match task {
            Task::Regression => Predictor::Linear(linear::least_squares(x, y, *degree)?),
            Task::Classification => Predictor::Logistic(logistic::logistic(x, y, 0.0, *degree)?),
        },
        LearnerSpec::Ridge { penalty, degree } => Predictor::Linear(linear::ridge(x, y, *penalty, *degree)?),
        LearnerSpec::PolyRidgeLoo { max_degree, penalties } => {
            let (m, choice) = linear::poly_ridge_loo(x, y, *max_degree, penalties)?;
            let chosen = match choice {
                LooChoice::Constant => LearnerSpec::Constant,
                LooChoice::Ridge { degree, penalty } => LearnerSpec::Ridge { penalty, degree },
            };
            return Ok((Predictor::Linear(m), chosen));
        }
        LearnerSpec::Logistic { penalty, degree } => Predictor::Logistic(logistic::logistic(x, y, *penalty, *degree)?),
        LearnerSpec::Knn { k } => Predictor::Knn(knn::Knn::new(x.clone(), y.to_vec(), *k)),
        LearnerSpec::BoostedStumps {
            rounds,
            learning_rate,
            max_depth,
            min_leaf,
        } => Predictor::Boosted(trees::Boosted::fit(
            x,
            y,
            &trees::BoostParams {
                rounds: *rounds,
                learning_rate: *learning_rate,
                max_depth: *max_depth,
                min_leaf: *min_leaf,
            },
            task == Task::Classification,
        )),
        LearnerSpec::Selector { candidates, folds } => return select(candidates, *folds, task, x, y, seed),
    };
    Ok((pred, spec.clone()))
}

fn cv_loss(task: Task, pred: f64, y: f64) -> f64 {
    match task {
        Task::Regression => (pred - y) * (pred - y),
        Task::Classification => {
            let p = pred.clamp(1e-6, 1.0 - 1e-6);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        }
    }
}

fn select(candidates: &[LearnerSpec], folds: usize, task: Task, x: &Features, y: &[f64], seed: u64) -> Result<(Predictor, LearnerSpec)> {
    let n = y.len();
    let k = folds.min(n);
    if k < 2 {
        return fit_matrix(&candidates[0], task, x, y, rng::derive_seed(seed, &[0]));
    }
    let plan = make_folds(n, k, rng::derive_seed(seed, &[u64::MAX]))?;
    let mut best: Option<(f64, usize)> = None;
    for (c, cand) in candidates.iter().enumerate() {
        let mut total = 0.0;
        let mut ok = true;
        for v in 0..k {
            let train = plan.out_of_fold(v);
            let test = plan.fold(v);
            let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let fit = fit_matrix(cand, task, &x.select(&train), &ytr, rng::derive_seed(seed, &[c as u64, v as u64]));
            let Ok((model, _)) = fit else {
                ok = false;
                break;
            };
            let preds = model.predict(&x.select(&test));
            total += test.iter().zip(&preds).map(|(&i, &p)| cv_loss(task, p, y[i])).sum::<f64>();
        }
        if ok && total.is_finite() && best.is_none_or(|b| total < b.0) {
            best = Some((total, c));
        }
    }
    let (_, c) = best.ok_or_else(|| Error::Numerical("every selector candidate failed".into()))?;
    fit_matrix(&candidates[c], task, x, y, rng::derive_seed(seed, &[c as u64, u64::MAX - 1]))
}

fn fit(spec: &LearnerSpec, task: Task, data: &Dataset, features: &[String], targets: &[f64], rows: &[usize], seed: u64) -> Result<FittedModel> {
    spec.validate(task)?;
    if rows.is_empty() {
        return Err(Error::Validation("learner fit requested on an empty row set".into()));
    }
    let x = data.features(features, rows)?;
    let y: Vec<f64> = rows.iter().map(|&i| targets[i]).collect();
    if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("learner target undefined at row {}", rows[pos])));
    }
    let (predictor, chosen) = fit_matrix(spec, task, &x, &y, seed)?;
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(FittedModel {
        spec: spec.clone(),
        task,
        features: features.to_vec(),
        fit_rows: rows.to_vec(),
        target_range: (lo, hi),
        chosen,
        predictor,
    })
}

/// Fits a regression of `targets` (indexed by dataset row) on `features` using `rows`.
pub fn fit_regressor(spec: &LearnerSpec, data: &Dataset, features: &[String], targets: &[f64], rows: &[usize], seed: u64) -> Result<FittedModel> {
    fit(spec, Task::Regression, data, features, targets, rows, seed)
}

/// Fits P(label = 1 | features) on `rows`. Identical labels give a constant model.
pub fn fit_classifier(spec: &LearnerSpec, data: &Dataset, features: &[String], labels: &[f64], rows: &[usize], seed: u64) -> Result<FittedModel> {
    fit(spec, Task::Classification, data, features, labels, rows, seed)
}

/// Outcome of [`odds_from_probability`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Odds {
    /// Nonnegative odds; `f64::INFINITY` marks p = 1.
    pub value: f64,
    /// Whether the probability had to be clipped into [ε, 1 − ε].
    pub clipped: bool,
}

impl Odds {
    /// 1/(1 + θ), which is 0 for the infinite marker.
    pub fn target_share(self) -> f64 {
        if self.value.is_infinite() {
            0.0
        } else {
            1.0 / (1.0 + self.value)
        }
    }
}

/// Maps P(A ≠ 0 | ·) within a pooled subsample to odds p′/(1 − p′) with
/// p′ = clip(p, ε, 1 − ε); p = 0 maps to 0 and p = 1 to the infinite marker.
pub fn odds_from_probability(p: f64, eps: f64) -> Result<Odds> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    if p == 0.0 {
        return Ok(Odds { value: 0.0, clipped: false });
    }
    if p == 1.0 {
        return Ok(Odds {
            value: f64::INFINITY,
            clipped: false,
        });
    }
    let q = p.clamp(eps, 1.0 - eps);
    Ok(Odds {
        value: q / (1.0 - q),
        clipped: q != p,
    })
}

//! Penalized logistic regression fit by damped Newton iterations.

use nalgebra::{DMatrix, DVector};

use super::basis::PolyBasis;
use super::linear::LinearModel;
use crate::data::Features;
use crate::error::{Error, Result};

const MAX_ITER: usize = 100;

pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(t)) without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn objective(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, penalty: f64) -> f64 {
    let eta = x * beta;
    let nll: f64 = eta.iter().zip(y).map(|(&t, &yi)| softplus(t) - yi * t).sum();
    nll + 0.5 * penalty * beta.iter().skip(1).map(|b| b * b).sum::<f64>()
}

/// Minimizes the negative log-likelihood plus `penalty/2 · ‖w‖²` (intercept
/// unpenalized). Under perfect separation with zero penalty the iterations stop
/// after a fixed budget with large but finite coefficients.
pub fn logistic(x: &Features, y: &[f64], penalty: f64, degree: usize) -> Result<LinearModel> {
    let basis = PolyBasis::fit(x, degree);
    let p = basis.transform(x);
    let n = p.nrows();
    let q = p.ncols() + 1;
    let design = DMatrix::from_fn(n, q, |i, j| if j == 0 { 1.0 } else { p[(i, j - 1)] });
    let ybar = (y.iter().sum::<f64>() / n as f64).clamp(1e-6, 1.0 - 1e-6);
    let mut beta = DVector::zeros(q);
    beta[0] = (ybar / (1.0 - ybar)).ln();
    let mut obj = objective(&design, y, &beta, penalty);
    for _ in 0..MAX_ITER {
        let eta = &design * &beta;
        let mu: Vec<f64> = eta.iter().map(|&t| expit(t)).collect();
        let mut grad = DVector::zeros(q);
        let mut hess = DMatrix::zeros(q, q);
        for i in 0..n {
            let r = mu[i] - y[i];
            let w = (mu[i] * (1.0 - mu[i])).max(1e-12);
            let row = design.row(i);
            for a in 0..q {
                grad[a] += row[a] * r;
                let wa = w * row[a];
                for b in a..q {
                    hess[(a, b)] += wa * row[b];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
            if a > 0 {
                grad[a] += penalty * beta[a];
                hess[(a, a)] += penalty;
            }
            hess[(a, a)] += 1e-9;
        }
        if grad.amax() < 1e-10 * n as f64 {
            break;
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::Numerical("logistic Hessian is not positive definite".into()))?
            .solve(&grad);
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand = &beta - &step * t;
            let c_obj = objective(&design, y, &cand, penalty);
            if c_obj <= obj {
                let gain = obj - c_obj;
                beta = cand;
                obj = c_obj;
                improved = gain > 1e-14 * (1.0 + obj.abs());
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(LinearModel {
        basis,
        intercept: beta[0],
        coef: beta.iter().skip(1).copied().collect(),
    })
}

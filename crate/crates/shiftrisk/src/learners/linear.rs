//! Least squares and ridge regression on a standardized polynomial basis.
//!
//! The intercept is never penalized. Least squares uses an SVD pseudo-inverse,
//! so rank-deficient designs yield the minimum-norm solution instead of an
//! error.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::basis::PolyBasis;
use crate::data::Features;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub(crate) basis: PolyBasis,
    pub(crate) intercept: f64,
    pub(crate) coef: Vec<f64>,
}

impl LinearModel {
    pub fn linear_predictor(&self, row: &[f64], buf: &mut Vec<f64>) -> f64 {
        self.basis.expand_row(row, buf);
        self.intercept + buf.iter().zip(&self.coef).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coef
    }

    pub fn basis(&self) -> &PolyBasis {
        &self.basis
    }
}

fn centered(y: &[f64]) -> (f64, DVector<f64>) {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    (mean, DVector::from_iterator(y.len(), y.iter().map(|v| v - mean)))
}

/// Minimum-norm least squares.
pub fn least_squares(x: &Features, y: &[f64], degree: usize) -> Result<LinearModel> {
    let basis = PolyBasis::fit(x, degree);
    let p = basis.transform(x);
    let (mean, yc) = centered(y);
    let coef = if p.ncols() == 0 {
        Vec::new()
    } else {
        let dim = p.nrows().max(p.ncols()) as f64;
        let svd = p.svd(true, true);
        let tol = svd.singular_values.max() * 1e-12 * dim;
        let w = svd
            .solve(&yc, tol)
            .map_err(|e| Error::Numerical(format!("least squares solve failed: {e}")))?;
        w.iter().copied().collect()
    };
    Ok(LinearModel {
        basis,
        intercept: mean,
        coef,
    })
}

/// Ridge regression minimizing Σ(y − b − Pw)² + penalty·‖w‖².
pub fn ridge(x: &Features, y: &[f64], penalty: f64, degree: usize) -> Result<LinearModel> {
    if penalty == 0.0 {
        return least_squares(x, y, degree);
    }
    let basis = PolyBasis::fit(x, degree);
    let p = basis.transform(x);
    let (mean, yc) = centered(y);
    let q = p.ncols();
    let coef = if q == 0 {
        Vec::new()
    } else {
        let mut g = p.transpose() * &p;
        for j in 0..q {
            g[(j, j)] += penalty;
        }
        let rhs = p.transpose() * yc;
        let chol = g
            .cholesky()
            .ok_or_else(|| Error::Numerical("ridge normal equations are not positive definite".into()))?;
        chol.solve(&rhs).iter().copied().collect()
    };
    Ok(LinearModel {
        basis,
        intercept: mean,
        coef,
    })
}

/// Outcome of the leave-one-out search in [`poly_ridge_loo`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LooChoice {
    Constant,
    Ridge { degree: usize, penalty: f64 },
}

struct Spectral {
    basis: PolyBasis,
    u: DMatrix<f64>,
    eigvecs: DMatrix<f64>,
    eigvals: Vec<f64>,
    uty: Vec<f64>,
}

impl Spectral {
    fn new(x: &Features, yc: &DVector<f64>, degree: usize) -> Self {
        let basis = PolyBasis::fit(x, degree);
        let p = basis.transform(x);
        let eig = SymmetricEigen::new(p.transpose() * &p);
        let u = &p * &eig.eigenvectors;
        let uty = (u.transpose() * yc).iter().copied().collect();
        Self {
            basis,
            u,
            eigvecs: eig.eigenvectors,
            eigvals: eig.eigenvalues.iter().copied().collect(),
            uty,
        }
    }

    fn inverse(&self, j: usize, penalty: f64) -> f64 {
        let d = self.eigvals[j].max(0.0) + penalty;
        let floor = 1e-10 * self.eigvals.iter().fold(0.0f64, |a, &b| a.max(b)).max(1.0);
        if d > floor {
            1.0 / d
        } else {
            0.0
        }
    }

    /// Mean squared leave-one-out residual, or `None` when some hat value is ~1.
    fn loo_error(&self, yc: &DVector<f64>, penalty: f64) -> Option<f64> {
        let n = yc.len();
        let inv: Vec<f64> = (0..self.eigvals.len()).map(|j| self.inverse(j, penalty)).collect();
        let mut total = 0.0;
        for i in 0..n {
            let mut fit = 0.0;
            let mut h = 1.0 / n as f64;
            for j in 0..inv.len() {
                let uij = self.u[(i, j)];
                fit += uij * self.uty[j] * inv[j];
                h += uij * uij * inv[j];
            }
            let denom = 1.0 - h;
            if denom < 1e-8 {
                return None;
            }
            let r = (yc[i] - fit) / denom;
            total += r * r;
        }
        Some(total / n as f64)
    }

    fn model(self, mean: f64, penalty: f64) -> LinearModel {
        let q = self.eigvals.len();
        let mut coef = vec![0.0; q];
        for j in 0..q {
            let c = self.uty[j] * self.inverse(j, penalty);
            for (r, w) in coef.iter_mut().enumerate() {
                *w += self.eigvecs[(r, j)] * c;
            }
        }
        LinearModel {
            basis: self.basis,
            intercept: mean,
            coef,
        }
    }
}

/// Ridge regression whose polynomial degree (1..=`max_degree`) and penalty are
/// chosen by exact leave-one-out error, with the constant fit as a fallback
/// candidate. Ties keep the earlier (simpler) candidate.
pub fn poly_ridge_loo(x: &Features, y: &[f64], max_degree: usize, penalties: &[f64]) -> Result<(LinearModel, LooChoice)> {
    let n = y.len();
    let (mean, yc) = centered(y);
    let base = PolyBasis::fit(x, 1);
    let constant = || LinearModel {
        intercept: mean,
        coef: vec![0.0; base.width()],
        basis: base.clone(),
    };
    if n < 3 {
        return Ok((constant(), LooChoice::Constant));
    }
    let shrink = n as f64 / (n as f64 - 1.0);
    let mut best_err = yc.iter().map(|v| v * v).sum::<f64>() / n as f64 * shrink * shrink;
    let mut best: Option<(usize, f64)> = None;
    for degree in 1..=max_degree.max(1) {
        let spec = Spectral::new(x, &yc, degree);
        if spec.eigvals.is_empty() {
            continue;
        }
        for &pen in penalties {
            if let Some(err) = spec.loo_error(&yc, pen) {
                if err < best_err {
                    best_err = err;
                    best = Some((degree, pen));
                }
            }
        }
    }
    match best {
        None => Ok((constant(), LooChoice::Constant)),
        Some((degree, penalty)) => {
            let spec = Spectral::new(x, &yc, degree);
            Ok((spec.model(mean, penalty), LooChoice::Ridge { degree, penalty }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn predict(m: &LinearModel, row: &[f64]) -> f64 {
        m.linear_predictor(row, &mut Vec::new())
    }

    #[test]
    fn exact_line_is_recovered() {
        let x = Features::from_rows(&(0..6).map(|i| vec![i as f64]).collect::<Vec<_>>());
        let y: Vec<f64> = (0..6).map(|i| 2.0 * i as f64).collect();
        let m = least_squares(&x, &y, 1).unwrap();
        assert_abs_diff_eq!(predict(&m, &[0.0]), 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(predict(&m, &[1.0]) - predict(&m, &[0.0]), 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(predict(&m, &[3.0]), 6.0, epsilon = 1e-10);
    }

    #[test]
    fn duplicated_column_gives_minimum_norm_fit() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, i as f64]).collect();
        let x = Features::from_rows(&rows);
        let y: Vec<f64> = (0..8).map(|i| 1.0 + 3.0 * i as f64).collect();
        let m = least_squares(&x, &y, 1).unwrap();
        assert_abs_diff_eq!(m.coef[0], m.coef[1], epsilon = 1e-9);
        assert_abs_diff_eq!(predict(&m, &[10.0, 10.0]), 31.0, epsilon = 1e-9);
    }

    #[test]
    fn huge_penalty_shrinks_to_mean() {
        let x = Features::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![5.0]]);
        let y = [1.0, 3.0, 2.0, 10.0];
        let m = ridge(&x, &y, 1e14, 1).unwrap();
        assert_abs_diff_eq!(predict(&m, &[7.0]), 4.0, epsilon = 1e-9);
    }

    #[test]
    fn loo_search_prefers_constant_for_pure_noise_of_tiny_size() {
        let x = Features::from_rows(&[vec![0.0], vec![1.0]]);
        let (_, c) = poly_ridge_loo(&x, &[1.0, 2.0], 3, &[1.0]).unwrap();
        assert_eq!(c, LooChoice::Constant);
    }

    #[test]
    fn loo_search_finds_quadratic() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 / 10.0 - 2.0]).collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0] * r[0]).collect();
        let x = Features::from_rows(&rows);
        let (m, c) = poly_ridge_loo(&x, &y, 3, &[1e-6, 1.0]).unwrap();
        assert!(matches!(c, LooChoice::Ridge { degree, .. } if degree >= 2));
        assert_abs_diff_eq!(predict(&m, &[1.5]), 2.25, epsilon = 1e-3);
    }

    #[test]
    fn loo_shortcut_matches_brute_force() {
        let rows: Vec<Vec<f64>> = (0..15).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()]).collect();
        let y: Vec<f64> = rows.iter().enumerate().map(|(i, r)| r[0] - 2.0 * r[1] + 0.1 * (i % 3) as f64).collect();
        let x = Features::from_rows(&rows);
        let (mean, yc) = centered(&y);
        let _ = mean;
        let spec = Spectral::new(&x, &yc, 1);
        let shortcut = spec.loo_error(&yc, 0.5).unwrap();
        // Brute force: refit without each row. The basis is held fixed so the
        // shortcut identity is exact.
        let p = spec.basis.transform(&x);
        let mut brute = 0.0;
        for i in 0..15 {
            let keep: Vec<usize> = (0..15).filter(|&j| j != i).collect();
            let pk = DMatrix::from_fn(14, p.ncols(), |r, c| p[(keep[r], c)]);
            let yk: Vec<f64> = keep.iter().map(|&j| y[j]).collect();
            let ym = yk.iter().sum::<f64>() / 14.0;
            let colmeans: Vec<f64> = (0..p.ncols()).map(|c| pk.column(c).sum() / 14.0).collect();
            let pc = DMatrix::from_fn(14, p.ncols(), |r, c| pk[(r, c)] - colmeans[c]);
            let mut g = pc.transpose() * &pc;
            for j in 0..p.ncols() {
                g[(j, j)] += 0.5;
            }
            let rhs = pc.transpose() * DVector::from_iterator(14, yk.iter().map(|v| v - ym));
            let w = g.cholesky().unwrap().solve(&rhs);
            let pred = ym + (0..p.ncols()).map(|c| (p[(i, c)] - colmeans[c]) * w[c]).sum::<f64>();
            brute += (y[i] - pred).powi(2);
        }
        assert_abs_diff_eq!(shortcut, brute / 15.0, epsilon = 1e-9);
    }
}

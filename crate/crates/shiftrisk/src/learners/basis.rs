//! Standardized polynomial feature expansion.

use nalgebra::DMatrix;

use crate::data::Features;

/// Monomials of total degree 1..=`degree` over the raw features, each
/// centered and scaled by its training mean and standard deviation. Constant
/// monomials (zero spread on the training rows) are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyBasis {
    degree: usize,
    monomials: Vec<Vec<usize>>,
    means: Vec<f64>,
    scales: Vec<f64>,
}

fn monomials(p: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..degree {
        let mut next = Vec::new();
        for m in &frontier {
            let start = m.last().copied().unwrap_or(0);
            for j in start..p {
                let mut e = m.clone();
                e.push(j);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn eval_monomial(m: &[usize], row: &[f64]) -> f64 {
    m.iter().map(|&j| row[j]).product()
}

impl PolyBasis {
    pub fn fit(x: &Features, degree: usize) -> Self {
        let n = x.n_rows().max(1) as f64;
        let mut kept = Vec::new();
        let mut means = Vec::new();
        let mut scales = Vec::new();
        for m in monomials(x.n_cols(), degree.max(1)) {
            let vals: Vec<f64> = (0..x.n_rows()).map(|i| eval_monomial(&m, x.row(i))).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd > 1e-12 * (1.0 + mean.abs()) {
                kept.push(m);
                means.push(mean);
                scales.push(sd);
            }
        }
        Self {
            degree,
            monomials: kept,
            means,
            scales,
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of retained basis columns.
    pub fn width(&self) -> usize {
        self.monomials.len()
    }

    pub fn expand_row(&self, row: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (j, m) in self.monomials.iter().enumerate() {
            out.push((eval_monomial(m, row) - self.means[j]) / self.scales[j]);
        }
    }

    pub fn transform(&self, x: &Features) -> DMatrix<f64> {
        let q = self.width();
        let mut buf = Vec::with_capacity(q);
        let mut mat = DMatrix::zeros(x.n_rows(), q);
        for i in 0..x.n_rows() {
            self.expand_row(x.row(i), &mut buf);
            for (j, v) in buf.iter().enumerate() {
                mat[(i, j)] = *v;
            }
        }
        mat
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(3, 1).len(), 3);
        assert_eq!(monomials(3, 2).len(), 9);
        assert_eq!(monomials(3, 4).len(), 34);
    }

    #[test]
    fn columns_are_standardized_and_constants_dropped() {
        let x = Features::from_rows(&[vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0], vec![6.0, 5.0]]);
        let b = PolyBasis::fit(&x, 2);
        // x1, x1², x1·x2 survive; x2 and x2² are constant.
        assert_eq!(b.width(), 3);
        let m = b.transform(&x);
        for j in 0..m.ncols() {
            let col = m.column(j);
            let mean = col.sum() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }
}

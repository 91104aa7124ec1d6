//! k-nearest-neighbour averaging.

use crate::data::Features;

#[derive(Debug, Clone, PartialEq)]
pub struct Knn {
    pub(crate) x: Features,
    pub(crate) y: Vec<f64>,
    pub(crate) k: usize,
}

impl Knn {
    pub fn new(x: Features, y: Vec<f64>, k: usize) -> Self {
        let k = k.min(y.len()).max(1);
        Self { x, y, k }
    }

    /// Mean target over the k closest training rows (Euclidean distance; ties
    /// broken by training order, so predictions are deterministic).
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut d: Vec<(f64, usize)> = (0..self.x.n_rows())
            .map(|i| {
                let dist = self.x.row(i).iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                (dist, i)
            })
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < d.len() {
            d.select_nth_unstable_by(self.k - 1, order);
        }
        d[..self.k].iter().map(|&(_, i)| self.y[i]).sum::<f64>() / self.k as f64
    }
}

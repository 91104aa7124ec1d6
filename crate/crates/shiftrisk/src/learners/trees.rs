//! Gradient-boosted regression trees (depth-1 trees are stumps).
//!
//! Regression boosts squared error from the training mean; classification
//! boosts the logistic log-likelihood from the training log-odds with Newton
//! leaf values.

use super::logistic::expit;
use crate::data::Features;

/// Leaf values for classification are clamped to this magnitude.
const MAX_LEAF_LOGIT: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Boosted {
    base: f64,
    rate: f64,
    trees: Vec<Tree>,
    classify: bool,
    range: (f64, f64),
}

struct Grower<'a> {
    x: &'a Features,
    grad: &'a [f64],
    hess: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    leaf_clamp: f64,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn leaf_value(&self, idx: &[usize]) -> f64 {
        let g: f64 = idx.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = idx.iter().map(|&i| self.hess[i]).sum();
        (g / h.max(1e-12)).clamp(-self.leaf_clamp, self.leaf_clamp)
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(self.leaf_value(&idx)));
        if depth >= self.max_depth || idx.len() < 2 * self.min_leaf {
            return id;
        }
        let g_tot: f64 = idx.iter().map(|&i| self.grad[i]).sum();
        let h_tot: f64 = idx.iter().map(|&i| self.hess[i]).sum();
        let parent = g_tot * g_tot / h_tot.max(1e-12);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted = idx.clone();
        for f in 0..self.x.n_cols() {
            sorted.sort_by(|&a, &b| self.x.get(a, f).total_cmp(&self.x.get(b, f)).then(a.cmp(&b)));
            let (mut gl, mut hl) = (0.0, 0.0);
            for s in 0..sorted.len() - 1 {
                let i = sorted[s];
                gl += self.grad[i];
                hl += self.hess[i];
                let left_n = s + 1;
                if left_n < self.min_leaf || sorted.len() - left_n < self.min_leaf {
                    continue;
                }
                let (xa, xb) = (self.x.get(i, f), self.x.get(sorted[s + 1], f));
                if xa == xb {
                    continue;
                }
                let (gr, hr) = (g_tot - gl, h_tot - hl);
                let gain = gl * gl / hl.max(1e-12) + gr * gr / hr.max(1e-12) - parent;
                if gain > 1e-12 * (1.0 + parent.abs()) && best.is_none_or(|b| gain > b.0) {
                    best = Some((gain, f, 0.5 * (xa + xb)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else { return id };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| self.x.get(i, feature) <= threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

pub struct BoostParams {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Boosted {
    pub fn fit(x: &Features, y: &[f64], params: &BoostParams, classify: bool) -> Self {
        let n = y.len();
        let min = y.iter().copied().fold(f64::INFINITY, f64::min);
        let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = y.iter().sum::<f64>() / n as f64;
        let base = if classify {
            let p = mean.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        } else {
            mean
        };
        let mut score = vec![base; n];
        let mut trees = Vec::with_capacity(params.rounds);
        let mut grad = vec![0.0; n];
        let mut hess = vec![1.0; n];
        for _ in 0..params.rounds {
            for i in 0..n {
                if classify {
                    let p = expit(score[i]);
                    grad[i] = y[i] - p;
                    hess[i] = p * (1.0 - p);
                } else {
                    grad[i] = y[i] - score[i];
                }
            }
            let mut grower = Grower {
                x,
                grad: &grad,
                hess: &hess,
                max_depth: params.max_depth,
                min_leaf: params.min_leaf.max(1),
                leaf_clamp: if classify { MAX_LEAF_LOGIT } else { f64::INFINITY },
                nodes: Vec::new(),
            };
            grower.grow((0..n).collect(), 0);
            let tree = Tree { nodes: grower.nodes };
            for (i, s) in score.iter_mut().enumerate() {
                *s += params.learning_rate * tree.predict(x.row(i));
            }
            trees.push(tree);
        }
        Self {
            base,
            rate: params.learning_rate,
            trees,
            classify,
            range: (min, max),
        }
    }

    /// Regression predictions are clamped to the training target range;
    /// classification returns a probability.
    pub fn predict(&self, row: &[f64]) -> f64 {
        let s = self.base + self.rate * self.trees.iter().map(|t| t.predict(row)).sum::<f64>();
        if self.classify {
            expit(s)
        } else {
            s.clamp(self.range.0, self.range.1)
        }
    }
}

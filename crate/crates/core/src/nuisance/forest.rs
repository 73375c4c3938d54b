//! Random forests of CART trees for probability estimation and regression.
//!
//! Nodes are split to minimize the summed within-child squared error, which
//! for a binary response is proportional to the weighted Gini impurity.
//! Leaves predict the mean response; the forest averages its trees.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Design;
use crate::rng::rng_for;

/// Relative tolerance under which two split scores count as tied; ties keep
/// the earlier candidate (lower feature index, then lower threshold).
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features tried per split; `None` means `ceil(sqrt(p))`.
    pub mtry: Option<usize>,
    /// Minimum number of rows in a leaf.
    pub min_node: usize,
    /// Fraction of rows drawn without replacement for each tree.
    pub subsample: f64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: 200, mtry: None, min_node: 10, subsample: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Leaf(v) => return v,
                Node::Split { feature, threshold, left, right } => {
                    k = if row[feature] <= threshold { left } else { right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    trees: Vec<Tree>,
    n_features: usize,
}

struct Builder<'a> {
    x: &'a Design,
    y: &'a [f64],
    mtry: usize,
    min_node: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn grow(&mut self, rows: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) -> usize {
        let m = rows.len();
        let sum: f64 = rows.iter().map(|&i| self.y[i]).sum();
        let sum_sq: f64 = rows.iter().map(|&i| self.y[i] * self.y[i]).sum();
        let parent = sum_sq - sum * sum / m as f64;
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(sum / m as f64));
        if m < 2 * self.min_node || parent <= TIE_TOL * sum_sq.max(1.0) {
            return id;
        }
        let p = self.x.n_cols();
        let mut features: Vec<usize> =
            if self.mtry >= p { (0..p).collect() } else { sample(rng, p, self.mtry).into_vec() };
        features.sort_unstable();

        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<usize> = rows.to_vec();
        for &f in &features {
            let col = self.x.col(f);
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
            let (mut ls, mut lss) = (0.0, 0.0);
            for k in 0..m - 1 {
                let yi = self.y[order[k]];
                ls += yi;
                lss += yi * yi;
                let nl = k + 1;
                let nr = m - nl;
                if col[order[k]] == col[order[k + 1]] || nl < self.min_node || nr < self.min_node {
                    continue;
                }
                let rs = sum - ls;
                let rss = sum_sq - lss;
                let crit = (lss - ls * ls / nl as f64) + (rss - rs * rs / nr as f64);
                let better = match best {
                    None => true,
                    Some((b, _, _)) => crit < b - TIE_TOL * b.abs().max(1.0),
                };
                if better {
                    best = Some((crit, f, 0.5 * (col[order[k]] + col[order[k + 1]])));
                }
            }
        }
        let Some((crit, feature, threshold)) = best else { return id };
        if crit >= parent - TIE_TOL * parent.abs().max(1.0) {
            return id;
        }
        let col = self.x.col(feature);
        let split = partition(rows, |i| col[i] <= threshold);
        let (l, r) = rows.split_at_mut(split);
        let left = self.grow(l, rng);
        let right = self.grow(r, rng);
        self.nodes[id] = Node::Split { feature, threshold, left, right };
        id
    }
}

/// Stable in-place partition; returns the size of the `true` block.
fn partition(rows: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    let (yes, no): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| pred(i));
    let k = yes.len();
    rows[..k].copy_from_slice(&yes);
    rows[k..].copy_from_slice(&no);
    k
}

/// Fits a forest on the rows of `x` (column-major) with response `y`.
/// Tree `k` draws its randomness from `rng_for(seed, [k])`.
pub fn fit_forest(x: &Design, y: &[f64], params: &ForestParams, seed: u64) -> Result<Forest> {
    if params.n_trees < 1 {
        return Err(Error::Argument("n_trees must be at least 1".into()));
    }
    if params.min_node < 1 {
        return Err(Error::Argument("min_node must be at least 1".into()));
    }
    if !(params.subsample > 0.0 && params.subsample <= 1.0) {
        return Err(Error::Argument("subsample must lie in (0, 1]".into()));
    }
    let n = x.n_rows;
    if n == 0 {
        return Err(Error::Argument("cannot fit a forest on zero rows".into()));
    }
    let p = x.n_cols();
    let mtry = params.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize).clamp(1, p.max(1));
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_for(seed, &[k as u64]);
            let mut rows: Vec<usize> = if params.subsample >= 1.0 {
                (0..n).collect()
            } else {
                let m = ((params.subsample * n as f64).floor() as usize).max(1);
                let mut s = sample(&mut rng, n, m).into_vec();
                s.sort_unstable();
                s
            };
            let mut b = Builder { x, y, mtry, min_node: params.min_node, nodes: Vec::new() };
            if p == 0 {
                let mean = rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64;
                return Tree { nodes: vec![Node::Leaf(mean)] };
            }
            b.grow(&mut rows, &mut rng);
            Tree { nodes: b.nodes }
        })
        .collect();
    Ok(Forest { trees, n_features: p })
}

impl Forest {
    /// Mean of the trees' leaf means.
    pub fn predict(&self, row: &[f64]) -> f64 {
        debug_assert_eq!(row.len(), self.n_features);
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Number of leaves per tree.
    pub fn leaf_counts(&self) -> Vec<usize> {
        self.trees.iter().map(|t| t.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()).collect()
    }
}

//! CART regression trees grown by greedy variance reduction.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        n_samples: usize,
    },
    Leaf {
        value: f64,
        n_samples: usize,
    },
}

impl Node {
    pub fn n_samples(&self) -> usize {
        match self {
            Node::Split { n_samples, .. } | Node::Leaf { n_samples, .. } => *n_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features considered at each split; `None` means all of them.
    #[serde(default)]
    pub feature_subset: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 5,
            min_leaf: 1,
            feature_subset: None,
        }
    }
}

/// Nodes in preorder; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
    pub max_depth: usize,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value, .. } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    /// Longest root-to-leaf path, in splits.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::validation("nodes", "tree has no nodes"));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            match n {
                Node::Leaf { value, .. } if !value.is_finite() => {
                    return Err(Error::validation(format!("nodes[{i}].value"), "must be finite"));
                }
                Node::Split {
                    feature,
                    left,
                    right,
                    threshold,
                    ..
                } => {
                    if *feature >= n_features || !threshold.is_finite() {
                        return Err(Error::validation(format!("nodes[{i}]"), "bad feature or threshold"));
                    }
                    if *left <= i || *right <= i || *left >= self.nodes.len() || *right >= self.nodes.len() {
                        return Err(Error::validation(format!("nodes[{i}]"), "child index out of order"));
                    }
                }
                _ => {}
            }
        }
        if self.depth() > self.max_depth {
            return Err(Error::validation("max_depth", "tree is deeper than its bound"));
        }
        Ok(())
    }
}

/// A candidate split and its score: the sum over both sides of
/// (Σy)² / n, which differs from the SSE reduction by a per-node constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    pub score: f64,
}

/// Best split of `idx` over `features`, or `None` if no split leaves
/// `min_leaf` rows on both sides. The first best (by feature order, then
/// threshold) wins ties.
pub fn best_split(
    x: &[Vec<f64>],
    y: &[f64],
    idx: &[usize],
    features: &[usize],
    min_leaf: usize,
) -> Option<SplitChoice> {
    let n = idx.len();
    let total: f64 = idx.iter().map(|&i| y[i]).sum();
    let mut best: Option<SplitChoice> = None;
    let mut order = idx.to_vec();
    for &f in features {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let mut left_sum = 0.0;
        for k in 0..n - 1 {
            left_sum += y[order[k]];
            let (lo, hi) = (x[order[k]][f], x[order[k + 1]][f]);
            let n_left = k + 1;
            if lo == hi || n_left < min_leaf || n - n_left < min_leaf {
                continue;
            }
            let right_sum = total - left_sum;
            let score = left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64;
            if best.is_none_or(|b| score > b.score) {
                best = Some(SplitChoice {
                    feature: f,
                    threshold: lo + (hi - lo) / 2.0,
                    score,
                });
            }
        }
    }
    best
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    params: &'a TreeParams,
    n_features: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let value = idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(Node::Leaf {
            value,
            n_samples: idx.len(),
        });
        self.nodes.len() - 1
    }

    fn features(&mut self) -> Vec<usize> {
        match self.params.feature_subset {
            Some(m) if m < self.n_features => {
                let mut f = sample(&mut self.rng, self.n_features, m).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..self.n_features).collect(),
        }
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            (lo.min(self.y[i]), hi.max(self.y[i]))
        });
        if depth >= self.params.max_depth || idx.len() < 2 * self.params.min_leaf || lo == hi {
            return self.leaf(idx);
        }
        let features = self.features();
        let Some(split) = best_split(self.x, self.y, idx, &features, self.params.min_leaf) else {
            return self.leaf(idx);
        };
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: 0.0,
            n_samples: 0,
        });
        idx.sort_by_key(|&i| self.x[i][split.feature] > split.threshold);
        let n_left = idx.iter().filter(|&&i| self.x[i][split.feature] <= split.threshold).count();
        let (l, r) = idx.split_at_mut(n_left);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[at] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
            n_samples: n_left + r.len(),
        };
        at
    }
}

/// Grows a tree on the rows listed in `idx` (repeats allowed, as in a
/// bootstrap sample).
pub fn train_tree_on(
    x: &[Vec<f64>],
    y: &[f64],
    idx: &[usize],
    params: &TreeParams,
    seed: u64,
) -> Result<RegressionTree> {
    if idx.is_empty() {
        return Err(Error::Training("no training rows".into()));
    }
    if params.max_depth == 0 {
        return Err(Error::Training("max_depth must be >= 1".into()));
    }
    if params.min_leaf == 0 {
        return Err(Error::Training("min_leaf must be >= 1".into()));
    }
    if params.feature_subset == Some(0) {
        return Err(Error::Training("feature_subset must be >= 1".into()));
    }
    let n_features = x[idx[0]].len();
    if idx.iter().any(|&i| x[i].len() != n_features) {
        return Err(Error::Training("rows have differing feature counts".into()));
    }
    if idx.iter().any(|&i| !y[i].is_finite() || x[i].iter().any(|v| !v.is_finite())) {
        return Err(Error::Training("non-finite value in training rows".into()));
    }
    let mut b = Builder {
        x,
        y,
        params,
        n_features,
        rng: ChaCha8Rng::seed_from_u64(seed),
        nodes: Vec::new(),
    };
    let mut idx = idx.to_vec();
    b.grow(&mut idx, 0);
    Ok(RegressionTree {
        nodes: b.nodes,
        max_depth: params.max_depth,
    })
}

pub fn train_tree(x: &[Vec<f64>], y: &[f64], params: &TreeParams, seed: u64) -> Result<RegressionTree> {
    if x.len() != y.len() {
        return Err(Error::Training(format!("{} feature rows but {} targets", x.len(), y.len())));
    }
    let idx: Vec<usize> = (0..x.len()).collect();
    train_tree_on(x, y, &idx, params, seed)
}

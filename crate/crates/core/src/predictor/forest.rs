//! Bagged ensembles of regression trees.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{train_tree_on, RegressionTree, TreeParams};
use super::Target;
use crate::error::{Error, Result};
use crate::workload::derive_seed;

pub const MAX_TREES: usize = 10;
pub const MIN_ROWS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub tree: TreeParams,
    /// Train each tree on a same-size sample drawn with replacement.
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: MAX_TREES,
            tree: TreeParams::default(),
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub seed: u64,
    pub bootstrap: bool,
    pub bootstrap_fraction: f64,
    pub dataset_hash: String,
    pub n_rows: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub feature_subset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestModel {
    pub target: Target,
    pub feature_names: Vec<String>,
    pub trees: Vec<RegressionTree>,
    pub training_meta: TrainingMeta,
}

pub fn train_forest(
    x: &[Vec<f64>],
    y: &[f64],
    feature_names: &[&str],
    target: Target,
    params: &ForestParams,
    dataset_hash: &str,
) -> Result<ForestModel> {
    if !(1..=MAX_TREES).contains(&params.n_trees) {
        return Err(Error::Training(format!("n_trees must be in 1..={MAX_TREES}")));
    }
    if x.len() != y.len() {
        return Err(Error::Training(format!("{} feature rows but {} targets", x.len(), y.len())));
    }
    if x.len() < MIN_ROWS.max(params.tree.min_leaf) {
        return Err(Error::Training(format!(
            "{} rows; need at least {}",
            x.len(),
            MIN_ROWS.max(params.tree.min_leaf)
        )));
    }
    if x.iter().any(|r| r.len() != feature_names.len()) {
        return Err(Error::Training("feature rows do not match the feature names".into()));
    }
    let n = x.len();
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let seed = derive_seed(params.seed, &[t as u64]);
            let idx: Vec<usize> = if params.bootstrap {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xB007]));
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            train_tree_on(x, y, &idx, &params.tree, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForestModel {
        target,
        feature_names: feature_names.iter().map(|s| s.to_string()).collect(),
        trees,
        training_meta: TrainingMeta {
            seed: params.seed,
            bootstrap: params.bootstrap,
            bootstrap_fraction: if params.bootstrap { 1.0 } else { 0.0 },
            dataset_hash: dataset_hash.to_string(),
            n_rows: n,
            max_depth: params.tree.max_depth,
            min_leaf: params.tree.min_leaf,
            feature_subset: params.tree.feature_subset,
        },
    })
}

impl ForestModel {
    /// Mean of the tree outputs for features in `feature_names` order.
    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    /// Raw prediction, rounded and floored at 1 for the integer targets.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.target.finish(self.predict_raw(x))
    }

    /// Looks features up by name, so column order does not matter.
    pub fn predict_named(&self, features: &BTreeMap<String, f64>) -> Result<f64> {
        let x = self
            .feature_names
            .iter()
            .map(|name| {
                features
                    .get(name)
                    .copied()
                    .ok_or_else(|| Error::validation(format!("features.{name}"), "missing"))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(self.predict(&x))
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_TREES).contains(&self.trees.len()) {
            return Err(Error::validation("trees", format!("must hold 1..={MAX_TREES} trees")));
        }
        for (i, t) in self.trees.iter().enumerate() {
            t.validate(self.feature_names.len())
                .map_err(|e| Error::validation(format!("trees[{i}]"), e.to_string()))?;
        }
        Ok(())
    }
}

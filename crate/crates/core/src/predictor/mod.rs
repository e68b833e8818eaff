//! Regression trees and forests predicting the optimal placement from
//! workload features, with a linear baseline and rule extraction.

mod forest;
mod linear;
mod rules;
mod tree;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use forest::{train_forest, ForestModel, ForestParams, TrainingMeta, MAX_TREES};
pub use linear::{train_linear, LinearModel};
pub use rules::{extract_rules, Op, Predicate, Rule};
pub use tree::{best_split, train_tree, train_tree_on, Node, RegressionTree, SplitChoice, TreeParams};

use crate::error::{Error, Result};
use crate::metrics::smape;
use crate::placement::{DatasetRow, WorkloadFeatures, FEATURE_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Throughput,
    NStar,
    GStar,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Throughput, Target::NStar, Target::GStar];

    /// Column of the target in a dataset row.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Throughput => "throughput",
            Target::NStar => "n_star",
            Target::GStar => "g_star",
        }
    }

    /// Integer targets are rounded and floored at 1.
    pub fn finish(self, v: f64) -> f64 {
        match self {
            Target::Throughput => v,
            Target::NStar | Target::GStar => v.round().max(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub max_throughput_tok_s: f64,
    pub n_star: u64,
    pub g_star: u64,
}

/// One forest per target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementModel {
    pub throughput: ForestModel,
    pub n_star: ForestModel,
    pub g_star: ForestModel,
}

impl PlacementModel {
    pub fn forest(&self, t: Target) -> &ForestModel {
        match t {
            Target::Throughput => &self.throughput,
            Target::NStar => &self.n_star,
            Target::GStar => &self.g_star,
        }
    }

    pub fn predict(&self, x: &[f64]) -> Placement {
        Placement {
            max_throughput_tok_s: self.throughput.predict(x),
            n_star: self.n_star.predict(x) as u64,
            g_star: self.g_star.predict(x) as u64,
        }
    }

    pub fn predict_features(&self, f: &WorkloadFeatures) -> Placement {
        self.predict(&f.0)
    }

    pub fn validate(&self) -> Result<()> {
        for t in Target::ALL {
            let f = self.forest(t);
            if f.target != t {
                return Err(Error::validation(t.name(), format!("holds a {:?} forest", f.target)));
            }
            if f.feature_names != FEATURE_NAMES {
                return Err(Error::validation(
                    format!("{}.feature_names", t.name()),
                    "must be the 16 workload features in order",
                ));
            }
            f.validate().map_err(|e| Error::validation(t.name(), e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_path(path: &Path) -> Result<PlacementModel> {
        let m: PlacementModel = crate::io::read_json(path)?;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub forest: ForestParams,
    /// Fraction of conditions held out, chosen by condition hash.
    pub test_fraction: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            forest: ForestParams::default(),
            test_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmapePair {
    pub train: f64,
    pub test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub forest: SmapePair,
    pub linear: Option<SmapePair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_train: usize,
    pub n_test: usize,
    pub test_fraction: f64,
    pub dataset_hash: String,
    pub targets: BTreeMap<Target, TargetReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trained {
    pub model: PlacementModel,
    pub linear: Vec<LinearModel>,
    pub report: EvaluationReport,
}

/// Order-sensitive digest of the rows' features and targets.
pub fn dataset_hash(rows: &[DatasetRow]) -> String {
    let mut h = Sha256::new();
    for r in rows {
        for v in r.features.0.iter().chain(&r.targets) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update(r.condition_hash.as_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn smape_of(predict: impl Fn(&[f64]) -> f64, x: &[Vec<f64>], y: &[f64]) -> Result<Option<f64>> {
    if x.is_empty() {
        return Ok(None);
    }
    let p: Vec<f64> = x.iter().map(|r| predict(r)).collect();
    smape(&p, y).map(Some)
}

/// Splits rows by condition hash, trains a forest and a linear baseline per
/// target on the training part, and reports SMAPE on both parts.
pub fn train_placement(rows: &[DatasetRow], opts: &TrainOptions) -> Result<Trained> {
    if !(0.0..1.0).contains(&opts.test_fraction) {
        return Err(Error::validation("test_fraction", "must be in [0, 1)"));
    }
    let (test, train): (Vec<&DatasetRow>, Vec<&DatasetRow>) =
        rows.iter().partition(|r| r.is_test(opts.test_fraction));
    let hash = dataset_hash(rows);
    let xs = |rs: &[&DatasetRow]| rs.iter().map(|r| r.features.0.to_vec()).collect::<Vec<_>>();
    let (x_train, x_test) = (xs(&train), xs(&test));

    let mut forests = Vec::new();
    let mut linear = Vec::new();
    let mut targets = BTreeMap::new();
    for t in Target::ALL {
        let y_train: Vec<f64> = train.iter().map(|r| r.targets[t.index()]).collect();
        let y_test: Vec<f64> = test.iter().map(|r| r.targets[t.index()]).collect();
        let mut params = opts.forest.clone();
        params.seed = crate::workload::derive_seed(opts.forest.seed, &[t.index() as u64]);
        let f = train_forest(&x_train, &y_train, &FEATURE_NAMES, t, &params, &hash)?;
        let forest_smape = SmapePair {
            train: smape_of(|x| f.predict(x), &x_train, &y_train)?.unwrap_or(0.0),
            test: smape_of(|x| f.predict(x), &x_test, &y_test)?,
        };
        let (lin_smape, lin_err) = match train_linear(&x_train, &y_train, &FEATURE_NAMES, t) {
            Ok(m) => {
                let s = SmapePair {
                    train: smape_of(|x| m.predict(x), &x_train, &y_train)?.unwrap_or(0.0),
                    test: smape_of(|x| m.predict(x), &x_test, &y_test)?,
                };
                linear.push(m);
                (Some(s), None)
            }
            Err(e) => (None, Some(e.to_string())),
        };
        targets.insert(
            t,
            TargetReport {
                forest: forest_smape,
                linear: lin_smape,
                linear_error: lin_err,
            },
        );
        forests.push(f);
    }
    let mut it = forests.into_iter();
    let model = PlacementModel {
        throughput: it.next().expect("three targets"),
        n_star: it.next().expect("three targets"),
        g_star: it.next().expect("three targets"),
    };
    Ok(Trained {
        model,
        linear,
        report: EvaluationReport {
            n_train: train.len(),
            n_test: test.len(),
            test_fraction: opts.test_fraction,
            dataset_hash: hash,
            targets,
        },
    })
}

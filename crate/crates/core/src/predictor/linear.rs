//! Ordinary least squares on the workload features.

use serde::{Deserialize, Serialize};

use super::Target;
use crate::error::{Error, Result};
use crate::estimators::fit_linear;

pub const MIN_ROWS: usize = 17;

/// Relative residual norm below which a column counts as a combination of
/// the columns kept before it.
const DEPENDENCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub target: Target,
    pub feature_names: Vec<String>,
    /// Indices of the features with a coefficient.
    pub kept: Vec<usize>,
    /// Coefficients of the kept features.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Features dropped as constant or linearly dependent.
    pub dropped: Vec<String>,
}

impl LinearModel {
    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .kept
                .iter()
                .zip(&self.coefficients)
                .map(|(&j, c)| c * x[j])
                .sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.target.finish(self.predict_raw(x))
    }
}

/// Keeps the columns that add a direction to the centered span of the
/// columns kept so far (and of the intercept).
fn independent_columns(x: &[Vec<f64>], n_features: usize) -> Vec<usize> {
    let m = x.len() as f64;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..n_features {
        let mean = x.iter().map(|r| r[j]).sum::<f64>() / m;
        let mut v: Vec<f64> = x.iter().map(|r| r[j] - mean).collect();
        let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = x.iter().map(|r| r[j].abs()).fold(0.0, f64::max);
        if norm0 <= 1e-12 * scale.max(1e-300) * m.sqrt() {
            continue;
        }
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(b).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm <= DEPENDENCE_TOL * norm0 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
        kept.push(j);
    }
    kept
}

/// Least-squares fit with an intercept. Constant and linearly dependent
/// features are dropped first and listed in the model.
pub fn train_linear(x: &[Vec<f64>], y: &[f64], feature_names: &[&str], target: Target) -> Result<LinearModel> {
    if x.len() != y.len() {
        return Err(Error::Training(format!("{} feature rows but {} targets", x.len(), y.len())));
    }
    if x.len() < MIN_ROWS {
        return Err(Error::Training(format!("{} rows; need at least {MIN_ROWS}", x.len())));
    }
    if x.iter().any(|r| r.len() != feature_names.len()) {
        return Err(Error::Training("feature rows do not match the feature names".into()));
    }
    let kept = independent_columns(x, feature_names.len());
    let names: Vec<&str> = kept.iter().map(|&j| feature_names[j]).chain(["intercept"]).collect();
    let samples: Vec<(Vec<f64>, f64)> = x
        .iter()
        .zip(y)
        .map(|(r, &t)| (kept.iter().map(|&j| r[j]).chain([1.0]).collect(), t))
        .collect();
    let beta = fit_linear(&samples, &names).map_err(|e| Error::Training(e.to_string()))?;
    Ok(LinearModel {
        target,
        feature_names: feature_names.iter().map(|s| s.to_string()).collect(),
        dropped: (0..feature_names.len())
            .filter(|j| !kept.contains(j))
            .map(|j| feature_names[j].to_string())
            .collect(),
        coefficients: beta[..kept.len()].to_vec(),
        intercept: beta[kept.len()],
        kept,
    })
}

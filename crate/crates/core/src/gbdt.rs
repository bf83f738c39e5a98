//! Least-squares gradient-boosted regression trees used as the anchor mean.
//!
//! Trees are grown greedily by exact variance reduction over midpoints of
//! sorted unique feature values. The number of boosting stages is the only
//! tuned axis: [`select_stages`] picks it on a validation fold and the
//! pipeline refits with that count.

use serde::{Deserialize, Serialize};

use crate::dataset::Matrix;
use crate::error::{Error, Result};
use crate::stats;

/// Anything that maps a feature matrix to one point prediction per row.
pub trait PointPredictor {
    fn n_features(&self) -> usize;
    fn predict(&self, features: &Matrix) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageSelection {
    /// Minimize validation RMSE.
    ValidationRmse,
    /// Maximize validation Gaussian log-likelihood, with the noise scale taken
    /// from the training residuals at each stage.
    ValidationLogLik,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub max_stages: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub min_leaf: usize,
    pub selection: StageSelection,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            max_stages: 500,
            max_depth: 3,
            shrinkage: 0.1,
            min_leaf: 5,
            selection: StageSelection::ValidationRmse,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_stages == 0 || self.max_depth == 0 || self.min_leaf == 0 {
            return Err(Error::InvalidConfig(
                "gbdt max_stages, max_depth and min_leaf must be positive".into(),
            ));
        }
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gbdt shrinkage {} outside (0,1]",
                self.shrinkage
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
    pub max_depth: usize,
}

/// Best split of a set of rows on one pass over all features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Exhaustive search over midpoints between consecutive distinct values.
/// Ties keep the first candidate (lowest feature, then lowest threshold).
pub fn best_split(x: &Matrix, target: &[f64], rows: &[usize], min_leaf: usize) -> Option<SplitChoice> {
    let n = rows.len();
    if n < 2 * min_leaf {
        return None;
    }
    let total: f64 = rows.iter().map(|&r| target[r]).sum();
    let parent = total * total / n as f64;
    let mut best: Option<SplitChoice> = None;
    let mut order: Vec<usize> = rows.to_vec();
    for f in 0..x.cols() {
        order.sort_by(|&a, &b| x.get(a, f).total_cmp(&x.get(b, f)));
        let mut left_sum = 0.0;
        for i in 0..n - 1 {
            left_sum += target[order[i]];
            let n_left = i + 1;
            let n_right = n - n_left;
            let lo = x.get(order[i], f);
            let hi = x.get(order[i + 1], f);
            if lo == hi || n_left < min_leaf || n_right < min_leaf {
                continue;
            }
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / n_left as f64 + right_sum * right_sum / n_right as f64 - parent;
            if best.is_none_or(|b| gain > b.gain) {
                best = Some(SplitChoice {
                    feature: f,
                    threshold: lo + (hi - lo) / 2.0,
                    gain,
                });
            }
        }
    }
    best
}

// Gains below this (relative to the node's sum of squares) are rounding noise.
const MIN_RELATIVE_GAIN: f64 = 1e-12;

impl RegressionTree {
    pub fn fit(x: &Matrix, target: &[f64], rows: &[usize], max_depth: usize, min_leaf: usize) -> Self {
        let mut tree = RegressionTree {
            nodes: Vec::new(),
            max_depth,
        };
        tree.grow(x, target, rows, 0, min_leaf);
        tree
    }

    fn grow(&mut self, x: &Matrix, target: &[f64], rows: &[usize], depth: usize, min_leaf: usize) -> usize {
        let id = self.nodes.len();
        let values: Vec<f64> = rows.iter().map(|&r| target[r]).collect();
        let leaf_value = stats::mean(&values);
        self.nodes.push(Node::Leaf { value: leaf_value });
        if depth >= self.max_depth {
            return id;
        }
        let ss: f64 = values.iter().map(|v| v * v).sum();
        let Some(split) = best_split(x, target, rows, min_leaf) else {
            return id;
        };
        if split.gain <= MIN_RELATIVE_GAIN * ss.max(f64::MIN_POSITIVE) {
            return id;
        }
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&r| x.get(r, split.feature) <= split.threshold);
        let left = self.grow(x, target, &left_rows, depth + 1, min_leaf);
        let right = self.grow(x, target, &right_rows, depth + 1, min_leaf);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    id = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], id: usize) -> usize {
            match &nodes[id] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub base_prediction: f64,
    pub trees: Vec<RegressionTree>,
    pub shrinkage: f64,
    pub n_stages: usize,
    pub max_depth: usize,
    pub n_features: usize,
}

pub fn fit_gbdt(features: &Matrix, target: &[f64], config: &GbdtConfig) -> Result<GbdtModel> {
    config.validate()?;
    if features.rows() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            got: target.len(),
        });
    }
    if target.is_empty() || target.iter().chain(features.as_slice()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("gbdt needs finite, non-empty training data".into()));
    }
    let base = stats::mean(target);
    let mut model = GbdtModel {
        base_prediction: base,
        trees: Vec::with_capacity(config.max_stages),
        shrinkage: config.shrinkage,
        n_stages: 0,
        max_depth: config.max_depth,
        n_features: features.cols(),
    };
    if target.len() < 2 * config.min_leaf {
        return Ok(model);
    }
    let rows: Vec<usize> = (0..target.len()).collect();
    let mut pred = vec![base; target.len()];
    let mut residual = vec![0.0; target.len()];
    for _ in 0..config.max_stages {
        for i in 0..target.len() {
            residual[i] = target[i] - pred[i];
        }
        if residual.iter().all(|r| *r == 0.0) {
            break;
        }
        let tree = RegressionTree::fit(features, &residual, &rows, config.max_depth, config.min_leaf);
        for (i, p) in pred.iter_mut().enumerate() {
            *p += config.shrinkage * tree.predict_row(features.row(i));
        }
        model.trees.push(tree);
    }
    model.n_stages = model.trees.len();
    Ok(model)
}

impl GbdtModel {
    fn check_dims(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: features.cols(),
            });
        }
        Ok(())
    }

    /// Copy that evaluates only the first `stages` trees.
    pub fn truncated(&self, stages: usize) -> GbdtModel {
        let mut m = self.clone();
        m.trees.truncate(stages);
        m.n_stages = m.trees.len();
        m
    }

    /// Predictions after each stage: `out[t]` uses the first `t` trees
    /// (`out[0]` is the base prediction).
    pub fn staged_predict(&self, features: &Matrix) -> Result<Vec<Vec<f64>>> {
        self.check_dims(features)?;
        let mut cur = vec![self.base_prediction; features.rows()];
        let mut out = Vec::with_capacity(self.n_stages + 1);
        out.push(cur.clone());
        for tree in &self.trees[..self.n_stages] {
            for (i, p) in cur.iter_mut().enumerate() {
                *p += self.shrinkage * tree.predict_row(features.row(i));
            }
            out.push(cur.clone());
        }
        Ok(out)
    }
}

impl PointPredictor for GbdtModel {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict(&self, features: &Matrix) -> Result<Vec<f64>> {
        predict_anchor(self, features)
    }
}

/// Prediction using the first `n_stages` trees.
pub fn predict_anchor(model: &GbdtModel, features: &Matrix) -> Result<Vec<f64>> {
    model.check_dims(features)?;
    Ok(features
        .iter_rows()
        .map(|row| {
            let mut p = model.base_prediction;
            for tree in &model.trees[..model.n_stages] {
                p += model.shrinkage * tree.predict_row(row);
            }
            p
        })
        .collect())
}

fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    let ss: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    (ss / truth.len() as f64).sqrt()
}

/// Validation RMSE after each stage `t = 1..=n_stages`.
pub fn staged_validation_rmse(model: &GbdtModel, x_va: &Matrix, y_va: &[f64]) -> Result<Vec<f64>> {
    if x_va.rows() != y_va.len() {
        return Err(Error::DimensionMismatch {
            expected: x_va.rows(),
            got: y_va.len(),
        });
    }
    let staged = model.staged_predict(x_va)?;
    Ok(staged[1..].iter().map(|p| rmse(p, y_va)).collect())
}

/// Stage count in `[1, n_stages]` minimizing validation RMSE; ties go to the
/// smaller count. A model without trees returns 0.
pub fn select_stages(model: &GbdtModel, x_va: &Matrix, y_va: &[f64]) -> Result<usize> {
    let errors = staged_validation_rmse(model, x_va, y_va)?;
    Ok(argmin_first(&errors).map_or(0, |i| i + 1))
}

/// Stage count maximizing validation Gaussian log-likelihood, with the noise
/// variance at stage `t` set to the training mean squared residual.
pub fn select_stages_loglik(
    model: &GbdtModel,
    x_tr: &Matrix,
    y_tr: &[f64],
    x_va: &Matrix,
    y_va: &[f64],
) -> Result<usize> {
    let train = model.staged_predict(x_tr)?;
    let val = model.staged_predict(x_va)?;
    let nll: Vec<f64> = (1..train.len())
        .map(|t| {
            let var = (rmse(&train[t], y_tr).powi(2)).max(1e-300);
            let mse_va = rmse(&val[t], y_va).powi(2);
            0.5 * (2.0 * std::f64::consts::PI * var).ln() + 0.5 * mse_va / var
        })
        .collect();
    Ok(argmin_first(&nll).map_or(0, |i| i + 1))
}

pub(crate) fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v < values[b]) {
            best = Some(i);
        }
    }
    best
}

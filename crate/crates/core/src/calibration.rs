//! Closed-form affine recalibration of predictive means on a held-out split.
//! Only means move; densities are never touched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FitUnits {
    ZSpace,
    #[default]
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    pub a: f64,
    pub b: f64,
    pub fit_units: FitUnits,
}

impl CalibrationMap {
    pub fn identity(fit_units: FitUnits) -> Self {
        CalibrationMap { a: 1.0, b: 0.0, fit_units }
    }
}

// Below this prediction variance the slope is not identifiable.
const MIN_VARIANCE: f64 = 1e-12;

/// Least-squares `(a, b)` minimizing `Σ (y − a μ − b)²`. When the predictions
/// are (numerically) constant the slope is fixed to 1 and `b` is the mean
/// residual.
pub fn fit_calibration(pred: &[f64], target: &[f64], fit_units: FitUnits) -> Result<CalibrationMap> {
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: pred.len(),
            got: target.len(),
        });
    }
    if pred.len() < 2 {
        return Err(Error::InvalidData("calibration needs at least two points".into()));
    }
    let mu = stats::mean(pred);
    let ybar = stats::mean(target);
    let n = pred.len() as f64;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (p, y) in pred.iter().zip(target) {
        cov += (p - mu) * (y - ybar);
        var += (p - mu) * (p - mu);
    }
    cov /= n;
    var /= n;
    if var < MIN_VARIANCE {
        let resid: Vec<f64> = target.iter().zip(pred).map(|(y, p)| y - p).collect();
        return Ok(CalibrationMap {
            a: 1.0,
            b: stats::mean(&resid),
            fit_units,
        });
    }
    let a = cov / var;
    Ok(CalibrationMap {
        a,
        b: ybar - a * mu,
        fit_units,
    })
}

pub fn apply_calibration(map: &CalibrationMap, means: &[f64]) -> Vec<f64> {
    means.iter().map(|m| map.a * m + map.b).collect()
}

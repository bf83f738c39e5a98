//! Test-fold metrics and their aggregation over outer runs.
//!
//! RMSE is computed in target units and NLL/CRPS in z-units. The unit
//! wrappers keep the two from being mixed by accident.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::MixtureDensity;
use crate::stats;

/// Values in the target's original units.
#[derive(Debug, Clone, Copy)]
pub struct Original<'a>(pub &'a [f64]);

/// Values in z-scored target units.
#[derive(Debug, Clone, Copy)]
pub struct ZSpace<'a>(pub &'a [f64]);

pub fn rmse(pred: Original<'_>, truth: Original<'_>) -> Result<f64> {
    let (p, t) = (pred.0, truth.0);
    if p.len() != t.len() || p.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: t.len(),
            got: p.len(),
        });
    }
    let ss: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / p.len() as f64).sqrt())
}

pub fn nll(densities: &[MixtureDensity], y: ZSpace<'_>) -> Result<f64> {
    if densities.len() != y.0.len() || densities.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: y.0.len(),
            got: densities.len(),
        });
    }
    let mut total = 0.0;
    for (d, v) in densities.iter().zip(y.0) {
        total -= d.log_pdf(*v)?;
    }
    Ok(total / densities.len() as f64)
}

/// `E|X − m|` for `X ~ N(0, v)` shifted by `m`: `m(2Φ(m/√v) − 1) + 2√v φ(m/√v)`.
fn a_term(m: f64, v: f64) -> f64 {
    let s = v.sqrt();
    let u = m / s;
    m * (2.0 * stats::normal_cdf(u) - 1.0) + 2.0 * s * stats::normal_pdf(u)
}

/// Closed-form CRPS of a Gaussian mixture:
/// `Σ w_i A(y − μ_i, σ_i²) − ½ Σ_{i,j} w_i w_j A(μ_i − μ_j, σ_i² + σ_j²)`.
pub fn crps_gaussian_mixture(density: &MixtureDensity, y: f64) -> f64 {
    let c = &density.components;
    let total = density.weight_sum();
    let mut first = 0.0;
    for ci in c {
        first += ci.weight * a_term(y - ci.mean, ci.sd * ci.sd);
    }
    let mut second = 0.0;
    for ci in c {
        for cj in c {
            second += ci.weight * cj.weight * a_term(ci.mean - cj.mean, ci.sd * ci.sd + cj.sd * cj.sd);
        }
    }
    (first / total - 0.5 * second / (total * total)).max(0.0)
}

pub fn mean_crps(densities: &[MixtureDensity], y: ZSpace<'_>) -> Result<f64> {
    if densities.len() != y.0.len() || densities.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: y.0.len(),
            got: densities.len(),
        });
    }
    Ok(densities
        .iter()
        .zip(y.0)
        .map(|(d, v)| crps_gaussian_mixture(d, *v))
        .sum::<f64>()
        / densities.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrpsBounds {
    pub r_f: f64,
    pub r_y: f64,
    pub sigma_max: f64,
}

impl CrpsBounds {
    pub fn value(&self) -> f64 {
        self.r_f + self.r_y + (2.0 / std::f64::consts::PI).sqrt() * self.sigma_max
    }
}

/// Whether CRPS ≤ R_f + R_y + √(2/π) σ_max. Inputs outside the stated
/// ranges are reported as an error rather than checked.
pub fn crps_bound_check(density: &MixtureDensity, y: f64, bounds: &CrpsBounds) -> Result<bool> {
    if y.abs() > bounds.r_y {
        return Err(Error::InvalidData(format!("|y| = {} exceeds R_y = {}", y.abs(), bounds.r_y)));
    }
    for c in &density.components {
        if c.mean.abs() > bounds.r_f || c.sd > bounds.sigma_max {
            return Err(Error::InvalidData(format!(
                "component (mean {}, sd {}) outside R_f = {}, sigma_max = {}",
                c.mean, c.sd, bounds.r_f, bounds.sigma_max
            )));
        }
    }
    Ok(crps_gaussian_mixture(density, y) <= bounds.value())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub seed: u64,
    pub rmse_original: f64,
    /// RMSE of the uncalibrated predictive means, original units.
    pub rmse_uncalibrated: f64,
    pub nll_z: f64,
    pub crps_z: f64,
    pub n_test: usize,
    pub t_gbdt: usize,
    pub t_moe: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub dataset: String,
    pub runs: usize,
    /// True when only one run exists and the standard errors are placeholders.
    pub stderr_undefined: bool,
    pub metrics: Vec<MetricSummary>,
}

impl AggregateReport {
    pub fn get(&self, metric: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.metric == metric)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["dataset", "runs", "metric", "mean", "stderr"])?;
        for m in &self.metrics {
            w.write_record([
                self.dataset.clone(),
                self.runs.to_string(),
                m.metric.clone(),
                format!("{:.17e}", m.mean),
                format!("{:.17e}", m.stderr),
            ])?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<aggregate>".into(),
            source: e,
        })?;
        Ok(())
    }

    /// One markdown table row: `| dataset | m ± s | ... |`.
    pub fn markdown_row(&self, metrics: &[&str]) -> String {
        let cells: Vec<String> = metrics
            .iter()
            .map(|name| match self.get(name) {
                Some(m) => format!("{:.2} ± {:.2}", m.mean, m.stderr),
                None => "n/a".into(),
            })
            .collect();
        format!("| {} | {} |", self.dataset, cells.join(" | "))
    }
}

pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let m = stats::mean(values);
    let se = if values.len() < 2 {
        0.0
    } else {
        stats::sample_std(values) / (values.len() as f64).sqrt()
    };
    (m, se)
}

pub fn aggregate(reports: &[RunReport]) -> Result<AggregateReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidData("cannot aggregate zero runs".into()))?;
    if let Some(other) = reports.iter().find(|r| r.dataset != first.dataset) {
        return Err(Error::MixedDatasets(first.dataset.clone(), other.dataset.clone()));
    }
    let columns: [(&str, fn(&RunReport) -> f64); 6] = [
        ("rmse", |r| r.rmse_original),
        ("rmse_uncalibrated", |r| r.rmse_uncalibrated),
        ("nll", |r| r.nll_z),
        ("crps", |r| r.crps_z),
        ("t_gbdt", |r| r.t_gbdt as f64),
        ("t_moe", |r| r.t_moe as f64),
    ];
    let metrics = columns
        .iter()
        .map(|(name, f)| {
            let vals: Vec<f64> = reports.iter().map(f).collect();
            let (mean, stderr) = mean_and_stderr(&vals);
            MetricSummary {
                metric: name.to_string(),
                mean,
                stderr,
            }
        })
        .collect();
    Ok(AggregateReport {
        dataset: first.dataset.clone(),
        runs: reports.len(),
        stderr_undefined: reports.len() < 2,
        metrics,
    })
}

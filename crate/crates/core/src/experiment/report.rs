use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::scores::ScoreKind;

/// Two-sided confidence level of every reported interval.
pub const CONFIDENCE: f64 = 0.999;

/// Sample mean and the half-width of its Student-t interval at
/// [`CONFIDENCE`]. The half-width is `None` for a single value.
pub fn mean_and_interval(values: &[f64]) -> Result<(f64, Option<f64>)> {
    if values.is_empty() {
        return Err(Error::Contract(
            "an interval needs at least one value".into(),
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, None));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::Contract(e.to_string()))?
        .inverse_cdf(0.5 + CONFIDENCE / 2.0);
    Ok((mean, Some(t * (var / n).sqrt())))
}

/// Detection metrics of one score for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub variant: String,
    pub seed: u64,
    pub score: ScoreKind,
    pub dataset: String,
    pub inliers: usize,
    pub outliers: usize,
    pub auroc: f64,
    pub auprc: f64,
    pub fpr80: f64,
}

/// Metrics of one (variant, score, dataset) cell aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub score: ScoreKind,
    pub dataset: String,
    pub seeds: usize,
    pub auroc_mean: f64,
    pub auroc_ci: Option<f64>,
    pub auprc_mean: f64,
    pub auprc_ci: Option<f64>,
    pub fpr80_mean: f64,
    pub fpr80_ci: Option<f64>,
}

/// Groups rows by (variant, score, dataset) in first-appearance order.
pub fn summarize(rows: &[MetricRow]) -> Result<Vec<SummaryRow>> {
    let mut keys: Vec<(&str, ScoreKind, &str)> = Vec::new();
    for r in rows {
        let key = (r.variant.as_str(), r.score, r.dataset.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(variant, score, dataset)| {
            let cell: Vec<&MetricRow> = rows
                .iter()
                .filter(|r| r.variant == variant && r.score == score && r.dataset == dataset)
                .collect();
            let stat = |f: fn(&MetricRow) -> f64| {
                mean_and_interval(&cell.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let (auroc_mean, auroc_ci) = stat(|r| r.auroc)?;
            let (auprc_mean, auprc_ci) = stat(|r| r.auprc)?;
            let (fpr80_mean, fpr80_ci) = stat(|r| r.fpr80)?;
            Ok(SummaryRow {
                variant: variant.to_string(),
                score,
                dataset: dataset.to_string(),
                seeds: cell.len(),
                auroc_mean,
                auroc_ci,
                auprc_mean,
                auprc_ci,
                fpr80_mean,
                fpr80_ci,
            })
        })
        .collect()
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

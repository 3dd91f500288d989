//! Single-model and ensemble performance metrics on clipped predictions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::PredictionSet;
use crate::partition::ImageTargets;
use crate::report::{fmt_f64, write_csv};
use crate::stats::compensated_sum;

fn check_pair(pred: &[f64], obs: &[f64]) -> Result<()> {
    if pred.len() != obs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} observations",
            pred.len(),
            obs.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::InvalidInput("metrics need at least 2 points".into()));
    }
    Ok(())
}

pub fn mae(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs)?;
    Ok(compensated_sum(pred.iter().zip(obs).map(|(p, o)| (p - o).abs())) / pred.len() as f64)
}

pub fn mse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs)?;
    Ok(compensated_sum(pred.iter().zip(obs).map(|(p, o)| (p - o).powi(2))) / pred.len() as f64)
}

pub fn rmse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    mse(pred, obs).map(f64::sqrt)
}

/// `1 − SSE/SST` with SST about the mean of `obs`.
pub fn r2(pred: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(pred, obs)?;
    let m = compensated_sum(obs.iter().copied()) / obs.len() as f64;
    let sst = compensated_sum(obs.iter().map(|o| (o - m).powi(2)));
    if sst <= 0.0 {
        return Err(Error::Degenerate("R² undefined: observed values have zero variance".into()));
    }
    let sse = compensated_sum(pred.iter().zip(obs).map(|(p, o)| (p - o).powi(2)));
    Ok(1.0 - sse / sst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricTriple {
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
}

impl MetricTriple {
    pub fn of(pred: &[f64], obs: &[f64]) -> Result<Self> {
        Ok(MetricTriple {
            mae: mae(pred, obs)?,
            rmse: rmse(pred, obs)?,
            r2: r2(pred, obs)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepetitionMetrics {
    pub per_repetition: BTreeMap<usize, MetricTriple>,
    pub mean: MetricTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub n_images: usize,
    pub repetitions: RepetitionMetrics,
    pub ensemble: MetricTriple,
}

/// Images every repetition must cover, with their group-B targets.
fn evaluable<'a>(
    ps: &'a PredictionSet,
    targets: &ImageTargets,
) -> Result<(BTreeMap<usize, BTreeMap<&'a str, f64>>, BTreeMap<&'a str, f64>)> {
    let by_rep = ps.clipped_by_repetition();
    if by_rep.is_empty() {
        return Err(Error::InvalidInput("empty prediction set".into()));
    }
    let images: BTreeSet<&str> = by_rep.values().flat_map(|m| m.keys().copied()).collect();
    for (rep, preds) in &by_rep {
        if let Some(missing) = images.iter().find(|i| !preds.contains_key(*i)) {
            return Err(Error::InvalidInput(format!(
                "repetition {rep} has no prediction for image {missing}"
            )));
        }
    }
    let obs = images
        .iter()
        .map(|id| {
            targets
                .get(*id)
                .map(|t| (*id, t.mean_b))
                .ok_or_else(|| Error::InvalidInput(format!("no group-B target for image {id}")))
        })
        .collect::<Result<_>>()?;
    Ok((by_rep, obs))
}

/// Metrics per repetition on its concatenated held-out predictions, and their
/// mean across repetitions.
pub fn repetition_metrics(ps: &PredictionSet, targets: &ImageTargets) -> Result<RepetitionMetrics> {
    let (by_rep, obs) = evaluable(ps, targets)?;
    let y: Vec<f64> = obs.values().copied().collect();
    let mut per_repetition = BTreeMap::new();
    for (rep, preds) in &by_rep {
        let p: Vec<f64> = obs.keys().map(|id| preds[id]).collect();
        per_repetition.insert(*rep, MetricTriple::of(&p, &y)?);
    }
    let k = per_repetition.len() as f64;
    let avg = |f: fn(&MetricTriple) -> f64| compensated_sum(per_repetition.values().map(f)) / k;
    let mean = MetricTriple {
        mae: avg(|t| t.mae),
        rmse: avg(|t| t.rmse),
        r2: avg(|t| t.r2),
    };
    Ok(RepetitionMetrics {
        per_repetition,
        mean,
    })
}

/// Per-image mean of the clipped predictions across repetitions.
pub fn ensemble_predictions(ps: &PredictionSet) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for e in ps.entries() {
        acc.entry(e.image_id.as_str()).or_default().push(e.clipped);
    }
    acc.into_iter()
        .map(|(id, v)| (id.to_string(), compensated_sum(v.iter().copied()) / v.len() as f64))
        .collect()
}

pub fn ensemble_metrics(ps: &PredictionSet, targets: &ImageTargets) -> Result<MetricTriple> {
    let (_, obs) = evaluable(ps, targets)?;
    let ens = ensemble_predictions(ps);
    let p: Vec<f64> = obs.keys().map(|id| ens[*id]).collect();
    let y: Vec<f64> = obs.values().copied().collect();
    MetricTriple::of(&p, &y)
}

/// Both metric sets, with the convexity bounds checked: the ensemble cannot
/// have larger MAE or MSE than the average repetition.
pub fn metric_report(ps: &PredictionSet, targets: &ImageTargets) -> Result<MetricReport> {
    let repetitions = repetition_metrics(ps, targets)?;
    let ensemble = ensemble_metrics(ps, targets)?;
    let k = repetitions.per_repetition.len() as f64;
    let mean_mse = compensated_sum(repetitions.per_repetition.values().map(|t| t.rmse * t.rmse)) / k;
    let tol = 1e-9;
    if ensemble.mae > repetitions.mean.mae * (1.0 + tol) + tol
        || ensemble.rmse.powi(2) > mean_mse * (1.0 + tol) + tol
    {
        return Err(Error::Numerical(format!(
            "ensemble violates convexity bound (MAE {} vs {}, MSE {} vs {})",
            ensemble.mae,
            repetitions.mean.mae,
            ensemble.rmse.powi(2),
            mean_mse
        )));
    }
    Ok(MetricReport {
        n_images: ensemble_predictions(ps).len(),
        repetitions,
        ensemble,
    })
}

/// One row: R², MAE, RMSE, R²_ens, MAE_ens, RMSE_ens.
pub fn write_metrics_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let m = &report.repetitions.mean;
    let e = &report.ensemble;
    write_csv(
        path,
        &["r2", "mae", "rmse", "r2_ens", "mae_ens", "rmse_ens"],
        [[m.r2, m.mae, m.rmse, e.r2, e.mae, e.rmse].map(fmt_f64)],
    )
}

pub fn write_repetition_csv(path: &Path, report: &MetricReport) -> Result<()> {
    write_csv(
        path,
        &["rep", "r2", "mae", "rmse"],
        report
            .repetitions
            .per_repetition
            .iter()
            .map(|(rep, t)| [rep.to_string(), fmt_f64(t.r2), fmt_f64(t.mae), fmt_f64(t.rmse)]),
    )
}

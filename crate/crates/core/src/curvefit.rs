//! Three-parameter learning-curve fits by Levenberg–Marquardt.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::write_csv;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveForm {
    /// `a·exp(−b·n) + c`
    Decay,
    /// `a·(1 − exp(−b·n)) + c`
    Rise,
}

impl CurveForm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "decay" => Ok(CurveForm::Decay),
            "rise" => Ok(CurveForm::Rise),
            other => Err(Error::InvalidInput(format!("unknown curve form {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CurveForm::Decay => "decay",
            CurveForm::Rise => "rise",
        }
    }

    pub fn eval(self, p: [f64; 3], n: f64) -> f64 {
        let e = (-p[1] * n).exp();
        match self {
            CurveForm::Decay => p[0] * e + p[2],
            CurveForm::Rise => p[0] * (1.0 - e) + p[2],
        }
    }

    /// Partial derivatives with respect to (a, b, c).
    pub fn jacobian(self, p: [f64; 3], n: f64) -> [f64; 3] {
        let e = (-p[1] * n).exp();
        match self {
            CurveForm::Decay => [e, -p[0] * n * e, 1.0],
            CurveForm::Rise => [1.0 - e, p[0] * n * e, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub form: CurveForm,
    pub params: [f64; 3],
    pub rss: f64,
    pub iterations: usize,
    /// A tolerance was met before the iteration cap.
    pub converged: bool,
    pub gradient_norm: f64,
    /// RSS after each accepted step, starting with the initial point.
    pub rss_trace: Vec<f64>,
}

pub const MAX_ITERATIONS: usize = 500;
pub const RSS_TOLERANCE: f64 = 1e-12;
pub const GRADIENT_TOLERANCE: f64 = 1e-10;
const MAX_DAMPING: f64 = 1e16;

fn rss(form: CurveForm, p: [f64; 3], points: &[(f64, f64)]) -> Result<f64> {
    let mut s = 0.0;
    for &(n, y) in points {
        let f = form.eval(p, n);
        if !f.is_finite() {
            return Err(Error::Numerical(format!("model value not finite at n = {n}")));
        }
        s += (y - f).powi(2);
    }
    Ok(s)
}

fn normal_equations(form: CurveForm, p: [f64; 3], points: &[(f64, f64)]) -> (Matrix3<f64>, Vector3<f64>) {
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    for &(n, y) in points {
        let j = Vector3::from(form.jacobian(p, n));
        let r = y - form.eval(p, n);
        jtj += j * j.transpose();
        jtr += j * r;
    }
    (jtj, jtr)
}

pub fn levenberg_marquardt(form: CurveForm, points: &[(f64, f64)], init: [f64; 3]) -> Result<FitResult> {
    if points.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "curve fit needs at least 4 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(n, y)| !n.is_finite() || !y.is_finite()) || init.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite curve data or start point".into()));
    }
    let mut p = init;
    let mut current = rss(form, p, points)?;
    let mut trace = vec![current];
    let mut mu = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm;

    loop {
        let (jtj, jtr) = normal_equations(form, p, points);
        grad_norm = jtr.amax();
        if grad_norm < GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
        if iterations >= MAX_ITERATIONS {
            break;
        }
        iterations += 1;

        let scale = jtj.diagonal().max().max(1e-300);
        let mut accepted = None;
        let mut solved_any = false;
        while mu <= MAX_DAMPING {
            let mut a = jtj;
            for i in 0..3 {
                a[(i, i)] += mu * jtj[(i, i)].max(1e-12 * scale);
            }
            if let Some(step) = a.cholesky().map(|c| c.solve(&jtr)) {
                solved_any = true;
                let trial = [p[0] + step[0], p[1] + step[1], p[2] + step[2]];
                if let Ok(r) = rss(form, trial, points) {
                    if r < current {
                        accepted = Some((trial, r));
                        mu = (mu / 10.0).max(1e-15);
                        break;
                    }
                }
            }
            mu *= 10.0;
        }
        match accepted {
            Some((trial, r)) => {
                let rel = (current - r) / current.max(f64::MIN_POSITIVE);
                p = trial;
                current = r;
                trace.push(r);
                if rel < RSS_TOLERANCE {
                    converged = true;
                    let (_, jtr) = normal_equations(form, p, points);
                    grad_norm = jtr.amax();
                    break;
                }
            }
            None if !solved_any => {
                return Err(Error::Numerical(
                    "normal matrix singular at every damping level".into(),
                ))
            }
            // No downhill step at any damping: the current point is a
            // minimum to machine precision.
            None => {
                converged = true;
                break;
            }
        }
    }
    Ok(FitResult {
        form,
        params: p,
        rss: current,
        iterations,
        converged,
        gradient_norm: grad_norm,
        rss_trace: trace,
    })
}

/// Starting point from the endpoints of the data and `b = 1/median(n)`.
pub fn default_init(form: CurveForm, points: &[(f64, f64)]) -> Result<[f64; 3]> {
    let ns: Vec<f64> = points.iter().map(|p| p.0).collect();
    let lo = ns.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::InvalidInput("need at least 2 distinct n values".into()));
    }
    let y_at = |n: f64| {
        let ys: Vec<f64> = points.iter().filter(|p| p.0 == n).map(|p| p.1).collect();
        stats::mean(&ys)
    };
    let (y_lo, y_hi) = (y_at(lo), y_at(hi));
    let med = stats::median(&ns);
    let b = if med != 0.0 { 1.0 / med } else { 1.0 / hi };
    Ok(match form {
        CurveForm::Decay => [y_lo - y_hi, b, y_hi],
        CurveForm::Rise => [y_hi - y_lo, b, y_lo],
    })
}

/// Multipliers on the default `b` tried when the first fit fails.
pub const MULTI_START: [f64; 5] = [0.1, 0.3, 1.0, 3.0, 10.0];

/// Fit from the default start; fall back to a grid of `b` starts and keep
/// the converged fit with the smallest RSS.
pub fn fit_curve(form: CurveForm, points: &[(f64, f64)]) -> Result<FitResult> {
    let init = default_init(form, points)?;
    match levenberg_marquardt(form, points, init) {
        Ok(f) if f.converged && f.params.iter().all(|v| v.is_finite()) => return Ok(f),
        Err(e @ Error::InvalidInput(_)) => return Err(e),
        _ => {}
    }
    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    for m in MULTI_START {
        let start = [init[0], init[1] * m, init[2]];
        match levenberg_marquardt(form, points, start) {
            Ok(f) if f.converged => {
                if best.as_ref().is_none_or(|b| f.rss < b.rss) {
                    best = Some(f);
                }
            }
            Ok(_) => last_err = Some(Error::Numerical("iteration cap reached".into())),
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| {
        last_err.unwrap_or_else(|| Error::Numerical("no start point converged".into()))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub model: String,
    pub metric: String,
    pub fit: FitResult,
}

pub fn write_learning_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<()> {
    use crate::report::fmt_f64;
    write_csv(
        path,
        &["model", "metric", "form", "a", "b", "c", "rss", "iterations", "converged"],
        rows.iter().map(|r| {
            [
                r.model.clone(),
                r.metric.clone(),
                r.fit.form.name().to_string(),
                fmt_f64(r.fit.params[0]),
                fmt_f64(r.fit.params[1]),
                fmt_f64(r.fit.params[2]),
                fmt_f64(r.fit.rss),
                r.fit.iterations.to_string(),
                r.fit.converged.to_string(),
            ]
        }),
    )
}

/// Reads `n,y` points; optional `model` and `metric` columns group the rows
/// into several series.
pub fn parse_points(reader: impl std::io::Read) -> Result<Vec<((String, String), Vec<(f64, f64)>)>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h.trim() == name);
    let (n_col, y_col) = match (col("n"), col("y")) {
        (Some(n), Some(y)) => (n, y),
        _ => return Err(Error::InvalidInput("points file needs n and y columns".into())),
    };
    let (model_col, metric_col) = (col("model"), col("metric"));
    let mut series: Vec<((String, String), Vec<(f64, f64)>)> = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let num = |c: usize| -> Result<f64> {
            row.get(c)
                .and_then(|s| s.trim().parse().ok())
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::InvalidInput(format!("points line {}: bad number", i + 2)))
        };
        let key = (
            model_col.and_then(|c| row.get(c)).unwrap_or("").trim().to_string(),
            metric_col.and_then(|c| row.get(c)).unwrap_or("").trim().to_string(),
        );
        let point = (num(n_col)?, num(y_col)?);
        match series.iter_mut().find(|(k, _)| *k == key) {
            Some((_, pts)) => pts.push(point),
            None => series.push((key, vec![point])),
        }
    }
    Ok(series)
}

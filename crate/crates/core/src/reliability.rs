//! ICC(2,k) reliability with rater-subsample bootstrap, and Wilson intervals.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::RatingsTable;
use crate::error::{Error, Result};
use crate::report::{fmt_f64, write_csv};
use crate::rng;
use crate::special::normal_quantile;
use crate::stats::{self, compensated_sum};

/// Images × raters with optional cells.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    pub images: Vec<String>,
    pub raters: Vec<String>,
    cells: Vec<Option<f64>>,
}

impl RatingMatrix {
    pub fn new(images: Vec<String>, raters: Vec<String>, cells: Vec<Option<f64>>) -> Result<Self> {
        if cells.len() != images.len() * raters.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} cells for {}x{} matrix",
                cells.len(),
                images.len(),
                raters.len()
            )));
        }
        if cells.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite rating in matrix".into()));
        }
        Ok(RatingMatrix {
            images,
            raters,
            cells,
        })
    }

    /// Dense matrix without missing cells, `rows[i][j]` = rating of image i by rater j.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::DimensionMismatch("ragged rating rows".into()));
        }
        Self::new(
            (0..rows.len()).map(|i| format!("i{i}")).collect(),
            (0..k).map(|j| format!("r{j}")).collect(),
            rows.iter().flatten().map(|&v| Some(v)).collect(),
        )
    }

    pub fn from_table(table: &RatingsTable) -> Result<Self> {
        let images: Vec<String> = table.images().into_iter().map(str::to_string).collect();
        let raters: Vec<String> = table.participants().into_iter().map(str::to_string).collect();
        let row: BTreeMap<&str, usize> = images.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let col: BTreeMap<&str, usize> = raters.iter().enumerate().map(|(j, s)| (s.as_str(), j)).collect();
        let k = raters.len();
        let mut cells = vec![None; images.len() * k];
        for r in &table.records {
            let idx = row[r.image_id.as_str()] * k + col[r.participant_id.as_str()];
            if cells[idx].is_some() {
                return Err(Error::InvalidInput(format!(
                    "participant {} rated image {} more than once; apply the first-trial filter",
                    r.participant_id, r.image_id
                )));
            }
            cells[idx] = Some(r.rating);
        }
        Self::new(images, raters, cells)
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn n_raters(&self) -> usize {
        self.raters.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cells[i * self.raters.len() + j]
    }

    /// Sub-matrix on the given raters, dropping images none of them rated.
    pub fn select_raters(&self, cols: &[usize]) -> RatingMatrix {
        let raters = cols.iter().map(|&j| self.raters[j].clone()).collect();
        let mut images = Vec::new();
        let mut cells = Vec::new();
        for i in 0..self.n_images() {
            let row: Vec<Option<f64>> = cols.iter().map(|&j| self.get(i, j)).collect();
            if row.iter().any(Option::is_some) {
                images.push(self.images[i].clone());
                cells.extend(row);
            }
        }
        RatingMatrix {
            images,
            raters,
            cells,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_images() < 2 || self.n_raters() < 2 {
            return Err(Error::InvalidInput(format!(
                "ICC needs at least 2 images and 2 raters, got {}x{}",
                self.n_images(),
                self.n_raters()
            )));
        }
        for i in 0..self.n_images() {
            if (0..self.n_raters()).all(|j| self.get(i, j).is_none()) {
                return Err(Error::InvalidInput(format!("image {} has no ratings", self.images[i])));
            }
        }
        for j in 0..self.n_raters() {
            if (0..self.n_images()).all(|i| self.get(i, j).is_none()) {
                return Err(Error::InvalidInput(format!("rater {} has no ratings", self.raters[j])));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingMode {
    /// Fill missing cells with row mean + column mean − grand mean and
    /// reduce the residual degrees of freedom by the number of filled cells.
    #[default]
    Impute,
    /// Drop every image with a missing cell.
    CompleteCase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnovaTable {
    pub n: usize,
    pub k: usize,
    pub bms: f64,
    pub jms: f64,
    pub ems: f64,
    pub df_error: f64,
    pub imputed: usize,
}

fn two_way_anova(m: &RatingMatrix, mode: MissingMode) -> Result<AnovaTable> {
    m.validate()?;
    let k = m.n_raters();
    let (rows, imputed): (Vec<Vec<f64>>, usize) = match mode {
        MissingMode::CompleteCase => {
            let rows: Vec<Vec<f64>> = (0..m.n_images())
                .filter_map(|i| (0..k).map(|j| m.get(i, j)).collect::<Option<Vec<f64>>>())
                .collect();
            (rows, 0)
        }
        MissingMode::Impute => {
            let observed: Vec<f64> = m.cells.iter().flatten().copied().collect();
            let grand = stats::mean(&observed);
            let row_means: Vec<f64> = (0..m.n_images())
                .map(|i| stats::mean(&(0..k).filter_map(|j| m.get(i, j)).collect::<Vec<_>>()))
                .collect();
            let col_means: Vec<f64> = (0..k)
                .map(|j| stats::mean(&(0..m.n_images()).filter_map(|i| m.get(i, j)).collect::<Vec<_>>()))
                .collect();
            let mut imputed = 0;
            let rows = (0..m.n_images())
                .map(|i| {
                    (0..k)
                        .map(|j| {
                            m.get(i, j).unwrap_or_else(|| {
                                imputed += 1;
                                row_means[i] + col_means[j] - grand
                            })
                        })
                        .collect()
                })
                .collect();
            (rows, imputed)
        }
    };
    let n = rows.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("only {n} complete images for ICC")));
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = compensated_sum(rows.iter().flatten().copied()) / (nf * kf);
    let row_means: Vec<f64> = rows.iter().map(|r| compensated_sum(r.iter().copied()) / kf).collect();
    let col_means: Vec<f64> = (0..k)
        .map(|j| compensated_sum(rows.iter().map(|r| r[j])) / nf)
        .collect();
    let ss_rows = kf * compensated_sum(row_means.iter().map(|m| (m - grand).powi(2)));
    let ss_cols = nf * compensated_sum(col_means.iter().map(|m| (m - grand).powi(2)));
    let ss_err = compensated_sum(
        rows.iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, v)| (i, j, *v)))
            .map(|(i, j, v)| (v - row_means[i] - col_means[j] + grand).powi(2)),
    );
    let df_error = (nf - 1.0) * (kf - 1.0) - imputed as f64;
    if df_error <= 0.0 {
        return Err(Error::Degenerate(format!(
            "no residual degrees of freedom ({imputed} imputed cells in {n}x{k})"
        )));
    }
    Ok(AnovaTable {
        n,
        k,
        bms: ss_rows / (nf - 1.0),
        jms: ss_cols / (kf - 1.0),
        ems: ss_err / df_error,
        df_error,
        imputed,
    })
}

/// Two-way random-effects, average-measures ICC(2,k).
pub fn icc2k(m: &RatingMatrix, mode: MissingMode) -> Result<f64> {
    let a = two_way_anova(m, mode)?;
    let denom = a.bms + (a.jms - a.ems) / a.n as f64;
    if !(denom.abs() > 0.0) {
        return Err(Error::Degenerate("ICC denominator is zero (no variation)".into()));
    }
    Ok((a.bms - a.ems) / denom)
}

pub fn anova(m: &RatingMatrix, mode: MissingMode) -> Result<AnovaTable> {
    two_way_anova(m, mode)
}

pub const DEFAULT_SIZES: [usize; 8] = [10, 20, 30, 40, 50, 60, 70, 80];
pub const DEFAULT_BOOT_REPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeSummary {
    pub size: usize,
    pub values: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IccBootstrapReport {
    pub seed: u64,
    pub mode: MissingMode,
    pub sizes: Vec<SizeSummary>,
    /// Whether mean ICC is nondecreasing in subsample size.
    pub monotone: bool,
    pub warnings: Vec<String>,
}

/// ICC(2,k) over `reps` random rater subsets of each size, drawn without
/// replacement. Each (size, rep) uses its own seeded stream.
pub fn bootstrap_icc(
    m: &RatingMatrix,
    sizes: &[usize],
    reps: usize,
    seed: u64,
    mode: MissingMode,
) -> Result<IccBootstrapReport> {
    if reps == 0 || sizes.is_empty() {
        return Err(Error::InvalidInput("need at least one size and one repetition".into()));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s > m.n_raters() || s < 2) {
        return Err(Error::InvalidInput(format!(
            "subsample size {s} outside 2..={} available raters",
            m.n_raters()
        )));
    }
    let tasks: Vec<(usize, usize)> = sizes
        .iter()
        .flat_map(|&s| (0..reps).map(move |r| (s, r)))
        .collect();
    let values: Vec<f64> = tasks
        .par_iter()
        .map(|&(size, rep)| {
            let mut rng = rng::stream(seed, "icc-bootstrap", &[size as u64, rep as u64]);
            let mut cols = index::sample(&mut rng, m.n_raters(), size).into_vec();
            cols.sort_unstable();
            let sub = m.select_raters(&cols);
            icc2k(&sub, mode)
        })
        .collect::<Result<_>>()?;

    let summaries: Vec<SizeSummary> = sizes
        .iter()
        .zip(values.chunks(reps))
        .map(|(&size, v)| SizeSummary {
            size,
            values: v.to_vec(),
            mean: stats::mean(v),
            sd: if v.len() > 1 { stats::sd(v) } else { 0.0 },
        })
        .collect();
    let mut ordered: Vec<&SizeSummary> = summaries.iter().collect();
    ordered.sort_by_key(|s| s.size);
    let mut warnings = Vec::new();
    for w in ordered.windows(2) {
        if w[1].mean < w[0].mean {
            warnings.push(format!(
                "mean ICC decreases from size {} ({}) to size {} ({})",
                w[0].size, w[0].mean, w[1].size, w[1].mean
            ));
        }
    }
    Ok(IccBootstrapReport {
        seed,
        mode,
        sizes: summaries,
        monotone: warnings.is_empty(),
        warnings,
    })
}

pub fn write_icc_csvs(dir: &Path, report: &IccBootstrapReport) -> Result<()> {
    write_csv(
        &dir.join("icc_report.csv"),
        &["size", "rep", "icc"],
        report.sizes.iter().flat_map(|s| {
            s.values
                .iter()
                .enumerate()
                .map(move |(r, v)| [s.size.to_string(), r.to_string(), fmt_f64(*v)])
        }),
    )?;
    write_csv(
        &dir.join("icc_summary.csv"),
        &["size", "mean", "sd"],
        report
            .sizes
            .iter()
            .map(|s| [s.size.to_string(), fmt_f64(s.mean), fmt_f64(s.sd)]),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProportionCi {
    pub successes: u64,
    pub n: u64,
    pub level: f64,
    pub estimate: f64,
    pub low: f64,
    pub high: f64,
}

/// Wilson score interval.
pub fn wilson_ci(successes: u64, n: u64, level: f64) -> Result<ProportionCi> {
    if n == 0 || successes > n {
        return Err(Error::InvalidInput(format!("need 0 <= successes <= n, n >= 1; got {successes}/{n}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level must be in (0,1), got {level}")));
    }
    let z = normal_quantile(1.0 - (1.0 - level) / 2.0);
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let low = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let high = if successes == n { 1.0 } else { (center + half).min(1.0) };
    Ok(ProportionCi {
        successes,
        n,
        level,
        estimate: p,
        low,
        high,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn noise_matrix(n: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::stream(seed, "noise", &[]);
        let d = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| (0..k).map(|_| d.sample(&mut r)).collect()).collect()
    }

    #[test]
    fn perfect_agreement_is_one() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 10.0; 4]).collect();
        let m = RatingMatrix::from_rows(&rows).unwrap();
        assert!((icc2k(&m, MissingMode::Impute).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pure_noise_is_near_zero() {
        let m = RatingMatrix::from_rows(&noise_matrix(300, 50, 3)).unwrap();
        let icc = icc2k(&m, MissingMode::Impute).unwrap();
        assert!(icc.abs() < 0.05, "icc {icc}");
    }

    #[test]
    fn shrout_fleiss_reference_table() {
        // Classic 6 targets x 4 judges example; ICC(2,k) = 0.62.
        let rows = vec![
            vec![9.0, 2.0, 5.0, 8.0],
            vec![6.0, 1.0, 3.0, 2.0],
            vec![8.0, 4.0, 6.0, 8.0],
            vec![7.0, 1.0, 2.0, 6.0],
            vec![10.0, 5.0, 6.0, 9.0],
            vec![6.0, 2.0, 4.0, 7.0],
        ];
        let m = RatingMatrix::from_rows(&rows).unwrap();
        let icc = icc2k(&m, MissingMode::Impute).unwrap();
        assert!((icc - 0.6201).abs() < 1e-3, "icc {icc}");
    }

    #[test]
    fn imputation_reduces_residual_df() {
        let mut rows = noise_matrix(10, 4, 8);
        for (i, r) in rows.iter_mut().enumerate() {
            r[0] += i as f64;
        }
        let mut m = RatingMatrix::from_rows(&rows).unwrap();
        m.cells[1] = None;
        m.cells[6] = None;
        let a = anova(&m, MissingMode::Impute).unwrap();
        assert_eq!(a.imputed, 2);
        assert_eq!(a.df_error, 27.0 - 2.0);
        let cc = anova(&m, MissingMode::CompleteCase).unwrap();
        assert_eq!(cc.n, 8);
    }

    #[test]
    fn exhaustive_subsample_is_constant() {
        let m = RatingMatrix::from_rows(&noise_matrix(20, 6, 1)).unwrap();
        let rep = bootstrap_icc(&m, &[6], 2, 11, MissingMode::Impute).unwrap();
        assert_eq!(rep.sizes[0].values[0], rep.sizes[0].values[1]);
        assert!(bootstrap_icc(&m, &[7], 2, 11, MissingMode::Impute).is_err());
    }

    #[test]
    fn wilson_reference_values() {
        let ci = wilson_ci(0, 10, 0.95).unwrap();
        assert_eq!(ci.low, 0.0);
        assert!((ci.high - 0.27753).abs() < 1e-4);
        assert_eq!(wilson_ci(7, 7, 0.95).unwrap().high, 1.0);
        assert!(wilson_ci(3, 2, 0.95).is_err());
    }

    proptest! {
        #[test]
        fn icc_affine_invariance(seed in 0u64..1000, shift in -50.0f64..50.0, scale in 0.1f64..10.0) {
            let mut rows = noise_matrix(12, 5, seed);
            let mut r = rng::stream(seed, "effects", &[]);
            for row in rows.iter_mut() {
                let e: f64 = r.random_range(-3.0..3.0);
                row.iter_mut().for_each(|v| *v += e);
            }
            let base = icc2k(&RatingMatrix::from_rows(&rows).unwrap(), MissingMode::Impute).unwrap();
            let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * scale + shift).collect()).collect();
            let other = icc2k(&RatingMatrix::from_rows(&moved).unwrap(), MissingMode::Impute).unwrap();
            prop_assert!((base - other).abs() < 1e-9);
        }

        #[test]
        fn wilson_contains_estimate(n in 1u64..2000, frac in 0.0f64..=1.0, level in 0.5f64..0.999) {
            let s = ((n as f64) * frac).floor() as u64;
            let ci = wilson_ci(s, n, level).unwrap();
            prop_assert!(ci.low <= ci.estimate && ci.estimate <= ci.high);
            prop_assert!(ci.low >= 0.0 && ci.high <= 1.0);
        }
    }
}

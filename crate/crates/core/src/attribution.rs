//! Heatmap versus spider-mask overlap statistics.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{self, BinaryMask, FloatGrid};
use crate::report::{fmt_f64, write_csv};
use crate::special::student_t_sf;
use crate::stats::{self, compensated_sum};

/// Element-wise mean of equally sized grids.
pub fn composite_heatmap(grids: &[FloatGrid]) -> Result<FloatGrid> {
    let first = grids
        .first()
        .ok_or_else(|| Error::InvalidInput("no heatmaps to average".into()))?;
    let (w, h) = (first.width(), first.height());
    if let Some(g) = grids.iter().find(|g| g.width() != w || g.height() != h) {
        return Err(Error::DimensionMismatch(format!(
            "heatmap {}x{} vs {w}x{h}",
            g.width(),
            g.height()
        )));
    }
    let k = grids.len() as f64;
    let values = (0..w * h)
        .map(|i| (compensated_sum(grids.iter().map(|g| f64::from(g.values()[i]))) / k) as f32)
        .collect();
    FloatGrid::new(w, h, values)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapRecord {
    pub image_id: String,
    pub mu_in: f64,
    pub mu_out: f64,
    pub delta: f64,
    pub mask_fraction: f64,
}

/// Mean raw activation inside and outside the mask.
pub fn overlap_stats(image_id: &str, heat: &FloatGrid, mask: &BinaryMask) -> Result<OverlapRecord> {
    if heat.width() != mask.width() || heat.height() != mask.height() {
        return Err(Error::DimensionMismatch(format!(
            "{image_id}: heatmap {}x{} vs mask {}x{}",
            heat.width(),
            heat.height(),
            mask.width(),
            mask.height()
        )));
    }
    let n_in = mask.count_set();
    let total = mask.bits().len();
    if n_in == 0 || n_in == total {
        return Err(Error::InvalidInput(format!(
            "{image_id}: mask must contain both spider and background pixels"
        )));
    }
    let pick = |want: bool| {
        compensated_sum(
            heat.values()
                .iter()
                .zip(mask.bits())
                .filter(|(_, &b)| b == want)
                .map(|(v, _)| f64::from(*v)),
        )
    };
    let mu_in = pick(true) / n_in as f64;
    let mu_out = pick(false) / (total - n_in) as f64;
    Ok(OverlapRecord {
        image_id: image_id.to_string(),
        mu_in,
        mu_out,
        delta: mu_in - mu_out,
        mask_fraction: n_in as f64 / total as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedTestResult {
    pub n: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub t: f64,
    pub df: usize,
    pub one_sided_p: f64,
    pub cohen_d: f64,
}

/// One-sided paired t-test of `mu_in > mu_out` with paired Cohen's d.
pub fn paired_one_sided_t(deltas: &[f64]) -> Result<PairedTestResult> {
    let n = deltas.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("paired t-test needs n >= 2, got {n}")));
    }
    let mean = stats::mean(deltas);
    let sd = stats::sd(deltas);
    if !(sd > 0.0) {
        return Err(Error::Degenerate("paired differences have zero standard deviation".into()));
    }
    let t = mean / (sd / (n as f64).sqrt());
    Ok(PairedTestResult {
        n,
        mean_diff: mean,
        sd_diff: sd,
        t,
        df: n - 1,
        one_sided_p: student_t_sf(t, (n - 1) as f64),
        cohen_d: mean / sd,
    })
}

pub fn records_t_test(records: &[OverlapRecord]) -> Result<PairedTestResult> {
    paired_one_sided_t(&records.iter().map(|r| r.delta).collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RepresentativeExamples {
    pub max_delta: String,
    pub nearest_zero: String,
    pub min_delta: String,
}

/// Images with the largest, smallest and closest-to-zero delta. With
/// `fear`, only images whose observed fear is at least `min_fear` qualify.
/// Ties go to the lexicographically smallest id.
pub fn representative_examples(
    records: &[OverlapRecord],
    fear: Option<(&BTreeMap<String, f64>, f64)>,
) -> Result<RepresentativeExamples> {
    let mut pool: Vec<&OverlapRecord> = records
        .iter()
        .filter(|r| match fear {
            Some((map, min)) => map.get(&r.image_id).is_some_and(|f| *f >= min),
            None => true,
        })
        .collect();
    if pool.is_empty() {
        return Err(Error::InvalidInput("no records eligible for example selection".into()));
    }
    pool.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let pick = |key: &dyn Fn(&OverlapRecord) -> f64| {
        pool.iter()
            .fold(None::<&OverlapRecord>, |best, r| match best {
                Some(b) if key(b) <= key(r) => Some(b),
                _ => Some(r),
            })
            .map(|r| r.image_id.clone())
            .expect("pool is nonempty")
    };
    Ok(RepresentativeExamples {
        max_delta: pick(&|r| -r.delta),
        nearest_zero: pick(&|r| r.delta.abs()),
        min_delta: pick(&|r| r.delta),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaFearCorrelation {
    pub n: usize,
    pub pearson: f64,
    pub spearman: f64,
}

pub fn delta_fear_correlation(
    records: &[OverlapRecord],
    fear: &BTreeMap<String, f64>,
) -> Result<DeltaFearCorrelation> {
    let (d, f): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter_map(|r| fear.get(&r.image_id).map(|f| (r.delta, *f)))
        .unzip();
    Ok(DeltaFearCorrelation {
        n: d.len(),
        pearson: stats::pearson(&d, &f)?,
        spearman: stats::spearman(&d, &f)?,
    })
}

/// Overlap records for every image that has a mask and at least one heatmap
/// in `heatmap_dirs`. Each directory holds `<image_id>.pfm`; several
/// directories (one per repetition) are averaged into a composite first.
pub fn overlap_from_dirs(heatmap_dirs: &[&Path], mask_dir: &Path) -> Result<Vec<OverlapRecord>> {
    let mut ids = Vec::new();
    let entries = std::fs::read_dir(mask_dir).map_err(|e| Error::io(mask_dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(mask_dir, e))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    let results: Vec<Option<OverlapRecord>> = ids
        .par_iter()
        .map(|id| {
            let paths: Vec<_> = heatmap_dirs
                .iter()
                .map(|d| d.join(format!("{id}.pfm")))
                .filter(|p| p.exists())
                .collect();
            if paths.is_empty() {
                return Ok(None);
            }
            let grids = paths
                .iter()
                .map(|p| grid::load_float_grid(p))
                .collect::<Result<Vec<_>>>()?;
            let heat = composite_heatmap(&grids)?;
            let mask = grid::load_mask(&mask_dir.join(format!("{id}.pgm")))?;
            overlap_stats(id, &heat, &mask).map(Some)
        })
        .collect::<Result<_>>()?;
    Ok(results.into_iter().flatten().collect())
}

pub fn write_overlap_csv(path: &Path, records: &[OverlapRecord]) -> Result<()> {
    write_csv(
        path,
        &["image_id", "mu_in", "mu_out", "delta", "mask_fraction"],
        records.iter().map(|r| {
            [
                r.image_id.clone(),
                fmt_f64(r.mu_in),
                fmt_f64(r.mu_out),
                fmt_f64(r.delta),
                fmt_f64(r.mask_fraction),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, delta: f64) -> OverlapRecord {
        OverlapRecord {
            image_id: id.into(),
            mu_in: delta,
            mu_out: 0.0,
            delta,
            mask_fraction: 0.5,
        }
    }

    #[test]
    fn indicator_heatmap() {
        let mask = BinaryMask::new(2, 2, vec![true, false, false, true]).unwrap();
        let heat = FloatGrid::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = overlap_stats("x", &heat, &mask).unwrap();
        assert_eq!((r.mu_in, r.mu_out, r.delta, r.mask_fraction), (1.0, 0.0, 1.0, 0.5));
        let flat = FloatGrid::filled(2, 2, 3.0).unwrap();
        assert_eq!(overlap_stats("x", &flat, &mask).unwrap().delta, 0.0);
        let full = BinaryMask::new(2, 2, vec![true; 4]).unwrap();
        assert!(overlap_stats("x", &flat, &full).is_err());
    }

    #[test]
    fn composite_of_two() {
        let a = FloatGrid::filled(3, 2, 0.0).unwrap();
        let b = FloatGrid::filled(3, 2, 1.0).unwrap();
        assert_eq!(composite_heatmap(&[a.clone(), b]).unwrap(), FloatGrid::filled(3, 2, 0.5).unwrap());
        let c = FloatGrid::filled(2, 3, 1.0).unwrap();
        assert!(composite_heatmap(&[a, c]).is_err());
    }

    #[test]
    fn t_test_reference() {
        let r = paired_one_sided_t(&[1.0, 2.0, 3.0]).unwrap();
        assert!((r.t - 12f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.df, 2);
        // df = 2 closed form: p = (1 − t/√(t² + 2)) / 2
        let closed = 0.5 * (1.0 - r.t / (r.t * r.t + 2.0).sqrt());
        assert!((r.one_sided_p - closed).abs() < 1e-12);
        assert!((r.one_sided_p - 0.0371).abs() < 5e-5);
        assert!((r.cohen_d - 2.0).abs() < 1e-12);
        assert!(paired_one_sided_t(&[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn example_selection() {
        let recs = [rec("A", 0.5), rec("B", -0.2), rec("C", 0.01)];
        let ex = representative_examples(&recs, None).unwrap();
        assert_eq!((ex.max_delta.as_str(), ex.nearest_zero.as_str(), ex.min_delta.as_str()), ("A", "C", "B"));
        let one = representative_examples(&recs[..1], None).unwrap();
        assert_eq!(one.max_delta, "A");
        assert_eq!(one.min_delta, "A");
        let fear: BTreeMap<String, f64> = [("A".to_string(), 20.0), ("B".to_string(), 50.0), ("C".to_string(), 60.0)].into();
        let ex = representative_examples(&recs, Some((&fear, 40.0))).unwrap();
        assert_eq!(ex.max_delta, "C");
        let tie = [rec("z", 1.0), rec("m", 1.0)];
        assert_eq!(representative_examples(&tie, None).unwrap().max_delta, "m");
    }

    fn grid_and_mask() -> impl Strategy<Value = (FloatGrid, BinaryMask)> {
        (2usize..8, 2usize..8).prop_flat_map(|(w, h)| {
            (
                prop::collection::vec(-5.0f32..5.0, w * h),
                prop::collection::vec(any::<bool>(), w * h),
                0..w * h,
                0..w * h,
            )
                .prop_filter("distinct forced pixels", |(_, _, i, j)| i != j)
                .prop_map(move |(v, mut b, i, j)| {
                    b[i] = true;
                    b[j] = false;
                    (FloatGrid::new(w, h, v).unwrap(), BinaryMask::new(w, h, b).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn matches_pixel_loop((heat, mask) in grid_and_mask()) {
            let r = overlap_stats("p", &heat, &mask).unwrap();
            let (mut si, mut ni, mut so, mut no) = (0.0, 0, 0.0, 0);
            for y in 0..heat.height() {
                for x in 0..heat.width() {
                    let v = f64::from(heat.get(x, y));
                    if mask.bits()[y * heat.width() + x] { si += v; ni += 1 } else { so += v; no += 1 }
                }
            }
            prop_assert!((r.mu_in - si / ni as f64).abs() < 1e-9);
            prop_assert!((r.mu_out - so / no as f64).abs() < 1e-9);
        }

        #[test]
        fn complement_negates_delta((heat, mask) in grid_and_mask()) {
            let a = overlap_stats("p", &heat, &mask).unwrap();
            let b = overlap_stats("p", &heat, &mask.complement()).unwrap();
            prop_assert!((a.delta + b.delta).abs() < 1e-9);
        }

        #[test]
        fn shift_leaves_delta(((heat, mask), c) in (grid_and_mask(), -3.0f32..3.0)) {
            let shifted = FloatGrid::new(heat.width(), heat.height(),
                heat.values().iter().map(|v| v + c).collect()).unwrap();
            let a = overlap_stats("p", &heat, &mask).unwrap();
            let b = overlap_stats("p", &shifted, &mask).unwrap();
            prop_assert!((a.delta - b.delta).abs() < 1e-5);
        }
    }
}

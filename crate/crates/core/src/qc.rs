//! Rater quality control.
//!
//! Two complementary rules flag outlying participants against the per-image
//! consensus (median rating across all participants):
//!
//! * correlation rule: Spearman's rho between a participant's ratings and the
//!   consensus over the images they rated, flagged when
//!   `rho < Q1 − 1.5·IQR` of all rhos;
//! * deviation rule: the median over a participant's images of
//!   `|rating − consensus|`, flagged when `score > Q3 + 1.5·IQR` of all scores.
//!
//! A participant flagged by either rule is excluded. Consensus and thresholds
//! are computed once on the full table; quartiles use linear interpolation.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::data::RatingsTable;
use crate::error::{Error, Result};
use crate::stats::{self, Quartiles, Summary};

/// Whisker multiplier for both fences.
pub const FENCE: f64 = 1.5;

pub type ConsensusVector = BTreeMap<String, f64>;

/// Median rating per image over all records of a (first-trial) table.
pub fn consensus_median(table: &RatingsTable) -> ConsensusVector {
    table
        .by_image()
        .into_iter()
        .map(|(image, ratings)| (image.to_string(), stats::median(&ratings)))
        .collect()
}

/// Spearman correlation between two paired rating vectors.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    stats::spearman(x, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fence {
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub threshold: f64,
}

/// Participants whose rho falls below `Q1 − 1.5·IQR`.
pub fn flag_correlation_outliers(rhos: &BTreeMap<String, f64>) -> Result<(BTreeSet<String>, Fence)> {
    if rhos.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "correlation rule needs at least 4 participants, got {}",
            rhos.len()
        )));
    }
    let values: Vec<f64> = rhos.values().copied().collect();
    let q = Quartiles::of(&values);
    let fence = Fence {
        q1: q.q1,
        q3: q.q3,
        iqr: q.iqr(),
        threshold: q.q1 - FENCE * q.iqr(),
    };
    let flagged = rhos
        .iter()
        .filter(|(_, &r)| r < fence.threshold)
        .map(|(p, _)| p.clone())
        .collect();
    Ok((flagged, fence))
}

/// Per-participant median absolute deviation from the consensus.
pub fn mad_scores(table: &RatingsTable, consensus: &ConsensusVector) -> Result<BTreeMap<String, f64>> {
    let groups: Vec<(&str, Vec<(&str, f64)>)> = table.by_participant().into_iter().collect();
    groups
        .par_iter()
        .map(|(participant, items)| {
            if items.is_empty() {
                return Err(Error::Degenerate(format!(
                    "participant {participant} has no rated images"
                )));
            }
            let deviations = items
                .iter()
                .map(|(image, rating)| {
                    consensus
                        .get(*image)
                        .map(|c| (rating - c).abs())
                        .ok_or_else(|| {
                            Error::InvalidInput(format!("image {image} missing from consensus"))
                        })
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((participant.to_string(), stats::median(&deviations)))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

/// Participants whose deviation score exceeds `Q3 + 1.5·IQR`.
pub fn flag_mad_outliers(scores: &BTreeMap<String, f64>) -> Result<(BTreeSet<String>, Fence)> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("no participants to score".into()));
    }
    let values: Vec<f64> = scores.values().copied().collect();
    let q = Quartiles::of(&values);
    let fence = Fence {
        q1: q.q1,
        q3: q.q3,
        iqr: q.iqr(),
        threshold: q.q3 + FENCE * q.iqr(),
    };
    let flagged = scores
        .iter()
        .filter(|(_, &s)| s > fence.threshold)
        .map(|(p, _)| p.clone())
        .collect();
    Ok((flagged, fence))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticipantQc {
    pub participant_id: String,
    pub n_ratings: usize,
    /// `None` when the participant rated fewer than 3 images or gave
    /// constant ratings; such participants are never flagged by the
    /// correlation rule.
    pub rho: Option<f64>,
    pub mad_score: f64,
    pub corr_flag: bool,
    pub mad_flag: bool,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QcReport {
    pub participants: Vec<ParticipantQc>,
    pub correlation_fence: Fence,
    pub mad_fence: Fence,
    pub excluded: BTreeSet<String>,
    pub participants_before: usize,
    pub participants_after: usize,
    pub ratings_before: usize,
    pub ratings_removed: usize,
    pub ratings_after: usize,
    pub images_after: usize,
    /// Distribution of per-image mean ratings after exclusion.
    pub image_means: Option<Summary>,
}

/// Run both rules on a first-trial-filtered table and return the report
/// together with the table restricted to retained participants.
pub fn run_qc(table: &RatingsTable) -> Result<(QcReport, RatingsTable)> {
    let consensus = consensus_median(table);
    let by_participant = table.by_participant();

    let rhos: Vec<(String, Option<f64>)> = by_participant
        .par_iter()
        .map(|(participant, items)| {
            let own: Vec<f64> = items.iter().map(|(_, r)| *r).collect();
            let cons: Vec<f64> = items.iter().map(|(i, _)| consensus[*i]).collect();
            let rho = match spearman_rho(&own, &cons) {
                Ok(r) => Some(r),
                Err(Error::Degenerate(_)) | Err(Error::InvalidInput(_)) => None,
                Err(e) => return Err(e),
            };
            Ok((participant.to_string(), rho))
        })
        .collect::<Result<Vec<_>>>()?;
    let defined: BTreeMap<String, f64> = rhos
        .iter()
        .filter_map(|(p, r)| r.map(|r| (p.clone(), r)))
        .collect();
    let (corr_flags, correlation_fence) = flag_correlation_outliers(&defined)?;

    let scores = mad_scores(table, &consensus)?;
    let (mad_flags, mad_fence) = flag_mad_outliers(&scores)?;

    let excluded: BTreeSet<String> = corr_flags.union(&mad_flags).cloned().collect();
    let participants = rhos
        .into_iter()
        .map(|(p, rho)| ParticipantQc {
            n_ratings: by_participant[p.as_str()].len(),
            rho,
            mad_score: scores[&p],
            corr_flag: corr_flags.contains(&p),
            mad_flag: mad_flags.contains(&p),
            excluded: excluded.contains(&p),
            participant_id: p,
        })
        .collect::<Vec<_>>();

    let kept = table.without_participants(&excluded);
    let image_means: Vec<f64> = kept.by_image().values().map(|r| stats::mean(r)).collect();
    let report = QcReport {
        participants_before: participants.len(),
        participants_after: participants.len() - excluded.len(),
        ratings_before: table.len(),
        ratings_removed: table.len() - kept.len(),
        ratings_after: kept.len(),
        images_after: kept.images().len(),
        image_means: Summary::of(&image_means),
        participants,
        correlation_fence,
        mad_fence,
        excluded,
    };
    Ok((report, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RatingRecord;

    fn table(rows: &[(&str, &str, f64)]) -> RatingsTable {
        RatingsTable::new(
            rows.iter()
                .enumerate()
                .map(|(t, (p, i, r))| RatingRecord {
                    participant_id: p.to_string(),
                    image_id: i.to_string(),
                    trial_index: t as u32 + 1,
                    rating: *r,
                })
                .collect(),
        )
    }

    #[test]
    fn consensus_odd_and_even() {
        let t = table(&[
            ("a", "x", 10.0),
            ("b", "x", 20.0),
            ("c", "x", 90.0),
            ("a", "y", 10.0),
            ("b", "y", 20.0),
        ]);
        let c = consensus_median(&t);
        assert_eq!(c["x"], 20.0);
        assert_eq!(c["y"], 15.0);
    }

    #[test]
    fn correlation_fence_flags_low_rho() {
        // sorted: 0.05 0.79 0.80 0.81 0.82 -> Q1 0.79, Q3 0.81, fence 0.76
        let rhos: BTreeMap<String, f64> = [("a", 0.8), ("b", 0.82), ("c", 0.81), ("d", 0.79), ("e", 0.05)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let (flags, fence) = flag_correlation_outliers(&rhos).unwrap();
        assert!((fence.threshold - 0.76).abs() < 1e-12);
        assert_eq!(flags.into_iter().collect::<Vec<_>>(), vec!["e".to_string()]);
    }

    #[test]
    fn equal_rhos_flag_nobody() {
        let rhos: BTreeMap<String, f64> = (0..6).map(|i| (format!("p{i}"), 0.7)).collect();
        let (flags, fence) = flag_correlation_outliers(&rhos).unwrap();
        assert!(flags.is_empty());
        assert_eq!(fence.threshold, 0.7);
    }

    #[test]
    fn too_few_participants_for_correlation_rule() {
        let rhos: BTreeMap<String, f64> = (0..3).map(|i| (format!("p{i}"), 0.7)).collect();
        assert!(flag_correlation_outliers(&rhos).is_err());
    }

    #[test]
    fn consensus_follower_scores_zero() {
        let mut rows = Vec::new();
        for (i, base) in [10.0, 40.0, 70.0, 90.0].iter().enumerate() {
            let img = format!("i{i}");
            for (p, off) in [("a", 0.0), ("b", 0.0), ("c", 5.0), ("d", -5.0)] {
                rows.push((p, img.clone(), base + off));
            }
        }
        let rows: Vec<(&str, &str, f64)> = rows.iter().map(|(p, i, r)| (*p, i.as_str(), *r)).collect();
        let t = table(&rows);
        let scores = mad_scores(&t, &consensus_median(&t)).unwrap();
        assert_eq!(scores["a"], 0.0);
        let (flags, _) = flag_mad_outliers(&scores).unwrap();
        assert!(!flags.contains("a"));
    }

    #[test]
    fn report_counts_are_consistent() {
        // Eight agreeing raters and one rater far off consensus.
        let mut rows = Vec::new();
        for i in 0..12 {
            let truth = 5.0 + 7.5 * i as f64;
            for p in 0..8 {
                let jitter = ((p * 7 + i * 3) % 5) as f64 - 2.0;
                rows.push((format!("p{p}"), format!("i{i}"), truth + jitter));
            }
            rows.push(("odd".to_string(), format!("i{i}"), (truth + 50.0) % 100.0));
        }
        let rows: Vec<(&str, &str, f64)> =
            rows.iter().map(|(p, i, r)| (p.as_str(), i.as_str(), *r)).collect();
        let t = table(&rows);
        let (report, kept) = run_qc(&t).unwrap();
        assert!(report.excluded.contains("odd"));
        assert_eq!(report.ratings_before - report.ratings_after, report.ratings_removed);
        let removed: usize = report
            .participants
            .iter()
            .filter(|p| p.excluded)
            .map(|p| p.n_ratings)
            .sum();
        assert_eq!(removed, report.ratings_removed);
        assert_eq!(kept.len(), report.ratings_after);
    }
}

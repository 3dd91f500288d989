//! Dual-level partitioning: a fixed participant split into groups A and B,
//! per-image group means, and the repeated/nested cross-validation plan.
//!
//! Training images are always represented by their group-A mean and held-out
//! images by their group-B mean, so no participant and no image contributes
//! to both sides of any fold.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::RatingsTable;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantSplit {
    pub seed: u64,
    pub group_a: BTreeSet<String>,
    pub group_b: BTreeSet<String>,
}

/// Shuffle the (sorted) participant ids with the seed; the first half goes to
/// group A. With an odd count group B gets the extra participant.
pub fn split_participants<S: AsRef<str>>(ids: &[S], seed: u64) -> Result<ParticipantSplit> {
    let mut ids: Vec<String> = ids.iter().map(|s| s.as_ref().to_string()).collect();
    ids.sort();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 participants to split, got {}",
            ids.len()
        )));
    }
    ids.shuffle(&mut rng::stream(seed, "participant-split", &[]));
    let half = ids.len() / 2;
    Ok(ParticipantSplit {
        seed,
        group_a: ids[..half].iter().cloned().collect(),
        group_b: ids[half..].iter().cloned().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageTarget {
    pub mean_a: f64,
    pub mean_b: f64,
    pub n_a: usize,
    pub n_b: usize,
}

pub type ImageTargets = BTreeMap<String, ImageTarget>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroppedImage {
    pub image_id: String,
    pub reason: String,
}

/// Per-image mean rating within each participant group. Images without a
/// rater in one of the groups are dropped and reported. Records from
/// participants outside the split are ignored.
pub fn image_group_means(
    table: &RatingsTable,
    split: &ParticipantSplit,
) -> (ImageTargets, Vec<DroppedImage>) {
    let mut sums: BTreeMap<&str, [(f64, usize); 2]> = BTreeMap::new();
    for r in &table.records {
        let group = if split.group_a.contains(&r.participant_id) {
            0
        } else if split.group_b.contains(&r.participant_id) {
            1
        } else {
            continue;
        };
        let cell = &mut sums.entry(r.image_id.as_str()).or_insert([(0.0, 0); 2])[group];
        cell.0 += r.rating;
        cell.1 += 1;
    }
    let mut targets = ImageTargets::new();
    let mut dropped = Vec::new();
    for (image, [(sa, na), (sb, nb)]) in sums {
        if na == 0 || nb == 0 {
            dropped.push(DroppedImage {
                image_id: image.to_string(),
                reason: format!("no ratings from group {}", if na == 0 { "A" } else { "B" }),
            });
            continue;
        }
        targets.insert(
            image.to_string(),
            ImageTarget {
                mean_a: sa / na as f64,
                mean_b: sb / nb as f64,
                n_a: na,
                n_b: nb,
            },
        );
    }
    (targets, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanOptions {
    pub repetitions: usize,
    pub folds: usize,
    pub inner_folds: usize,
    pub validation_fraction: f64,
    /// Draw a fresh random subsample of this many images per repetition
    /// (learning-curve runs). `None` uses every image.
    pub subsample: Option<usize>,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            repetitions: 5,
            folds: 5,
            inner_folds: 5,
            validation_fraction: 0.2,
            subsample: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterFold {
    pub fold: usize,
    /// Seed of the streams used for this fold's inner split and validation
    /// subset.
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Held-out images of each inner fold; together they partition `train`.
    pub inner_folds: Vec<Vec<String>>,
    /// Internal validation subset carved from `train`.
    pub validation: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repetition {
    pub repetition: usize,
    pub seed: u64,
    pub images: Vec<String>,
    pub folds: Vec<OuterFold>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub seed: u64,
    pub options: PlanOptions,
    /// How hyperparameter search nests within the outer loop.
    pub search_nesting: String,
    pub repetitions: Vec<Repetition>,
}

impl CvPlan {
    pub fn fold(&self, repetition: usize, fold: usize) -> &OuterFold {
        &self.repetitions[repetition].folds[fold]
    }

    pub fn folds(&self) -> impl Iterator<Item = (usize, &OuterFold)> {
        self.repetitions
            .iter()
            .flat_map(|r| r.folds.iter().map(move |f| (r.repetition, f)))
    }
}

/// Split `items` (already shuffled) into `k` contiguous chunks whose sizes
/// differ by at most one; the first `len % k` chunks are larger.
pub fn chunk_even<T: Clone>(items: &[T], k: usize) -> Vec<Vec<T>> {
    let base = items.len() / k;
    let extra = items.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

fn sorted(mut v: Vec<String>) -> Vec<String> {
    v.sort();
    v
}

pub fn make_cv_plan<S: AsRef<str>>(image_ids: &[S], seed: u64) -> Result<CvPlan> {
    make_cv_plan_with(image_ids, seed, PlanOptions::default())
}

pub fn make_cv_plan_with<S: AsRef<str>>(
    image_ids: &[S],
    seed: u64,
    options: PlanOptions,
) -> Result<CvPlan> {
    let mut ids: Vec<String> = image_ids.iter().map(|s| s.as_ref().to_string()).collect();
    ids.sort();
    ids.dedup();
    let pool = options.subsample.unwrap_or(ids.len());
    if pool > ids.len() {
        return Err(Error::InvalidInput(format!(
            "subsample of {pool} images requested from {}",
            ids.len()
        )));
    }
    let min_images = options.folds * options.inner_folds;
    if options.folds < 2 || options.inner_folds < 2 || options.repetitions < 1 {
        return Err(Error::InvalidInput(
            "need >= 1 repetition and >= 2 outer and inner folds".into(),
        ));
    }
    if pool < min_images {
        return Err(Error::InvalidInput(format!(
            "need at least {min_images} images for a {}x{} nested plan, got {pool}",
            options.folds, options.inner_folds
        )));
    }
    if !(0.0..1.0).contains(&options.validation_fraction) {
        return Err(Error::InvalidInput("validation fraction must be in [0, 1)".into()));
    }

    let mut repetitions = Vec::with_capacity(options.repetitions);
    for r in 0..options.repetitions {
        let rep_seed = rng::derive_seed(seed, "cv-repetition", &[r as u64]);
        let mut rng = rng::stream(rep_seed, "outer-shuffle", &[]);
        let mut images = ids.clone();
        if options.subsample.is_some() {
            images.shuffle(&mut rng::stream(rep_seed, "subsample", &[]));
            images.truncate(pool);
            images.sort();
        }
        let mut shuffled = images.clone();
        shuffled.shuffle(&mut rng);
        let chunks = chunk_even(&shuffled, options.folds);

        let folds = (0..options.folds)
            .map(|f| {
                let fold_seed = rng::derive_seed(rep_seed, "outer-fold", &[f as u64]);
                let test = sorted(chunks[f].clone());
                let train: Vec<String> = sorted(
                    chunks
                        .iter()
                        .enumerate()
                        .filter(|(g, _)| *g != f)
                        .flat_map(|(_, c)| c.iter().cloned())
                        .collect(),
                );
                let mut inner = train.clone();
                inner.shuffle(&mut rng::stream(fold_seed, "inner-shuffle", &[]));
                let inner_folds = chunk_even(&inner, options.inner_folds)
                    .into_iter()
                    .map(sorted)
                    .collect();
                let mut val = train.clone();
                val.shuffle(&mut rng::stream(fold_seed, "validation", &[]));
                let n_val = (options.validation_fraction * train.len() as f64).round() as usize;
                val.truncate(n_val);
                OuterFold {
                    fold: f,
                    seed: fold_seed,
                    train,
                    test,
                    inner_folds,
                    validation: sorted(val),
                }
            })
            .collect();
        repetitions.push(Repetition {
            repetition: r,
            seed: rep_seed,
            images,
            folds,
        });
    }
    Ok(CvPlan {
        seed,
        options,
        search_nesting: "per_outer_training_set".into(),
        repetitions,
    })
}

/// Which participant group a target value was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetGroup {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldTarget {
    pub image_id: String,
    pub value: f64,
    pub group: TargetGroup,
}

/// Targets for one outer fold: group-A means for training images and group-B
/// means for held-out images. Images without targets are skipped.
pub fn fold_targets(fold: &OuterFold, targets: &ImageTargets) -> (Vec<FoldTarget>, Vec<FoldTarget>) {
    let pick = |ids: &[String], group: TargetGroup| {
        ids.iter()
            .filter_map(|id| {
                targets.get(id).map(|t| FoldTarget {
                    image_id: id.clone(),
                    value: match group {
                        TargetGroup::A => t.mean_a,
                        TargetGroup::B => t.mean_b,
                    },
                    group,
                })
            })
            .collect()
    };
    (pick(&fold.train, TargetGroup::A), pick(&fold.test, TargetGroup::B))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub repetition: Option<usize>,
    pub fold: Option<usize>,
    pub kind: String,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AuditReport {
    pub checked_folds: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<AuditReport> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::Leakage(self.violations.len()))
        }
    }
}

/// Check the plan and split for every form of train/test contamination.
pub fn leakage_audit(plan: &CvPlan, split: &ParticipantSplit, targets: &ImageTargets) -> AuditReport {
    let mut report = AuditReport::default();
    let mut push = |rep: Option<usize>, fold: Option<usize>, kind: &str, ids: Vec<String>| {
        if !ids.is_empty() {
            report.violations.push(Violation {
                repetition: rep,
                fold,
                kind: kind.into(),
                ids,
            });
        }
    };

    push(
        None,
        None,
        "participant in both groups",
        split.group_a.intersection(&split.group_b).cloned().collect(),
    );

    let mut checked = 0;
    for rep in &plan.repetitions {
        let all: BTreeSet<&String> = rep.images.iter().collect();
        let mut test_count: BTreeMap<&String, usize> = BTreeMap::new();
        for fold in &rep.folds {
            checked += 1;
            let (r, f) = (Some(rep.repetition), Some(fold.fold));
            let train: BTreeSet<&String> = fold.train.iter().collect();
            let test: BTreeSet<&String> = fold.test.iter().collect();
            for id in &fold.test {
                *test_count.entry(id).or_default() += 1;
            }
            push(
                r,
                f,
                "image in train and test",
                train.intersection(&test).map(|s| s.to_string()).collect(),
            );
            let covered: BTreeSet<&String> = train.union(&test).copied().collect();
            push(
                r,
                f,
                "image missing from fold",
                all.difference(&covered).map(|s| s.to_string()).collect(),
            );
            push(
                r,
                f,
                "unknown image in fold",
                covered.difference(&all).map(|s| s.to_string()).collect(),
            );

            let mut inner_seen: BTreeMap<&String, usize> = BTreeMap::new();
            for id in fold.inner_folds.iter().flatten() {
                *inner_seen.entry(id).or_default() += 1;
            }
            push(
                r,
                f,
                "inner folds do not partition training set",
                train
                    .iter()
                    .filter(|id| inner_seen.get(*id) != Some(&1))
                    .map(|s| s.to_string())
                    .chain(
                        inner_seen
                            .keys()
                            .filter(|id| !train.contains(*id))
                            .map(|s| s.to_string()),
                    )
                    .collect(),
            );
            push(
                r,
                f,
                "validation image outside training set",
                fold.validation
                    .iter()
                    .filter(|id| !train.contains(id))
                    .cloned()
                    .collect(),
            );

            let (tr, te) = fold_targets(fold, targets);
            push(
                r,
                f,
                "training target not from group A",
                tr.into_iter()
                    .filter(|t| t.group != TargetGroup::A)
                    .map(|t| t.image_id)
                    .collect(),
            );
            push(
                r,
                f,
                "test target not from group B",
                te.into_iter()
                    .filter(|t| t.group != TargetGroup::B)
                    .map(|t| t.image_id)
                    .collect(),
            );
        }
        push(
            Some(rep.repetition),
            None,
            "image not held out exactly once",
            all.iter()
                .filter(|id| test_count.get(*id) != Some(&1))
                .map(|s| s.to_string())
                .collect(),
        );
    }
    report.checked_folds = checked;
    report
}

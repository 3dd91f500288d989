//! Category-wise error decomposition with Kruskal–Wallis, Dunn and BH-FDR.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CategoryTable;
use crate::error::{Error, Result};
use crate::harness::PredictionSet;
use crate::partition::ImageTargets;
use crate::report::{fmt_f64, fmt_opt, write_csv, write_json};
use crate::rng;
use crate::special::{chi2_sf, normal_sf};
use crate::stats::{self, compensated_sum, Quartiles};

pub const MIN_CELL: usize = 10;
pub const DEFAULT_BOOTSTRAP: usize = 2000;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageError {
    pub image_id: String,
    pub abs_error: f64,
}

/// Mean over repetitions of `|clipped prediction − group-B mean|` per image.
pub fn image_errors(ps: &PredictionSet, targets: &ImageTargets) -> Result<Vec<ImageError>> {
    let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for e in ps.entries() {
        let t = targets.get(&e.image_id).ok_or_else(|| {
            Error::InvalidInput(format!("no group-B target for image {}", e.image_id))
        })?;
        acc.entry(e.image_id.as_str())
            .or_default()
            .push((e.clipped - t.mean_b).abs());
    }
    Ok(acc
        .into_iter()
        .map(|(id, v)| ImageError {
            image_id: id.to_string(),
            abs_error: stats::mean(&v),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub p: f64,
    pub n: usize,
    pub k: usize,
}

fn pooled_ranks(groups: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<usize>, usize) {
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let (ranks, ties) = stats::average_ranks(&all);
    let mut out = Vec::with_capacity(groups.len());
    let mut offset = 0;
    for g in groups {
        out.push(ranks[offset..offset + g.len()].to_vec());
        offset += g.len();
    }
    (out, ties, all.len())
}

fn tie_sum(ties: &[usize]) -> f64 {
    ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum()
}

pub fn kruskal_wallis(groups: &[Vec<f64>], tie_correction: bool) -> Result<KruskalWallis> {
    let k = groups.len();
    if k < 2 {
        return Err(Error::InvalidInput(format!("Kruskal–Wallis needs >= 2 groups, got {k}")));
    }
    if groups.iter().any(Vec::is_empty) {
        return Err(Error::InvalidInput("Kruskal–Wallis group is empty".into()));
    }
    if groups.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in Kruskal–Wallis input".into()));
    }
    let (ranks, ties, n) = pooled_ranks(groups);
    if n < 3 {
        return Err(Error::InvalidInput(format!("Kruskal–Wallis needs N >= 3, got {n}")));
    }
    let nf = n as f64;
    let s: f64 = ranks
        .iter()
        .map(|r| {
            let sum: f64 = r.iter().sum();
            sum * sum / r.len() as f64
        })
        .sum();
    let mut h = 12.0 / (nf * (nf + 1.0)) * s - 3.0 * (nf + 1.0);
    if tie_correction {
        let c = 1.0 - tie_sum(&ties) / (nf.powi(3) - nf);
        if c <= 0.0 {
            return Err(Error::Degenerate("all values identical; tie correction undefined".into()));
        }
        h /= c;
    }
    let h = h.max(0.0);
    Ok(KruskalWallis {
        h,
        p: chi2_sf(h, (k - 1) as f64),
        n,
        k,
    })
}

/// `(H − k + 1)/(N − k)`; may be negative.
pub fn epsilon_squared(h: f64, n: usize, k: usize) -> Result<f64> {
    if n <= k {
        return Err(Error::InvalidInput(format!("epsilon² needs N > k, got N={n}, k={k}")));
    }
    Ok((h - k as f64 + 1.0) / (n - k) as f64)
}

/// Benjamini–Hochberg step-up adjustment, returned in input order.
pub fn bh_fdr(pvals: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!("p-value {p} outside [0,1]")));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (pos, &idx) in order.iter().enumerate().rev() {
        let candidate = pvals[idx] * (m as f64 / (pos + 1) as f64);
        running = running.min(candidate).min(1.0);
        adjusted[idx] = running;
    }
    Ok(adjusted)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DunnPair {
    pub group_a: String,
    pub group_b: String,
    pub z: f64,
    pub p: f64,
    pub p_adj: f64,
}

/// Pairwise Dunn z-tests on pooled ranks, two-sided, BH-adjusted across the
/// pairs of this set of groups.
pub fn dunn_posthoc(groups: &[(String, Vec<f64>)], tie_correction: bool) -> Result<Vec<DunnPair>> {
    if groups.len() < 2 {
        return Err(Error::InvalidInput("Dunn test needs >= 2 groups".into()));
    }
    if let Some((label, _)) = groups.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::InvalidInput(format!("Dunn group {label:?} is empty")));
    }
    let values: Vec<Vec<f64>> = groups.iter().map(|(_, v)| v.clone()).collect();
    let (ranks, ties, n) = pooled_ranks(&values);
    let nf = n as f64;
    let tie_term = if tie_correction {
        tie_sum(&ties) / (12.0 * (nf - 1.0))
    } else {
        0.0
    };
    let var = nf * (nf + 1.0) / 12.0 - tie_term;
    let mean_rank: Vec<f64> = ranks
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .collect();
    let mut pairs = Vec::new();
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            let se = (var * (1.0 / ranks[a].len() as f64 + 1.0 / ranks[b].len() as f64)).sqrt();
            let diff = mean_rank[a] - mean_rank[b];
            let z = if se > 0.0 { diff / se } else { 0.0 };
            pairs.push(DunnPair {
                group_a: groups[a].0.clone(),
                group_b: groups[b].0.clone(),
                z,
                p: (2.0 * normal_sf(z.abs())).min(1.0),
                p_adj: 0.0,
            });
        }
    }
    let adj = bh_fdr(&pairs.iter().map(|p| p.p).collect::<Vec<_>>())?;
    for (pair, a) in pairs.iter_mut().zip(adj) {
        pair.p_adj = a;
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CategoryCi {
    pub mean_low: f64,
    pub mean_high: f64,
    pub share_low: f64,
    pub share_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategorySummary {
    pub criterion: String,
    pub category: String,
    pub n: usize,
    pub freq: f64,
    pub mean_ae: f64,
    pub sd_ae: f64,
    pub median_ae: f64,
    pub iqr_ae: f64,
    pub share: f64,
    pub delta: f64,
    /// Fewer than `MIN_CELL` images: descriptive only.
    pub small: bool,
    pub ci: Option<CategoryCi>,
}

/// Errors grouped by category for one criterion. Every image with an error
/// must be labelled.
pub fn group_by_category(
    errors: &[ImageError],
    cats: &CategoryTable,
    criterion: &str,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let labels = cats
        .labels(criterion)
        .ok_or_else(|| Error::InvalidInput(format!("unknown criterion {criterion:?}")))?;
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for e in errors {
        let cat = labels.get(&e.image_id).ok_or_else(|| {
            Error::InvalidInput(format!("image {} has no {criterion:?} category", e.image_id))
        })?;
        groups.entry(cat.clone()).or_default().push(e.abs_error);
    }
    Ok(groups)
}

fn describe(criterion: &str, groups: &BTreeMap<String, Vec<f64>>) -> Vec<CategorySummary> {
    let n_total: usize = groups.values().map(Vec::len).sum();
    let total = compensated_sum(groups.values().flatten().copied());
    groups
        .iter()
        .map(|(cat, v)| {
            let q = Quartiles::of(v);
            let freq = v.len() as f64 / n_total as f64;
            let share = if total > 0.0 {
                compensated_sum(v.iter().copied()) / total
            } else {
                freq
            };
            CategorySummary {
                criterion: criterion.to_string(),
                category: cat.clone(),
                n: v.len(),
                freq,
                mean_ae: stats::mean(v),
                sd_ae: if v.len() > 1 { stats::sd(v) } else { f64::NAN },
                median_ae: q.median,
                iqr_ae: q.iqr(),
                share,
                delta: share - freq,
                small: v.len() < MIN_CELL,
                ci: None,
            }
        })
        .collect()
}

/// Descriptives for every criterion in `cats`, without bootstrap intervals.
pub fn category_summaries(errors: &[ImageError], cats: &CategoryTable) -> Result<Vec<CategorySummary>> {
    let mut out = Vec::new();
    for criterion in cats.criteria() {
        let groups = group_by_category(errors, cats, criterion)?;
        out.extend(describe(criterion, &groups));
    }
    Ok(out)
}

/// Percentile intervals for each category's mean error and error share,
/// resampling images with replacement within each category.
pub fn stratified_bootstrap_ci(
    groups: &BTreeMap<String, Vec<f64>>,
    b: usize,
    level: f64,
    seed: u64,
    tag: &str,
) -> Result<BTreeMap<String, CategoryCi>> {
    if b < 100 {
        return Err(Error::InvalidInput(format!("bootstrap needs B >= 100, got {b}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level must be in (0,1), got {level}")));
    }
    if let Some((cat, _)) = groups.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::InvalidInput(format!("category {cat:?} is empty")));
    }
    let purpose = format!("stratified-bootstrap/{tag}");
    let reps: Vec<(Vec<f64>, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, &purpose, &[i as u64]);
            let sums: Vec<(f64, usize)> = groups
                .values()
                .map(|v| {
                    let s = compensated_sum((0..v.len()).map(|_| v[r.random_range(0..v.len())]));
                    (s, v.len())
                })
                .collect();
            let total: f64 = compensated_sum(sums.iter().map(|s| s.0));
            let means = sums.iter().map(|(s, n)| s / *n as f64).collect();
            let shares = sums
                .iter()
                .map(|(s, _)| if total > 0.0 { s / total } else { f64::NAN })
                .collect();
            (means, shares)
        })
        .collect();
    let lo = (1.0 - level) / 2.0;
    let hi = 1.0 - lo;
    let mut out = BTreeMap::new();
    for (j, cat) in groups.keys().enumerate() {
        let mut means: Vec<f64> = reps.iter().map(|r| r.0[j]).collect();
        let mut shares: Vec<f64> = reps.iter().map(|r| r.1[j]).filter(|v| v.is_finite()).collect();
        means.sort_by(f64::total_cmp);
        shares.sort_by(f64::total_cmp);
        let (share_low, share_high) = if shares.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (stats::quantile_sorted(&shares, lo), stats::quantile_sorted(&shares, hi))
        };
        out.insert(
            cat.clone(),
            CategoryCi {
                mean_low: stats::quantile_sorted(&means, lo),
                mean_high: stats::quantile_sorted(&means, hi),
                share_low,
                share_high,
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OmnibusResult {
    pub criterion: String,
    pub n: usize,
    pub k: usize,
    pub h: Option<f64>,
    pub epsilon_sq: Option<f64>,
    pub p: Option<f64>,
    pub p_fdr: Option<f64>,
    pub significant: bool,
    pub skip_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosthocRow {
    pub criterion: String,
    #[serde(flatten)]
    pub pair: DunnPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub tie_correction: bool,
    pub min_cell: usize,
    pub alpha: f64,
    pub bootstrap: usize,
    pub level: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            tie_correction: true,
            min_cell: MIN_CELL,
            alpha: DEFAULT_ALPHA,
            bootstrap: DEFAULT_BOOTSTRAP,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorAnalysis {
    pub descriptives: Vec<CategorySummary>,
    pub omnibus: Vec<OmnibusResult>,
    pub posthoc: Vec<PosthocRow>,
    pub top_criteria: Vec<String>,
}

/// Omnibus tests per criterion with BH across the tested criteria. Criteria
/// with a category below `min_cell` images are skipped.
pub fn omnibus_tests(
    grouped: &[(String, BTreeMap<String, Vec<f64>>)],
    opts: &AnalysisOptions,
) -> Result<Vec<OmnibusResult>> {
    let mut results = Vec::new();
    for (criterion, groups) in grouped {
        let n: usize = groups.values().map(Vec::len).sum();
        let k = groups.len();
        let mut r = OmnibusResult {
            criterion: criterion.clone(),
            n,
            k,
            h: None,
            epsilon_sq: None,
            p: None,
            p_fdr: None,
            significant: false,
            skip_reason: None,
        };
        if k < 2 {
            r.skip_reason = Some("single category".into());
        } else if groups.values().any(|v| v.len() < opts.min_cell) {
            r.skip_reason = Some(format!("small cells (min_n={})", opts.min_cell));
        } else {
            let values: Vec<Vec<f64>> = groups.values().cloned().collect();
            match kruskal_wallis(&values, opts.tie_correction) {
                Ok(kw) => {
                    r.h = Some(kw.h);
                    r.p = Some(kw.p);
                    r.epsilon_sq = Some(epsilon_squared(kw.h, n, k)?);
                }
                Err(Error::Degenerate(msg)) => r.skip_reason = Some(msg),
                Err(e) => return Err(e),
            }
        }
        results.push(r);
    }
    let tested: Vec<usize> = (0..results.len()).filter(|&i| results[i].p.is_some()).collect();
    let adj = bh_fdr(&tested.iter().map(|&i| results[i].p.unwrap()).collect::<Vec<_>>())?;
    for (&i, a) in tested.iter().zip(adj) {
        results[i].p_fdr = Some(a);
        results[i].significant = a < opts.alpha;
    }
    Ok(results)
}

/// FDR-significant criteria ordered by ε² descending, ties by smaller FDR p.
pub fn rank_top_criteria(results: &[OmnibusResult], top: usize) -> Vec<String> {
    let mut sig: Vec<&OmnibusResult> = results
        .iter()
        .filter(|r| r.significant && r.epsilon_sq.is_some())
        .collect();
    sig.sort_by(|a, b| {
        b.epsilon_sq
            .unwrap()
            .total_cmp(&a.epsilon_sq.unwrap())
            .then(a.p_fdr.unwrap_or(1.0).total_cmp(&b.p_fdr.unwrap_or(1.0)))
    });
    sig.into_iter().take(top).map(|r| r.criterion.clone()).collect()
}

/// Descriptives with stratified intervals, omnibus tests, post-hoc pairs and
/// the top-3 ranking.
pub fn analyze(
    errors: &[ImageError],
    cats: &CategoryTable,
    opts: &AnalysisOptions,
    seed: u64,
) -> Result<ErrorAnalysis> {
    let grouped: Vec<(String, BTreeMap<String, Vec<f64>>)> = cats
        .criteria()
        .map(|c| group_by_category(errors, cats, c).map(|g| (c.to_string(), g)))
        .collect::<Result<_>>()?;

    let mut descriptives = Vec::new();
    for (criterion, groups) in &grouped {
        let cis = stratified_bootstrap_ci(groups, opts.bootstrap, opts.level, seed, criterion)?;
        for mut s in describe(criterion, groups) {
            s.ci = cis.get(&s.category).copied();
            descriptives.push(s);
        }
    }

    let omnibus = omnibus_tests(&grouped, opts)?;
    let mut posthoc = Vec::new();
    for (criterion, groups) in &grouped {
        let tested = omnibus
            .iter()
            .any(|r| &r.criterion == criterion && r.p.is_some());
        if !tested {
            continue;
        }
        let labelled: Vec<(String, Vec<f64>)> = groups.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for pair in dunn_posthoc(&labelled, opts.tie_correction)? {
            posthoc.push(PosthocRow {
                criterion: criterion.clone(),
                pair,
            });
        }
    }
    let top_criteria = rank_top_criteria(&omnibus, 3);
    Ok(ErrorAnalysis {
        descriptives,
        omnibus,
        posthoc,
        top_criteria,
    })
}

/// Display string used in the tables: three decimals, or `< .001`.
pub fn p_display(p: f64) -> String {
    if p < 0.001 {
        "< .001".into()
    } else {
        format!("{p:.3}")
    }
}

pub fn write_outputs(dir: &Path, a: &ErrorAnalysis) -> Result<()> {
    write_csv(
        &dir.join("descriptives.csv"),
        &[
            "criterion", "category", "n", "freq", "mean_ae", "sd_ae", "median_ae", "iqr_ae",
            "share", "delta", "small", "mean_ci_low", "mean_ci_high", "share_ci_low",
            "share_ci_high",
        ],
        a.descriptives.iter().map(|s| {
            vec![
                s.criterion.clone(),
                s.category.clone(),
                s.n.to_string(),
                fmt_f64(s.freq),
                fmt_f64(s.mean_ae),
                if s.sd_ae.is_nan() { String::new() } else { fmt_f64(s.sd_ae) },
                fmt_f64(s.median_ae),
                fmt_f64(s.iqr_ae),
                fmt_f64(s.share),
                fmt_f64(s.delta),
                s.small.to_string(),
                fmt_opt(s.ci.map(|c| c.mean_low)),
                fmt_opt(s.ci.map(|c| c.mean_high)),
                fmt_opt(s.ci.map(|c| c.share_low)),
                fmt_opt(s.ci.map(|c| c.share_high)),
            ]
        }),
    )?;
    write_csv(
        &dir.join("omnibus.csv"),
        &["criterion", "n", "k", "h", "epsilon_sq", "p", "p_fdr", "significant", "skip_reason"],
        a.omnibus.iter().map(|r| {
            vec![
                r.criterion.clone(),
                r.n.to_string(),
                r.k.to_string(),
                fmt_opt(r.h),
                fmt_opt(r.epsilon_sq),
                fmt_opt(r.p),
                fmt_opt(r.p_fdr),
                r.significant.to_string(),
                r.skip_reason.clone().unwrap_or_default(),
            ]
        }),
    )?;
    write_csv(
        &dir.join("posthoc.csv"),
        &["criterion", "group_a", "group_b", "z", "p", "p_adj", "p_adj_display"],
        a.posthoc.iter().map(|r| {
            vec![
                r.criterion.clone(),
                r.pair.group_a.clone(),
                r.pair.group_b.clone(),
                fmt_f64(r.pair.z),
                fmt_f64(r.pair.p),
                fmt_f64(r.pair.p_adj),
                p_display(r.pair.p_adj),
            ]
        }),
    )?;
    #[derive(Serialize)]
    struct Top<'a> {
        top_criteria: &'a [String],
        ranking: &'static str,
        dunn_sides: &'static str,
    }
    write_json(
        &dir.join("top_criteria.json"),
        &Top {
            top_criteria: &a.top_criteria,
            ranking: "fdr_significant_by_epsilon_sq_desc",
            dunn_sides: "two_sided",
        },
    )
}

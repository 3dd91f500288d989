//! Synthetic raters, images, features, categories, heatmaps and masks with
//! known ground truth.
//!
//! Ratings follow `y_ij = μ + img_i + rater_j + ε_ij`, truncated to [0,100].
//! Image effects are an exact linear function of the features, so the ideal
//! predictor is known.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    write_categories, write_features, write_ratings, CategoryTable, FeatureTable, RatingRecord,
    RatingsTable, CRITERIA, RATING_MAX, RATING_MIN,
};
use crate::error::{Error, Result};
use crate::grid::{save_float_grid, save_mask, BinaryMask, FloatGrid};
use crate::report::write_json;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_images: usize,
    pub n_raters: usize,
    /// Images shown to each rater; `None` shows all of them.
    pub images_per_rater: Option<usize>,
    pub mean: f64,
    pub var_image: f64,
    pub var_rater: f64,
    pub var_residual: f64,
    /// Raters whose every rating sits `outlier_offset` points from the truth.
    pub outliers: usize,
    pub outlier_offset: f64,
    /// Extra ratings of already-seen images at later trials.
    pub repeats: usize,
    pub feature_dim: usize,
    /// Direction of the image effect in feature space; drawn at random when
    /// absent. Rescaled so the image effect has variance `var_image`.
    pub weights: Option<Vec<f64>>,
    pub categories: bool,
    /// Heatmaps for this many images, `heatmap_reps` maps per image.
    pub heatmap_images: usize,
    pub heatmap_reps: usize,
    pub heatmap_size: usize,
    /// Mean heatmap lift inside the mask.
    pub attribution_shift: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_images: 313,
            n_raters: 100,
            images_per_rater: None,
            mean: 50.0,
            var_image: 100.0,
            var_rater: 25.0,
            var_residual: 25.0,
            outliers: 0,
            outlier_offset: 50.0,
            repeats: 0,
            feature_dim: 16,
            weights: None,
            categories: true,
            heatmap_images: 0,
            heatmap_reps: 5,
            heatmap_size: 24,
            attribution_shift: 0.3,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.n_images < 1 || self.n_raters < 2 {
            return bad("need at least 1 image and 2 raters".into());
        }
        for (name, v) in [
            ("var_image", self.var_image),
            ("var_rater", self.var_rater),
            ("var_residual", self.var_residual),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite variance >= 0"));
            }
        }
        if self.outliers >= self.n_raters {
            return bad("outlier plants must be fewer than raters".into());
        }
        if let Some(k) = self.images_per_rater {
            if k == 0 || k > self.n_images {
                return bad(format!("images_per_rater must be in 1..={}", self.n_images));
            }
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1".into());
        }
        if let Some(w) = &self.weights {
            if w.len() != self.feature_dim || w.iter().all(|v| *v == 0.0) {
                return bad("weights must be nonzero with feature_dim entries".into());
            }
        }
        if self.heatmap_images > self.n_images {
            return bad("heatmap_images exceeds n_images".into());
        }
        if self.heatmap_images > 0 && (self.heatmap_reps == 0 || self.heatmap_size < 4) {
            return bad("heatmaps need >= 1 rep and size >= 4".into());
        }
        Ok(())
    }

    /// Population ICC(2,k) of the generative model for `k` raters.
    pub fn analytic_icc(&self, k: usize) -> f64 {
        self.var_image / (self.var_image + (self.var_rater + self.var_residual) / k as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub weights: Vec<f64>,
    pub image_effects: BTreeMap<String, f64>,
    pub rater_effects: BTreeMap<String, f64>,
    pub outlier_raters: Vec<String>,
    pub repeat_records: usize,
    pub truncated_cells: usize,
    pub analytic_icc_all_raters: f64,
}

#[derive(Debug, Clone)]
pub struct HeatmapSet {
    pub image_id: String,
    pub maps: Vec<FloatGrid>,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub ratings: RatingsTable,
    pub features: FeatureTable,
    pub categories: Option<CategoryTable>,
    pub heatmaps: Vec<HeatmapSet>,
    pub truth: GroundTruth,
}

pub fn image_id(i: usize) -> String {
    format!("img{i:04}")
}

pub fn rater_id(j: usize) -> String {
    format!("p{j:03}")
}

const LEVELS: [&[&str]; 12] = [
    &["spider", "no spider", "artificial, painted or comic spider"],
    &["no", "yes"],
    &["one spider", "two or more spiders", "none"],
    &["close", "distant", "not evaluable"],
    &["nature", "civilization", "human contact", "not evaluable"],
    &["smooth", "hairy", "not evaluable"],
    &["non-visible", "visible", "not evaluable"],
    &["not eating prey", "eating prey", "not evaluable"],
    &["middle", "large", "small", "not evaluable"],
    &["from side/front", "from top/bottom", "not evaluable"],
    &["color", "black/white"],
    &["no", "yes", "not evaluable"],
];

fn normal(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd).expect("finite non-negative sd")
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let seed = spec.seed;
    let d = spec.feature_dim;

    let mut wr = rng::stream(seed, "synth-weights", &[]);
    let raw_w: Vec<f64> = match &spec.weights {
        Some(w) => w.clone(),
        None => (0..d).map(|_| normal(1.0).sample(&mut wr)).collect(),
    };
    let norm = raw_w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let weights: Vec<f64> = raw_w.iter().map(|v| v / norm * spec.var_image.sqrt()).collect();

    let mut fr = rng::stream(seed, "synth-features", &[]);
    let mut vectors = BTreeMap::new();
    let mut image_effects = BTreeMap::new();
    for i in 0..spec.n_images {
        let x: Vec<f64> = (0..d).map(|_| normal(1.0).sample(&mut fr)).collect();
        let effect: f64 = x.iter().zip(&weights).map(|(a, b)| a * b).sum();
        image_effects.insert(image_id(i), effect);
        vectors.insert(image_id(i), x);
    }
    let features = FeatureTable { dim: d, vectors };

    let mut rr = rng::stream(seed, "synth-raters", &[]);
    let rater_effects: BTreeMap<String, f64> = (0..spec.n_raters)
        .map(|j| (rater_id(j), normal(spec.var_rater.sqrt()).sample(&mut rr)))
        .collect();
    let outlier_raters: Vec<String> = (0..spec.outliers).map(rater_id).collect();

    let effects: Vec<f64> = (0..spec.n_images).map(|i| image_effects[&image_id(i)]).collect();
    let mut records = Vec::new();
    let mut truncated = 0;
    let eps = normal(spec.var_residual.sqrt());
    for j in 0..spec.n_raters {
        let pid = rater_id(j);
        let mut r = rng::stream(seed, "synth-ratings", &[j as u64]);
        let mut shown: Vec<usize> = (0..spec.n_images).collect();
        shown.shuffle(&mut r);
        shown.truncate(spec.images_per_rater.unwrap_or(spec.n_images));
        let bias = rater_effects[&pid];
        for (t, &i) in shown.iter().enumerate() {
            let mut y = spec.mean + effects[i] + bias + eps.sample(&mut r);
            if j < spec.outliers {
                let truth = spec.mean + effects[i];
                y = if truth + spec.outlier_offset <= RATING_MAX {
                    truth + spec.outlier_offset
                } else {
                    truth - spec.outlier_offset
                };
            }
            if !(RATING_MIN..=RATING_MAX).contains(&y) {
                truncated += 1;
            }
            records.push(RatingRecord {
                participant_id: pid.clone(),
                image_id: image_id(i),
                trial_index: t as u32 + 1,
                rating: y.clamp(RATING_MIN, RATING_MAX),
            });
        }
    }

    let mut rep_rng = rng::stream(seed, "synth-repeats", &[]);
    let mut next_trial: BTreeMap<String, u32> = BTreeMap::new();
    for rec in &records {
        let e = next_trial.entry(rec.participant_id.clone()).or_insert(0);
        *e = (*e).max(rec.trial_index);
    }
    let n_base = records.len();
    for _ in 0..spec.repeats {
        let src = records[rep_rng.random_range(0..n_base)].clone();
        let trial = next_trial.get_mut(&src.participant_id).expect("rater has records");
        *trial += 1;
        records.push(RatingRecord {
            trial_index: *trial,
            rating: rep_rng.random_range(RATING_MIN..=RATING_MAX).round(),
            ..src
        });
    }

    let categories = if spec.categories {
        let mut cats = CategoryTable::default();
        let mut cr = rng::stream(seed, "synth-categories", &[]);
        for i in 0..spec.n_images {
            for (c, levels) in CRITERIA.iter().zip(LEVELS) {
                // Skewed toward the first level, as in annotated photo sets.
                let idx = if cr.random_bool(0.5) { 0 } else { cr.random_range(0..levels.len()) };
                cats.insert(&image_id(i), c, levels[idx])?;
            }
        }
        Some(cats)
    } else {
        None
    };

    let mut heatmaps = Vec::new();
    for i in 0..spec.heatmap_images {
        heatmaps.push(synth_heatmaps(spec, i)?);
    }

    let truth = GroundTruth {
        spec: spec.clone(),
        weights,
        image_effects,
        rater_effects,
        outlier_raters,
        repeat_records: spec.repeats,
        truncated_cells: truncated,
        analytic_icc_all_raters: spec.analytic_icc(spec.n_raters),
    };
    Ok(SynthData {
        ratings: RatingsTable::new(records),
        features,
        categories,
        heatmaps,
        truth,
    })
}

fn synth_heatmaps(spec: &SynthSpec, i: usize) -> Result<HeatmapSet> {
    let s = spec.heatmap_size;
    let mut r = rng::stream(spec.seed, "synth-mask", &[i as u64]);
    let (w, h) = (r.random_range(2..=s / 2), r.random_range(2..=s / 2));
    let (x0, y0) = (r.random_range(0..=s - w), r.random_range(0..=s - h));
    let bits: Vec<bool> = (0..s * s)
        .map(|p| {
            let (x, y) = (p % s, p / s);
            (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y)
        })
        .collect();
    let mask = BinaryMask::new(s, s, bits)?;
    let shift = spec.attribution_shift + normal(0.5).sample(&mut r) * spec.attribution_shift.abs();
    let maps = (0..spec.heatmap_reps)
        .map(|rep| {
            let mut hr = rng::stream(spec.seed, "synth-heatmap", &[i as u64, rep as u64]);
            let noise = normal(0.2);
            let values = mask
                .bits()
                .iter()
                .map(|&inside| {
                    let base = 0.5 + noise.sample(&mut hr);
                    (if inside { base + shift } else { base }) as f32
                })
                .collect();
            FloatGrid::new(s, s, values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HeatmapSet {
        image_id: image_id(i),
        maps,
        mask,
    })
}

/// Writes `ratings.csv`, `features.csv`, `categories.csv`,
/// `heatmaps/rep<r>/<id>.pfm`, `masks/<id>.pgm` and `ground_truth.json`.
pub fn write_synth(dir: &Path, data: &SynthData) -> Result<()> {
    let create = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    create(dir)?;
    let file = |name: &str| {
        let p = dir.join(name);
        std::fs::File::create(&p)
            .map(std::io::BufWriter::new)
            .map_err(|e| Error::io(&p, e))
    };
    write_ratings(&data.ratings, file("ratings.csv")?)?;
    write_features(&data.features, file("features.csv")?)?;
    if let Some(c) = &data.categories {
        write_categories(c, file("categories.csv")?)?;
    }
    if !data.heatmaps.is_empty() {
        let masks = dir.join("masks");
        create(&masks)?;
        for set in &data.heatmaps {
            save_mask(&masks.join(format!("{}.pgm", set.image_id)), &set.mask)?;
            for (rep, map) in set.maps.iter().enumerate() {
                let rep_dir = dir.join("heatmaps").join(format!("rep{rep}"));
                create(&rep_dir)?;
                save_float_grid(&rep_dir.join(format!("{}.pfm", set.image_id)), map)?;
            }
        }
    }
    write_json(&dir.join("ground_truth.json"), &data.truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::first_trial_filter;
    use crate::reliability::{icc2k, MissingMode, RatingMatrix};

    #[test]
    fn deterministic_under_seed() {
        let spec = SynthSpec {
            n_images: 20,
            n_raters: 6,
            heatmap_images: 2,
            ..SynthSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.ratings, b.ratings);
        assert_eq!(a.features, b.features);
        assert_eq!(a.heatmaps[1].maps, b.heatmaps[1].maps);
    }

    #[test]
    fn zero_residual_gives_perfect_icc() {
        let spec = SynthSpec {
            n_images: 40,
            n_raters: 8,
            var_rater: 0.0,
            var_residual: 0.0,
            ..SynthSpec::default()
        };
        let data = generate(&spec).unwrap();
        let m = RatingMatrix::from_table(&data.ratings).unwrap();
        assert!((icc2k(&m, MissingMode::Impute).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn repeats_are_removed_by_the_filter() {
        let spec = SynthSpec {
            n_images: 30,
            n_raters: 5,
            repeats: 17,
            ..SynthSpec::default()
        };
        let data = generate(&spec).unwrap();
        assert_eq!(data.ratings.len(), 150 + 17);
        assert_eq!(first_trial_filter(&data.ratings).len(), 150);
    }

    #[test]
    fn empirical_variances_match_spec() {
        let spec = SynthSpec {
            n_images: 400,
            n_raters: 60,
            var_image: 100.0,
            var_rater: 25.0,
            var_residual: 25.0,
            categories: false,
            ..SynthSpec::default()
        };
        let data = generate(&spec).unwrap();
        let effects: Vec<f64> = data.truth.image_effects.values().copied().collect();
        let v = crate::stats::variance(&effects);
        assert!((v / 100.0 - 1.0).abs() < 0.15, "image variance {v}");
        let mut resid = Vec::new();
        for r in &data.ratings.records {
            let pred = spec.mean + data.truth.image_effects[&r.image_id] + data.truth.rater_effects[&r.participant_id];
            resid.push(r.rating - pred);
        }
        let v = crate::stats::variance(&resid);
        assert!((v / 25.0 - 1.0).abs() < 0.1, "residual variance {v}");
    }

    #[test]
    fn rejects_bad_specs() {
        let s = SynthSpec {
            outliers: 10,
            n_raters: 10,
            ..SynthSpec::default()
        };
        assert!(generate(&s).is_err());
        let s = SynthSpec {
            var_image: -1.0,
            ..SynthSpec::default()
        };
        assert!(generate(&s).is_err());
    }
}

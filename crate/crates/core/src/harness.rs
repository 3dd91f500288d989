//! Nested cross-validation with random hyperparameter search over a
//! pluggable predictor.
//!
//! For every outer (repetition, fold): sample `n_trials` hyperparameter sets,
//! score each by mean MSE over the inner folds of the outer training set
//! (group-A targets, raw predictions), refit the winner on the whole outer
//! training set and predict the held-out fold. Each (repetition, fold) task
//! draws from its own seeded stream, so results do not depend on how tasks are
//! scheduled across threads.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureTable, RATING_MAX, RATING_MIN};
use crate::error::{Error, Result};
use crate::partition::{fold_targets, CvPlan, FoldTarget, ImageTargets, OuterFold};
use crate::report::{fmt_f64_exact, write_csv};
use crate::ridge::{fit_ridge, RidgeModel};
use crate::rng::{self, StreamRng};

pub const DEFAULT_TRIALS: usize = 30;
/// Epochs added to the best-validation epoch.
pub const EPOCH_BUFFER: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperRange {
    pub low: f64,
    pub high: f64,
    pub scale: Scale,
}

impl HyperRange {
    pub fn linear(low: f64, high: f64) -> Self {
        HyperRange {
            low,
            high,
            scale: Scale::Linear,
        }
    }

    pub fn log(low: f64, high: f64) -> Self {
        HyperRange {
            low,
            high,
            scale: Scale::Log,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite() && self.low <= self.high) {
            return Err(Error::InvalidInput(format!(
                "range {name}: need finite low <= high, got ({}, {})",
                self.low, self.high
            )));
        }
        if self.scale == Scale::Log && self.low <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "range {name}: log-scale bounds must be positive"
            )));
        }
        Ok(())
    }

    /// Uniform draw on the declared scale.
    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        let u: f64 = rng.random();
        match self.scale {
            Scale::Linear => self.low + u * (self.high - self.low),
            Scale::Log => {
                let (a, b) = (self.low.ln(), self.high.ln());
                (a + u * (b - a)).exp()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    /// Closed-form ridge; hyperparameter `lambda`.
    RidgeClosedForm,
    /// Linear model trained by mini-batch gradient descent with per-epoch
    /// validation checkpoints; hyperparameters `learning_rate`,
    /// `weight_decay` and `max_epochs`.
    #[serde(alias = "iterative_stub")]
    IterativeLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSpec {
    pub kind: PredictorKind,
    pub ranges: BTreeMap<String, HyperRange>,
    /// Inclusive integer range for the epoch budget of iterative kinds.
    #[serde(default)]
    pub max_epochs: Option<(u32, u32)>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub optimizer: Option<String>,
}

impl PredictorSpec {
    pub fn ridge_default() -> Self {
        PredictorSpec {
            kind: PredictorKind::RidgeClosedForm,
            ranges: [("lambda".to_string(), HyperRange::log(1e-3, 1e4))].into(),
            max_epochs: None,
            batch_size: None,
            optimizer: None,
        }
    }

    pub fn iterative_default() -> Self {
        PredictorSpec {
            kind: PredictorKind::IterativeLinear,
            ranges: [
                ("learning_rate".to_string(), HyperRange::log(1e-3, 1e-1)),
                ("weight_decay".to_string(), HyperRange::log(1e-6, 1e-3)),
            ]
            .into(),
            max_epochs: Some((10, 50)),
            batch_size: Some(16),
            optimizer: Some("sgd".into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranges.is_empty() {
            return Err(Error::InvalidInput("predictor spec has no ranges".into()));
        }
        for (name, r) in &self.ranges {
            r.validate(name)?;
        }
        match self.kind {
            PredictorKind::RidgeClosedForm => {
                if !self.ranges.contains_key("lambda") {
                    return Err(Error::InvalidInput("ridge spec needs a lambda range".into()));
                }
            }
            PredictorKind::IterativeLinear => {
                for key in ["learning_rate", "weight_decay"] {
                    if !self.ranges.contains_key(key) {
                        return Err(Error::InvalidInput(format!("iterative spec needs {key}")));
                    }
                }
                match self.max_epochs {
                    Some((lo, hi)) if lo >= 1 && lo <= hi => {}
                    _ => {
                        return Err(Error::InvalidInput(
                            "iterative spec needs max_epochs (low >= 1, low <= high)".into(),
                        ))
                    }
                }
                if self.batch_size == Some(0) {
                    return Err(Error::InvalidInput("batch_size must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut StreamRng) -> Hyperparams {
        let mut values: BTreeMap<String, f64> = self
            .ranges
            .iter()
            .map(|(k, r)| (k.clone(), r.sample(rng)))
            .collect();
        let max_epochs = self.max_epochs.map(|(lo, hi)| rng.random_range(lo..=hi));
        if let Some(e) = max_epochs {
            values.insert("max_epochs".into(), f64::from(e));
        }
        Hyperparams { values, max_epochs }
    }

    fn predictor(&self, seed: u64) -> Box<dyn Predictor> {
        match self.kind {
            PredictorKind::RidgeClosedForm => Box::new(RidgePredictor),
            PredictorKind::IterativeLinear => Box::new(IterativeLinearPredictor {
                batch_size: self.batch_size.unwrap_or(16),
                seed,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub values: BTreeMap<String, f64>,
    pub max_epochs: Option<u32>,
}

impl Hyperparams {
    pub fn get(&self, name: &str) -> Result<f64> {
        self.values
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("missing hyperparameter {name}")))
    }
}

/// `best_epoch + 5`, capped at the sampled epoch budget.
pub fn effective_epochs(best_epoch: u32, max_epochs: Option<u32>) -> u32 {
    let e = best_epoch + EPOCH_BUFFER;
    match max_epochs {
        Some(cap) => e.min(cap),
        None => e,
    }
}

/// Rows of features with their targets.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn from_targets(targets: &[FoldTarget], features: &FeatureTable) -> Result<Self> {
        let mut ds = Dataset::default();
        for t in targets {
            let x = features.get(&t.image_id).ok_or_else(|| {
                Error::InvalidInput(format!("no features for image {}", t.image_id))
            })?;
            ds.ids.push(t.image_id.clone());
            ds.x.push(x.to_vec());
            ds.y.push(t.value);
        }
        Ok(ds)
    }

    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> Dataset {
        let mut ds = Dataset::default();
        for i in 0..self.len() {
            if keep(&self.ids[i]) {
                ds.ids.push(self.ids[i].clone());
                ds.x.push(self.x[i].clone());
                ds.y.push(self.y[i]);
            }
        }
        ds
    }
}

pub trait FittedModel: Send + Sync {
    fn predict(&self, x: &[f64]) -> f64;
}

impl FittedModel for RidgeModel {
    fn predict(&self, x: &[f64]) -> f64 {
        RidgeModel::predict(self, x)
    }
}

pub struct Fit {
    pub model: Box<dyn FittedModel>,
    /// 1-based epoch of the best validation checkpoint (iterative only).
    pub best_epoch: Option<u32>,
}

/// A trainable model family.
pub trait Predictor: Send + Sync {
    /// Train on `train`. Iterative predictors checkpoint on `validation`
    /// when given and otherwise train for the full epoch budget.
    fn fit(&self, params: &Hyperparams, train: &Dataset, validation: Option<&Dataset>) -> Result<Fit>;

    /// Train for exactly `epochs` epochs. Closed-form predictors ignore it.
    fn refit(&self, params: &Hyperparams, train: &Dataset, epochs: Option<u32>) -> Result<Fit>;

    fn is_iterative(&self) -> bool;
}

pub struct RidgePredictor;

impl Predictor for RidgePredictor {
    fn fit(&self, params: &Hyperparams, train: &Dataset, _validation: Option<&Dataset>) -> Result<Fit> {
        let model = fit_ridge(&train.x, &train.y, params.get("lambda")?)?;
        Ok(Fit {
            model: Box::new(model),
            best_epoch: None,
        })
    }

    fn refit(&self, params: &Hyperparams, train: &Dataset, _epochs: Option<u32>) -> Result<Fit> {
        self.fit(params, train, None)
    }

    fn is_iterative(&self) -> bool {
        false
    }
}

/// Linear model on standardized features and target, trained with shuffled
/// mini-batch gradient descent and decoupled weight decay.
pub struct IterativeLinearPredictor {
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
struct StandardizedLinear {
    x_mean: Vec<f64>,
    x_scale: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    weights: Vec<f64>,
    bias: f64,
}

impl StandardizedLinear {
    fn raw(&self, x: &[f64]) -> f64 {
        self.bias
            + self
                .weights
                .iter()
                .zip(x.iter().zip(self.x_mean.iter().zip(&self.x_scale)))
                .map(|(w, (v, (m, s)))| w * (v - m) / s)
                .sum::<f64>()
    }
}

impl FittedModel for StandardizedLinear {
    fn predict(&self, x: &[f64]) -> f64 {
        self.y_mean + self.y_scale * self.raw(x)
    }
}

impl IterativeLinearPredictor {
    fn train(
        &self,
        params: &Hyperparams,
        train: &Dataset,
        validation: Option<&Dataset>,
        epochs: u32,
    ) -> Result<Fit> {
        if train.is_empty() {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        let lr = params.get("learning_rate")?;
        let decay = params.get("weight_decay")?;
        let d = train.x[0].len();
        let n = train.len() as f64;
        let x_mean: Vec<f64> = (0..d).map(|j| train.x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let x_scale: Vec<f64> = (0..d)
            .map(|j| {
                let v = train.x.iter().map(|r| (r[j] - x_mean[j]).powi(2)).sum::<f64>() / n;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let y_mean = train.y.iter().sum::<f64>() / n;
        let y_var = train.y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n;
        let y_scale = if y_var > 0.0 { y_var.sqrt() } else { 1.0 };

        let mut model = StandardizedLinear {
            x_mean,
            x_scale,
            y_mean,
            y_scale,
            weights: vec![0.0; d],
            bias: 0.0,
        };
        let mut rng = rng::stream(self.seed, "minibatch", &[]);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut best: Option<(f64, u32, StandardizedLinear)> = None;

        for epoch in 1..=epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(self.batch_size.max(1)) {
                let mut grad_w = vec![0.0; d];
                let mut grad_b = 0.0;
                for &i in batch {
                    let target = (train.y[i] - model.y_mean) / model.y_scale;
                    let err = model.raw(&train.x[i]) - target;
                    grad_b += err;
                    for j in 0..d {
                        grad_w[j] += err * (train.x[i][j] - model.x_mean[j]) / model.x_scale[j];
                    }
                }
                let m = batch.len() as f64;
                for j in 0..d {
                    model.weights[j] -= lr * (2.0 * grad_w[j] / m + decay * model.weights[j]);
                }
                model.bias -= lr * 2.0 * grad_b / m;
            }
            if model.weights.iter().any(|w| !w.is_finite()) || !model.bias.is_finite() {
                return Err(Error::Numerical(format!("diverged at epoch {epoch}")));
            }
            if let Some(val) = validation.filter(|v| !v.is_empty()) {
                let loss = mse_of(&model, val);
                if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
                    best = Some((loss, epoch, model.clone()));
                }
            }
        }
        Ok(match best {
            Some((_, epoch, m)) => Fit {
                model: Box::new(m),
                best_epoch: Some(epoch),
            },
            None => Fit {
                model: Box::new(model),
                best_epoch: None,
            },
        })
    }
}

impl Predictor for IterativeLinearPredictor {
    fn fit(&self, params: &Hyperparams, train: &Dataset, validation: Option<&Dataset>) -> Result<Fit> {
        let budget = params
            .max_epochs
            .ok_or_else(|| Error::InvalidInput("missing max_epochs".into()))?;
        self.train(params, train, validation, budget)
    }

    fn refit(&self, params: &Hyperparams, train: &Dataset, epochs: Option<u32>) -> Result<Fit> {
        let epochs = epochs
            .or(params.max_epochs)
            .ok_or_else(|| Error::InvalidInput("missing epoch count".into()))?;
        self.train(params, train, None, epochs)
    }

    fn is_iterative(&self) -> bool {
        true
    }
}

fn mse_of(model: &dyn FittedModel, data: &Dataset) -> f64 {
    data.x
        .iter()
        .zip(&data.y)
        .map(|(x, y)| (model.predict(x) - y).powi(2))
        .sum::<f64>()
        / data.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub params: Hyperparams,
    /// Mean validation MSE across inner folds; `None` when the trial failed.
    pub loss: Option<f64>,
    pub best_epoch: Option<u32>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchOutcome {
    pub best: TrialResult,
    pub trials: Vec<TrialResult>,
}

/// Random search over `spec`, scoring each trial by mean inner-fold MSE.
/// Returns the lowest-loss trial; ties go to the earliest trial.
pub fn random_search(
    spec: &PredictorSpec,
    inner_folds: &[Vec<String>],
    train: &Dataset,
    n_trials: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    spec.validate()?;
    if n_trials == 0 {
        return Err(Error::InvalidInput("n_trials must be >= 1".into()));
    }
    if inner_folds.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 inner folds".into()));
    }
    let mut sampler = rng::stream(seed, "search-sample", &[]);
    let mut trials = Vec::with_capacity(n_trials);
    for t in 0..n_trials {
        let params = spec.sample(&mut sampler);
        let predictor = spec.predictor(rng::derive_seed(seed, "trial", &[t as u64]));
        let scored = score_trial(predictor.as_ref(), &params, inner_folds, train);
        trials.push(match scored {
            Ok((loss, best_epoch)) => TrialResult {
                trial: t,
                params,
                loss: Some(loss),
                best_epoch,
                error: None,
            },
            Err(e) => TrialResult {
                trial: t,
                params,
                loss: None,
                best_epoch: None,
                error: Some(e.to_string()),
            },
        });
    }
    let best = trials
        .iter()
        .filter_map(|t| t.loss.map(|l| (l, t)))
        .fold(None::<(f64, &TrialResult)>, |acc, (l, t)| match acc {
            Some((bl, _)) if bl <= l => acc,
            _ => Some((l, t)),
        })
        .map(|(_, t)| t.clone());
    match best {
        Some(best) => Ok(SearchOutcome { best, trials }),
        None => Err(Error::SearchFailed {
            trials: trials.len(),
            diagnostics: trials
                .iter()
                .map(|t| format!("trial {}: {}", t.trial, t.error.as_deref().unwrap_or("?")))
                .collect(),
        }),
    }
}

fn score_trial(
    predictor: &dyn Predictor,
    params: &Hyperparams,
    inner_folds: &[Vec<String>],
    train: &Dataset,
) -> Result<(f64, Option<u32>)> {
    let mut losses = Vec::with_capacity(inner_folds.len());
    let mut epochs = Vec::new();
    for held in inner_folds {
        let held: BTreeSet<&str> = held.iter().map(String::as_str).collect();
        let fit_set = train.subset(|id| !held.contains(id));
        let val_set = train.subset(|id| held.contains(id));
        if fit_set.is_empty() || val_set.is_empty() {
            return Err(Error::InvalidInput("empty inner fold".into()));
        }
        let fit = predictor.fit(params, &fit_set, Some(&val_set))?;
        let loss = mse_of(fit.model.as_ref(), &val_set);
        if !loss.is_finite() {
            return Err(Error::Numerical("non-finite validation loss".into()));
        }
        losses.push(loss);
        epochs.extend(fit.best_epoch);
    }
    let best_epoch = if epochs.is_empty() {
        None
    } else {
        Some((epochs.iter().map(|&e| f64::from(e)).sum::<f64>() / epochs.len() as f64).round() as u32)
    };
    Ok((losses.iter().sum::<f64>() / losses.len() as f64, best_epoch))
}

pub fn clip_rating(raw: f64) -> f64 {
    raw.clamp(RATING_MIN, RATING_MAX)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub repetition: usize,
    pub fold: usize,
    pub image_id: String,
    pub raw: f64,
    pub clipped: f64,
}

/// Held-out predictions, one per (repetition, image).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    entries: Vec<PredictionEntry>,
}

impl PredictionSet {
    /// Build from entries, enforcing one entry per (repetition, image) and
    /// `clipped = clamp(raw, 0, 100)`. Entries are stored sorted by
    /// (repetition, image).
    pub fn new(mut entries: Vec<PredictionEntry>) -> Result<Self> {
        entries.sort_by(|a, b| (a.repetition, &a.image_id).cmp(&(b.repetition, &b.image_id)));
        for w in entries.windows(2) {
            if w[0].repetition == w[1].repetition && w[0].image_id == w[1].image_id {
                return Err(Error::InvalidInput(format!(
                    "two predictions for image {} in repetition {}",
                    w[0].image_id, w[0].repetition
                )));
            }
        }
        for e in &entries {
            if !e.raw.is_finite() || e.clipped != clip_rating(e.raw) {
                return Err(Error::InvalidInput(format!(
                    "prediction for {} (rep {}) has clipped {} inconsistent with raw {}",
                    e.image_id, e.repetition, e.clipped, e.raw
                )));
            }
        }
        Ok(PredictionSet { entries })
    }

    pub fn from_raw(entries: impl IntoIterator<Item = (usize, usize, String, f64)>) -> Result<Self> {
        Self::new(
            entries
                .into_iter()
                .map(|(repetition, fold, image_id, raw)| PredictionEntry {
                    repetition,
                    fold,
                    image_id,
                    raw,
                    clipped: clip_rating(raw),
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[PredictionEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn repetitions(&self) -> BTreeSet<usize> {
        self.entries.iter().map(|e| e.repetition).collect()
    }

    /// repetition → image → clipped prediction
    pub fn clipped_by_repetition(&self) -> BTreeMap<usize, BTreeMap<&str, f64>> {
        let mut out: BTreeMap<usize, BTreeMap<&str, f64>> = BTreeMap::new();
        for e in &self.entries {
            out.entry(e.repetition)
                .or_default()
                .insert(e.image_id.as_str(), e.clipped);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(
            path,
            &["rep", "fold", "image_id", "raw", "clipped"],
            self.entries.iter().map(|e| {
                [
                    e.repetition.to_string(),
                    e.fold.to_string(),
                    e.image_id.clone(),
                    fmt_f64_exact(e.raw),
                    fmt_f64_exact(e.clipped),
                ]
            }),
        )
    }

    pub fn parse_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut entries = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let bad = |m: &str| {
                Error::InvalidInput(format!("predictions line {}: {m}", i + 2))
            };
            if row.len() != 5 {
                return Err(bad("expected rep,fold,image_id,raw,clipped"));
            }
            let raw: f64 = row[3].trim().parse().map_err(|_| bad("bad raw"))?;
            entries.push(PredictionEntry {
                repetition: row[0].trim().parse().map_err(|_| bad("bad rep"))?,
                fold: row[1].trim().parse().map_err(|_| bad("bad fold"))?,
                image_id: row[2].trim().to_string(),
                raw,
                // Recompute so formatting round-off in the file cannot break
                // the clipping invariant.
                clipped: clip_rating(raw),
            });
        }
        Self::new(entries)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldFit {
    pub repetition: usize,
    pub fold: usize,
    pub params: Hyperparams,
    pub inner_loss: f64,
    /// Best validation epoch of the final fit; `None` for closed-form kinds.
    pub best_epoch: Option<u32>,
    /// `"not_applicable"` for closed-form predictors.
    pub effective_epochs: EpochRule,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum EpochRule {
    Epochs(u32),
    NotApplicable(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchLogEntry {
    pub repetition: usize,
    pub fold: usize,
    pub selected: bool,
    #[serde(flatten)]
    pub trial: TrialResult,
}

#[derive(Debug, Clone)]
pub struct NestedCvOutput {
    pub predictions: PredictionSet,
    pub fold_fits: Vec<FoldFit>,
    pub search_log: Vec<SearchLogEntry>,
}

struct FoldOutput {
    predictions: Vec<PredictionEntry>,
    fit: FoldFit,
    log: Vec<SearchLogEntry>,
}

fn run_fold(
    repetition: usize,
    fold: &OuterFold,
    targets: &ImageTargets,
    features: &FeatureTable,
    spec: &PredictorSpec,
    n_trials: usize,
    seed: u64,
) -> Result<FoldOutput> {
    let task_seed = rng::derive_seed(seed, "nested-cv", &[repetition as u64, fold.fold as u64]);
    let (train_t, test_t) = fold_targets(fold, targets);
    let train = Dataset::from_targets(&train_t, features)?;
    let test = Dataset::from_targets(&test_t, features)?;
    if train.is_empty() {
        return Err(Error::InvalidInput("empty outer training set".into()));
    }

    let search = random_search(spec, &fold.inner_folds, &train, n_trials, task_seed)?;
    let params = search.best.params.clone();
    let predictor = spec.predictor(rng::derive_seed(task_seed, "final-fit", &[]));

    let (fit, best_epoch, rule) = if predictor.is_iterative() {
        let val_ids: BTreeSet<&str> = fold.validation.iter().map(String::as_str).collect();
        let fit_set = train.subset(|id| !val_ids.contains(id));
        let val_set = train.subset(|id| val_ids.contains(id));
        let probe = predictor.fit(&params, &fit_set, Some(&val_set))?;
        let best = probe.best_epoch.unwrap_or(params.max_epochs.unwrap_or(1));
        let epochs = effective_epochs(best, params.max_epochs);
        let fit = predictor.refit(&params, &train, Some(epochs))?;
        (fit, Some(best), EpochRule::Epochs(epochs))
    } else {
        let fit = predictor.refit(&params, &train, None)?;
        (fit, None, EpochRule::NotApplicable("not_applicable"))
    };

    let mut predictions = Vec::with_capacity(test.len());
    for (id, x) in test.ids.iter().zip(&test.x) {
        let raw = fit.model.predict(x);
        if !raw.is_finite() {
            return Err(Error::Numerical(format!("non-finite prediction for {id}")));
        }
        predictions.push(PredictionEntry {
            repetition,
            fold: fold.fold,
            image_id: id.clone(),
            raw,
            clipped: clip_rating(raw),
        });
    }
    let selected = search.best.trial;
    let log = search
        .trials
        .into_iter()
        .map(|t| SearchLogEntry {
            repetition,
            fold: fold.fold,
            selected: t.trial == selected,
            trial: t,
        })
        .collect();
    Ok(FoldOutput {
        predictions,
        fit: FoldFit {
            repetition,
            fold: fold.fold,
            params,
            inner_loss: search.best.loss.unwrap_or(f64::NAN),
            best_epoch,
            effective_epochs: rule,
            n_train: train.len(),
            n_test: test.len(),
        },
        log,
    })
}

/// Run the full nested CV described by `plan`. Training targets are group-A
/// means, held-out targets group-B means.
pub fn run_nested_cv(
    plan: &CvPlan,
    targets: &ImageTargets,
    features: &FeatureTable,
    spec: &PredictorSpec,
    n_trials: usize,
    seed: u64,
) -> Result<NestedCvOutput> {
    spec.validate()?;
    let tasks: Vec<(usize, &OuterFold)> = plan.folds().collect();
    let outputs: Vec<FoldOutput> = tasks
        .par_iter()
        .map(|(rep, fold)| {
            run_fold(*rep, fold, targets, features, spec, n_trials, seed).map_err(|e| Error::Fit {
                repetition: *rep,
                fold: fold.fold,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    let mut fold_fits = Vec::new();
    let mut search_log = Vec::new();
    for out in outputs {
        entries.extend(out.predictions);
        fold_fits.push(out.fit);
        search_log.extend(out.log);
    }
    Ok(NestedCvOutput {
        predictions: PredictionSet::new(entries)?,
        fold_fits,
        search_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, seed: u64) -> (Dataset, Vec<Vec<String>>) {
        let mut r = rng::stream(seed, "toy", &[]);
        let mut ds = Dataset::default();
        for i in 0..n {
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let y = 50.0 + 10.0 * x[0] - 5.0 * x[1] + 2.0 * x[2] + r.random_range(-3.0..3.0);
            ds.ids.push(format!("i{i:03}"));
            ds.x.push(x);
            ds.y.push(y);
        }
        let folds = crate::partition::chunk_even(&ds.ids, 5);
        (ds, folds)
    }

    #[test]
    fn effective_epoch_rule() {
        assert_eq!(effective_epochs(12, Some(50)), 17);
        assert_eq!(effective_epochs(45, Some(50)), 50);
        assert_eq!(effective_epochs(3, None), 8);
    }

    #[test]
    fn single_trial_search_returns_it() {
        let (ds, folds) = toy(60, 1);
        let out = random_search(&PredictorSpec::ridge_default(), &folds, &ds, 1, 9).unwrap();
        assert_eq!(out.trials.len(), 1);
        assert_eq!(out.best, out.trials[0]);
    }

    #[test]
    fn search_picks_the_argmin() {
        let (ds, folds) = toy(120, 2);
        let out = random_search(&PredictorSpec::ridge_default(), &folds, &ds, 30, 4).unwrap();
        let best = out.best.loss.unwrap();
        for t in &out.trials {
            assert!(best <= t.loss.unwrap());
        }
        let first_min = out
            .trials
            .iter()
            .find(|t| t.loss.unwrap() == best)
            .unwrap()
            .trial;
        assert_eq!(out.best.trial, first_min);
    }

    #[test]
    fn all_failing_trials_report_diagnostics() {
        let (mut ds, folds) = toy(40, 3);
        ds.y[0] = f64::NAN;
        match random_search(&PredictorSpec::ridge_default(), &folds, &ds, 3, 0) {
            Err(Error::SearchFailed { trials, diagnostics }) => {
                assert_eq!(trials, 3);
                assert_eq!(diagnostics.len(), 3);
            }
            other => panic!("expected SearchFailed, got {other:?}"),
        }
    }

    #[test]
    fn log_sampling_is_uniform_in_exponent() {
        let range = HyperRange::log(1e-6, 1e-3);
        let mut r = rng::stream(5, "log-sampling", &[]);
        let n = 10_000;
        let mut exps: Vec<f64> = (0..n).map(|_| range.sample(&mut r).log10()).collect();
        exps.sort_by(f64::total_cmp);
        // Kolmogorov–Smirnov distance against U(-6, -3).
        let ks = exps
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let cdf = (e + 6.0) / 3.0;
                (cdf - i as f64 / n as f64).abs().max((cdf - (i + 1) as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        // 1% critical value ≈ 1.63 / sqrt(n)
        assert!(ks < 1.63 / (n as f64).sqrt(), "ks = {ks}");
        for d in 1..10 {
            let q = exps[d * n / 10];
            assert!((q - (-6.0 + 0.3 * d as f64)).abs() < 0.05, "decile {d}: {q}");
        }
    }

    #[test]
    fn iterative_predictor_learns_and_checkpoints() {
        let (ds, _) = toy(200, 6);
        let train = ds.subset(|id| id < "i160");
        let val = ds.subset(|id| id >= "i160");
        let p = IterativeLinearPredictor {
            batch_size: 16,
            seed: 1,
        };
        let params = Hyperparams {
            values: [("learning_rate".to_string(), 0.05), ("weight_decay".to_string(), 1e-4)].into(),
            max_epochs: Some(30),
        };
        let fit = p.fit(&params, &train, Some(&val)).unwrap();
        let epoch = fit.best_epoch.unwrap();
        assert!((1..=30).contains(&epoch));
        assert!(mse_of(fit.model.as_ref(), &val) < 10.0);
    }

    #[test]
    fn spec_validation() {
        let mut s = PredictorSpec::ridge_default();
        s.ranges.insert("lambda".into(), HyperRange::log(0.0, 1.0));
        assert!(s.validate().is_err());
        let mut s = PredictorSpec::iterative_default();
        s.max_epochs = None;
        assert!(s.validate().is_err());
        assert!(PredictorSpec::iterative_default().validate().is_ok());
    }

    #[test]
    fn prediction_set_invariants() {
        let dup = PredictionSet::from_raw(vec![
            (0, 0, "a".to_string(), 1.0),
            (0, 1, "a".to_string(), 2.0),
        ]);
        assert!(dup.is_err());
        let ps = PredictionSet::from_raw(vec![
            (0, 0, "a".to_string(), -4.0),
            (0, 1, "b".to_string(), 140.0),
        ])
        .unwrap();
        assert_eq!(ps.entries()[0].clipped, 0.0);
        assert_eq!(ps.entries()[1].clipped, 100.0);
    }
}

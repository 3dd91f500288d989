//! Run configuration and the pipelines behind each CLI subcommand.
//!
//! Every pipeline writes its tables under the output directory and finishes
//! with `run_manifest.json`. Stages share state, so `all` computes QC, the
//! split and the predictions once.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{self, OverlapRecord};
use crate::curvefit::{self, CurveForm, CurveRow};
use crate::data::{self, CategoryTable, FeatureTable, RatingsTable};
use crate::error::{Error, Result};
use crate::error_analysis::{self, AnalysisOptions};
use crate::harness::{self, PredictionSet, PredictorSpec, DEFAULT_TRIALS};
use crate::metrics;
use crate::partition::{self, CvPlan, ImageTargets, PlanOptions};
use crate::qc::{self, QcReport};
use crate::reliability::{self, MissingMode, RatingMatrix};
use crate::report::{fmt_f64, fmt_opt, write_csv, write_json, write_jsonl, write_text};
use crate::stats;
use crate::svg;
use crate::synth::{self, SynthSpec};

pub const SEED_ENV: &str = "SPIDEREVAL_SEED";

/// All settings of a run. Loaded from JSON; command-line flags override
/// individual fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub ratings: Option<PathBuf>,
    pub categories: Option<PathBuf>,
    pub features: Option<PathBuf>,
    /// Directory of `<image_id>.pfm` files, or of subdirectories (one per
    /// repetition) holding them.
    pub heatmaps: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub points: Option<PathBuf>,
    /// Output directory; not part of the recorded config snapshot.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub tie_correction: Option<bool>,
    pub icc_missing: Option<MissingMode>,
    pub icc_sizes: Option<Vec<usize>>,
    pub icc_reps: Option<usize>,
    pub bootstrap: Option<usize>,
    pub trials: Option<usize>,
    pub predictor: Option<PredictorSpec>,
    pub plan: Option<PlanOptions>,
    pub curve_form: Option<CurveForm>,
    pub min_fear: Option<f64>,
    pub successes: Option<u64>,
    pub n: Option<u64>,
    pub level: Option<f64>,
    pub synth: Option<SynthSpec>,
}

impl RunConfig {
    /// Read a JSON config. Relative paths are resolved against the config
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.ratings,
            &mut cfg.categories,
            &mut cfg.features,
            &mut cfg.heatmaps,
            &mut cfg.masks,
            &mut cfg.predictions,
            &mut cfg.points,
            &mut cfg.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Fields set in `other` replace those in `self`.
    pub fn merge(mut self, other: RunConfig) -> RunConfig {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(
            ratings, categories, features, heatmaps, masks, predictions, points, out, seed,
            tie_correction, icc_missing, icc_sizes, icc_reps, bootstrap, trials, predictor, plan,
            curve_form, min_fear, successes, n, level, synth
        );
        self
    }

    /// Seed from the config, falling back to `SPIDEREVAL_SEED`.
    pub fn resolve_seed(&mut self) -> Result<()> {
        if self.seed.is_none() {
            if let Ok(v) = std::env::var(SEED_ENV) {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::config("seed", format!("{SEED_ENV}={v:?} is not a u64")))?;
                self.seed = Some(seed);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Qc,
    Split,
    Cv,
    Metrics,
    Icc,
    Curve,
    Overlap,
    ErrorAnalysis,
    PropCi,
    Synth,
    All,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Qc => "qc",
            Command::Split => "split",
            Command::Cv => "cv",
            Command::Metrics => "metrics",
            Command::Icc => "icc",
            Command::Curve => "curve",
            Command::Overlap => "overlap",
            Command::ErrorAnalysis => "error-analysis",
            Command::PropCi => "prop-ci",
            Command::Synth => "synth",
            Command::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: Option<u64>,
    config: &'a RunConfig,
    settings: BTreeMap<&'static str, String>,
    inputs: &'a BTreeMap<String, InputDigest>,
    outputs: Vec<String>,
}

struct SplitState {
    targets: ImageTargets,
    plan: CvPlan,
}

/// Summary returned to the caller for display.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub out: PathBuf,
    pub outputs: Vec<String>,
    pub messages: Vec<String>,
}

struct Runner {
    cfg: RunConfig,
    out: PathBuf,
    outputs: Vec<String>,
    inputs: BTreeMap<String, InputDigest>,
    messages: Vec<String>,
    prepared: Option<(QcReport, RatingsTable)>,
    split: Option<SplitState>,
    predictions: Option<PredictionSet>,
}

pub fn run(command: Command, mut cfg: RunConfig) -> Result<RunSummary> {
    cfg.resolve_seed()?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::config("out", "an output directory is required (--out)"))?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut r = Runner {
        cfg,
        out,
        outputs: Vec::new(),
        inputs: BTreeMap::new(),
        messages: Vec::new(),
        prepared: None,
        split: None,
        predictions: None,
    };
    match command {
        Command::Qc => r.qc().map(|_| ())?,
        Command::Split => r.split().map(|_| ())?,
        Command::Cv => r.predictions().map(|_| ())?,
        Command::Metrics => r.metrics()?,
        Command::Icc => r.icc()?,
        Command::Curve => r.curve()?,
        Command::Overlap => r.overlap()?,
        Command::ErrorAnalysis => r.error_analysis()?,
        Command::PropCi => r.prop_ci()?,
        Command::Synth => r.synth()?,
        Command::All => r.all()?,
    }
    r.manifest(command)?;
    Ok(RunSummary {
        out: r.out,
        outputs: r.outputs,
        messages: r.messages,
    })
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digest of a directory tree: hash of sorted `relative-path  file-digest` lines.
fn sha256_dir(dir: &Path) -> Result<String> {
    fn walk(base: &Path, dir: &Path, lines: &mut Vec<String>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(base, &p, lines)?;
            } else {
                let rel = p.strip_prefix(base).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                lines.push(format!("{rel}  {}", sha256_file(&p)?));
            }
        }
        Ok(())
    }
    let mut lines = Vec::new();
    walk(dir, dir, &mut lines)?;
    Ok(hex::encode(Sha256::digest(lines.join("\n").as_bytes())))
}

impl Runner {
    fn seed(&self) -> Result<u64> {
        self.cfg.seed.ok_or_else(|| {
            Error::config("seed", format!("a seed is required (--seed, config, or {SEED_ENV})"))
        })
    }

    fn input(&mut self, field: &str) -> Result<PathBuf> {
        let path = match field {
            "ratings" => &self.cfg.ratings,
            "categories" => &self.cfg.categories,
            "features" => &self.cfg.features,
            "heatmaps" => &self.cfg.heatmaps,
            "masks" => &self.cfg.masks,
            "predictions" => &self.cfg.predictions,
            "points" => &self.cfg.points,
            _ => unreachable!("unknown input field {field}"),
        }
        .clone()
        .ok_or_else(|| Error::config(field, "path is required"))?;
        if !path.exists() {
            return Err(Error::config(field, format!("{} does not exist", path.display())));
        }
        if !self.inputs.contains_key(field) {
            let sha256 = if path.is_dir() { sha256_dir(&path)? } else { sha256_file(&path)? };
            self.inputs.insert(
                field.to_string(),
                InputDigest {
                    path: display_path(&path, &self.out),
                    sha256,
                },
            );
        }
        Ok(path)
    }

    fn path(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.out.join(name)
    }

    fn qc(&mut self) -> Result<&(QcReport, RatingsTable)> {
        if self.prepared.is_none() {
            let path = self.input("ratings")?;
            let raw = data::load_ratings(&path)?;
            let filtered = data::first_trial_filter(&raw);
            let (report, kept) = qc::run_qc(&filtered)?;

            write_csv(
                &self.path("qc_report.csv"),
                &["participant", "n_ratings", "rho", "mad_score", "corr_flag", "mad_flag", "excluded"],
                report.participants.iter().map(|p| {
                    [
                        p.participant_id.clone(),
                        p.n_ratings.to_string(),
                        fmt_opt(p.rho),
                        fmt_f64(p.mad_score),
                        p.corr_flag.to_string(),
                        p.mad_flag.to_string(),
                        p.excluded.to_string(),
                    ]
                }),
            )?;
            #[derive(Serialize)]
            struct Summary<'a> {
                input_records: usize,
                first_trial_records: usize,
                repeat_records_removed: usize,
                correlation_fence: &'a qc::Fence,
                mad_fence: &'a qc::Fence,
                excluded: &'a std::collections::BTreeSet<String>,
                participants_before: usize,
                participants_after: usize,
                ratings_before: usize,
                ratings_removed: usize,
                ratings_after: usize,
                images_after: usize,
                image_means: Option<stats::Summary>,
            }
            write_json(
                &self.path("qc_summary.json"),
                &Summary {
                    input_records: raw.len(),
                    first_trial_records: filtered.len(),
                    repeat_records_removed: raw.len() - filtered.len(),
                    correlation_fence: &report.correlation_fence,
                    mad_fence: &report.mad_fence,
                    excluded: &report.excluded,
                    participants_before: report.participants_before,
                    participants_after: report.participants_after,
                    ratings_before: report.ratings_before,
                    ratings_removed: report.ratings_removed,
                    ratings_after: report.ratings_after,
                    images_after: report.images_after,
                    image_means: report.image_means,
                },
            )?;
            let out = self.path("ratings_qc.csv");
            let file = std::fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
            data::write_ratings(&kept, std::io::BufWriter::new(file))?;
            self.messages.push(format!(
                "qc: excluded {} of {} participants ({} ratings)",
                report.excluded.len(),
                report.participants_before,
                report.ratings_removed
            ));
            self.prepared = Some((report, kept));
        }
        Ok(self.prepared.as_ref().expect("set above"))
    }

    fn split(&mut self) -> Result<&SplitState> {
        if self.split.is_none() {
            let seed = self.seed()?;
            let options = self.cfg.plan.unwrap_or_default();
            let kept = self.qc()?.1.clone();
            let ids: Vec<&str> = kept.participants().into_iter().collect();
            let split = partition::split_participants(&ids, seed)?;
            let (targets, dropped) = partition::image_group_means(&kept, &split);
            let images: Vec<&String> = targets.keys().collect();
            let plan = partition::make_cv_plan_with(&images, seed, options)?;
            let audit = partition::leakage_audit(&plan, &split, &targets);

            write_json(&self.path("participant_split.json"), &split)?;
            write_csv(
                &self.path("image_targets.csv"),
                &["image_id", "mean_a", "mean_b", "n_a", "n_b"],
                targets.iter().map(|(id, t)| {
                    [id.clone(), fmt_f64(t.mean_a), fmt_f64(t.mean_b), t.n_a.to_string(), t.n_b.to_string()]
                }),
            )?;
            write_csv(
                &self.path("dropped_images.csv"),
                &["image_id", "reason"],
                dropped.iter().map(|d| [d.image_id.clone(), d.reason.clone()]),
            )?;
            write_json(&self.path("cv_plan.json"), &plan)?;
            write_json(&self.path("leakage_audit.json"), &audit)?;
            if !dropped.is_empty() {
                self.messages
                    .push(format!("split: {} image(s) dropped for lack of a group mean", dropped.len()));
            }
            audit.into_result()?;
            self.split = Some(SplitState { targets, plan });
        }
        Ok(self.split.as_ref().expect("set above"))
    }

    fn predictions(&mut self) -> Result<&PredictionSet> {
        if self.predictions.is_none() {
            let ps = if self.cfg.predictions.is_some() {
                let path = self.input("predictions")?;
                PredictionSet::load_csv(&path)?
            } else {
                let seed = self.seed()?;
                let features_path = self.input("features")?;
                let features: FeatureTable = data::load_features(&features_path)?;
                let spec = self.cfg.predictor.clone().unwrap_or_else(PredictorSpec::ridge_default);
                let trials = self.cfg.trials.unwrap_or(DEFAULT_TRIALS);
                let st = self.split()?;
                let out = harness::run_nested_cv(&st.plan, &st.targets, &features, &spec, trials, seed)?;
                out.predictions.write_csv(&self.path("predictions.csv"))?;
                write_jsonl(&self.path("search_log.jsonl"), &out.search_log)?;
                write_json(&self.path("fold_fits.json"), &out.fold_fits)?;
                out.predictions
            };
            self.predictions = Some(ps);
        }
        Ok(self.predictions.as_ref().expect("set above"))
    }

    fn targets(&mut self) -> Result<ImageTargets> {
        Ok(self.split()?.targets.clone())
    }

    fn metrics(&mut self) -> Result<()> {
        let targets = self.targets()?;
        let ps = self.predictions()?.clone();
        let report = metrics::metric_report(&ps, &targets)?;
        metrics::write_metrics_csv(&self.path("metrics.csv"), &report)?;
        metrics::write_repetition_csv(&self.path("metrics_by_repetition.csv"), &report)?;
        write_json(&self.path("metrics.json"), &report)?;
        self.messages.push(format!(
            "metrics: R² {:.3} (ensemble {:.3}), MAE {:.3}",
            report.repetitions.mean.r2, report.ensemble.r2, report.repetitions.mean.mae
        ));
        Ok(())
    }

    fn icc(&mut self) -> Result<()> {
        let seed = self.seed()?;
        let mode = self.cfg.icc_missing.unwrap_or_default();
        let sizes = self
            .cfg
            .icc_sizes
            .clone()
            .unwrap_or_else(|| reliability::DEFAULT_SIZES.to_vec());
        let reps = self.cfg.icc_reps.unwrap_or(reliability::DEFAULT_BOOT_REPS);
        let kept = self.qc()?.1.clone();
        let matrix = RatingMatrix::from_table(&kept)?;
        if let Some(&s) = sizes.iter().find(|&&s| s > matrix.n_raters()) {
            return Err(Error::config(
                "icc_sizes",
                format!("size {s} exceeds the {} available raters", matrix.n_raters()),
            ));
        }
        let full = reliability::icc2k(&matrix, mode)?;
        let report = reliability::bootstrap_icc(&matrix, &sizes, reps, seed, mode)?;
        reliability::write_icc_csvs(&self.out, &report)?;
        self.path("icc_report.csv");
        self.path("icc_summary.csv");
        #[derive(Serialize)]
        struct IccJson<'a> {
            icc_all_raters: f64,
            n_images: usize,
            n_raters: usize,
            missing_mode: MissingMode,
            monotone: bool,
            warnings: &'a [String],
        }
        write_json(
            &self.path("icc.json"),
            &IccJson {
                icc_all_raters: full,
                n_images: matrix.n_images(),
                n_raters: matrix.n_raters(),
                missing_mode: mode,
                monotone: report.monotone,
                warnings: &report.warnings,
            },
        )?;
        write_text(&self.path("icc_boxplot.svg"), &svg::icc_boxplot(&report))?;
        self.messages.extend(report.warnings.iter().map(|w| format!("icc warning: {w}")));
        Ok(())
    }

    fn curve(&mut self) -> Result<()> {
        let path = self.input("points")?;
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let series = curvefit::parse_points(file)?;
        if series.is_empty() {
            return Err(Error::config("points", "no points in file"));
        }
        let mut rows = Vec::new();
        for ((model, metric), pts) in series {
            let form = self.cfg.curve_form.unwrap_or_else(|| form_for_metric(&metric));
            let fit = curvefit::fit_curve(form, &pts)?;
            let label = [model.as_str(), metric.as_str()]
                .iter()
                .filter(|s| !s.is_empty())
                .copied()
                .collect::<Vec<_>>()
                .join("_");
            let name = if label.is_empty() {
                "learning_curve.svg".to_string()
            } else {
                format!("learning_curve_{}.svg", sanitize(&label))
            };
            let title = if label.is_empty() { form.name().to_string() } else { label.replace('_', " ") };
            write_text(&self.path(&name), &svg::learning_curve(&title, &pts, &fit))?;
            rows.push(CurveRow { model, metric, fit });
        }
        curvefit::write_learning_curve_csv(&self.path("learning_curve.csv"), &rows)
    }

    fn observed_fear(&mut self) -> Result<Option<BTreeMap<String, f64>>> {
        if self.cfg.ratings.is_none() {
            return Ok(None);
        }
        let kept = &self.qc()?.1;
        Ok(Some(
            kept.by_image()
                .into_iter()
                .map(|(id, v)| (id.to_string(), stats::mean(&v)))
                .collect(),
        ))
    }

    fn overlap(&mut self) -> Result<()> {
        let heat_dir = self.input("heatmaps")?;
        let mask_dir = self.input("masks")?;
        let mut rep_dirs: Vec<PathBuf> = std::fs::read_dir(&heat_dir)
            .map_err(|e| Error::io(&heat_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        rep_dirs.sort();
        if rep_dirs.is_empty() {
            rep_dirs.push(heat_dir.clone());
        }
        let dirs: Vec<&Path> = rep_dirs.iter().map(PathBuf::as_path).collect();
        let records: Vec<OverlapRecord> = attribution::overlap_from_dirs(&dirs, &mask_dir)?;
        if records.is_empty() {
            return Err(Error::config("heatmaps", "no heatmap matches a mask"));
        }
        attribution::write_overlap_csv(&self.path("overlap.csv"), &records)?;
        let test = attribution::records_t_test(&records)?;
        write_json(&self.path("ttest.json"), &test)?;

        let fear = self.observed_fear()?;
        let min_fear = self.cfg.min_fear.unwrap_or(40.0);
        let examples = match &fear {
            Some(f) => attribution::representative_examples(&records, Some((f, min_fear)))
                .or_else(|_| attribution::representative_examples(&records, None))?,
            None => attribution::representative_examples(&records, None)?,
        };
        #[derive(Serialize)]
        struct Examples<'a> {
            #[serde(flatten)]
            examples: &'a attribution::RepresentativeExamples,
            fear_filter: Option<f64>,
        }
        write_json(
            &self.path("representative_examples.json"),
            &Examples {
                examples: &examples,
                fear_filter: fear.as_ref().map(|_| min_fear),
            },
        )?;
        if let Some(f) = &fear {
            write_csv(
                &self.path("delta_fear.csv"),
                &["image_id", "delta", "fear"],
                records
                    .iter()
                    .filter_map(|r| f.get(&r.image_id).map(|v| [r.image_id.clone(), fmt_f64(r.delta), fmt_f64(*v)])),
            )?;
            match attribution::delta_fear_correlation(&records, f) {
                Ok(c) => write_json(&self.path("delta_fear_correlation.json"), &c)?,
                Err(e) => self.messages.push(format!("overlap: delta/fear correlation skipped: {e}")),
            }
        }
        self.messages.push(format!(
            "overlap: n={} d={:.3} one-sided p={:.3e}",
            test.n, test.cohen_d, test.one_sided_p
        ));
        Ok(())
    }

    fn error_analysis(&mut self) -> Result<()> {
        let seed = self.seed()?;
        let cats_path = self.input("categories")?;
        let cats: CategoryTable = data::load_categories(&cats_path)?;
        cats.validate()?;
        let targets = self.targets()?;
        let ps = self.predictions()?.clone();
        let errors = error_analysis::image_errors(&ps, &targets)?;
        let mut opts = AnalysisOptions::default();
        if let Some(t) = self.cfg.tie_correction {
            opts.tie_correction = t;
        }
        if let Some(b) = self.cfg.bootstrap {
            if b < 100 {
                return Err(Error::config("bootstrap", format!("needs at least 100 resamples, got {b}")));
            }
            opts.bootstrap = b;
        }
        let analysis = error_analysis::analyze(&errors, &cats, &opts, seed)?;
        error_analysis::write_outputs(&self.out, &analysis)?;
        for name in ["descriptives.csv", "omnibus.csv", "posthoc.csv", "top_criteria.json"] {
            self.path(name);
        }
        write_csv(
            &self.path("image_errors.csv"),
            &["image_id", "abs_error"],
            errors.iter().map(|e| [e.image_id.clone(), fmt_f64(e.abs_error)]),
        )?;
        for criterion in &analysis.top_criteria {
            let rows: Vec<_> = analysis
                .descriptives
                .iter()
                .filter(|d| &d.criterion == criterion)
                .collect();
            let name = format!("share_vs_frequency_{}.svg", sanitize(criterion));
            write_text(&self.path(&name), &svg::share_vs_frequency(criterion, &rows))?;
        }
        Ok(())
    }

    fn prop_ci(&mut self) -> Result<()> {
        let successes = self.cfg.successes.ok_or_else(|| Error::config("successes", "required"))?;
        let n = self.cfg.n.ok_or_else(|| Error::config("n", "required"))?;
        let level = self.cfg.level.unwrap_or(0.95);
        let ci = reliability::wilson_ci(successes, n, level)
            .map_err(|e| Error::config("n", e.to_string()))?;
        write_json(&self.path("prop_ci.json"), &ci)?;
        self.messages.push(format!(
            "{}/{} = {:.3} ({:.3}, {:.3})",
            successes, n, ci.estimate, ci.low, ci.high
        ));
        Ok(())
    }

    fn synth(&mut self) -> Result<()> {
        let mut spec = self.cfg.synth.clone().unwrap_or_default();
        spec.seed = self.seed()?;
        let data = synth::generate(&spec)?;
        synth::write_synth(&self.out, &data)?;
        let mut names = vec!["ratings.csv", "features.csv", "ground_truth.json"];
        if data.categories.is_some() {
            names.push("categories.csv");
        }
        if !data.heatmaps.is_empty() {
            names.extend(["heatmaps", "masks"]);
        }
        for n in names {
            self.path(n);
        }
        Ok(())
    }

    /// Every pipeline whose inputs are available. Without a ratings file but
    /// with a `synth` spec, synthetic inputs are generated under `synth/`.
    fn all(&mut self) -> Result<()> {
        if self.cfg.ratings.is_none() && self.cfg.synth.is_some() {
            let mut spec = self.cfg.synth.clone().unwrap_or_default();
            spec.seed = self.seed()?;
            let dir = self.out.join("synth");
            let data = synth::generate(&spec)?;
            synth::write_synth(&dir, &data)?;
            self.path("synth");
            self.cfg.ratings = Some(dir.join("ratings.csv"));
            self.cfg.features = Some(dir.join("features.csv"));
            if data.categories.is_some() {
                self.cfg.categories = Some(dir.join("categories.csv"));
            }
            if !data.heatmaps.is_empty() {
                self.cfg.heatmaps = Some(dir.join("heatmaps"));
                self.cfg.masks = Some(dir.join("masks"));
            }
        }
        self.qc()?;
        self.split()?;
        if self.cfg.features.is_some() || self.cfg.predictions.is_some() {
            self.metrics()?;
            if self.cfg.categories.is_some() {
                self.error_analysis()?;
            }
        }
        self.icc()?;
        if self.cfg.heatmaps.is_some() && self.cfg.masks.is_some() {
            self.overlap()?;
        }
        if self.cfg.points.is_some() {
            self.curve()?;
        }
        if self.cfg.successes.is_some() && self.cfg.n.is_some() {
            self.prop_ci()?;
        }
        Ok(())
    }

    fn manifest(&mut self, command: Command) -> Result<()> {
        let mut settings = BTreeMap::new();
        settings.insert("rng", "chacha8 streams keyed by splitmix64(seed, purpose, indices)".to_string());
        settings.insert("search_nesting", "per_outer_training_set".to_string());
        settings.insert("quartiles", "linear interpolation (type 7)".to_string());
        settings.insert("dunn_sides", "two_sided".to_string());
        settings.insert("tie_correction", self.cfg.tie_correction.unwrap_or(true).to_string());
        settings.insert(
            "icc_missing",
            match self.cfg.icc_missing.unwrap_or_default() {
                MissingMode::Impute => "impute",
                MissingMode::CompleteCase => "complete_case",
            }
            .to_string(),
        );
        let mut config = self.cfg.clone();
        for p in [
            &mut config.ratings,
            &mut config.categories,
            &mut config.features,
            &mut config.heatmaps,
            &mut config.masks,
            &mut config.predictions,
            &mut config.points,
        ]
        .into_iter()
        .flatten()
        {
            *p = PathBuf::from(display_path(p, &self.out));
        }
        let manifest = Manifest {
            tool: "spidereval",
            version: env!("CARGO_PKG_VERSION"),
            command: command.name(),
            seed: self.cfg.seed,
            config: &config,
            settings,
            inputs: &self.inputs,
            outputs: self.outputs.clone(),
        };
        write_json(&self.out.join("run_manifest.json"), &manifest)
    }
}

/// Paths inside the output directory are recorded relative to it, so that a
/// run's manifest does not depend on where its outputs were written.
fn display_path(path: &Path, out: &Path) -> String {
    match path.strip_prefix(out) {
        Ok(rel) => format!("$OUT/{}", rel.to_string_lossy().replace('\\', "/")),
        Err(_) => path.to_string_lossy().into_owned(),
    }
}

/// `rise` for goodness-of-fit metrics (R²), `decay` for error metrics.
pub fn form_for_metric(metric: &str) -> CurveForm {
    let m = metric.to_ascii_lowercase();
    if m.starts_with("r2") || m.starts_with("r²") || m.contains("r^2") {
        CurveForm::Rise
    } else {
        CurveForm::Decay
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

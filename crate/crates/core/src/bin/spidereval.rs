use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spidereval::curvefit::CurveForm;
use spidereval::pipeline::{self, Command, RunConfig};
use spidereval::reliability::MissingMode;
use spidereval::Error;

#[derive(Parser)]
#[command(name = "spidereval", version, about = "Evaluation toolkit for image-level fear ratings")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (falls back to SPIDEREVAL_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Default)]
struct Inputs {
    #[arg(long)]
    ratings: Option<PathBuf>,
    #[arg(long)]
    categories: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    heatmaps: Option<PathBuf>,
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long)]
    points: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Rater quality control.
    Qc(Inputs),
    /// Participant split, image targets and the CV plan.
    Split(Inputs),
    /// Nested cross-validation predictions.
    Cv {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Test-set metrics and the ensemble.
    Metrics {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// ICC(2,k) subsampling.
    Icc {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, value_parser = parse_missing)]
        missing: Option<MissingMode>,
    },
    /// Learning-curve fits.
    Curve {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_parser = parse_form)]
        form: Option<CurveForm>,
    },
    /// Attribution overlap with spider masks.
    Overlap {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        min_fear: Option<f64>,
    },
    /// Error analysis across image categories.
    ErrorAnalysis {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        bootstrap: Option<usize>,
        #[arg(long)]
        no_tie_correction: bool,
    },
    /// Wilson interval for a proportion.
    PropCi {
        #[arg(long)]
        successes: u64,
        #[arg(long)]
        n: u64,
        #[arg(long)]
        level: Option<f64>,
    },
    /// Synthetic dataset generation.
    Synth {
        #[arg(long)]
        n_images: Option<usize>,
        #[arg(long)]
        n_raters: Option<usize>,
        #[arg(long)]
        heatmap_images: Option<usize>,
    },
    /// Every pipeline whose inputs are available.
    All {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        trials: Option<usize>,
    },
}

fn parse_missing(s: &str) -> Result<MissingMode, String> {
    match s {
        "impute" => Ok(MissingMode::Impute),
        "complete_case" | "complete-case" => Ok(MissingMode::CompleteCase),
        _ => Err(format!("expected impute or complete_case, got {s:?}")),
    }
}

fn parse_form(s: &str) -> Result<CurveForm, String> {
    CurveForm::parse(s).map_err(|e| e.to_string())
}

fn apply_inputs(cfg: &mut RunConfig, i: Inputs) {
    cfg.ratings = i.ratings;
    cfg.categories = i.categories;
    cfg.features = i.features;
    cfg.predictions = i.predictions;
    cfg.heatmaps = i.heatmaps;
    cfg.masks = i.masks;
    cfg.points = i.points;
}

fn build(cli: Cli) -> spidereval::Result<(Command, RunConfig, Option<usize>)> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut o = RunConfig {
        out: cli.out,
        seed: cli.seed,
        ..RunConfig::default()
    };
    let command = match cli.command {
        Cmd::Qc(i) => {
            apply_inputs(&mut o, i);
            Command::Qc
        }
        Cmd::Split(i) => {
            apply_inputs(&mut o, i);
            Command::Split
        }
        Cmd::Cv { inputs, trials } => {
            apply_inputs(&mut o, inputs);
            o.trials = trials;
            Command::Cv
        }
        Cmd::Metrics { inputs, trials } => {
            apply_inputs(&mut o, inputs);
            o.trials = trials;
            Command::Metrics
        }
        Cmd::Icc { inputs, sizes, reps, missing } => {
            apply_inputs(&mut o, inputs);
            o.icc_sizes = sizes;
            o.icc_reps = reps;
            o.icc_missing = missing;
            Command::Icc
        }
        Cmd::Curve { inputs, form } => {
            apply_inputs(&mut o, inputs);
            o.curve_form = form;
            Command::Curve
        }
        Cmd::Overlap { inputs, min_fear } => {
            apply_inputs(&mut o, inputs);
            o.min_fear = min_fear;
            Command::Overlap
        }
        Cmd::ErrorAnalysis { inputs, trials, bootstrap, no_tie_correction } => {
            apply_inputs(&mut o, inputs);
            o.trials = trials;
            o.bootstrap = bootstrap;
            o.tie_correction = no_tie_correction.then_some(false);
            Command::ErrorAnalysis
        }
        Cmd::PropCi { successes, n, level } => {
            o.successes = Some(successes);
            o.n = Some(n);
            o.level = level;
            Command::PropCi
        }
        Cmd::Synth { n_images, n_raters, heatmap_images } => {
            let mut spec = base.synth.clone().unwrap_or_default();
            if let Some(v) = n_images {
                spec.n_images = v;
            }
            if let Some(v) = n_raters {
                spec.n_raters = v;
            }
            if let Some(v) = heatmap_images {
                spec.heatmap_images = v;
            }
            o.synth = Some(spec);
            Command::Synth
        }
        Cmd::All { inputs, trials } => {
            apply_inputs(&mut o, inputs);
            o.trials = trials;
            Command::All
        }
    };
    if cli.threads == Some(0) {
        return Err(Error::config("threads", "must be at least 1"));
    }
    Ok((command, base.merge(o), cli.threads))
}

fn fail(e: &Error) -> ExitCode {
    let body = serde_json::json!({
        "error": e.kind(),
        "field": e.field(),
        "message": e.to_string(),
    });
    eprintln!("{body}");
    ExitCode::from(if e.is_validation() { 1 } else { 2 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, cfg, threads) = match build(cli) {
        Ok(v) => v,
        Err(e) => return fail(&e),
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => return fail(&Error::config("threads", e.to_string())),
    };
    match pool.install(|| pipeline::run(command, cfg)) {
        Ok(summary) => {
            for m in &summary.messages {
                println!("{m}");
            }
            println!("wrote {} output(s) to {}", summary.outputs.len() + 1, summary.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

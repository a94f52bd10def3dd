use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use annoreg::split::SplitParams;
use annoreg::tissue::LabelColumn;
use annoreg_cli::{CliError, CliResult, ThresholdMode};

#[derive(Parser)]
#[command(name = "annoreg", version, about = "Annotation transfer, tile labeling and slide-level evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<annoreg::config::RunConfig> {
        annoreg_cli::load_config(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Warp an annotation file through a deformation field
    Warp {
        annotations: PathBuf,
        field: PathBuf,
        #[arg(long)]
        target_slide_id: String,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Clean, tile and label every case of a case manifest
    Pipeline {
        cases: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
        /// Cases processed concurrently (default: all cores)
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Per-slide metrics and cohort aggregate for tile predictions
    Evaluate {
        manifest: PathBuf,
        predictions: PathBuf,
        /// Fixed decision threshold
        #[arg(long, conflicts_with = "calibrate")]
        threshold: Option<f64>,
        /// Tuning manifest and predictions for a Youden threshold
        #[arg(long, num_args = 2, value_names = ["TUNE_MANIFEST", "TUNE_PREDICTIONS"])]
        calibrate: Option<Vec<PathBuf>>,
        /// Label column used as ground truth: ihc or registered
        #[arg(long, default_value = "ihc")]
        ground_truth: String,
        /// Directory with `<slide_id>_<column>.png` ground-truth masks
        #[arg(long)]
        gt_masks: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Paired Wilcoxon tests between two per-slide metric reports
    Compare {
        metrics_a: PathBuf,
        metrics_b: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Stratified development/test split with cross-validation folds
    Split {
        cases: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 54)]
        test_count: usize,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0.15)]
        tune_fraction: f64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Synthetic cohorts and predictions
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Agreement overlay of two masks
    Overlay {
        mask_a: PathBuf,
        mask_b: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Generate a cohort from a JSON spec
    Cohort {
        spec: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Generate base-model scores for a manifest
    Predictions {
        manifest: PathBuf,
        #[arg(long, default_value = "ihc")]
        ground_truth: String,
        #[arg(long, default_value_t = 0.974)]
        auroc: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        models: usize,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn column(s: &str) -> CliResult<LabelColumn> {
    s.parse().map_err(|e: annoreg::Error| CliError::Input(e.to_string()))
}

fn run(cli: Cli) -> CliResult<u8> {
    match cli.command {
        Command::Warp { annotations, field, target_slide_id, out } => {
            annoreg_cli::warp(&annotations, &field, &target_slide_id, &out)?;
        }
        Command::Pipeline { cases, config, out, jobs } => {
            let summary = annoreg_cli::pipeline(&cases, &config.load()?, &out, jobs)?;
            for (case, msg) in &summary.failed {
                eprintln!("case {case} failed: {msg}");
            }
            eprintln!(
                "{} cases ok, {} failed, {} tiles",
                summary.succeeded.len(),
                summary.failed.len(),
                summary.total_tiles
            );
            return Ok(summary.exit_code());
        }
        Command::Evaluate { manifest, predictions, threshold, calibrate, ground_truth, gt_masks, config, out } => {
            let mode = match (threshold, calibrate) {
                (Some(t), None) => ThresholdMode::Fixed(t),
                (None, Some(p)) => ThresholdMode::Calibrate { manifest: p[0].clone(), predictions: p[1].clone() },
                _ => return Err(CliError::Input("give either --threshold or --calibrate".into())),
            };
            let s = annoreg_cli::evaluate(
                &manifest,
                &predictions,
                &mode,
                column(&ground_truth)?,
                &config.load()?,
                gt_masks.as_deref(),
                &out,
            )?;
            eprintln!("{} slides evaluated at threshold {}", s.slides.len(), s.threshold);
        }
        Command::Compare { metrics_a, metrics_b, out } => {
            annoreg_cli::compare(&metrics_a, &metrics_b, &out)?;
        }
        Command::Split { cases, seed, test_count, folds, tune_fraction, out } => {
            let params = SplitParams { test_count, n_folds: folds, tune_fraction };
            annoreg_cli::split(&cases, &params, seed, &out)?;
        }
        Command::Synth(SynthCommand::Cohort { spec, out }) => {
            let s = annoreg_cli::synth_cohort(&spec, &out)?;
            eprintln!("{} cases written", s.case_ids.len());
        }
        Command::Synth(SynthCommand::Predictions { manifest, ground_truth, auroc, seed, models, config, out }) => {
            let achieved = annoreg_cli::synth_predictions(
                &manifest,
                column(&ground_truth)?,
                auroc,
                seed,
                models,
                &config.load()?,
                &out,
            )?;
            eprintln!("pooled AUROC {achieved:.4}");
        }
        Command::Overlay { mask_a, mask_b, out } => {
            annoreg_cli::overlay(&mask_a, &mask_b, &out)?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

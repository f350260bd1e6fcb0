//! Command-line front end. Every subcommand is a thin composition of
//! library operations: this crate only parses arguments, resolves configs,
//! and echoes the paths of whatever the library wrote.

mod plot;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use ecgtwin_core::config::Config;
use ecgtwin_core::data::corpus::{build_corpus, load_manifest, CorpusManifest, MANIFEST_FILE};
use ecgtwin_core::data::preprocess::preprocess_record;
use ecgtwin_core::data::record::EcgRecord;
use ecgtwin_core::eval::{full_report, membership_sweep, ReportOptions};
use ecgtwin_core::model::generator::synthesize_twin;
use ecgtwin_core::text::make_backend;
use ecgtwin_core::trainer::ablation::{ablation_run, threshold_sweep, AblationVariant};
use ecgtwin_core::trainer::{load_checkpoint, train, Checkpoint};
use ecgtwin_core::{Error, Result};

/// Environment override for the config seed, honored by every subcommand.
pub const SEED_ENV: &str = "LAVQ_SEED";

#[derive(Parser)]
#[command(
    name = "ecgtwin",
    version,
    about = "Personalized ECG digital twins: corpus generation, training, editing, and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file, flat key=value lines with '#' comments.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, KEY=VALUE; repeatable, applied after the file
    /// (last one wins).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path, &self.set)?,
            None => Config::from_overrides(&self.set)?,
        };
        apply_env_seed(&mut cfg)?;
        Ok(cfg)
    }
}

/// The env seed wins over both file and flag values, wherever the config
/// came from.
fn apply_env_seed(cfg: &mut Config) -> Result<()> {
    if let Ok(value) = std::env::var(SEED_ENV) {
        cfg.seed = value.trim().parse().map_err(|_| {
            Error::validation(format!("{SEED_ENV} must be an unsigned integer, got '{value}'"))
        })?;
    }
    Ok(())
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic corpus (records plus manifest) under --out.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample and normalize one record file.
    Preprocess {
        /// Input record (.ecgt).
        #[arg(long)]
        input: PathBuf,
        /// Output record (.ecgt).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a corpus; checkpoints and loss CSVs land under --out.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus manifest (manifest.jsonl).
        #[arg(long)]
        manifest: PathBuf,
        /// Run directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one digital twin from a pre-diagnosis and a reference record.
    Twin {
        /// Trained checkpoint (.lvqc); its embedded config drives synthesis.
        #[arg(long)]
        ckpt: PathBuf,
        /// Pre-diagnosis record to edit.
        #[arg(long)]
        pre: PathBuf,
        /// Diseased reference record to take the disease features from.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Output record (.ecgt).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained model end to end; writes a JSON metric report.
    Eval {
        /// Trained checkpoint (.lvqc).
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus manifest (manifest.jsonl).
        #[arg(long)]
        manifest: PathBuf,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Epochs for the twin detector.
        #[arg(long, default_value_t = 30)]
        detector_epochs: usize,
        /// Epochs for the feature extractor.
        #[arg(long, default_value_t = 40)]
        extractor_epochs: usize,
        /// Twins per training-split normal in the synthetic release.
        #[arg(long, default_value_t = 2)]
        twins_per_normal: usize,
        /// Neighborhood size for precision/recall.
        #[arg(long, default_value_t = 3)]
        knn_k: usize,
    },
    /// Membership-inference risk sweep over a threshold grid; writes JSON.
    Privacy {
        /// Trained checkpoint (.lvqc).
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus manifest (manifest.jsonl).
        #[arg(long)]
        manifest: PathBuf,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Largest threshold multiplier in the grid.
        #[arg(long, default_value_t = 3.0)]
        tau_max: f64,
        /// Number of grid points from 0 to --tau-max inclusive.
        #[arg(long, default_value_t = 31)]
        tau_steps: usize,
        /// Epochs for the feature extractor.
        #[arg(long, default_value_t = 40)]
        extractor_epochs: usize,
        /// Twins per training-split normal in the synthetic release.
        #[arg(long, default_value_t = 2)]
        twins_per_normal: usize,
    },
    /// Train one model per mask threshold and tabulate the results.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus manifest (manifest.jsonl).
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for the per-threshold runs and sweep.csv.
        #[arg(long)]
        out: PathBuf,
        /// Mask thresholds in [0, 1], comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
        thresholds: Vec<f64>,
        /// Epochs for the twin detector scoring each run.
        #[arg(long, default_value_t = 30)]
        detector_epochs: usize,
    },
    /// Train one model per loss ablation and tabulate the results.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus manifest (manifest.jsonl).
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for the per-variant runs and ablation.csv.
        #[arg(long)]
        out: PathBuf,
        /// Variant names, comma separated; defaults to the full table.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Epochs for the twin detector scoring each run.
        #[arg(long, default_value_t = 30)]
        detector_epochs: usize,
    },
    /// Render a record's leads as a standalone SVG plus a samples CSV.
    Plot {
        /// Input record (.ecgt).
        #[arg(long)]
        input: PathBuf,
        /// Output SVG path; the CSV lands next to it.
        #[arg(long)]
        out: PathBuf,
        /// Lead names to draw, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "I,aVR,V3")]
        leads: Vec<String>,
    },
}

/// Parses and runs; returns the process exit code. 0 success, 1 bad input,
/// 2 runtime failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn load_run_inputs(ckpt: &Path, manifest: &Path) -> Result<(Checkpoint, CorpusManifest)> {
    let mut ck = load_checkpoint(ckpt)?;
    apply_env_seed(&mut ck.config)?;
    let manifest = load_manifest(manifest)?;
    Ok((ck, manifest))
}

fn echo(path: &Path) {
    println!("{}", path.display());
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => {
            let cfg = config.resolve()?;
            build_corpus(&cfg, &out)?;
            echo(&out.join("records"));
            echo(&out.join(MANIFEST_FILE));
        }
        Command::Preprocess { input, out } => {
            let raw = EcgRecord::load(&input)?;
            let rec = preprocess_record(&raw)?;
            rec.save(&out)?;
            echo(&out);
        }
        Command::Train { config, manifest, out } => {
            let cfg = config.resolve()?;
            let manifest = load_manifest(&manifest)?;
            let report = train(&cfg, &manifest, &out)?;
            echo(&report.checkpoint_path);
            echo(&out.join("loss.csv"));
            echo(&out.join("val_loss.csv"));
        }
        Command::Twin { ckpt, pre, reference, out } => {
            let mut ck = load_checkpoint(&ckpt)?;
            apply_env_seed(&mut ck.config)?;
            let backend = make_backend(&ck.config)?;
            let pre = EcgRecord::load(&pre)?;
            let reference = EcgRecord::load(&reference)?;
            let twin = synthesize_twin(&ck.store, &ck.config, backend.as_ref(), &pre, &reference)?;
            twin.save(&out)?;
            echo(&out);
        }
        Command::Eval {
            ckpt,
            manifest,
            out,
            detector_epochs,
            extractor_epochs,
            twins_per_normal,
            knn_k,
        } => {
            let (ck, manifest) = load_run_inputs(&ckpt, &manifest)?;
            let opts = ReportOptions {
                detector_epochs,
                extractor_epochs,
                twins_per_normal,
                knn_k,
                ..ReportOptions::default()
            };
            let report = full_report(&ck.config, &ck.store, &manifest, &opts)?;
            std::fs::write(&out, report.to_json()?)?;
            echo(&out);
        }
        Command::Privacy {
            ckpt,
            manifest,
            out,
            tau_max,
            tau_steps,
            extractor_epochs,
            twins_per_normal,
        } => {
            if tau_steps < 2 || !tau_max.is_finite() || tau_max <= 0.0 {
                return Err(Error::validation(format!(
                    "threshold grid needs tau_max > 0 and at least 2 steps, got {tau_max} x {tau_steps}"
                )));
            }
            let (ck, manifest) = load_run_inputs(&ckpt, &manifest)?;
            let taus: Vec<f64> = (0..tau_steps)
                .map(|i| tau_max * i as f64 / (tau_steps - 1) as f64)
                .collect();
            let sweep = membership_sweep(
                &ck.config,
                &ck.store,
                &manifest,
                extractor_epochs,
                twins_per_normal,
                &taus,
            )?;
            std::fs::write(&out, sweep.to_json()?)?;
            echo(&out);
        }
        Command::Sweep {
            config,
            manifest,
            out,
            thresholds,
            detector_epochs,
        } => {
            let cfg = config.resolve()?;
            let manifest = load_manifest(&manifest)?;
            threshold_sweep(&cfg, &manifest, &thresholds, &out, detector_epochs)?;
            echo(&out.join("sweep.csv"));
        }
        Command::Ablate {
            config,
            manifest,
            out,
            variants,
            detector_epochs,
        } => {
            let cfg = config.resolve()?;
            let manifest = load_manifest(&manifest)?;
            let table = match variants {
                Some(names) => names
                    .iter()
                    .map(|n| AblationVariant::by_name(n))
                    .collect::<Result<Vec<_>>>()?,
                None => AblationVariant::table(),
            };
            ablation_run(&cfg, &manifest, &table, &out, detector_epochs)?;
            echo(&out.join("ablation.csv"));
        }
        Command::Plot { input, out, leads } => {
            let rec = EcgRecord::load(&input)?;
            let (svg_path, csv_path) = plot::plot_leads(&rec, &leads, &out)?;
            echo(&svg_path);
            echo(&csv_path);
        }
    }
    Ok(())
}

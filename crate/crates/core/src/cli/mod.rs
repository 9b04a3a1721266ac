//! Batch command-line surface: ingestion, training, prediction and evaluation.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Result;

pub use commands::{predict_header, PredictRecord};
pub use config::{RunConfig, TrainingConfig};

/// Exit status when some inputs failed but the rest were processed.
pub const EXIT_PARTIAL: i32 = 10;

#[derive(Debug, Parser)]
#[command(
    name = "pvscreen",
    version,
    about = "Solar panel surface-fault screening and severity triage"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply to anything omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the training and forest seeds.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split the dataset, train the classifier, write the model and split manifest.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        /// Split manifest path; defaults to `<out>.split`.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Fit the severity forest on features of labeled training images.
    TrainSeverity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Classifier model used to choose the segmentation rule.
        #[arg(long)]
        model: PathBuf,
        /// Output forest file.
        #[arg(long)]
        out: PathBuf,
        /// Restricts fitting to training images; defaults to `<model>.split` when present.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Classify and grade an image or every image in a directory.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        forest: PathBuf,
        /// Image file or directory.
        input: PathBuf,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score held-out images listed in a split manifest.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        forest: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Split manifest; defaults to `<model>.split`.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Report prefix: writes `<out>.json` and `<out>.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the feature CSV for every dataset image.
    ExtractFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the seeded nine-class synthetic dataset.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        /// Side length in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Print the effective configuration as TOML.
    PrintConfig {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.training.seed = seed;
            cfg.forest.seed = seed;
        }
        Ok(cfg)
    }
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::TrainClassifier {
            common,
            dataset,
            out,
            split,
        } => {
            let split = split.unwrap_or_else(|| with_suffix(&out, "split"));
            commands::train_classifier(&common.resolve()?, &dataset, &out, &split)?;
            Ok(0)
        }
        Command::TrainSeverity {
            common,
            dataset,
            model,
            out,
            split,
        } => {
            let split = split.or_else(|| Some(with_suffix(&model, "split")).filter(|p| p.is_file()));
            commands::train_severity(&common.resolve()?, &dataset, &model, &out, split.as_deref())?;
            Ok(0)
        }
        Command::Predict {
            common,
            model,
            forest,
            input,
            out,
        } => {
            let failures = commands::predict(&common.resolve()?, &model, &forest, &input, out.as_deref())?;
            Ok(if failures > 0 { EXIT_PARTIAL } else { 0 })
        }
        Command::Evaluate {
            common,
            model,
            forest,
            dataset,
            split,
            out,
        } => {
            let split = split.unwrap_or_else(|| with_suffix(&model, "split"));
            commands::evaluate(&common.resolve()?, &model, &forest, &dataset, &split, out.as_deref())?;
            Ok(0)
        }
        Command::ExtractFeatures {
            common,
            dataset,
            model,
            out,
        } => {
            commands::extract_features_cmd(&common.resolve()?, &dataset, &model, &out)?;
            Ok(0)
        }
        Command::MakeSynthetic {
            out,
            seed,
            per_class,
            size,
        } => {
            let cfg = crate::dataset::SyntheticConfig { per_class, size, seed };
            let images = crate::dataset::write_synthetic(&out, &cfg)?;
            println!("wrote {} images to {}", images.len(), out.display());
            Ok(0)
        }
        Command::PrintConfig { common } => {
            print!("{}", common.resolve()?.to_toml());
            Ok(0)
        }
    }
}

fn with_suffix(path: &std::path::Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

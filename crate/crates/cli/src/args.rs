use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use dcmamber::kv::parse_override;

use crate::config::{read_config_file, Entry, Origin, RunConfig};
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "dcmamber", version, about = "Dual-channel multivariate time-series forecaster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by the commands that read a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// key=value config file
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// CSV input
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Dataset name; `synthetic` selects the built-in generator
    #[arg(long, value_name = "NAME")]
    pub dataset: Option<String>,
    #[arg(long, value_name = "N")]
    pub horizon: Option<usize>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Override one config key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Common {
    /// Command-line entries, `--set` first so dedicated flags win.
    pub fn entries(&self) -> Result<Vec<Entry>> {
        let mut out = Vec::new();
        for s in &self.set {
            let e = parse_override(s)?;
            out.push(Entry {
                key: e.key,
                value: e.value,
                origin: Origin::CommandLine,
            });
        }
        let flags = [
            ("data", self.data.as_ref().map(|p| p.display().to_string())),
            ("dataset", self.dataset.clone()),
            ("horizon", self.horizon.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(value) = value {
                out.push(Entry {
                    key: key.to_string(),
                    value,
                    origin: Origin::CommandLine,
                });
            }
        }
        Ok(out)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        self.resolve_over(Vec::new())
    }

    /// Resolves with `base` entries below the config file.
    pub fn resolve_over(&self, mut base: Vec<Entry>) -> Result<RunConfig> {
        if let Some(p) = &self.config {
            base.extend(read_config_file(p)?);
        }
        RunConfig::resolve(&base, &self.entries()?)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, history and metrics
    Train(Common),
    /// Score a checkpoint on one split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// train, val or test
        #[arg(long)]
        split: Option<String>,
    },
    /// Forecast from the last lookback rows of a CSV
    Predict {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        #[arg(long, value_name = "PATH")]
        output: PathBuf,
    },
    /// Compare reverse-mode gradients with finite differences
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Time the scans and the linear attention across lengths
    BenchScan {
        #[arg(long, value_delimiter = ',', default_values_t = [256usize, 512, 1024, 2048])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Also write the table to this file
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Train every ablation variant on shared data and seed
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variant names; all when omitted
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
}

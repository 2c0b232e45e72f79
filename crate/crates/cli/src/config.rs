//! Run configuration: built-in defaults, then the dataset preset, then the
//! config file, then command-line values, each overriding the last.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dcmamber::attention::default_heads;
use dcmamber::kv::{parse_bool, parse_kv, parse_value};
use dcmamber::model::ModelConfig;
use dcmamber::training::{LrSchedule, TrainConfig};

use crate::error::{CliError, Result};
use crate::presets::{preset, Preset};

/// Lookback used by every published run.
pub const DEFAULT_LOOKBACK: usize = 96;
pub const DEFAULT_HORIZON: usize = 96;
/// Dataset name that selects the built-in generator instead of a file.
pub const SYNTHETIC: &str = "synthetic";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Model,
    Train,
    Data,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeySpec {
    pub key: &'static str,
    pub section: Section,
    pub help: &'static str,
}

const fn key(key: &'static str, section: Section, help: &'static str) -> KeySpec {
    KeySpec { key, section, help }
}

/// Every accepted key.
#[rustfmt::skip]
pub const SCHEMA: [KeySpec; 33] = [
    key("lookback", Section::Model, "input window length"),
    key("horizon", Section::Model, "forecast length"),
    key("n_vars", Section::Model, "number of variables; taken from the data when unset"),
    key("d_model", Section::Model, "token width"),
    key("e_layers", Section::Model, "encoder layers per channel"),
    key("d_state", Section::Model, "SSM state size"),
    key("proj_len", Section::Model, "projected key/value length of the linear attention"),
    key("heads", Section::Model, "attention heads; follows d_model when unset"),
    key("d_ff", Section::Model, "feed-forward width; 4 * d_model when unset"),
    key("dropout", Section::Model, "dropout probability"),
    key("expand", Section::Model, "SSM inner expansion factor"),
    key("d_conv", Section::Model, "SSM causal convolution width"),
    key("norm", Section::Model, "dataset | instance"),
    key("variant", Section::Model, "full | no_v_encoder | no_t_encoder | swapped | both_independent | both_mixing"),
    key("share_heads", Section::Model, "one sequence projection for all heads"),
    key("tie_directions", Section::Model, "share parameters between the two scan directions"),
    key("batch_size", Section::Train, "windows per step"),
    key("lr", Section::Train, "Adam learning rate"),
    key("epochs", Section::Train, "maximum epochs"),
    key("patience", Section::Train, "epochs without improvement before stopping; 0 disables"),
    key("seed", Section::Train, "seed for initialization, shuffling, dropout and synthetic data"),
    key("schedule", Section::Train, "constant | halving"),
    key("max_steps", Section::Train, "optimizer step budget, or none"),
    key("raw_loss", Section::Train, "train on de-standardized values"),
    key("dataset", Section::Data, "dataset name; picks the preset and published split"),
    key("data", Section::Data, "CSV path"),
    key("split", Section::Data, "auto, or train,val,test ratios such as 0.7,0.1,0.2"),
    key("eval_split", Section::Data, "train | val | test"),
    key("synth_vars", Section::Data, "variables of the synthetic series"),
    key("synth_len", Section::Data, "rows of the synthetic series"),
    key("synth_noise", Section::Data, "noise sigma of the synthetic series"),
    key("out", Section::Output, "output directory"),
    key("timing", Section::Output, "write wall-clock seconds into history.csv"),
];

pub fn key_spec(key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|k| k.key == key)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitChoice {
    /// The published split of a known dataset, else 0.7/0.1/0.2.
    Auto,
    Ratios(f64, f64, f64),
}

impl FromStr for SplitChoice {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(SplitChoice::Auto);
        }
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| parse_value::<f64>("split", p.trim()))
            .collect::<dcmamber::Result<_>>()?;
        match parts[..] {
            [a, b, c] if [a, b, c].iter().all(|v| *v > 0.0) && (a + b + c - 1.0).abs() < 1e-9 => {
                Ok(SplitChoice::Ratios(a, b, c))
            }
            _ => Err(CliError::usage(format!(
                "split: expected auto or three positive ratios summing to 1, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for SplitChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitChoice::Auto => f.write_str("auto"),
            SplitChoice::Ratios(a, b, c) => write!(f, "{a},{b},{c}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

impl FromStr for EvalSplit {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "val" => Ok(EvalSplit::Val),
            "test" => Ok(EvalSplit::Test),
            _ => Err(CliError::usage(format!("eval_split: expected train, val or test, got {s:?}"))),
        }
    }
}

impl fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalSplit::Train => "train",
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub vars: usize,
    pub len: usize,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: Option<String>,
    pub data: Option<PathBuf>,
    pub split: SplitChoice,
    pub eval_split: EvalSplit,
    pub synth: SynthSettings,
    pub out: PathBuf,
    pub timing: bool,
    /// Preset applied while resolving, if any.
    pub preset: Option<&'static Preset>,
    /// Keys given by the file or the command line.
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::new(DEFAULT_LOOKBACK, DEFAULT_HORIZON, 1),
            train: TrainConfig::default(),
            dataset: None,
            data: None,
            split: SplitChoice::Auto,
            eval_split: EvalSplit::Test,
            synth: SynthSettings {
                vars: 8,
                len: 4000,
                noise: 0.1,
            },
            out: PathBuf::from("runs"),
            timing: false,
            preset: None,
            explicit: BTreeSet::new(),
        }
    }
}

/// Where a config value came from, for error messages.
#[derive(Clone, Debug, PartialEq)]
pub enum Origin {
    Preset,
    File(PathBuf, usize),
    Checkpoint(PathBuf),
    CommandLine,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Preset => f.write_str("preset"),
            Origin::File(p, line) => write!(f, "{}:{line}", p.display()),
            Origin::Checkpoint(p) => write!(f, "{}", p.display()),
            Origin::CommandLine => f.write_str("command line"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub origin: Origin,
}

impl RunConfig {
    /// Applies one entry; unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = key_spec(key).ok_or_else(|| CliError::usage(format!("unknown config key {key:?}")))?;
        match spec.section {
            Section::Model => {
                self.model.set(key, value)?;
            }
            Section::Train => self.set_train(key, value)?,
            Section::Data | Section::Output => self.set_other(key, value)?,
        }
        Ok(())
    }

    fn set_train(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "lr" => t.lr = parse_value(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "patience" => t.patience = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "schedule" => {
                t.schedule = match value {
                    "constant" => LrSchedule::Constant,
                    "halving" => LrSchedule::Halving,
                    _ => return Err(CliError::usage(format!("schedule: expected constant or halving, got {value:?}"))),
                }
            }
            "max_steps" => {
                t.max_steps = match value {
                    "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "raw_loss" => t.raw_loss = parse_bool(key, value)?,
            _ => unreachable!("schema lists {key} as a training key"),
        }
        Ok(())
    }

    fn set_other(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = Some(value.to_string()),
            "data" => self.data = Some(PathBuf::from(value)),
            "split" => self.split = value.parse()?,
            "eval_split" => self.eval_split = value.parse()?,
            "synth_vars" => self.synth.vars = parse_value(key, value)?,
            "synth_len" => self.synth.len = parse_value(key, value)?,
            "synth_noise" => self.synth.noise = parse_value(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "timing" => self.timing = parse_bool(key, value)?,
            _ => unreachable!("schema lists {key} as a data or output key"),
        }
        Ok(())
    }

    /// Merges the layers in precedence order. The preset is chosen from the
    /// dataset and horizon the higher layers settle on.
    pub fn resolve(file: &[Entry], cli: &[Entry]) -> Result<Self> {
        let lookup = |k: &str| {
            cli.iter()
                .rev()
                .chain(file.iter().rev())
                .find(|e| e.key == k)
                .map(|e| e.value.as_str())
        };
        let mut cfg = RunConfig::default();
        let dataset = lookup("dataset").map(str::to_string).or_else(|| {
            lookup("data").and_then(|p| Path::new(p).file_stem().map(|s| s.to_string_lossy().into_owned()))
        });
        let horizon = match lookup("horizon") {
            Some(h) => parse_value("horizon", h)?,
            None => DEFAULT_HORIZON,
        };
        if let Some(p) = dataset.as_deref().and_then(|d| preset(d, horizon)) {
            log::info!("using the {} preset for horizon {horizon}", p.dataset);
            for (k, v) in p.entries() {
                cfg.set(k, &v)?;
            }
            cfg.preset = Some(p);
        }
        for e in file.iter().chain(cli) {
            cfg.set(&e.key, &e.value)
                .map_err(|err| CliError::usage(format!("{} ({}): {err}", e.key, e.origin)))?;
            cfg.explicit.insert(e.key.clone());
        }
        if !cfg.explicit.contains("heads") {
            cfg.model.heads = default_heads(cfg.model.d_model);
        }
        if !cfg.explicit.contains("d_ff") {
            cfg.model.d_ff = 4 * cfg.model.d_model;
        }
        if cfg.dataset.is_none() {
            cfg.dataset = dataset;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Whether `key` was given by the file or the command line.
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn is_synthetic(&self) -> bool {
        self.dataset.as_deref().is_some_and(|d| d.eq_ignore_ascii_case(SYNTHETIC))
    }

    /// Training settings recorded in checkpoints.
    pub fn train_entries(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let mut v = vec![
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("epochs", t.epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("seed", t.seed.to_string()),
            (
                "schedule",
                match t.schedule {
                    LrSchedule::Constant => "constant",
                    LrSchedule::Halving => "halving",
                }
                .to_string(),
            ),
            ("max_steps", t.max_steps.map_or("none".to_string(), |s| s.to_string())),
            ("raw_loss", t.raw_loss.to_string()),
            ("split", self.split.to_string()),
            ("horizon", self.model.horizon.to_string()),
            ("synth_vars", self.synth.vars.to_string()),
            ("synth_len", self.synth.len.to_string()),
            ("synth_noise", self.synth.noise.to_string()),
        ];
        if let Some(d) = &self.dataset {
            v.push(("dataset", d.clone()));
        }
        if let Some(d) = &self.data {
            v.push(("data", d.display().to_string()));
        }
        if let Some(p) = self.preset {
            v.push(("preset", format!("{}/{}", p.dataset, p.horizon)));
        }
        v.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

/// Keys of a checkpoint's recorded settings that locate its data.
pub const DATA_KEYS: [&str; 8] = ["dataset", "data", "split", "horizon", "seed", "synth_vars", "synth_len", "synth_noise"];

/// The data-locating settings recorded in a checkpoint, as entries that
/// sit below the config file and command line.
pub fn checkpoint_data_entries(meta: &[(String, String)], path: &Path) -> Vec<Entry> {
    meta.iter()
        .filter(|(k, _)| DATA_KEYS.contains(&k.as_str()))
        .map(|(k, v)| Entry {
            key: k.clone(),
            value: v.clone(),
            origin: Origin::Checkpoint(path.to_path_buf()),
        })
        .collect()
}

/// Reads a config file into entries.
pub fn read_config_file(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let entries = parse_kv(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    entries
        .into_iter()
        .map(|e| {
            if key_spec(&e.key).is_none() {
                return Err(CliError::usage(format!(
                    "{}:{}: unknown config key {:?}",
                    path.display(),
                    e.line,
                    e.key
                )));
            }
            Ok(Entry {
                key: e.key,
                value: e.value,
                origin: Origin::File(path.to_path_buf(), e.line),
            })
        })
        .collect()
}

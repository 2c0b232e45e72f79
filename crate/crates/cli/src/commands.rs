//! The work behind each subcommand, callable without a process boundary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dcmamber::data::{
    load_csv, save_csv, split, synth, NormStats, SeriesDataset, SplitRule, SynthConfig, Windows, ETT_RATIOS,
};
use dcmamber::model::{load_checkpoint, save_checkpoint, Checkpoint, DcMamber, ModelConfig, Variant};
use dcmamber::training::gradcheck::{
    check_affine_layer, check_model, check_ops, check_ssm_blocks, check_temporal_layer, tiny_model_config,
    GradCheckReport,
};
use dcmamber::training::{evaluate, evaluate_persistence, fit, write_history, EvalMetrics, FitReport};

use crate::config::{EvalSplit, RunConfig, SplitChoice};
use crate::error::{CliError, Result};
use crate::published::published;

pub const CHECKPOINT_FILE: &str = "checkpoint.dcm";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Evaluation batch size; larger than training batches since no tape is kept.
const EVAL_BATCH: usize = 64;

/// The series named by the config: the generator for `synthetic`, else the CSV.
pub fn load_series(cfg: &RunConfig) -> Result<SeriesDataset> {
    if cfg.is_synthetic() {
        let s = &cfg.synth;
        return synth(&SynthConfig::new(cfg.train.seed, s.vars, s.len, s.noise))
            .map_err(|e| CliError::usage(format!("synthetic data: {e}")));
    }
    let path = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::usage("no input data: pass --data PATH or --dataset synthetic"))?;
    let mut ds = load_csv(path)?;
    if let Some(name) = &cfg.dataset {
        ds.name = name.clone();
    }
    Ok(ds)
}

/// Standardized splits and the statistics used.
pub struct Prepared {
    pub name: String,
    pub norm: NormStats,
    pub train: SeriesDataset,
    pub val: SeriesDataset,
    pub test: SeriesDataset,
}

impl Prepared {
    pub fn split(&self, which: EvalSplit) -> &SeriesDataset {
        match which {
            EvalSplit::Train => &self.train,
            EvalSplit::Val => &self.val,
            EvalSplit::Test => &self.test,
        }
    }
}

/// Splits `ds` and standardizes it with `norm`, or with statistics fitted on
/// the training split.
pub fn prepare(cfg: &RunConfig, ds: &SeriesDataset, lookback: usize, norm: Option<NormStats>) -> Result<Prepared> {
    let rule = match cfg.split {
        SplitChoice::Auto => SplitRule::Auto(ETT_RATIOS),
        SplitChoice::Ratios(a, b, c) => SplitRule::Ratios((a, b, c)),
    };
    let s = split(ds, rule, lookback).map_err(|e| CliError::usage(format!("{}: {e}", ds.name)))?;
    let norm = norm.unwrap_or_else(|| NormStats::fit(&s.train));
    Ok(Prepared {
        name: ds.name.clone(),
        train: norm.apply(&s.train)?,
        val: norm.apply(&s.val)?,
        test: norm.apply(&s.test)?,
        norm,
    })
}

/// The configured model, sized to the data.
pub fn model_config(cfg: &RunConfig, ds: &SeriesDataset) -> Result<ModelConfig> {
    let mut m = cfg.model.clone();
    if cfg.is_explicit("n_vars") && m.n_vars != ds.vars() {
        return Err(CliError::usage(format!(
            "n_vars={} but {} has {} variables",
            m.n_vars,
            ds.name,
            ds.vars()
        )));
    }
    m.n_vars = ds.vars();
    m.validate()?;
    Ok(m)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::write(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::write(path, e))
}

fn metrics_csv(rows: &[(&str, f64, f64)]) -> String {
    let mut s = String::from("scale,mse,mae\n");
    for (scale, mse, mae) in rows {
        let _ = writeln!(s, "{scale},{mse},{mae}");
    }
    s
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub report: FitReport,
    pub test: EvalMetrics,
    pub persistence: EvalMetrics,
}

impl TrainOutcome {
    pub fn summary(&self) -> String {
        let r = &self.report;
        format!(
            "trained {} steps, best epoch {} (val mse {:.6})\n\
             test mse {:.6} mae {:.6}; persistence mse {:.6} mae {:.6}\n\
             checkpoint {}\nhistory {}",
            r.steps,
            r.best_epoch,
            r.best_val_mse,
            self.test.mse,
            self.test.mae,
            self.persistence.mse,
            self.persistence.mae,
            self.checkpoint.display(),
            self.history.display()
        )
    }
}

/// Trains, then writes the checkpoint, history and test metrics to `cfg.out`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let ds = load_series(cfg)?;
    let mcfg = model_config(cfg, &ds)?;
    let data = prepare(cfg, &ds, mcfg.lookback, None)?;
    let (model, mut store) = DcMamber::new::<f32>(mcfg.clone(), cfg.train.seed)?;
    log::info!(
        "{}: {} parameters, {} train rows, {} val rows",
        data.name,
        store.numel(),
        data.train.len(),
        data.val.len()
    );
    let report = fit(&model, &mut store, &data.train, &data.val, &cfg.train, Some(&data.norm))?;
    let test_w = Windows::new(&data.test, mcfg.lookback, mcfg.horizon)?;
    let test = evaluate(&model, &store, &test_w, EVAL_BATCH, Some(&data.norm))?;
    let persistence = evaluate_persistence(&test_w, EVAL_BATCH)?;

    create_dir(&cfg.out)?;
    let mut meta = cfg.train_entries();
    meta.push(("best_epoch".into(), report.best_epoch.to_string()));
    meta.push(("steps".into(), report.steps.to_string()));
    let ckpt = Checkpoint {
        config: mcfg,
        meta,
        params: store,
        norm: Some(data.norm),
    };
    let checkpoint = cfg.out.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &ckpt)?;
    let history = cfg.out.join(HISTORY_FILE);
    let mut buf = Vec::new();
    write_history(&report.history, &mut buf, cfg.timing).map_err(|e| CliError::write(&history, e))?;
    write_file(&history, &buf)?;
    let (raw_mse, raw_mae) = test.raw.unwrap_or((f64::NAN, f64::NAN));
    let rows = [
        ("standardized", test.mse, test.mae),
        ("raw", raw_mse, raw_mae),
        ("persistence", persistence.mse, persistence.mae),
    ];
    write_file(&cfg.out.join(METRICS_FILE), metrics_csv(&rows).as_bytes())?;
    Ok(TrainOutcome {
        checkpoint,
        history,
        report,
        test,
        persistence,
    })
}

pub struct EvalOutcome {
    pub dataset: String,
    pub split: EvalSplit,
    pub horizon: usize,
    pub metrics: EvalMetrics,
    pub persistence: EvalMetrics,
    pub published: Option<(f64, f64)>,
}

impl EvalOutcome {
    pub fn report(&self) -> String {
        let m = &self.metrics;
        let mut s = format!(
            "{} {} split, horizon {}, {} windows\nmse {:.6} mae {:.6} (standardized)\n",
            self.dataset, self.split, self.horizon, m.windows, m.mse, m.mae
        );
        if let Some((mse, mae)) = m.raw {
            let _ = writeln!(s, "mse {mse:.6} mae {mae:.6} (raw scale)");
        }
        let _ = writeln!(
            s,
            "persistence mse {:.6} mae {:.6} (standardized)",
            self.persistence.mse, self.persistence.mae
        );
        if let Some((mse, mae)) = self.published {
            let _ = writeln!(s, "published: {mse:.3}/{mae:.3}");
        }
        s
    }
}

/// Scores a checkpoint on one split of the configured data.
pub fn eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalOutcome> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model()?;
    let mcfg = &ckpt.config;
    let ds = load_series(cfg)?;
    if ds.vars() != mcfg.n_vars {
        return Err(CliError::usage(format!(
            "{} has {} variables, checkpoint {} expects {}",
            ds.name,
            ds.vars(),
            checkpoint.display(),
            mcfg.n_vars
        )));
    }
    let data = prepare(cfg, &ds, mcfg.lookback, ckpt.norm.clone())?;
    let windows = Windows::new(data.split(cfg.eval_split), mcfg.lookback, mcfg.horizon)?;
    let metrics = evaluate(&model, &ckpt.params, &windows, EVAL_BATCH, Some(&data.norm))?;
    let persistence = evaluate_persistence(&windows, EVAL_BATCH)?;
    let outcome = EvalOutcome {
        published: published(&data.name, mcfg.horizon),
        dataset: data.name,
        split: cfg.eval_split,
        horizon: mcfg.horizon,
        metrics,
        persistence,
    };
    if cfg.is_explicit("out") {
        create_dir(&cfg.out)?;
        let (raw_mse, raw_mae) = metrics.raw.unwrap_or((f64::NAN, f64::NAN));
        let mut rows = vec![
            ("standardized", metrics.mse, metrics.mae),
            ("raw", raw_mse, raw_mae),
            ("persistence", persistence.mse, persistence.mae),
        ];
        if let Some((mse, mae)) = outcome.published {
            rows.push(("published", mse, mae));
        }
        let path = cfg.out.join(format!("eval_{}.csv", cfg.eval_split));
        write_file(&path, metrics_csv(&rows).as_bytes())?;
    }
    Ok(outcome)
}

/// Forecasts the `horizon` rows after the last `lookback` rows of `input`
/// and writes them to `output` in the input's CSV dialect.
pub fn predict(checkpoint: &Path, input: &Path, output: &Path) -> Result<SeriesDataset> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model()?;
    let (l, w, v) = (ckpt.config.lookback, ckpt.config.horizon, ckpt.config.n_vars);
    let ds = load_csv(input)?;
    if ds.vars() != v {
        return Err(CliError::usage(format!(
            "{}: {} columns, checkpoint expects {v}",
            input.display(),
            ds.vars()
        )));
    }
    if ds.len() < l {
        return Err(CliError::usage(format!(
            "{}: {} rows, need at least the lookback of {l}",
            input.display(),
            ds.len()
        )));
    }
    let window = ds.view(ds.len() - l..ds.len())?;
    let mut x = window.values.reshape(&[1, l, v])?;
    if let Some(n) = &ckpt.norm {
        x = n.standardize(&x)?;
    }
    let mut y = model.predict(&ckpt.params, &x)?;
    if let Some(n) = &ckpt.norm {
        y = n.destandardize(&y)?;
    }
    let forecast = SeriesDataset::new("forecast", ds.columns.clone(), y.reshape(&[w, v])?)?;
    save_csv(&forecast, output)?;
    Ok(forecast)
}

/// Tolerances of the gradient suite.
pub const OP_TOLERANCE: f64 = 1e-6;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Runs every gradient check; the caller decides what a failure means.
pub fn gradcheck(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    Ok(vec![
        ("ops", check_ops(OP_TOLERANCE, seed)?),
        ("affine_layer", check_affine_layer(OP_TOLERANCE, seed)?),
        ("temporal_layer", check_temporal_layer(LAYER_TOLERANCE, seed)?),
        ("ssm_blocks", check_ssm_blocks(LAYER_TOLERANCE, seed)?),
        ("model", check_model(&tiny_model_config(), MODEL_TOLERANCE, seed)?),
    ])
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub steps: usize,
}

/// Trains every variant on the same data with the same seed and scores it on
/// the test split.
pub fn ablate(cfg: &RunConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(CliError::usage("no ablation variants given"));
    }
    let ds = load_series(cfg)?;
    let base = model_config(cfg, &ds)?;
    let data = prepare(cfg, &ds, base.lookback, None)?;
    let test_w = Windows::new(&data.test, base.lookback, base.horizon)?;
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mcfg = ModelConfig { variant, ..base.clone() };
        let (model, mut store) = DcMamber::new::<f32>(mcfg, cfg.train.seed)?;
        let report = fit(&model, &mut store, &data.train, &data.val, &cfg.train, Some(&data.norm))?;
        let m = evaluate(&model, &store, &test_w, EVAL_BATCH, None)?;
        log::info!("{variant}: test mse {:.6} mae {:.6}", m.mse, m.mae);
        rows.push(AblationRow {
            variant,
            horizon: base.horizon,
            mse: m.mse,
            mae: m.mae,
            steps: report.steps,
        });
    }
    let mut csv = String::from("variant,horizon,mse,mae,steps\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{},{}", r.variant, r.horizon, r.mse, r.mae, r.steps);
    }
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join(ABLATION_FILE), csv.as_bytes())?;
    Ok(rows)
}

/// Variants the full model is expected to match or beat.
pub const ORDERING_VARIANTS: [Variant; 3] = [Variant::NoVEncoder, Variant::NoTEncoder, Variant::BothMixing];

/// For each present variant of [`ORDERING_VARIANTS`], whether the full model's
/// MSE is at most that variant's.
pub fn ordering(rows: &[AblationRow]) -> Vec<(Variant, bool)> {
    let Some(full) = rows.iter().find(|r| r.variant == Variant::Full) else {
        return Vec::new();
    };
    ORDERING_VARIANTS
        .iter()
        .filter_map(|&v| rows.iter().find(|r| r.variant == v))
        .map(|r| (r.variant, full.mse <= r.mse))
        .collect()
}

/// True when the full model has the highest MSE of several variants.
pub fn full_is_worst(rows: &[AblationRow]) -> bool {
    let Some(full) = rows.iter().find(|r| r.variant == Variant::Full) else {
        return false;
    };
    rows.len() > 1 && rows.iter().all(|r| r.mse <= full.mse)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<18}{:>8}{:>12}{:>12}\n", "variant", "horizon", "mse", "mae");
    for r in rows {
        let _ = writeln!(s, "{:<18}{:>8}{:>12.6}{:>12.6}", r.variant.name(), r.horizon, r.mse, r.mae);
    }
    for (v, ok) in ordering(rows) {
        let _ = writeln!(s, "full <= {v}: {}", if ok { "yes" } else { "no (flagged)" });
    }
    s
}

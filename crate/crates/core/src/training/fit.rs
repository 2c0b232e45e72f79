use std::io::Write;
use std::time::Instant;

use crate::autograd::{Tape, Var};
use crate::data::{NormStats, SeriesDataset, Windows};
use crate::error::{Error, Result};
use crate::model::DcMamber;
use crate::ops::Mode;
use crate::params::{Ctx, ParamStore};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::training::adam::{adam_step, AdamState};
use crate::training::metrics::MetricSums;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Halve after every epoch.
    Halving,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables
    /// early stopping.
    pub patience: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    /// Compute the loss on de-standardized values instead of z-scores.
    pub raw_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-4,
            epochs: 10,
            patience: 3,
            seed: 2024,
            schedule: LrSchedule::Constant,
            max_steps: None,
            raw_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Halving => self.lr * 0.5f64.powi(epoch.saturating_sub(1) as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub steps: usize,
    /// Per-step training losses.
    pub step_losses: Vec<f64>,
}

/// Writes `epoch,train_mse,val_mse,val_mae,lr,seconds`. Wall-clock seconds
/// are written only when `timing` is set so that runs stay byte-comparable.
pub fn write_history(history: &[EpochRecord], mut out: impl Write, timing: bool) -> std::io::Result<()> {
    writeln!(out, "epoch,train_mse,val_mse,val_mae,lr,seconds")?;
    for r in history {
        let secs = if timing { r.seconds } else { 0.0 };
        writeln!(
            out,
            "{},{},{},{},{},{:.3}",
            r.epoch, r.train_mse, r.val_mse, r.val_mae, r.lr, secs
        )?;
    }
    Ok(())
}

/// Broadcasts per-variable statistics over `[B, W, V]`.
fn tile(stat: &Tensor<f32>, shape: &[usize]) -> Tensor<f32> {
    let v = stat.numel();
    let reps = shape.iter().product::<usize>() / v;
    let data = (0..reps).flat_map(|_| stat.data().iter().copied()).collect();
    Tensor::from_vec(shape, data).expect("tile shape")
}

fn batch_loss(
    tape: &Tape<f32>,
    ctx: &Ctx<'_, f32>,
    model: &DcMamber,
    inputs: &Tensor<f32>,
    targets: &Tensor<f32>,
    raw: Option<&NormStats>,
) -> Result<Var> {
    let pred = model.forward(ctx, inputs)?;
    match raw {
        Some(n) => {
            let shape = targets.shape();
            let p = tape.mul_const(pred, tile(&n.std, shape))?;
            let p = tape.add_const(p, &tile(&n.mean, shape))?;
            tape.mse(p, &n.destandardize(targets)?)
        }
        None => tape.mse(pred, targets),
    }
}

/// Standardized-scale metrics, plus raw-scale ones when statistics are given.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub mse: f64,
    pub mae: f64,
    pub raw: Option<(f64, f64)>,
    pub windows: usize,
}

pub fn evaluate(
    model: &DcMamber,
    store: &ParamStore<f32>,
    windows: &Windows<'_>,
    batch_size: usize,
    norm: Option<&NormStats>,
) -> Result<EvalMetrics> {
    let mut sums = MetricSums::default();
    let mut raw = MetricSums::default();
    for b in windows.sequential(batch_size) {
        let pred = model.predict(store, &b.inputs)?;
        sums.add(&b.targets, &pred)?;
        if let Some(n) = norm {
            raw.add(&n.destandardize(&b.targets)?, &n.destandardize(&pred)?)?;
        }
    }
    Ok(EvalMetrics {
        mse: sums.mse(),
        mae: sums.mae(),
        raw: norm.map(|_| (raw.mse(), raw.mae())),
        windows: windows.len(),
    })
}

/// Forecast that repeats the last observed row.
pub fn persistence_forecast(inputs: &Tensor<f32>, horizon: usize) -> Result<Tensor<f32>> {
    if inputs.rank() != 3 {
        return Err(Error::shape("persistence", format!("inputs {:?}", inputs.shape())));
    }
    let (b, l, v) = (inputs.shape()[0], inputs.shape()[1], inputs.shape()[2]);
    let mut data = Vec::with_capacity(b * horizon * v);
    for bi in 0..b {
        let last = &inputs.data()[(bi * l + l - 1) * v..][..v];
        for _ in 0..horizon {
            data.extend_from_slice(last);
        }
    }
    Tensor::from_vec(&[b, horizon, v], data)
}

pub fn evaluate_persistence(windows: &Windows<'_>, batch_size: usize) -> Result<EvalMetrics> {
    let mut sums = MetricSums::default();
    for b in windows.sequential(batch_size) {
        sums.add(&b.targets, &persistence_forecast(&b.inputs, windows.horizon())?)?;
    }
    Ok(EvalMetrics {
        mse: sums.mse(),
        mae: sums.mae(),
        raw: None,
        windows: windows.len(),
    })
}

/// Seed offset separating dropout draws from window shuffling.
const DROPOUT_STREAM: u64 = 0x5eed_d20f;

/// Mini-batch Adam on the MSE loss with early stopping on validation MSE.
/// On return `store` holds the parameters of the best validation epoch.
pub fn fit(
    model: &DcMamber,
    store: &mut ParamStore<f32>,
    train: &SeriesDataset,
    val: &SeriesDataset,
    cfg: &TrainConfig,
    norm: Option<&NormStats>,
) -> Result<FitReport> {
    cfg.validate()?;
    let (l, w) = (model.cfg.lookback, model.cfg.horizon);
    let train_w = Windows::new(train, l, w)?;
    let val_w = Windows::new(val, l, w)?;
    let raw = if cfg.raw_loss {
        Some(norm.ok_or_else(|| Error::Config("raw-scale loss needs normalization statistics".into()))?)
    } else {
        None
    };
    let mut adam = AdamState::new(store);
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut stale = 0usize;
    let mut steps = 0usize;
    'epochs: for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        let mut count = 0usize;
        let order = RngState {
            seed: cfg.seed,
            counter: epoch as u64,
        };
        let mut out_of_steps = false;
        for batch in train_w.shuffled(cfg.batch_size, order) {
            let tape = Tape::new();
            let dropout = RngState {
                seed: cfg.seed ^ DROPOUT_STREAM,
                counter: (steps as u64) << 24,
            };
            let ctx = Ctx::new(&tape, store, Mode::Train, dropout);
            let diverged = |e: Error| Error::Diverged {
                epoch,
                step: steps + 1,
                msg: e.to_string(),
            };
            let loss = batch_loss(&tape, &ctx, model, &batch.inputs, &batch.targets, raw).map_err(diverged)?;
            let loss_value = tape.value(loss).data()[0] as f64;
            let mut grads = tape.backward(loss).map_err(diverged)?;
            let grads: Vec<Tensor<f32>> = ctx
                .vars()
                .iter()
                .zip(store.tensors())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            adam_step(store, &grads, &mut adam, lr).map_err(diverged)?;
            steps += 1;
            step_losses.push(loss_value);
            total += loss_value * batch.starts.len() as f64;
            count += batch.starts.len();
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                out_of_steps = true;
                break;
            }
        }
        let metrics = evaluate(model, store, &val_w, cfg.batch_size.max(64), None)?;
        let record = EpochRecord {
            epoch,
            train_mse: total / count.max(1) as f64,
            val_mse: metrics.mse,
            val_mae: metrics.mae,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5}/{:.5} ({:.1}s)",
            record.train_mse,
            record.val_mse,
            record.val_mae,
            record.seconds
        );
        history.push(record);
        if !metrics.mse.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: steps,
                msg: "validation loss is not finite".into(),
            });
        }
        if best.as_ref().is_none_or(|(_, v, _)| metrics.mse < *v) {
            best = Some((epoch, metrics.mse, store.clone()));
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                log::info!("early stop after epoch {epoch}");
                break 'epochs;
            }
        }
        if out_of_steps {
            break;
        }
    }
    let (best_epoch, best_val_mse, params) = best.expect("at least one epoch ran");
    *store = params;
    Ok(FitReport {
        history,
        best_epoch,
        best_val_mse,
        steps,
        step_losses,
    })
}

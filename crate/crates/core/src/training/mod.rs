//! Adam training with early stopping, error metrics, baselines and the
//! gradient-check harness.

mod adam;
mod fit;
pub mod gradcheck;
mod metrics;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPS};
pub use fit::{
    evaluate, evaluate_persistence, fit, persistence_forecast, write_history, EpochRecord, EvalMetrics, FitReport,
    LrSchedule, TrainConfig,
};
pub use metrics::{mae, mse, MetricSums};

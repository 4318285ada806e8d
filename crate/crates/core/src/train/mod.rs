//! Optimization, checkpoints, metrics and the training loop.

mod adam;
mod checkpoint;
mod metrics;
mod trainer;

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointHeader, ParamEntry, FORMAT_VERSION, MAGIC};
pub use metrics::{HorizonMetrics, Metrics, MetricsReport, MAPE_MASK_THRESHOLD, REPORT_HORIZONS};
pub use trainer::{
    evaluate, historical_average, predict_split, train, train_from, EpochRecord, SplitPredictions, StopReason, TrainConfig, TrainData,
    TrainOutcome,
};

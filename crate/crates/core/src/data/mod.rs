//! Flow data: ingestion, gap filling, normalization, windowing, splits,
//! prepared-dataset storage and a synthetic generator.

mod clean;
mod ingest;
mod norm;
mod store;
mod synth;
mod window;

use chrono::{Duration, NaiveDateTime};

pub use clean::interpolate_missing;
pub use ingest::{ingest_csv, ingest_dense, parse_timestamp, read_flow_csv, write_dense, write_flow_csv, DenseSidecar, FlowRecord};
pub use norm::NormStats;
pub use store::{prepare, DataConfig, FlowInput, Manifest, PrepareInputs, PreparedDataset, SplitInfo};
pub use synth::{
    synth_generate, weekly_recurrence, SynthData, SynthParams, SYNTH_EDGES, SYNTH_FLOW_BIN, SYNTH_FLOW_CSV, SYNTH_FLOW_SIDECAR,
    SYNTH_SENSORS,
};
pub use window::{build_windows, chronological_split, SplitRanges, WindowLayout, WindowSource, WindowedSample};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STEP_MINUTES: i64 = 5;
pub const STEPS_PER_DAY: usize = 288;
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Aligned per-sensor series at a constant step.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSeries {
    pub sensor_ids: Vec<String>,
    /// `N×F×T`.
    pub values: Tensor,
    pub start: NaiveDateTime,
    pub step_minutes: i64,
    /// `N×T`, true where the original data had no observation.
    pub missing: Vec<bool>,
}

impl FlowSeries {
    pub fn new(sensor_ids: Vec<String>, values: Tensor, start: NaiveDateTime, step_minutes: i64, missing: Vec<bool>) -> Result<Self> {
        if values.ndim() != 3 || values.shape()[0] != sensor_ids.len() {
            return Err(Error::dim(
                "flow series",
                format!("values {:?} for {} sensors", values.shape(), sensor_ids.len()),
            ));
        }
        if step_minutes <= 0 {
            return Err(Error::Data("step must be positive".into()));
        }
        let (n, t) = (values.shape()[0], values.shape()[2]);
        if missing.len() != n * t {
            return Err(Error::dim("flow series", "mask size"));
        }
        Ok(Self {
            sensor_ids,
            values,
            start,
            step_minutes,
            missing,
        })
    }

    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn timestamp(&self, index: usize) -> NaiveDateTime {
        self.start + Duration::minutes(self.step_minutes * index as i64)
    }

    pub fn steps_per_day(&self) -> usize {
        (1440 / self.step_minutes) as usize
    }

    pub fn value(&self, node: usize, feature: usize, t: usize) -> f64 {
        let (f, len) = (self.features(), self.len());
        self.values.data()[(node * f + feature) * len + t]
    }

    pub fn is_missing(&self, node: usize, t: usize) -> bool {
        self.missing[node * self.len() + t]
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }
}

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{clip_global_norm, Adam, AdamConfig};
use super::metrics::MetricsReport;
use crate::data::{NormStats, WindowSource};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::spatial::GraphOperators;
use crate::temporal::DilatedRateSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplies the learning rate after every epoch (1.0 keeps it fixed).
    pub lr_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub lambda: usize,
    pub temporal_dim: usize,
    pub spatial_dim: usize,
    pub k: usize,
    pub tau: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub horizon: usize,
    /// Global gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Fraction of training anchors used, spread evenly over the split.
    pub train_fraction: f64,
    /// Cap on validation windows scored per epoch.
    pub val_max_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let rates = DilatedRateSet::traffic_default();
        Self {
            batch_size: 64,
            learning_rate: 1e-2,
            lr_decay: 1.0,
            max_epochs: 200,
            patience: 15,
            seed: 0,
            lambda: 4,
            temporal_dim: 64,
            spatial_dim: 64,
            k: crate::graph::DEFAULT_K,
            tau: rates.rates,
            kernel_sizes: rates.kernel_sizes,
            horizon: 12,
            clip_norm: Some(5.0),
            train_fraction: 1.0,
            val_max_windows: None,
        }
    }
}

impl TrainConfig {
    /// Reads a TOML or JSON file, chosen by extension (TOML otherwise).
    pub fn load(path: &Path) -> Result<Self> {
        crate::load_config(path)
    }

    pub fn model_config(&self, features: usize, window: usize) -> ModelConfig {
        ModelConfig {
            features,
            window,
            rates: DilatedRateSet::new(self.tau.clone(), self.kernel_sizes.clone()),
            temporal_dim: self.temporal_dim,
            lambda: self.lambda,
            spatial_dim: self.spatial_dim,
            k: self.k,
            horizon: self.horizon,
        }
    }

    pub fn validate(&self, window: usize) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be a finite non-negative number".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must be in (0, 1]".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config("train_fraction must be in (0, 1]".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        self.model_config(1, window).validate()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    Diverged { epoch: usize },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation parameters (or the last finite ones after divergence).
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stop: StopReason,
}

/// Splits and graph operators needed by [`train`].
pub struct TrainData<'a> {
    pub train: &'a WindowSource,
    pub val: &'a WindowSource,
    pub ops: &'a GraphOperators,
    pub norm: &'a NormStats,
}

/// Mean per-sample loss and mean per-sample gradients over `anchors`.
fn batch_gradients(model: &Model, ops: &GraphOperators, src: &WindowSource, anchors: &[usize]) -> Result<(f64, BTreeMap<ParamId, Tensor>)> {
    let mut total = 0.0;
    let mut acc: BTreeMap<ParamId, Tensor> = BTreeMap::new();
    for &a in anchors {
        let s = src.window_at(a);
        let (l, g) = model.loss_and_grad(ops, &s.input, &s.target)?;
        total += l;
        for (id, t) in g {
            match acc.get_mut(&id) {
                Some(sum) => sum.add_assign(&t)?,
                None => {
                    acc.insert(id, t);
                }
            }
        }
    }
    let scale = 1.0 / anchors.len() as f64;
    acc.values_mut().for_each(|g| g.scale(scale));
    Ok((total * scale, acc))
}

/// Denormalized `(predictions, targets)`, one row-major `N×K` block per window.
pub type SplitPredictions = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Denormalized feature-0 predictions and targets.
pub fn predict_split(model: &Model, ops: &GraphOperators, src: &WindowSource, norm: &NormStats) -> Result<SplitPredictions> {
    let mut preds = Vec::with_capacity(src.len());
    let mut targets = Vec::with_capacity(src.len());
    for s in src.iter() {
        let y = model.predict(ops, &s.input)?;
        preds.push(y.data().iter().map(|&v| norm.denormalize_value(0, v)).collect());
        targets.push(s.target.data().iter().map(|&v| norm.denormalize_value(0, v)).collect());
    }
    Ok((preds, targets))
}

pub fn evaluate(model: &Model, ops: &GraphOperators, src: &WindowSource, norm: &NormStats, step_minutes: i64) -> Result<MetricsReport> {
    let (p, t) = predict_split(model, ops, src, norm)?;
    MetricsReport::from_predictions(&p, &t, model.config().horizon, step_minutes)
}

/// Same-clock-time-last-week predictor over a split, denormalized.
pub fn historical_average(src: &WindowSource, norm: &NormStats) -> Result<SplitPredictions> {
    let layout = src.layout();
    let lag = layout.days * layout.steps_per_day;
    if lag == 0 {
        return Err(Error::Config("historical baseline needs at least one day of history".into()));
    }
    let v = src.values();
    let (n, f, t) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let mut preds = Vec::with_capacity(src.len());
    let mut targets = Vec::with_capacity(src.len());
    for &a in src.anchors() {
        let mut p = Vec::with_capacity(n * layout.horizon);
        let mut y = Vec::with_capacity(n * layout.horizon);
        for node in 0..n {
            let base = node * f * t;
            for h in layout.target_indices(a) {
                p.push(norm.denormalize_value(0, v.data()[base + h - lag]));
                y.push(norm.denormalize_value(0, v.data()[base + h]));
            }
        }
        preds.push(p);
        targets.push(y);
    }
    Ok((preds, targets))
}

fn val_mae(model: &Model, data: &TrainData<'_>) -> Result<f64> {
    let (p, t) = predict_split(model, data.ops, data.val, data.norm)?;
    let flat_p: Vec<f64> = p.concat();
    let flat_t: Vec<f64> = t.concat();
    Ok(super::metrics::Metrics::compute(&flat_p, &flat_t)?.mae)
}

/// Trains from a fresh initialization; `on_epoch` sees every log record.
pub fn train(data: &TrainData<'_>, config: &TrainConfig, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let window = data.train.layout().window_len();
    config.validate(window)?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let features = data.train.values().shape()[1];
    let model_cfg = config.model_config(features, window);
    if model_cfg.horizon != data.train.layout().horizon {
        return Err(Error::Config(format!(
            "model horizon {} differs from data horizon {}",
            model_cfg.horizon,
            data.train.layout().horizon
        )));
    }
    let model = Model::new(&model_cfg, config.seed)?;
    train_from(model, data, config, on_epoch)
}

/// Continues training `model` in place of a fresh initialization.
pub fn train_from(
    mut model: Model,
    data: &TrainData<'_>,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let train_src = if config.train_fraction < 1.0 {
        let count = ((data.train.len() as f64) * config.train_fraction).ceil() as usize;
        data.train.strided(count.max(1))
    } else {
        data.train.clone()
    };
    let val_src = match config.val_max_windows {
        Some(m) => data.val.strided(m.max(1)),
        None => data.val.clone(),
    };
    let data = TrainData {
        train: &train_src,
        val: &val_src,
        ops: data.ops,
        norm: data.norm,
    };

    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0fba_7c00);
    let mut order: Vec<usize> = train_src.anchors().to_vec();
    let mut best_params: ParamStore = model.params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let lr = config.learning_rate * config.lr_decay.powi(epoch as i32 - 1);
        opt.config.learning_rate = lr;
        let epoch_start = model.params.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, mut grads) = batch_gradients(&model, data.ops, &train_src, batch)?;
            if !loss.is_finite() {
                log::warn!("non-finite training loss at epoch {epoch}");
                model.params = epoch_start;
                stop = StopReason::Diverged { epoch };
                break 'epochs;
            }
            if let Some(max) = config.clip_norm {
                clip_global_norm(&mut grads, max);
            }
            opt.step(&mut model.params, &grads)?;
            model.arch.project(&mut model.params);
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / order.len() as f64;
        let val = val_mae(&model, &data)?;
        if !val.is_finite() {
            model.params = epoch_start;
            stop = StopReason::Diverged { epoch };
            break;
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_mae: val,
            lr,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        on_epoch(&record);
        history.push(record);
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best_params = model.params.clone();
        } else if epoch - best_epoch >= config.patience {
            stop = StopReason::Patience;
            break;
        }
    }

    if best_epoch > 0 {
        model.params = best_params;
    }
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_mae: best_val,
        stop,
    })
}

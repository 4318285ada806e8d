//! Full forecaster: temporal block → stacked graph blocks → skip
//! concatenation with the raw window → shared fully connected head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::spatial::{GraphOperators, SpatialStack, StackConfig};
use crate::temporal::{DilatedRateSet, TemporalBlock};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input features per node (F).
    pub features: usize,
    /// Window length (T_N).
    pub window: usize,
    pub rates: DilatedRateSet,
    /// Temporal representation size (F_T).
    pub temporal_dim: usize,
    /// Number of stacked graph blocks (λ).
    pub lambda: usize,
    /// Reduced spatial output size (F_S).
    pub spatial_dim: usize,
    /// Neighbors kept per direction in aggregation.
    pub k: usize,
    /// Forecast steps (K).
    pub horizon: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: 1,
            window: 96,
            rates: DilatedRateSet::traffic_default(),
            temporal_dim: 64,
            lambda: 4,
            spatial_dim: 64,
            k: 3,
            horizon: 12,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by the gradient check.
    pub fn toy() -> Self {
        Self {
            features: 1,
            window: 12,
            rates: DilatedRateSet::new(vec![1, 2, 4], vec![3, 2, 2]),
            temporal_dim: 8,
            lambda: 2,
            spatial_dim: 8,
            k: 3,
            horizon: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("features", self.features),
            ("window", self.window),
            ("temporal_dim", self.temporal_dim),
            ("lambda", self.lambda),
            ("spatial_dim", self.spatial_dim),
            ("k", self.k),
            ("horizon", self.horizon),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.rates.validate(self.window)
    }

    /// Number of learnable scalars; independent of the graph size.
    pub fn param_count(&self) -> usize {
        TemporalBlock::param_count(&self.rates, self.features, self.temporal_dim)
            + SpatialStack::param_count(self.stack_config(), self.temporal_dim)
            + (self.spatial_dim + self.features * self.window) * self.horizon
            + self.horizon
    }

    pub fn stack_config(&self) -> StackConfig {
        StackConfig {
            lambda: self.lambda,
            out_dim: self.spatial_dim,
        }
    }
}

/// Parameter layout of a model; pure function of its config.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub temporal: TemporalBlock,
    pub spatial: SpatialStack,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

impl Architecture {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let temporal = TemporalBlock::init(&mut store, &config.rates, config.features, config.temporal_dim, rng)?;
        let spatial = SpatialStack::init(&mut store, config.stack_config(), config.temporal_dim, rng)?;
        let fan_in = config.spatial_dim + config.features * config.window;
        let b = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * config.horizon).map(|_| rng.gen_range(-b..=b)).collect();
        let head_weight = store.insert("head.weight", Tensor::new(&[fan_in, config.horizon], w)?)?;
        let head_bias = store.insert("head.bias", Tensor::zeros(&[1, config.horizon]))?;
        Ok((
            Self {
                config: config.clone(),
                temporal,
                spatial,
                head_weight,
                head_bias,
            },
            store,
        ))
    }

    fn check_window(&self, ops: &GraphOperators, x: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [ops.n, c.features, c.window];
        if x.shape() != want {
            return Err(Error::dim("forward", format!("window {:?}, expected {want:?}", x.shape())));
        }
        Ok(())
    }

    /// Records the forward pass for one `N×F×T_N` window; returns `N×K`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, ops: &GraphOperators, x: &Tensor) -> Result<Var> {
        self.check_window(ops, x)?;
        let c = &self.config;
        let xv = tape.constant(x.clone());
        let h0 = self.temporal.forward(tape, params, xv)?;
        let h = self.spatial.forward(tape, params, ops, h0)?;
        let flat = tape.constant(x.reshape(&[ops.n, c.features * c.window])?);
        let skip = tape.concat(&[h, flat], 1)?;
        let w = tape.param(params, self.head_weight);
        let b = tape.param(params, self.head_bias);
        let ones = tape.constant(Tensor::full(&[ops.n, 1], 1.0));
        let bias = tape.matmul(ones, b)?;
        let y = tape.matmul(skip, w)?;
        tape.add(y, bias)
    }

    /// Projects parameters back onto their constraint sets after an update.
    pub fn project(&self, params: &mut ParamStore) {
        self.temporal.project(params);
    }
}

/// Sum of squared errors over all nodes and horizons.
pub fn loss(tape: &mut Tape, y_hat: Var, y: &Tensor) -> Result<Var> {
    if tape.value(y_hat).shape() != y.shape() {
        return Err(Error::dim("loss", format!("{:?} vs {:?}", tape.value(y_hat).shape(), y.shape())));
    }
    let yv = tape.constant(y.clone());
    let d = tape.sub(y_hat, yv)?;
    let sq = tape.square(d);
    Ok(tape.sum(sq))
}

/// Architecture plus parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (arch, params) = Architecture::init(config, &mut rng)?;
        Ok(Self { arch, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: &ModelConfig, params: ParamStore) -> Result<Self> {
        let template = Self::new(config, 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for ((_, tn, tv), (_, pn, pv)) in template.params.iter().zip(params.iter()) {
            if tn != pn || tv.shape() != pv.shape() {
                return Err(Error::Contract(format!(
                    "parameter mismatch: expected `{tn}` {:?}, got `{pn}` {:?}",
                    tv.shape(),
                    pv.shape()
                )));
            }
        }
        Ok(Self {
            arch: template.arch,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Normalized `N×K` prediction for one window.
    pub fn predict(&self, ops: &GraphOperators, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let y = self.arch.forward(&mut tape, &self.params, ops, x)?;
        Ok(tape.value(y).clone())
    }

    /// Per-sample loss and parameter gradients.
    pub fn loss_and_grad(
        &self,
        ops: &GraphOperators,
        x: &Tensor,
        y: &Tensor,
    ) -> Result<(f64, std::collections::BTreeMap<ParamId, Tensor>)> {
        let mut tape = Tape::new();
        let y_hat = self.arch.forward(&mut tape, &self.params, ops, x)?;
        let l = loss(&mut tape, y_hat, y)?;
        let value = tape.value(l).item();
        let grads = tape.backward(l)?;
        Ok((value, grads.into_params()))
    }
}

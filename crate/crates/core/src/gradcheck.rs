//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{EdgeRecord, GraphOptions, TrafficGraph};
use crate::model::{loss, Model, ModelConfig};
use crate::params::ParamStore;
use crate::spatial::GraphOperators;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Step for the whole-model check. Some gradient entries there are ~1e-7
/// against a loss of order 10, where a 1e-6 step is dominated by rounding.
pub const MODEL_STEP: f64 = 1e-4;

/// Relative error used throughout: `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

fn scalar_value(f: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>, params: &ParamStore) -> Result<f64> {
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    Ok(v.item())
}

/// Compares the tape gradient of `f` against central differences for every
/// entry of every parameter in `params`.
pub fn fd_check_report<F>(f: F, params: &ParamStore, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let grads = tape.backward(out)?;

    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for (id, name, value) in params.iter() {
        let analytic = grads.param(id);
        let mut worst: f64 = 0.0;
        for i in 0..value.numel() {
            let orig = value.data()[i];
            work.get_mut(id).data_mut()[i] = orig + step;
            let plus = scalar_value(&f, &work)?;
            work.get_mut(id).data_mut()[i] = orig - step;
            let minus = scalar_value(&f, &work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(a, numeric));
        }
        report.push(ParamCheck {
            name: name.to_string(),
            entries: value.numel(),
            max_rel_error: worst,
        });
    }
    let max_rel_error = report.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: report,
        max_rel_error,
    })
}

/// Max relative error between analytic and numeric gradients of `f`.
pub fn fd_check<F>(f: F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    Ok(fd_check_report(f, params, DEFAULT_STEP)?.max_rel_error)
}

/// Small fixed road graph used by [`model_gradcheck`].
pub fn toy_graph() -> Result<TrafficGraph> {
    let ids: Vec<String> = (1..=4).map(|i| i.to_string()).collect();
    let e = |a: usize, b: usize, d: f64| EdgeRecord {
        from_id: a.to_string(),
        to_id: b.to_string(),
        distance: d,
    };
    let edges = [e(1, 2, 500.0), e(2, 3, 800.0), e(3, 4, 650.0), e(4, 1, 1200.0), e(1, 3, 900.0)];
    TrafficGraph::from_edges(&ids, &edges, None, &GraphOptions::default())
}

/// Gradient check of the full forecaster loss on the toy configuration.
///
/// Offsets are drawn away from zero so no tap sits on an interpolation
/// kink, and every parameter is perturbed from its initial value.
pub fn model_gradcheck(seed: u64) -> Result<GradCheckReport> {
    model_gradcheck_with_step(seed, MODEL_STEP)
}

pub fn model_gradcheck_with_step(seed: u64, step: f64) -> Result<GradCheckReport> {
    let cfg = ModelConfig::toy();
    let mut model = Model::new(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for id in model.params.ids().collect::<Vec<_>>() {
        let is_offset = model.params.name(id).ends_with(".offset");
        for v in model.params.get_mut(id).data_mut() {
            if is_offset {
                let mag: f64 = rng.gen_range(0.1..0.4);
                *v = if rng.gen_bool(0.5) { mag } else { -mag };
            } else {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
    }
    let graph = toy_graph()?;
    let ops = GraphOperators::from_graph(&graph, cfg.k)?;
    let n = graph.n();
    let x = Tensor::new(
        &[n, cfg.features, cfg.window],
        (0..n * cfg.features * cfg.window).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )?;
    let y = Tensor::new(&[n, cfg.horizon], (0..n * cfg.horizon).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let arch = model.arch.clone();
    fd_check_report(
        |tape, p| {
            let y_hat = arch.forward(tape, p, &ops, &x)?;
            loss(tape, y_hat, &y)
        },
        &model.params,
        step,
    )
}

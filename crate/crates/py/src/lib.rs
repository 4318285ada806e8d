//! Python bindings. Tensors cross the boundary as nested lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use tssrgcn::data::{self, DataConfig, PrepareInputs, PreparedDataset, SynthParams};
use tssrgcn::graph::{EdgeRecord, TransitionMatrices};
use tssrgcn::temporal::{cycle_dilated_conv, cycle_dilated_deformable_conv, DilatedRateSet};
use tssrgcn::train::{self as tr, Checkpoint, Metrics};
use tssrgcn::{GraphOperators, GraphOptions, ModelConfig, Tensor, TrafficGraph};

fn err(e: tssrgcn::Error) -> PyErr {
    match e {
        tssrgcn::Error::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn from_matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn from_cube(x: Vec<Vec<Vec<f64>>>) -> PyResult<Tensor> {
    let n = x.len();
    let f = x.first().map_or(0, Vec::len);
    let t = x.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != f || r.iter().any(|s| s.len() != t)) {
        return Err(PyValueError::new_err("ragged N×F×T input"));
    }
    Tensor::new(&[n, f, t], x.into_iter().flatten().flatten().collect()).map_err(err)
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Directed road graph with its distance kernel weights.
#[pyclass(name = "TrafficGraph", module = "tssrgcn_py")]
struct PyTrafficGraph {
    inner: TrafficGraph,
}

#[pymethods]
impl PyTrafficGraph {
    /// `edges` holds `(from_id, to_id, distance)` triples.
    #[new]
    #[pyo3(signature = (sensor_ids, edges, epsilon = 0.5))]
    fn new(sensor_ids: Vec<String>, edges: Vec<(String, String, f64)>, epsilon: f64) -> PyResult<Self> {
        let records: Vec<EdgeRecord> = edges
            .into_iter()
            .map(|(from_id, to_id, distance)| EdgeRecord { from_id, to_id, distance })
            .collect();
        let options = GraphOptions {
            epsilon,
            ..GraphOptions::default()
        };
        let inner = TrafficGraph::from_edges(&sensor_ids, &records, None, &options).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn node_ids(&self) -> Vec<String> {
        self.inner.node_ids().to_vec()
    }

    fn w0(&self) -> Vec<Vec<f64>> {
        matrix(self.inner.w0())
    }

    fn w1(&self) -> Vec<Vec<f64>> {
        matrix(self.inner.w1())
    }

    /// `(downstream, upstream)` row-normalized transition matrices.
    fn transitions(&self) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let t = TransitionMatrices::from_w0(self.inner.w0()).map_err(err)?;
        Ok((matrix(&t.downstream), matrix(&t.upstream)))
    }

    fn __repr__(&self) -> String {
        format!("TrafficGraph(n={}, edges={})", self.inner.n(), self.inner.edge_count())
    }
}

/// Forecasting model with fixed parameters.
#[pyclass(name = "Model", module = "tssrgcn_py")]
struct PyModel {
    inner: tssrgcn::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        seed = 0, features = 1, window = 96, tau = vec![1, 12, 84], kernel_sizes = vec![12, 8, 2],
        temporal_dim = 64, lambda_ = 4, spatial_dim = 64, k = 3, horizon = 12
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        seed: u64,
        features: usize,
        window: usize,
        tau: Vec<usize>,
        kernel_sizes: Vec<usize>,
        temporal_dim: usize,
        lambda_: usize,
        spatial_dim: usize,
        k: usize,
        horizon: usize,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            features,
            window,
            rates: DilatedRateSet::new(tau, kernel_sizes),
            temporal_dim,
            lambda: lambda_,
            spatial_dim,
            k,
            horizon,
        };
        Ok(Self {
            inner: tssrgcn::Model::new(&config, seed).map_err(err)?,
        })
    }

    /// The 4-node-scale configuration used by the gradient check.
    #[staticmethod]
    #[pyo3(signature = (seed = 0))]
    fn toy(seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: tssrgcn::Model::new(&ModelConfig::toy(), seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(&path).map_err(err)?.model,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::new(self.inner.clone(), None, None, 0, None).save(&path).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, self.inner.config())
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params.scalar_count()
    }

    /// Normalized `N×F×T` window in, `N×K` forecast out.
    fn predict(&self, graph: &PyTrafficGraph, x: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let ops = GraphOperators::from_graph(&graph.inner, self.inner.config().k).map_err(err)?;
        let y = self.inner.predict(&ops, &from_cube(x)?).map_err(err)?;
        Ok(matrix(&y))
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(lambda={}, temporal_dim={}, spatial_dim={}, horizon={}, params={})",
            c.lambda,
            c.temporal_dim,
            c.spatial_dim,
            c.horizon,
            self.inner.params.scalar_count()
        )
    }
}

/// Cycle-based dilated convolution of an `N×F×T` window with an `F×K_S`
/// kernel, giving `N×F`; `offsets` (length `K_S`) switches to the
/// deformable variant.
#[pyfunction]
#[pyo3(signature = (x, rate, kernel, offsets = None))]
fn dilated_conv(x: Vec<Vec<Vec<f64>>>, rate: usize, kernel: Vec<Vec<f64>>, offsets: Option<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let (x, k) = (from_cube(x)?, from_matrix(kernel)?);
    let y = match offsets {
        Some(o) => {
            let o = Tensor::new(&[o.len()], o).map_err(err)?;
            cycle_dilated_deformable_conv(&x, rate, &k, &o)
        }
        None => cycle_dilated_conv(&x, rate, &k),
    }
    .map_err(err)?;
    Ok(matrix(&y))
}

/// Synthetic dataset: `{"sensor_ids", "flow" (N×T), "edges", "graph"}`.
#[pyfunction]
#[pyo3(signature = (nodes = 10, days = 14, seed = 0, noise = 5.0))]
fn synth<'py>(py: Python<'py>, nodes: usize, days: usize, seed: u64, noise: f64) -> PyResult<Bound<'py, PyDict>> {
    let params = SynthParams {
        noise_std: noise,
        ..SynthParams::default()
    };
    let d = data::synth_generate(nodes, days, seed, &params).map_err(err)?;
    let v = &d.series.values;
    let (f, t) = (v.shape()[1], v.shape()[2]);
    let flow: Vec<Vec<f64>> = (0..nodes).map(|i| v.data()[i * f * t..i * f * t + t].to_vec()).collect();
    let edges: Vec<(String, String, f64)> = d.edges.iter().map(|e| (e.from_id.clone(), e.to_id.clone(), e.distance)).collect();
    let out = PyDict::new(py);
    out.set_item("sensor_ids", d.sensor_ids.clone())?;
    out.set_item("flow", flow)?;
    out.set_item("edges", edges)?;
    out.set_item("graph", PyTrafficGraph { inner: d.graph })?;
    Ok(out)
}

/// MAE, RMSE and masked MAPE (%) of flat prediction/target lists.
#[pyfunction]
fn metrics<'py>(py: Python<'py>, pred: Vec<f64>, target: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &Metrics::compute(&pred, &target).map_err(err)?)
}

/// Whole-model finite-difference check; returns the per-parameter report.
#[pyfunction]
#[pyo3(signature = (seed = 7))]
fn gradcheck<'py>(py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = tssrgcn::gradcheck::model_gradcheck(seed).map_err(err)?;
    let out = PyDict::new(py);
    let params: Vec<(String, usize, f64)> = r.params.iter().map(|p| (p.name.clone(), p.entries, p.max_rel_error)).collect();
    out.set_item("params", params)?;
    out.set_item("max_rel_error", r.max_rel_error)?;
    Ok(out)
}

/// Prepares a raw directory laid out like the `synth` CLI output; returns the dataset hash.
#[pyfunction]
#[pyo3(signature = (data_dir, out_dir, dense = false))]
fn prepare(data_dir: PathBuf, out_dir: PathBuf, dense: bool) -> PyResult<String> {
    let inputs = PrepareInputs::synth_layout(&data_dir, dense);
    Ok(data::prepare(&inputs, &DataConfig::default(), &out_dir).map_err(err)?.config_hash)
}

/// Scores a checkpoint on one split of a prepared directory.
#[pyfunction]
#[pyo3(signature = (data_dir, checkpoint, split = "test"))]
fn evaluate<'py>(py: Python<'py>, data_dir: PathBuf, checkpoint: PathBuf, split: &str) -> PyResult<Bound<'py, PyAny>> {
    let ds = PreparedDataset::load(&data_dir).map_err(err)?;
    let ckpt = Checkpoint::load(&checkpoint).map_err(err)?;
    ckpt.require_dataset(&ds.manifest.config_hash).map_err(err)?;
    let ops = GraphOperators::from_graph(&ds.graph, ckpt.model_config().k).map_err(err)?;
    let src = ds.split(split).map_err(err)?;
    let report = tr::evaluate(&ckpt.model, &ops, src, &ds.manifest.norm_stats, ds.manifest.step_minutes).map_err(err)?;
    json_to_py(py, &report)
}

#[pymodule]
pub fn tssrgcn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrafficGraph>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(dilated_conv, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(prepare, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}

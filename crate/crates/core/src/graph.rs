//! Road-network graph: binary and Gaussian-kernel adjacency, directional
//! transition matrices and k-nearest neighbor tables.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 0.5;
pub const DEFAULT_K: usize = 3;

/// Which distance population defines the weighted adjacency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W1Mode {
    /// Kernel weights only on road-network edges.
    #[default]
    ConnectedOnly,
    /// Kernel and threshold over every pair in a full distance table.
    FullKernel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphOptions {
    pub w1_mode: W1Mode,
    pub epsilon: f64,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            w1_mode: W1Mode::ConnectedOnly,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// One row of the metadata edge list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub from_id: String,
    pub to_id: String,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrafficGraph {
    node_ids: Vec<String>,
    w0: Tensor,
    w1: Tensor,
    /// Pairwise distances in meters; `INFINITY` where unknown.
    distances: Tensor,
}

/// Orders sensor ids numerically when every id is an integer, else lexicographically.
pub fn sort_sensor_ids(ids: &mut [String]) {
    let numeric: Option<Vec<u64>> = ids.iter().map(|s| s.trim().parse().ok()).collect();
    if numeric.is_some() {
        ids.sort_by_key(|s| s.trim().parse::<u64>().unwrap());
    } else {
        ids.sort();
    }
}

/// Population standard deviation of the finite off-diagonal entries.
pub fn distance_sigma(distances: &Tensor) -> f64 {
    let n = distances.rows();
    let vals: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j)
        .map(|(i, j)| distances.get2(i, j))
        .filter(|d| d.is_finite())
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
}

/// `W1[i][j] = exp(−d²/σ²)` when `i ≠ j`, the distance is known and the
/// weight is at least `epsilon`; zero otherwise.
pub fn build_weighted_adjacency(distances: &Tensor, sigma_d: f64, epsilon: f64) -> Result<Tensor> {
    if distances.ndim() != 2 || distances.rows() != distances.cols() {
        return Err(Error::dim("build_weighted_adjacency", format!("{:?}", distances.shape())));
    }
    if !(sigma_d > 0.0 && sigma_d.is_finite()) {
        return Err(Error::Degenerate(format!("distance sigma is {sigma_d}")));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1)")));
    }
    let n = distances.rows();
    let mut w1 = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let d = distances.get2(i, j);
            if i == j || !d.is_finite() {
                continue;
            }
            if d < 0.0 {
                return Err(Error::Data(format!("negative distance {d} at ({i}, {j})")));
            }
            let w = (-(d * d) / (sigma_d * sigma_d)).exp();
            if w >= epsilon {
                w1.set2(i, j, w);
            }
        }
    }
    Ok(w1)
}

fn index_of(ids: &HashMap<&str, usize>, id: &str) -> Result<usize> {
    ids.get(id.trim()).copied().ok_or_else(|| Error::UnknownSensor(id.to_string()))
}

fn distance_matrix(index: &HashMap<&str, usize>, n: usize, records: &[EdgeRecord]) -> Result<Tensor> {
    let mut d = Tensor::full(&[n, n], f64::INFINITY);
    for r in records {
        let (i, j) = (index_of(index, &r.from_id)?, index_of(index, &r.to_id)?);
        if !(r.distance >= 0.0) {
            return Err(Error::Data(format!(
                "edge {} -> {} has invalid distance {}",
                r.from_id, r.to_id, r.distance
            )));
        }
        if i != j {
            d.set2(i, j, r.distance);
        }
    }
    Ok(d)
}

impl TrafficGraph {
    /// Builds the graph from sensor ids and directed road-network edges.
    ///
    /// Nodes are ordered by [`sort_sensor_ids`]. `full_distances` is the
    /// distance table used by [`W1Mode::FullKernel`]; when absent the edge
    /// list doubles as the table.
    pub fn from_edges(
        sensor_ids: &[String],
        edges: &[EdgeRecord],
        full_distances: Option<&[EdgeRecord]>,
        opts: &GraphOptions,
    ) -> Result<Self> {
        let mut node_ids: Vec<String> = sensor_ids.iter().map(|s| s.trim().to_string()).collect();
        sort_sensor_ids(&mut node_ids);
        node_ids.dedup();
        let n = node_ids.len();
        if n == 0 {
            return Err(Error::Data("empty sensor list".into()));
        }
        let index: HashMap<&str, usize> = node_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

        let edge_dist = distance_matrix(&index, n, edges)?;
        let mut w0 = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if edge_dist.get2(i, j).is_finite() {
                    w0.set2(i, j, 1.0);
                }
            }
        }
        let kernel_dist = match opts.w1_mode {
            W1Mode::ConnectedOnly => edge_dist.clone(),
            W1Mode::FullKernel => match full_distances {
                Some(table) => distance_matrix(&index, n, table)?,
                None => edge_dist.clone(),
            },
        };
        let any_distance = (0..n).any(|i| (0..n).any(|j| i != j && kernel_dist.get2(i, j).is_finite()));
        let w1 = if any_distance {
            build_weighted_adjacency(&kernel_dist, distance_sigma(&kernel_dist), opts.epsilon)?
        } else {
            Tensor::zeros(&[n, n])
        };

        // distances reported per pair: prefer the road-network value
        let mut distances = kernel_dist;
        for i in 0..n {
            for j in 0..n {
                let d = edge_dist.get2(i, j);
                if d.is_finite() {
                    distances.set2(i, j, d);
                }
            }
        }
        Ok(Self {
            node_ids,
            w0,
            w1,
            distances,
        })
    }

    /// Builds a graph directly from matrices (already in node order).
    pub fn from_matrices(node_ids: Vec<String>, w0: Tensor, w1: Tensor, distances: Tensor) -> Result<Self> {
        let n = node_ids.len();
        for (name, m) in [("w0", &w0), ("w1", &w1), ("distances", &distances)] {
            if m.shape() != [n, n] {
                return Err(Error::dim("from_matrices", format!("{name} is {:?}, need [{n}, {n}]", m.shape())));
            }
        }
        for i in 0..n {
            for j in 0..n {
                let b = w0.get2(i, j);
                if b != 0.0 && b != 1.0 || (i == j && b != 0.0) {
                    return Err(Error::Data(format!("W0[{i}][{j}] = {b} is not a valid binary entry")));
                }
                let w = w1.get2(i, j);
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::Data(format!("W1[{i}][{j}] = {w} outside [0, 1]")));
                }
            }
        }
        Ok(Self {
            node_ids,
            w0,
            w1,
            distances,
        })
    }

    pub fn n(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn w0(&self) -> &Tensor {
        &self.w0
    }

    pub fn w1(&self) -> &Tensor {
        &self.w1
    }

    pub fn distances(&self) -> &Tensor {
        &self.distances
    }

    /// Directed edges `(from, to)` of W0 in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.w0.get2(i, j) != 0.0)
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.w0.data().iter().filter(|&&x| x != 0.0).count()
    }

    /// Relabels nodes: new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract("not a permutation".into()));
        }
        let pm = |m: &Tensor| {
            let mut out = Tensor::zeros(&[n, n]);
            for i in 0..n {
                for j in 0..n {
                    out.set2(i, j, m.get2(perm[i], perm[j]));
                }
            }
            out
        };
        Ok(Self {
            node_ids: perm.iter().map(|&p| self.node_ids[p].clone()).collect(),
            w0: pm(&self.w0),
            w1: pm(&self.w1),
            distances: pm(&self.distances),
        })
    }

    pub fn summary(&self, k: usize) -> GraphSummary {
        let n = self.n();
        let edges = self.edge_count();
        let w1_nonzero = self.w1.data().iter().filter(|&&x| x > 0.0).count();
        GraphSummary {
            n,
            edge_count: edges,
            w1_density: w1_nonzero as f64 / (n * n) as f64,
            average_degree: edges as f64 / n as f64,
            k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    #[serde(rename = "N")]
    pub n: usize,
    pub edge_count: usize,
    pub w1_density: f64,
    pub average_degree: f64,
    pub k: usize,
}

/// Row-normalized downstream (`A_d = D_d⁻¹W0`) and upstream
/// (`A_u = D_u⁻¹W0ᵀ`) transition matrices. Zero-degree rows stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrices {
    pub downstream: Tensor,
    pub upstream: Tensor,
}

fn row_normalize(m: &Tensor) -> Tensor {
    let n = m.rows();
    let mut out = m.clone();
    for i in 0..n {
        let s: f64 = m.row(i).iter().sum();
        if s > 0.0 {
            for j in 0..n {
                out.set2(i, j, m.get2(i, j) / s);
            }
        }
    }
    out
}

impl TransitionMatrices {
    pub fn from_w0(w0: &Tensor) -> Result<Self> {
        if w0.ndim() != 2 || w0.rows() != w0.cols() {
            return Err(Error::dim("transition", format!("{:?}", w0.shape())));
        }
        if w0.data().iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::Data("W0 must be binary".into()));
        }
        Ok(Self {
            downstream: row_normalize(w0),
            upstream: row_normalize(&w0.transpose()?),
        })
    }
}

/// Per-node k nearest upstream and downstream neighbors, nearest first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborTable {
    pub k: usize,
    pub upstream: Vec<Vec<usize>>,
    pub downstream: Vec<Vec<usize>>,
}

impl NeighborTable {
    pub fn build(graph: &TrafficGraph, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let n = graph.n();
        let (w0, w1, d) = (graph.w0(), graph.w1(), graph.distances());
        // largest weight first, then shortest distance, then lowest index
        let select = |cands: Vec<(usize, f64, f64)>| -> Vec<usize> {
            let mut c = cands;
            c.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(Ordering::Equal)
                    .then(a.2.partial_cmp(&b.2).unwrap_or(Ordering::Equal))
                    .then(a.0.cmp(&b.0))
            });
            c.into_iter().take(k).map(|(j, _, _)| j).collect()
        };
        let mut upstream = Vec::with_capacity(n);
        let mut downstream = Vec::with_capacity(n);
        for i in 0..n {
            let down = (0..n)
                .filter(|&j| w0.get2(i, j) != 0.0)
                .map(|j| (j, w1.get2(i, j), d.get2(i, j)))
                .collect();
            let up = (0..n)
                .filter(|&j| w0.get2(j, i) != 0.0)
                .map(|j| (j, w1.get2(j, i), d.get2(j, i)))
                .collect();
            downstream.push(select(down));
            upstream.push(select(up));
        }
        Ok(Self { k, upstream, downstream })
    }
}

pub fn read_sensor_ids(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let ids: Vec<String> = text
        .split(['\n', ','])
        .map(str::trim)
        .filter(|s| !s.is_empty() && *s != "sensor_id")
        .map(String::from)
        .collect();
    if ids.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "no sensor ids".into(),
        });
    }
    Ok(ids)
}

pub fn read_edges(path: &Path) -> Result<Vec<EdgeRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn write_sensor_ids(path: &Path, ids: &[String]) -> Result<()> {
    let mut text = String::from("sensor_id\n");
    for id in ids {
        text.push_str(id);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_edges(path: &Path, edges: &[EdgeRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in edges {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

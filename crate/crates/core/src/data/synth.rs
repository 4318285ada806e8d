//! Synthetic traffic generator with a closed-form signal.
//!
//! For node `i` at step `t` (288 steps per day, 2016 per week):
//!
//! ```text
//! s_i(t) = c_i + a_i · sin(2πt/288 + φ_i) · (1 + m · sin(2πt/2016 + ψ_i))
//! x_i(t) = s_i(t) + κ · mean_{j → i} s_j(t − L) + σ · ε_i(t)
//! ```
//!
//! with `ε ~ N(0, 1)`. Without noise every node, at a fixed clock time,
//! is a constant plus one sinusoid of period seven days in the day index,
//! so `x(t) = (1 + 2cos θ)·(x(t − 288) − x(t − 576)) + x(t − 864)` holds
//! exactly with `θ = 2π/7` (see [`weekly_recurrence`]).

use std::f64::consts::PI;

use chrono::NaiveDateTime;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use std::path::Path;

use super::{parse_timestamp, write_dense, write_flow_csv, FlowSeries, STEPS_PER_DAY};
use crate::error::{Error, Result};
use crate::graph::{write_edges, write_sensor_ids, EdgeRecord, GraphOptions, TrafficGraph};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Noise standard deviation σ (vehicles per step).
    pub noise_std: f64,
    /// Weekly modulation depth m.
    pub weekly_modulation: f64,
    /// Upstream coupling κ.
    pub coupling: f64,
    /// Upstream lag L in steps.
    pub lag: usize,
    /// Additional random edges on top of the ring, as a fraction of N.
    pub extra_edge_ratio: f64,
    pub start: String,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            noise_std: 5.0,
            weekly_modulation: 0.2,
            coupling: 0.3,
            lag: 3,
            extra_edge_ratio: 0.5,
            start: "2018-09-01 00:00:00".into(),
        }
    }
}

impl SynthParams {
    pub fn noiseless() -> Self {
        Self {
            noise_std: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub series: FlowSeries,
    pub graph: TrafficGraph,
    pub sensor_ids: Vec<String>,
    pub edges: Vec<EdgeRecord>,
}

/// File names written by [`SynthData::write`].
pub const SYNTH_FLOW_CSV: &str = "flow.csv";
pub const SYNTH_FLOW_BIN: &str = "flow.bin";
pub const SYNTH_FLOW_SIDECAR: &str = "flow.json";
pub const SYNTH_SENSORS: &str = "sensors.txt";
pub const SYNTH_EDGES: &str = "edges.csv";

impl SynthData {
    /// Writes raw inputs for `prepare`: long-format CSV (or a dense array with
    /// sidecar when `dense`), sensor list and edge list.
    pub fn write(&self, dir: &Path, dense: bool) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        if dense {
            write_dense(&dir.join(SYNTH_FLOW_BIN), &dir.join(SYNTH_FLOW_SIDECAR), &self.series)?;
        } else {
            write_flow_csv(&dir.join(SYNTH_FLOW_CSV), &self.series)?;
        }
        write_sensor_ids(&dir.join(SYNTH_SENSORS), &self.sensor_ids)?;
        write_edges(&dir.join(SYNTH_EDGES), &self.edges)?;
        Ok(())
    }
}

/// Closed-form one-day-ahead predictor valid for noiseless synthetic data.
pub fn weekly_recurrence(series: &[f64], t: usize, steps_per_day: usize) -> f64 {
    let c = 1.0 + 2.0 * (2.0 * PI / 7.0).cos();
    c * (series[t - steps_per_day] - series[t - 2 * steps_per_day]) + series[t - 3 * steps_per_day]
}

pub fn synth_generate(n_nodes: usize, days: usize, seed: u64, params: &SynthParams) -> Result<SynthData> {
    if n_nodes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 nodes".into()));
    }
    if days < 9 {
        return Err(Error::Config("synthetic data needs at least 9 days".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sensor_ids: Vec<String> = (0..n_nodes).map(|i| (400_001 + i).to_string()).collect();

    // ring keeps the digraph strongly connected
    let mut pairs: Vec<(usize, usize)> = (0..n_nodes).map(|i| (i, (i + 1) % n_nodes)).collect();
    if n_nodes > 2 {
        let extra = (params.extra_edge_ratio * n_nodes as f64).round() as usize;
        let mut candidates: Vec<(usize, usize)> = (0..n_nodes)
            .flat_map(|i| (0..n_nodes).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && !pairs.contains(&(i, j)))
            .collect();
        candidates.shuffle(&mut rng);
        pairs.extend(candidates.into_iter().take(extra));
    } else {
        pairs.dedup();
    }
    pairs.sort();
    let edges: Vec<EdgeRecord> = pairs
        .iter()
        .map(|&(a, b)| EdgeRecord {
            from_id: sensor_ids[a].clone(),
            to_id: sensor_ids[b].clone(),
            distance: rng.gen_range(200.0..2000.0f64).round(),
        })
        .collect();
    let graph = TrafficGraph::from_edges(&sensor_ids, &edges, None, &GraphOptions::default())?;

    let level: Vec<f64> = (0..n_nodes).map(|_| rng.gen_range(150.0..300.0)).collect();
    let amp: Vec<f64> = (0..n_nodes).map(|_| rng.gen_range(40.0..100.0)).collect();
    let day_phase: Vec<f64> = (0..n_nodes).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let week_phase: Vec<f64> = (0..n_nodes).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let base = |i: usize, t: f64| {
        let day = 2.0 * PI * t / STEPS_PER_DAY as f64;
        let week = 2.0 * PI * t / (7 * STEPS_PER_DAY) as f64;
        level[i] + amp[i] * (day + day_phase[i]).sin() * (1.0 + params.weekly_modulation * (week + week_phase[i]).sin())
    };
    let upstream: Vec<Vec<usize>> = (0..n_nodes)
        .map(|i| pairs.iter().filter(|&&(_, b)| b == i).map(|&(a, _)| a).collect())
        .collect();

    let t_len = days * STEPS_PER_DAY;
    let mut values = vec![0.0; n_nodes * t_len];
    for i in 0..n_nodes {
        for t in 0..t_len {
            let tf = t as f64;
            let coupled = if upstream[i].is_empty() {
                0.0
            } else {
                upstream[i].iter().map(|&j| base(j, tf - params.lag as f64)).sum::<f64>() / upstream[i].len() as f64
            };
            let noise: f64 = if params.noise_std > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                params.noise_std * z
            } else {
                0.0
            };
            values[i * t_len + t] = base(i, tf) + params.coupling * coupled + noise;
        }
    }
    let start: NaiveDateTime = parse_timestamp(&params.start)?;
    let series = FlowSeries::new(
        sensor_ids.clone(),
        Tensor::new(&[n_nodes, 1, t_len], values)?,
        start,
        super::STEP_MINUTES,
        vec![false; n_nodes * t_len],
    )?;
    Ok(SynthData {
        series,
        graph,
        sensor_ids,
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_is_bit_identical() {
        let p = SynthParams::default();
        let a = synth_generate(5, 9, 3, &p).unwrap();
        let b = synth_generate(5, 9, 3, &p).unwrap();
        assert_eq!(a.series, b.series);
        assert_eq!(a.edges, b.edges);
        let c = synth_generate(5, 9, 4, &p).unwrap();
        assert_ne!(a.series.values, c.series.values);
    }

    #[test]
    fn unmodulated_noiseless_days_repeat() {
        let p = SynthParams {
            weekly_modulation: 0.0,
            ..SynthParams::noiseless()
        };
        let d = synth_generate(4, 9, 1, &p).unwrap();
        let t = d.series.len();
        for node in 0..4 {
            for i in STEPS_PER_DAY..t {
                let (x, y) = (d.series.value(node, 0, i), d.series.value(node, 0, i - STEPS_PER_DAY));
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn noiseless_series_obeys_weekly_recurrence() {
        let d = synth_generate(6, 10, 9, &SynthParams::noiseless()).unwrap();
        let t = d.series.len();
        for node in 0..6 {
            let s: Vec<f64> = (0..t).map(|i| d.series.value(node, 0, i)).collect();
            for i in (3 * STEPS_PER_DAY..t).step_by(37) {
                assert!((weekly_recurrence(&s, i, STEPS_PER_DAY) - s[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn average_degree_is_edges_over_nodes() {
        let d = synth_generate(10, 9, 2, &SynthParams::default()).unwrap();
        let s = d.graph.summary(3);
        assert_eq!(s.average_degree, d.edges.len() as f64 / 10.0);
        assert_eq!(s.edge_count, d.edges.len());
    }

    #[test]
    fn rejects_tiny_configs() {
        assert!(synth_generate(1, 9, 0, &SynthParams::default()).is_err());
        assert!(synth_generate(3, 8, 0, &SynthParams::default()).is_err());
    }
}

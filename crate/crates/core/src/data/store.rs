//! Prepared dataset directory.
//!
//! ```text
//! manifest.json          counts, split boundaries, norm stats, config hash
//! series.bin             cleaned N×F×T series, little-endian f64
//! mask.bin               N×T original-gap mask, one byte per step
//! anchors_{split}.bin    window anchors per split, little-endian u64
//! sensors.txt, edges.csv graph metadata (plus distances.csv in full-kernel mode)
//! graph_summary.json
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::*;
use crate::graph::{self, EdgeRecord, GraphOptions, GraphSummary, TrafficGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub layout: WindowLayout,
    pub graph: GraphOptions,
    pub k: usize,
}

impl DataConfig {
    /// Reads a TOML or JSON file, chosen by extension (TOML otherwise).
    pub fn load(path: &Path) -> Result<Self> {
        crate::load_config(path)
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            layout: WindowLayout::default(),
            graph: GraphOptions::default(),
            k: crate::graph::DEFAULT_K,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub start: usize,
    pub end: usize,
    pub windows: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub n_nodes: usize,
    pub features: usize,
    pub steps: usize,
    pub start: String,
    pub step_minutes: i64,
    pub config: DataConfig,
    pub train: SplitInfo,
    pub val: SplitInfo,
    pub test: SplitInfo,
    pub norm_stats: NormStats,
    pub missing_steps: usize,
    pub graph: GraphSummary,
    pub has_distance_table: bool,
    pub config_hash: String,
}

/// Raw inputs to [`prepare`].
#[derive(Clone, Debug)]
pub enum FlowInput {
    Csv(PathBuf),
    Dense { bin: PathBuf, sidecar: PathBuf },
}

#[derive(Clone, Debug)]
pub struct PrepareInputs {
    pub flow: FlowInput,
    pub sensors: PathBuf,
    pub edges: PathBuf,
    pub distances: Option<PathBuf>,
}

impl PrepareInputs {
    /// Inputs laid out as written by [`SynthData::write`](super::SynthData::write).
    pub fn synth_layout(dir: &Path, dense: bool) -> Self {
        Self {
            flow: if dense {
                FlowInput::Dense {
                    bin: dir.join(super::SYNTH_FLOW_BIN),
                    sidecar: dir.join(super::SYNTH_FLOW_SIDECAR),
                }
            } else {
                FlowInput::Csv(dir.join(super::SYNTH_FLOW_CSV))
            },
            sensors: dir.join(super::SYNTH_SENSORS),
            edges: dir.join(super::SYNTH_EDGES),
            distances: None,
        }
    }
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "length is not a multiple of 8".into(),
        });
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_u64s(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "length is not a multiple of 8".into(),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect())
}

fn split_info(layout: &WindowLayout, range: std::ops::Range<usize>) -> (SplitInfo, Vec<usize>) {
    let (anchors, skipped) = layout.anchors(range.clone());
    (
        SplitInfo {
            start: range.start,
            end: range.end,
            windows: anchors.len(),
            skipped,
        },
        anchors,
    )
}

/// Ingests, cleans and windows raw data into `out_dir`.
pub fn prepare(inputs: &PrepareInputs, config: &DataConfig, out_dir: &Path) -> Result<Manifest> {
    config.layout.validate()?;
    let sensor_ids = graph::read_sensor_ids(&inputs.sensors)?;
    let edges = graph::read_edges(&inputs.edges)?;
    let table = inputs.distances.as_deref().map(graph::read_edges).transpose()?;
    let graph = TrafficGraph::from_edges(&sensor_ids, &edges, table.as_deref(), &config.graph)?;
    let ids = graph.node_ids().to_vec();

    let raw = match &inputs.flow {
        FlowInput::Csv(p) => ingest_csv(&read_flow_csv(p)?, &ids, STEP_MINUTES)?,
        FlowInput::Dense { bin, sidecar } => ingest_dense(bin, sidecar, &ids)?,
    };
    if raw.steps_per_day() != config.layout.steps_per_day {
        return Err(Error::Config(format!(
            "data has {} steps per day, layout expects {}",
            raw.steps_per_day(),
            config.layout.steps_per_day
        )));
    }
    let series = interpolate_missing(&raw)?;
    let splits = chronological_split(series.len());
    let norm_stats = NormStats::fit(&series.values, splits.train.clone())?;
    let (train, train_a) = split_info(&config.layout, splits.train.clone());
    let (val, val_a) = split_info(&config.layout, splits.val.clone());
    let (test, test_a) = split_info(&config.layout, splits.test.clone());
    if train.windows == 0 {
        return Err(Error::Data(format!(
            "no training windows: {} steps available, {} needed for history",
            splits.train.len(),
            config.layout.warmup() + config.layout.horizon
        )));
    }

    std::fs::create_dir_all(out_dir)?;
    let series_bytes = f64_bytes(series.values.data());
    std::fs::write(out_dir.join("series.bin"), &series_bytes)?;
    std::fs::write(
        out_dir.join("mask.bin"),
        series.missing.iter().map(|&m| m as u8).collect::<Vec<u8>>(),
    )?;
    for (name, anchors) in [("train", &train_a), ("val", &val_a), ("test", &test_a)] {
        let bytes: Vec<u8> = anchors.iter().flat_map(|&a| (a as u64).to_le_bytes()).collect();
        std::fs::write(out_dir.join(format!("anchors_{name}.bin")), bytes)?;
    }
    graph::write_sensor_ids(&out_dir.join("sensors.txt"), &ids)?;
    graph::write_edges(&out_dir.join("edges.csv"), &edges)?;
    if let Some(t) = &table {
        graph::write_edges(&out_dir.join("distances.csv"), t)?;
    }
    let summary = graph.summary(config.k);
    std::fs::write(out_dir.join("graph_summary.json"), serde_json::to_string_pretty(&summary)?)?;

    let mut manifest = Manifest {
        format_version: 1,
        n_nodes: series.n(),
        features: series.features(),
        steps: series.len(),
        start: series.start.format(TIMESTAMP_FORMAT).to_string(),
        step_minutes: series.step_minutes,
        config: config.clone(),
        train,
        val,
        test,
        norm_stats,
        missing_steps: series.missing_count(),
        graph: summary,
        has_distance_table: table.is_some(),
        config_hash: String::new(),
    };
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&manifest)?);
    h.update(&series_bytes);
    h.update(std::fs::read(out_dir.join("sensors.txt"))?);
    h.update(std::fs::read(out_dir.join("edges.csv"))?);
    if table.is_some() {
        h.update(std::fs::read(out_dir.join("distances.csv"))?);
    }
    manifest.config_hash = hex::encode(h.finalize());
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A prepared dataset loaded back from disk.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub graph: TrafficGraph,
    /// Cleaned, denormalized series.
    pub series: FlowSeries,
    pub normalized: Arc<Tensor>,
    pub train: WindowSource,
    pub val: WindowSource,
    pub test: WindowSource,
}

impl PreparedDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(Error::Format {
                path: manifest_path,
                detail: "missing manifest".into(),
            });
        }
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        let ids = graph::read_sensor_ids(&dir.join("sensors.txt"))?;
        let edges: Vec<EdgeRecord> = graph::read_edges(&dir.join("edges.csv"))?;
        let table = if manifest.has_distance_table {
            Some(graph::read_edges(&dir.join("distances.csv"))?)
        } else {
            None
        };
        let graph = TrafficGraph::from_edges(&ids, &edges, table.as_deref(), &manifest.config.graph)?;
        let (n, f, t) = (manifest.n_nodes, manifest.features, manifest.steps);
        let values = Tensor::new(&[n, f, t], read_f64s(&dir.join("series.bin"))?)?;
        let mask: Vec<bool> = std::fs::read(dir.join("mask.bin"))?.into_iter().map(|b| b != 0).collect();
        let series = FlowSeries::new(
            graph.node_ids().to_vec(),
            values,
            parse_timestamp(&manifest.start)?,
            manifest.step_minutes,
            mask,
        )?;
        let normalized = Arc::new(manifest.norm_stats.normalize(&series.values)?);
        let layout = manifest.config.layout;
        let src = |name: &str| -> Result<WindowSource> {
            WindowSource::new(normalized.clone(), layout, read_u64s(&dir.join(format!("anchors_{name}.bin")))?)
        };
        let (train, val, test) = (src("train")?, src("val")?, src("test")?);
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            graph,
            series,
            normalized,
            train,
            val,
            test,
        })
    }

    pub fn split(&self, name: &str) -> Result<&WindowSource> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

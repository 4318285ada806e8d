use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::{FlowSeries, TIMESTAMP_FORMAT};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One row of a long-format flow file: `timestamp,sensor_id,flow`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub timestamp: String,
    pub sensor_id: String,
    pub flow: f64,
}

pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    for fmt in [
        TIMESTAMP_FORMAT,
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
        "%m/%d/%Y %H:%M:%S",
    ] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t);
        }
    }
    Err(Error::Data(format!("unparseable timestamp `{s}`")))
}

pub fn read_flow_csv(path: &Path) -> Result<Vec<FlowRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_flow_csv(path: &Path, series: &FlowSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["timestamp", "sensor_id", "flow"])?;
    for t in 0..series.len() {
        let ts = series.timestamp(t).format(TIMESTAMP_FORMAT).to_string();
        for (node, id) in series.sensor_ids.iter().enumerate() {
            if series.is_missing(node, t) {
                continue;
            }
            w.write_record([ts.as_str(), id.as_str(), &series.value(node, 0, t).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn floor_to_step(t: NaiveDateTime, origin: NaiveDateTime, step_minutes: i64) -> i64 {
    let secs = (t - origin).num_seconds();
    secs.div_euclid(step_minutes * 60)
}

/// Aggregates long-format records into an `N×1×T` series over `sensor_ids`.
///
/// Records falling into the same step are summed. Steps without any record
/// for a sensor are marked missing. Timestamps must be non-decreasing.
pub fn ingest_csv(records: &[FlowRecord], sensor_ids: &[String], step_minutes: i64) -> Result<FlowSeries> {
    if records.is_empty() {
        return Err(Error::Data("no flow records".into()));
    }
    let index: HashMap<&str, usize> = sensor_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut parsed = Vec::with_capacity(records.len());
    let mut prev: Option<NaiveDateTime> = None;
    for r in records {
        let ts = parse_timestamp(&r.timestamp)?;
        if let Some(p) = prev {
            if ts < p {
                return Err(Error::Data(format!(
                    "timestamps not monotonic: {} after {}",
                    r.timestamp,
                    p.format(TIMESTAMP_FORMAT)
                )));
            }
        }
        prev = Some(ts);
        let node = *index
            .get(r.sensor_id.trim())
            .ok_or_else(|| Error::UnknownSensor(r.sensor_id.clone()))?;
        parsed.push((ts, node, r.flow));
    }
    let epoch = NaiveDateTime::parse_from_str("1970-01-01 00:00:00", TIMESTAMP_FORMAT).expect("epoch");
    let first_bin = floor_to_step(parsed[0].0, epoch, step_minutes);
    let last_bin = floor_to_step(parsed.last().unwrap().0, epoch, step_minutes);
    let t = (last_bin - first_bin + 1) as usize;
    let n = sensor_ids.len();
    let mut values = vec![0.0; n * t];
    let mut seen = vec![false; n * t];
    for (ts, node, flow) in parsed {
        let bin = (floor_to_step(ts, epoch, step_minutes) - first_bin) as usize;
        values[node * t + bin] += flow;
        seen[node * t + bin] = true;
    }
    for (v, &s) in values.iter_mut().zip(&seen) {
        if !s {
            *v = f64::NAN;
        }
    }
    let start = epoch + Duration::minutes(first_bin * step_minutes);
    FlowSeries::new(
        sensor_ids.to_vec(),
        Tensor::new(&[n, 1, t], values)?,
        start,
        step_minutes,
        seen.into_iter().map(|s| !s).collect(),
    )
}

/// JSON sidecar describing a dense little-endian `f64` array file of shape
/// `[T, N, F]` (time-major). NaN entries are treated as missing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseSidecar {
    pub shape: [usize; 3],
    pub start: String,
    pub step_minutes: i64,
    pub sensor_ids: Vec<String>,
}

pub fn ingest_dense(bin_path: &Path, sidecar_path: &Path, sensor_ids: &[String]) -> Result<FlowSeries> {
    let sidecar: DenseSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
    let [t, n_file, f] = sidecar.shape;
    if sidecar.sensor_ids.len() != n_file {
        return Err(Error::Format {
            path: sidecar_path.to_path_buf(),
            detail: format!("{} sensor ids for {n_file} columns", sidecar.sensor_ids.len()),
        });
    }
    let mut bytes = Vec::new();
    std::fs::File::open(bin_path)?.read_to_end(&mut bytes)?;
    if bytes.len() != t * n_file * f * 8 {
        return Err(Error::Format {
            path: bin_path.to_path_buf(),
            detail: format!("expected {} bytes, found {}", t * n_file * f * 8, bytes.len()),
        });
    }
    let raw: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let file_index: HashMap<&str, usize> = sidecar.sensor_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    for id in &sidecar.sensor_ids {
        if !sensor_ids.contains(id) {
            return Err(Error::UnknownSensor(id.clone()));
        }
    }
    let n = sensor_ids.len();
    let mut values = vec![f64::NAN; n * f * t];
    let mut missing = vec![true; n * t];
    for (node, id) in sensor_ids.iter().enumerate() {
        let Some(&col) = file_index.get(id.as_str()) else { continue };
        for step in 0..t {
            let mut any_missing = false;
            for feat in 0..f {
                let v = raw[(step * n_file + col) * f + feat];
                any_missing |= !v.is_finite();
                values[(node * f + feat) * t + step] = v;
            }
            missing[node * t + step] = any_missing;
        }
    }
    FlowSeries::new(
        sensor_ids.to_vec(),
        Tensor::new(&[n, f, t], values)?,
        parse_timestamp(&sidecar.start)?,
        sidecar.step_minutes,
        missing,
    )
}

pub fn write_dense(bin_path: &Path, sidecar_path: &Path, series: &FlowSeries) -> Result<()> {
    let (n, f, t) = (series.n(), series.features(), series.len());
    let mut out = std::io::BufWriter::new(std::fs::File::create(bin_path)?);
    for step in 0..t {
        for node in 0..n {
            for feat in 0..f {
                let v = if series.is_missing(node, step) {
                    f64::NAN
                } else {
                    series.value(node, feat, step)
                };
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    let sidecar = DenseSidecar {
        shape: [t, n, f],
        start: series.start.format(TIMESTAMP_FORMAT).to_string(),
        step_minutes: series.step_minutes,
        sensor_ids: series.sensor_ids.clone(),
    };
    std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(ts: &str, id: &str, flow: f64) -> FlowRecord {
        FlowRecord {
            timestamp: ts.into(),
            sensor_id: id.into(),
            flow,
        }
    }

    fn ids() -> Vec<String> {
        vec!["1".into(), "2".into()]
    }

    #[test]
    fn thirty_second_records_sum_into_interval() {
        let recs: Vec<_> = (0..6)
            .map(|i| rec(&format!("2018-09-01 00:0{}:{:02}", i / 2, (i % 2) * 30), "1", 10.0))
            .chain(std::iter::once(rec("2018-09-01 00:04:30", "2", 3.0)))
            .collect();
        let s = ingest_csv(&recs, &ids(), 5).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.value(0, 0, 0), 60.0);
        assert_eq!(s.value(1, 0, 0), 3.0);
    }

    #[test]
    fn five_minute_passthrough_and_gap_mask() {
        let mut recs = Vec::new();
        for (i, m) in [0, 5, 25].iter().enumerate() {
            let ts = format!("2018-09-01 00:{m:02}:00");
            recs.push(rec(&ts, "1", i as f64));
            recs.push(rec(&ts, "2", 1.0));
        }
        let s = ingest_csv(&recs, &ids(), 5).unwrap();
        assert_eq!(s.len(), 6);
        assert!(!s.is_missing(0, 0) && !s.is_missing(0, 1));
        // 15-minute gap between 00:05 and 00:25
        assert_eq!((2..5).filter(|&t| s.is_missing(0, t)).count(), 3);
        assert_eq!(s.missing_count(), 6);
    }

    #[test]
    fn unknown_sensor_and_order_errors() {
        let r = ingest_csv(&[rec("2018-09-01 00:00:00", "7", 1.0)], &ids(), 5);
        assert!(matches!(r, Err(Error::UnknownSensor(_))));
        let r = ingest_csv(
            &[rec("2018-09-01 00:10:00", "1", 1.0), rec("2018-09-01 00:05:00", "1", 1.0)],
            &ids(),
            5,
        );
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn dense_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = Vec::new();
        for m in [0, 5, 10] {
            recs.push(rec(&format!("2018-09-01 00:{m:02}:00"), "1", m as f64));
        }
        recs.push(rec("2018-09-01 00:10:00", "2", 4.0));
        let s = ingest_csv(&recs, &ids(), 5).unwrap();
        let (b, j) = (dir.path().join("f.bin"), dir.path().join("f.json"));
        write_dense(&b, &j, &s).unwrap();
        let back = ingest_dense(&b, &j, &ids()).unwrap();
        assert_eq!(back.missing, s.missing);
        assert_eq!(back.start, s.start);
        assert_eq!(back.value(0, 0, 2), 10.0);
        assert_eq!(back.value(1, 0, 2), 4.0);
    }
}

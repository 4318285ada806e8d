use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Targets with `|y|` below this are excluded from MAPE.
pub const MAPE_MASK_THRESHOLD: f64 = 1.0;

/// Reported horizons in steps (15, 30 and 60 minutes at 5-minute steps).
pub const REPORT_HORIZONS: [usize; 3] = [3, 6, 12];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when every target is masked.
    pub mape: Option<f64>,
    pub mape_masked_fraction: f64,
    pub count: usize,
}

impl Metrics {
    pub fn compute(pred: &[f64], target: &[f64]) -> Result<Self> {
        if pred.len() != target.len() {
            return Err(Error::dim(
                "metrics",
                format!("{} predictions for {} targets", pred.len(), target.len()),
            ));
        }
        if pred.is_empty() {
            return Err(Error::Data("no values to score".into()));
        }
        let n = pred.len() as f64;
        let (mut abs, mut sq, mut pct, mut kept) = (0.0, 0.0, 0.0, 0usize);
        for (&p, &y) in pred.iter().zip(target) {
            let e = p - y;
            abs += e.abs();
            sq += e * e;
            if y.abs() >= MAPE_MASK_THRESHOLD {
                pct += (e / y).abs();
                kept += 1;
            }
        }
        let m = Self {
            mae: abs / n,
            rmse: (sq / n).sqrt(),
            mape: (kept > 0).then(|| 100.0 * pct / kept as f64),
            mape_masked_fraction: (pred.len() - kept) as f64 / n,
            count: pred.len(),
        };
        assert!(m.mae <= m.rmse * (1.0 + 1e-12) + 1e-300, "MAE {} exceeds RMSE {}", m.mae, m.rmse);
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub step: usize,
    pub minutes: i64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizons: Vec<HorizonMetrics>,
    pub overall: Metrics,
}

impl MetricsReport {
    /// `pred` and `target` are per-sample `N×K` row-major blocks of
    /// denormalized values.
    pub fn from_predictions(pred: &[Vec<f64>], target: &[Vec<f64>], horizon: usize, step_minutes: i64) -> Result<Self> {
        if pred.len() != target.len() || pred.is_empty() {
            return Err(Error::Data("prediction and target sample counts differ or are empty".into()));
        }
        let mut horizons = Vec::new();
        for &h in REPORT_HORIZONS.iter().filter(|&&h| h <= horizon) {
            let pick =
                |blocks: &[Vec<f64>]| -> Vec<f64> { blocks.iter().flat_map(|b| b.iter().skip(h - 1).step_by(horizon).copied()).collect() };
            horizons.push(HorizonMetrics {
                step: h,
                minutes: h as i64 * step_minutes,
                metrics: Metrics::compute(&pick(pred), &pick(target))?,
            });
        }
        let flat = |blocks: &[Vec<f64>]| -> Vec<f64> { blocks.concat() };
        Ok(Self {
            horizons,
            overall: Metrics::compute(&flat(pred), &flat(target))?,
        })
    }

    /// Aligned text table with MAE / RMSE / MAPE per horizon.
    pub fn table(&self) -> String {
        let fmt_mape = |m: &Metrics| m.mape.map_or("n/a".to_string(), |v| format!("{v:.2}"));
        let mut s = String::new();
        let mut header = format!("{:<10}", "");
        let mut cols = format!("{:<10}", "Metric");
        for h in &self.horizons {
            let _ = write!(header, "| {:^26} ", format!("{} min", h.minutes));
            let _ = write!(cols, "| {:>8} {:>8} {:>8} ", "MAE", "RMSE", "MAPE(%)");
        }
        let _ = write!(header, "| {:^26}", "overall");
        let _ = write!(cols, "| {:>8} {:>8} {:>8}", "MAE", "RMSE", "MAPE(%)");
        let mut row = format!("{:<10}", "value");
        for h in &self.horizons {
            let m = &h.metrics;
            let _ = write!(row, "| {:>8.2} {:>8.2} {:>8} ", m.mae, m.rmse, fmt_mape(m));
        }
        let o = &self.overall;
        let _ = write!(row, "| {:>8.2} {:>8.2} {:>8}", o.mae, o.rmse, fmt_mape(o));
        let _ = writeln!(s, "{header}");
        let _ = writeln!(s, "{cols}");
        let _ = writeln!(s, "{row}");
        let _ = writeln!(
            s,
            "MAPE masked fraction (|y| < {MAPE_MASK_THRESHOLD}): {:.4}",
            o.mape_masked_fraction
        );
        s
    }
}

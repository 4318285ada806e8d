use super::FlowSeries;
use crate::error::{Error, Result};

/// Fills every missing step by linear interpolation between the nearest
/// observed neighbors; leading and trailing gaps take the nearest observed
/// value. The missing mask is kept as a record of the original gaps.
pub fn interpolate_missing(series: &FlowSeries) -> Result<FlowSeries> {
    let (n, f, t) = (series.n(), series.features(), series.len());
    let mut out = series.clone();
    for node in 0..n {
        let observed: Vec<usize> = (0..t).filter(|&i| !series.is_missing(node, i)).collect();
        let (Some(&first), Some(&last)) = (observed.first(), observed.last()) else {
            return Err(Error::FullyMissing(series.sensor_ids[node].clone()));
        };
        for feat in 0..f {
            let base = (node * f + feat) * t;
            let row = &mut out.values.data_mut()[base..base + t];
            for v in row[..first].iter_mut() {
                *v = series.values.data()[base + first];
            }
            for v in row[last + 1..].iter_mut() {
                *v = series.values.data()[base + last];
            }
            for w in observed.windows(2) {
                let (a, b) = (w[0], w[1]);
                if b == a + 1 {
                    continue;
                }
                let (ya, yb) = (row[a], row[b]);
                let span = (b - a) as f64;
                for (i, v) in row.iter_mut().enumerate().take(b).skip(a + 1) {
                    let frac = (i - a) as f64 / span;
                    *v = ya + (yb - ya) * frac;
                }
            }
        }
    }
    out.values.validate_finite("interpolated series")?;
    Ok(out)
}

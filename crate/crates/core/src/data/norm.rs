use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-feature zero-mean normalization statistics (population std).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics of an `N×F×T` tensor restricted to steps in `range`.
    pub fn fit(values: &Tensor, range: std::ops::Range<usize>) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::dim("norm stats", format!("{:?}", values.shape())));
        }
        let (n, f, t) = (values.shape()[0], values.shape()[1], values.shape()[2]);
        if range.is_empty() || range.end > t {
            return Err(Error::Data(format!("bad statistics range {range:?} for {t} steps")));
        }
        let mut mean = vec![0.0; f];
        let mut std = vec![0.0; f];
        let count = (n * range.len()) as f64;
        for feat in 0..f {
            let vals = (0..n).flat_map(|node| {
                let base = (node * f + feat) * t;
                values.data()[base + range.start..base + range.end].iter().copied()
            });
            let m = vals.clone().sum::<f64>() / count;
            let var = vals.map(|v| (v - m).powi(2)).sum::<f64>() / count;
            if !(var > 0.0) {
                return Err(Error::Degenerate(format!("feature {feat} has zero variance")));
            }
            mean[feat] = m;
            std[feat] = var.sqrt();
        }
        Ok(Self { mean, std })
    }

    fn check(&self, values: &Tensor) -> Result<(usize, usize, usize)> {
        if values.ndim() != 3 || values.shape()[1] != self.mean.len() {
            return Err(Error::dim(
                "normalize",
                format!("{:?} for {} features", values.shape(), self.mean.len()),
            ));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Degenerate("zero standard deviation".into()));
        }
        Ok((values.shape()[0], values.shape()[1], values.shape()[2]))
    }

    fn apply(&self, values: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let (_, nf, t) = self.check(values)?;
        let mut out = values.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let feat = (i / t) % nf;
            *v = f(*v, self.mean[feat], self.std[feat]);
        }
        Ok(out)
    }

    pub fn normalize(&self, values: &Tensor) -> Result<Tensor> {
        self.apply(values, |x, m, s| (x - m) / s)
    }

    pub fn denormalize(&self, values: &Tensor) -> Result<Tensor> {
        self.apply(values, |x, m, s| x * s + m)
    }

    pub fn normalize_value(&self, feature: usize, x: f64) -> f64 {
        (x - self.mean[feature]) / self.std[feature]
    }

    pub fn denormalize_value(&self, feature: usize, x: f64) -> f64 {
        x * self.std[feature] + self.mean[feature]
    }
}

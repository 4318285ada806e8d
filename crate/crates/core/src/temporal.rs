//! Cycle-based dilated deformable temporal convolution.
//!
//! Each rate `M` in the rate set convolves a per-node, per-feature series of
//! length `T` with a depthwise kernel of `K_S(M)` taps, evaluated at the last
//! timestep: `out_f = Σ_p g_f(p) · x̃_f(T − M·p + Δp)`. Positions are 1-based.
//! Fractional positions are resolved by linear interpolation and clamped to
//! `[1, T]`. The rate outputs are concatenated and fused by a linear map Ω.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Dilation rates and their kernel sizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DilatedRateSet {
    pub rates: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
}

impl DilatedRateSet {
    pub fn new(rates: Vec<usize>, kernel_sizes: Vec<usize>) -> Self {
        Self { rates, kernel_sizes }
    }

    /// Recent/daily/weekly rates `{1, 12, 84}` with kernels `{12, 8, 2}`.
    pub fn traffic_default() -> Self {
        Self::new(vec![1, 12, 84], vec![12, 8, 2])
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn validate(&self, window: usize) -> Result<()> {
        if self.rates.is_empty() {
            return Err(Error::Config("empty dilated rate set".into()));
        }
        if self.rates.len() != self.kernel_sizes.len() {
            return Err(Error::Config(format!(
                "{} rates but {} kernel sizes",
                self.rates.len(),
                self.kernel_sizes.len()
            )));
        }
        for (i, (&m, &ks)) in self.rates.iter().zip(&self.kernel_sizes).enumerate() {
            if m == 0 || ks == 0 {
                return Err(Error::Config("rates and kernel sizes must be >= 1".into()));
            }
            if self.rates[..i].contains(&m) {
                return Err(Error::Config(format!("duplicate rate {m}")));
            }
            if (ks - 1) * m >= window {
                return Err(Error::Config(format!(
                    "receptive field of rate {m} with {ks} taps exceeds window {window}"
                )));
            }
        }
        Ok(())
    }
}

/// Largest usable offset magnitude for rate `m`: a tap stays strictly
/// closer than one cycle to its nominal position.
pub fn max_offset(rate: usize) -> f64 {
    rate as f64 * (1.0 - 1e-9)
}

/// Resolved sampling position for one tap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    /// 0-based index of the lower interpolation point.
    pub lo: usize,
    /// 0-based index of the upper interpolation point (may equal `lo`).
    pub hi: usize,
    /// Interpolation weight on `hi`.
    pub alpha: f64,
    /// `d position / d Δp` is 1 inside the window and inside the offset bound, 0 otherwise.
    pub movable: bool,
}

impl Tap {
    pub fn resolve(len: usize, rate: usize, p: usize, offset: f64) -> Tap {
        let bound = max_offset(rate);
        let (delta, offset_free) = if offset > bound {
            (bound, false)
        } else if offset < -bound {
            (-bound, false)
        } else {
            (offset, true)
        };
        let pos = len as f64 - (rate * p) as f64 + delta;
        if len == 1 {
            return Tap {
                lo: 0,
                hi: 0,
                alpha: 0.0,
                movable: false,
            };
        }
        if pos < 1.0 {
            return Tap {
                lo: 0,
                hi: 1,
                alpha: 0.0,
                movable: false,
            };
        }
        if pos > len as f64 {
            return Tap {
                lo: len - 2,
                hi: len - 1,
                alpha: 1.0,
                movable: false,
            };
        }
        let base = (pos.floor() as usize).min(len - 1);
        Tap {
            lo: base - 1,
            hi: base,
            alpha: pos - base as f64,
            movable: offset_free,
        }
    }

    pub fn sample(&self, series: &[f64]) -> f64 {
        (1.0 - self.alpha) * series[self.lo] + self.alpha * series[self.hi]
    }
}

/// Plain cycle-dilated convolution of one series at its last timestep.
pub fn dilated_conv_series(series: &[f64], rate: usize, kernel: &[f64]) -> f64 {
    let t = series.len();
    let mut acc = 0.0;
    for (p, &g) in kernel.iter().enumerate() {
        acc += g * series[t - 1 - rate * p];
    }
    acc
}

/// Deformable variant of [`dilated_conv_series`] with one offset per tap.
pub fn deformable_conv_series(series: &[f64], rate: usize, kernel: &[f64], offsets: &[f64]) -> f64 {
    let t = series.len();
    let mut acc = 0.0;
    for (p, (&g, &dp)) in kernel.iter().zip(offsets).enumerate() {
        acc += g * Tap::resolve(t, rate, p, dp).sample(series);
    }
    acc
}

fn check_conv_shapes(x: &Tensor, kernel: &Tensor, offsets: Option<&Tensor>, rate: usize) -> Result<(usize, usize, usize, usize)> {
    if x.ndim() != 3 {
        return Err(Error::dim("temporal conv", format!("input must be N×F×T, got {:?}", x.shape())));
    }
    let (n, f, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if kernel.ndim() != 2 || kernel.shape()[0] != f {
        return Err(Error::dim("temporal conv", format!("kernel {:?} for {f} features", kernel.shape())));
    }
    let ks = kernel.shape()[1];
    if let Some(o) = offsets {
        if o.numel() != ks {
            return Err(Error::dim("temporal conv", format!("{} offsets for {ks} taps", o.numel())));
        }
    }
    if rate == 0 || (ks - 1) * rate >= t {
        return Err(Error::Config(format!(
            "receptive field of rate {rate} with {ks} taps exceeds window {t}"
        )));
    }
    Ok((n, f, t, ks))
}

/// `N×F×T` input, `F×K` kernel → `N×F`.
pub fn cycle_dilated_conv(x: &Tensor, rate: usize, kernel: &Tensor) -> Result<Tensor> {
    let (n, f, t, ks) = check_conv_shapes(x, kernel, None, rate)?;
    let mut out = Vec::with_capacity(n * f);
    for node in 0..n {
        for feat in 0..f {
            let s = &x.data()[(node * f + feat) * t..(node * f + feat + 1) * t];
            out.push(dilated_conv_series(s, rate, &kernel.data()[feat * ks..(feat + 1) * ks]));
        }
    }
    Tensor::new(&[n, f], out)
}

/// `N×F×T` input, `F×K` kernel, `K` offsets → `N×F`.
pub fn cycle_dilated_deformable_conv(x: &Tensor, rate: usize, kernel: &Tensor, offsets: &Tensor) -> Result<Tensor> {
    deform_forward(x, kernel, offsets, rate)
}

pub(crate) fn deform_forward(x: &Tensor, kernel: &Tensor, offsets: &Tensor, rate: usize) -> Result<Tensor> {
    let (n, f, t, ks) = check_conv_shapes(x, kernel, Some(offsets), rate)?;
    let mut out = Vec::with_capacity(n * f);
    for node in 0..n {
        for feat in 0..f {
            let s = &x.data()[(node * f + feat) * t..(node * f + feat + 1) * t];
            out.push(deformable_conv_series(
                s,
                rate,
                &kernel.data()[feat * ks..(feat + 1) * ks],
                offsets.data(),
            ));
        }
    }
    Tensor::new(&[n, f], out)
}

pub(crate) struct DeformGrads {
    pub x: Option<Tensor>,
    pub kernel: Tensor,
    pub offsets: Tensor,
}

pub(crate) fn deform_backward(
    x: &Tensor,
    kernel: &Tensor,
    offsets: &Tensor,
    rate: usize,
    grad_out: &Tensor,
    want_x: bool,
) -> Result<DeformGrads> {
    let (n, f, t, ks) = check_conv_shapes(x, kernel, Some(offsets), rate)?;
    let taps: Vec<Tap> = (0..ks).map(|p| Tap::resolve(t, rate, p, offsets.data()[p])).collect();
    let mut dk = vec![0.0; f * ks];
    let mut doff = vec![0.0; ks];
    let mut dx = want_x.then(|| vec![0.0; n * f * t]);
    for node in 0..n {
        for feat in 0..f {
            let base = (node * f + feat) * t;
            let s = &x.data()[base..base + t];
            let g = grad_out.data()[node * f + feat];
            for (p, tap) in taps.iter().enumerate() {
                let w = kernel.data()[feat * ks + p];
                dk[feat * ks + p] += g * tap.sample(s);
                if tap.movable {
                    doff[p] += g * w * (s[tap.hi] - s[tap.lo]);
                }
                if let Some(dx) = dx.as_mut() {
                    dx[base + tap.lo] += g * w * (1.0 - tap.alpha);
                    dx[base + tap.hi] += g * w * tap.alpha;
                }
            }
        }
    }
    Ok(DeformGrads {
        x: dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        kernel: Tensor::new(kernel.shape(), dk)?,
        offsets: Tensor::new(offsets.shape(), doff)?,
    })
}

/// Parameter handles of the temporal block.
#[derive(Clone, Debug)]
pub struct TemporalBlock {
    pub rates: DilatedRateSet,
    pub kernels: Vec<ParamId>,
    pub offsets: Vec<ParamId>,
    pub omega: ParamId,
    pub features: usize,
    pub out_dim: usize,
}

impl TemporalBlock {
    /// Registers `temporal.rate{M}.kernel`, `temporal.rate{M}.offset` and
    /// `temporal.omega` in `store`.
    pub fn init<R: Rng>(store: &mut ParamStore, rates: &DilatedRateSet, features: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        let mut kernels = Vec::new();
        let mut offsets = Vec::new();
        for (&m, &ks) in rates.rates.iter().zip(&rates.kernel_sizes) {
            let bound = 1.0 / ks as f64;
            let k: Vec<f64> = (0..features * ks).map(|_| rng.gen_range(-bound..=bound)).collect();
            kernels.push(store.insert(format!("temporal.rate{m}.kernel"), Tensor::new(&[features, ks], k)?)?);
            offsets.push(store.insert(format!("temporal.rate{m}.offset"), Tensor::zeros(&[ks]))?);
        }
        let fan_in = rates.len() * features;
        let scale = 1.0 / (fan_in as f64).sqrt();
        let omega: Vec<f64> = (0..fan_in * out_dim).map(|_| rng.gen_range(-scale..=scale)).collect();
        let omega = store.insert("temporal.omega", Tensor::new(&[fan_in, out_dim], omega)?)?;
        Ok(Self {
            rates: rates.clone(),
            kernels,
            offsets,
            omega,
            features,
            out_dim,
        })
    }

    pub fn param_count(rates: &DilatedRateSet, features: usize, out_dim: usize) -> usize {
        let taps: usize = rates.kernel_sizes.iter().sum();
        taps * features + taps + rates.len() * features * out_dim
    }

    /// `N×F×T` window → `H0`, `N×F_T`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamStore, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.rates.len());
        for (i, &m) in self.rates.rates.iter().enumerate() {
            let k = tape.param(params, self.kernels[i]);
            let o = tape.param(params, self.offsets[i]);
            outs.push(tape.deform_conv(x, k, o, m)?);
        }
        let cat = tape.concat(&outs, 1)?;
        let omega = tape.param(params, self.omega);
        tape.matmul(cat, omega)
    }

    /// Keeps every offset inside its rate's bound.
    pub fn project(&self, params: &mut ParamStore) {
        for (i, &m) in self.rates.rates.iter().enumerate() {
            let b = max_offset(m);
            params
                .get_mut(self.offsets[i])
                .data_mut()
                .iter_mut()
                .for_each(|d| *d = d.clamp(-b, b));
        }
    }
}

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::STEPS_PER_DAY;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Input layout: `days` same-clock-hour slices of `slice_len` steps from
/// the preceding days (oldest first), then the `recent_len` steps right
/// before the anchor. The target is the `horizon` steps starting at the anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowLayout {
    pub steps_per_day: usize,
    pub days: usize,
    pub slice_len: usize,
    pub recent_len: usize,
    pub horizon: usize,
}

impl Default for WindowLayout {
    fn default() -> Self {
        Self {
            steps_per_day: STEPS_PER_DAY,
            days: 7,
            slice_len: 12,
            recent_len: 12,
            horizon: 12,
        }
    }
}

impl WindowLayout {
    /// Window length `T_N`.
    pub fn window_len(&self) -> usize {
        self.days * self.slice_len + self.recent_len
    }

    /// Earliest anchor with full history.
    pub fn warmup(&self) -> usize {
        (self.days * self.steps_per_day).max(self.recent_len)
    }

    /// Series indices read by the window anchored at `anchor`, in window order.
    pub fn input_indices(&self, anchor: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.window_len());
        for d in (1..=self.days).rev() {
            let start = anchor - d * self.steps_per_day;
            idx.extend(start..start + self.slice_len);
        }
        idx.extend(anchor - self.recent_len..anchor);
        idx
    }

    pub fn target_indices(&self, anchor: usize) -> Range<usize> {
        anchor..anchor + self.horizon
    }

    /// Anchors in `range` whose targets stay inside the range, split into
    /// usable anchors and the count skipped for lack of history.
    pub fn anchors(&self, range: Range<usize>) -> (Vec<usize>, usize) {
        let mut usable = Vec::new();
        let mut skipped = 0;
        if range.end < self.horizon {
            return (usable, 0);
        }
        for a in range.start..(range.end + 1).saturating_sub(self.horizon) {
            if a >= self.warmup() {
                usable.push(a);
            } else {
                skipped += 1;
            }
        }
        (usable, skipped)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_day == 0 || self.slice_len == 0 || self.recent_len == 0 || self.horizon == 0 {
            return Err(Error::Config("window layout extents must be positive".into()));
        }
        if self.slice_len > self.steps_per_day {
            return Err(Error::Config("day slice longer than a day".into()));
        }
        Ok(())
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    /// `N×F×T_N`.
    pub input: Tensor,
    /// `N×K`, feature 0.
    pub target: Tensor,
    pub anchor: usize,
}

/// Lazily materialized windows over a shared series.
#[derive(Clone, Debug)]
pub struct WindowSource {
    values: Arc<Tensor>,
    layout: WindowLayout,
    anchors: Vec<usize>,
}

impl WindowSource {
    pub fn new(values: Arc<Tensor>, layout: WindowLayout, anchors: Vec<usize>) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::dim("window source", format!("{:?}", values.shape())));
        }
        let t = values.shape()[2];
        if let Some(&a) = anchors.iter().find(|&&a| a < layout.warmup() || a + layout.horizon > t) {
            return Err(Error::Data(format!("anchor {a} outside usable range")));
        }
        Ok(Self { values, layout, anchors })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn layout(&self) -> &WindowLayout {
        &self.layout
    }

    pub fn values(&self) -> &Arc<Tensor> {
        &self.values
    }

    /// Keeps only the first `count` anchors.
    pub fn truncated(&self, count: usize) -> Self {
        Self {
            values: self.values.clone(),
            layout: self.layout,
            anchors: self.anchors[..count.min(self.anchors.len())].to_vec(),
        }
    }

    /// Keeps `count` anchors spread evenly over the split.
    pub fn strided(&self, count: usize) -> Self {
        let len = self.anchors.len();
        let count = count.min(len);
        Self {
            values: self.values.clone(),
            layout: self.layout,
            anchors: (0..count).map(|i| self.anchors[i * len / count]).collect(),
        }
    }

    pub fn window_at(&self, anchor: usize) -> WindowedSample {
        let v = &self.values;
        let (n, f, t) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let idx = self.layout.input_indices(anchor);
        let tn = idx.len();
        let mut input = Vec::with_capacity(n * f * tn);
        for node in 0..n {
            for feat in 0..f {
                let base = (node * f + feat) * t;
                input.extend(idx.iter().map(|&i| v.data()[base + i]));
            }
        }
        let k = self.layout.horizon;
        let mut target = Vec::with_capacity(n * k);
        for node in 0..n {
            let base = node * f * t;
            target.extend_from_slice(&v.data()[base + anchor..base + anchor + k]);
        }
        WindowedSample {
            input: Tensor::new(&[n, f, tn], input).expect("window shape"),
            target: Tensor::new(&[n, k], target).expect("target shape"),
            anchor,
        }
    }

    pub fn sample(&self, i: usize) -> WindowedSample {
        self.window_at(self.anchors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = WindowedSample> + '_ {
        (0..self.len()).map(|i| self.sample(i))
    }
}

/// Materializes every usable window of `range`; also returns the number of
/// anchors skipped for insufficient history.
pub fn build_windows(values: &Tensor, layout: &WindowLayout, range: Range<usize>) -> Result<(Vec<WindowedSample>, usize)> {
    layout.validate()?;
    let (anchors, skipped) = layout.anchors(range);
    let src = WindowSource::new(Arc::new(values.clone()), *layout, anchors)?;
    Ok((src.iter().collect(), skipped))
}

/// Contiguous chronological train/validation/test ranges (0-based, half-open).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// 6:2:2 split by timestep count.
pub fn chronological_split(len: usize) -> SplitRanges {
    let a = len * 6 / 10;
    let b = len * 8 / 10;
    SplitRanges {
        train: 0..a,
        val: a..b,
        test: b..len,
    }
}

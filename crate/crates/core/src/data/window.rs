use std::ops::Range;
use std::sync::Arc;

use sfad_tensor::{Element, Tensor};

use super::normalize::Normalizer;
use super::series::TrafficSeries;
use crate::error::{Error, Result};

/// One training sample: `history` `[Th, N, C]`, `target` `[Tf, N, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficWindow {
    /// Absolute index of the first history step.
    pub start: usize,
    pub history: Tensor<f64>,
    pub target: Tensor<f64>,
    pub tod_index: Vec<usize>,
    pub dow_index: Vec<usize>,
}

/// Every sliding window inside one contiguous range of a series.
#[derive(Clone, Debug)]
pub struct WindowSet {
    series: Arc<TrafficSeries>,
    range: Range<usize>,
    history: usize,
    horizon: usize,
}

impl WindowSet {
    pub fn new(
        series: Arc<TrafficSeries>,
        range: Range<usize>,
        history: usize,
        horizon: usize,
    ) -> Result<Self> {
        if range.end > series.steps() || range.len() < history + horizon {
            return Err(Error::config(format!(
                "range {range:?} of a {}-step series holds no window of {history}+{horizon} steps",
                series.steps()
            )));
        }
        Ok(Self { series, range, history, horizon })
    }

    pub fn len(&self) -> usize {
        self.range.len() - self.history - self.horizon + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    pub fn series(&self) -> &Arc<TrafficSeries> {
        &self.series
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn start_of(&self, i: usize) -> usize {
        assert!(i < self.len(), "window {i} out of {}", self.len());
        self.range.start + i
    }

    pub fn window(&self, i: usize) -> TrafficWindow {
        let s = &*self.series;
        let start = self.start_of(i);
        let (n, c) = (s.nodes(), s.channels());
        let history = Tensor::new(vec![self.history, n, c], s.slice(start, self.history).to_vec())
            .expect("slice matches shape");
        let target = Tensor::new(
            vec![self.horizon, n, c],
            s.slice(start + self.history, self.horizon).to_vec(),
        )
        .expect("slice matches shape");
        let steps = start..start + self.history;
        TrafficWindow {
            start,
            history,
            target,
            tod_index: steps.clone().map(|t| s.time_of_day(t)).collect(),
            dow_index: steps.map(|t| s.day_of_week(t)).collect(),
        }
    }

    /// Stacks the windows at `indices` into a batch.
    pub fn batch<T: Element>(&self, indices: &[usize], norm: &Normalizer) -> Batch<T> {
        let s = &*self.series;
        let (n, c) = (s.nodes(), s.channels());
        let (th, tf) = (self.history, self.horizon);
        let b = indices.len();
        let mut x = Vec::with_capacity(b * th * n * c);
        let mut y = Vec::with_capacity(b * tf * n * c);
        let mut tod = Vec::with_capacity(b * th);
        let mut dow = Vec::with_capacity(b * th);
        for &i in indices {
            let start = self.start_of(i);
            for (k, &v) in s.slice(start, th).iter().enumerate() {
                x.push(T::of(norm.apply(v, k % c)));
            }
            y.extend_from_slice(s.slice(start + th, tf));
            for t in start..start + th {
                tod.push(s.time_of_day(t));
                dow.push(s.day_of_week(t));
            }
        }
        Batch {
            x: Tensor::new(vec![b, th, n, c], x).expect("batch shape"),
            target: Tensor::new(vec![b, tf, n, c], y).expect("batch shape"),
            tod,
            dow,
            starts: indices.iter().map(|&i| self.start_of(i)).collect(),
        }
    }
}

/// A stacked set of windows: normalised history `x` `[B, Th, N, C]`, raw
/// `target` `[B, Tf, N, C]`, and `[B·Th]` time indices.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub target: Tensor<f64>,
    pub tod: Vec<usize>,
    pub dow: Vec<usize>,
    pub starts: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn size(&self) -> usize {
        self.starts.len()
    }
}

/// Chronological train/validation/test windows.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

/// Cuts the series at `round(T·r0)` and `round(T·(r0+r1))` and windows each
/// part independently, so no window straddles a boundary.
pub fn split_and_window(
    series: Arc<TrafficSeries>,
    history: usize,
    horizon: usize,
    ratios: &[f64],
) -> Result<Splits> {
    if ratios.len() != 3 || ratios.iter().any(|r| *r < 0.0) {
        return Err(Error::config("split ratios must be three non-negative numbers"));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios {ratios:?} do not sum to 1")));
    }
    let total = series.steps();
    let a = ((total as f64) * ratios[0]).round() as usize;
    let b = (((total as f64) * (ratios[0] + ratios[1])).round() as usize).clamp(a, total);
    let need = history + horizon;
    for (name, len) in [("train", a), ("validation", b - a), ("test", total - b)] {
        if len < need {
            return Err(Error::config(format!(
                "{name} split has {len} steps, fewer than history {history} + horizon {horizon}"
            )));
        }
    }
    Ok(Splits {
        train: WindowSet::new(series.clone(), 0..a, history, horizon)?,
        val: WindowSet::new(series.clone(), a..b, history, horizon)?,
        test: WindowSet::new(series, b..total, history, horizon)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(steps: usize, nodes: usize, spd: usize) -> Arc<TrafficSeries> {
        let vals = (0..steps * nodes).map(|i| i as f64 + 1.0).collect();
        let t = Tensor::new(vec![steps, nodes, 1], vals).unwrap();
        Arc::new(TrafficSeries::new("ramp", t, spd, 5).unwrap())
    }

    #[test]
    fn window_counts_follow_the_length_formula() {
        let train = WindowSet::new(ramp(100, 2, 10), 0..60, 12, 12).unwrap();
        assert_eq!(train.len(), 37);
        let s = split_and_window(ramp(200, 2, 10), 12, 12, &[0.6, 0.2, 0.2]).unwrap();
        assert_eq!(s.train.len(), 120 - 24 + 1);
        assert_eq!(s.val.range(), 120..160);
        assert_eq!(s.test.range(), 160..200);
        let last = s.train.window(s.train.len() - 1);
        assert_eq!(last.start + 24, 120);
    }

    #[test]
    fn too_short_splits_are_rejected() {
        let err = split_and_window(ramp(3, 2, 10), 1, 1, &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])
            .unwrap_err();
        assert!(err.to_string().contains("train split has 1 steps"), "{err}");
        assert!(split_and_window(ramp(100, 2, 10), 12, 12, &[0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn windows_reproduce_the_raw_slice() {
        let series = ramp(50, 3, 7);
        let s = split_and_window(series.clone(), 4, 2, &[0.6, 0.2, 0.2]).unwrap();
        for set in [&s.train, &s.val, &s.test] {
            for i in 0..set.len() {
                let w = set.window(i);
                let mut joined = w.history.data().to_vec();
                joined.extend_from_slice(w.target.data());
                assert_eq!(joined, series.slice(w.start, 6));
                for k in 1..4 {
                    assert_eq!(w.tod_index[k], (w.tod_index[k - 1] + 1) % 7);
                }
                assert_eq!(w.dow_index[0], (5 + w.start / 7) % 7);
            }
        }
        let max_train = s.train.start_of(s.train.len() - 1) + 3;
        assert!(max_train < s.test.start_of(0));
    }

    #[test]
    fn batch_normalizes_history_and_keeps_raw_targets() {
        let series = ramp(40, 2, 10);
        let s = split_and_window(series.clone(), 3, 2, &[0.5, 0.25, 0.25]).unwrap();
        let norm = Normalizer::from_moments(vec![10.0], vec![2.0]).unwrap();
        let b: Batch<f64> = s.val.batch(&[0, 2], &norm);
        assert_eq!(b.x.shape(), &[2, 3, 2, 1]);
        assert_eq!(b.target.shape(), &[2, 2, 2, 1]);
        let start = s.val.start_of(2);
        assert_eq!(b.x.data()[6], (series.get(start, 0, 0) - 10.0) / 2.0);
        assert_eq!(b.target.data()[4], series.get(start + 3, 0, 0));
        assert_eq!(&b.tod[3..], &[start % 10, (start + 1) % 10, (start + 2) % 10]);
    }
}

use serde::{Deserialize, Serialize};

use super::window::WindowSet;
use crate::error::{Error, Result};

/// Per-channel z-score. Zero readings are missing data and are excluded
/// from the fitted moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn from_moments(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::config("normalizer needs one mean and std per channel"));
        }
        if std.iter().any(|s| s.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !s.is_finite()) {
            return Err(Error::config(format!("normalizer std must be positive, got {std:?}")));
        }
        Ok(Self { mean, std })
    }

    /// Fits on every distinct step that appears in some training history,
    /// `[range.start, range.end - Tf)`. Population standard deviation.
    pub fn fit(train: &WindowSet) -> Result<Self> {
        let series = train.series();
        let c = series.channels();
        let range = train.range();
        let steps = range.len() - train.horizon();
        let values = series.slice(range.start, steps);
        let mut mean = vec![0.0; c];
        let mut count = vec![0usize; c];
        for (k, &v) in values.iter().enumerate() {
            if v != 0.0 {
                mean[k % c] += v;
                count[k % c] += 1;
            }
        }
        for ch in 0..c {
            if count[ch] == 0 {
                return Err(Error::config(format!("training split channel {ch} has no readings")));
            }
            mean[ch] /= count[ch] as f64;
        }
        let mut var = vec![0.0; c];
        for (k, &v) in values.iter().enumerate() {
            if v != 0.0 {
                let d = v - mean[k % c];
                var[k % c] += d * d;
            }
        }
        let std: Vec<f64> = var.iter().zip(&count).map(|(v, &n)| (v / n as f64).sqrt()).collect();
        if std.contains(&0.0) {
            return Err(Error::config("training split is constant; cannot normalize (std = 0)"));
        }
        Self::from_moments(mean, std)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: f64, channel: usize) -> f64 {
        (x - self.mean[channel]) / self.std[channel]
    }

    pub fn invert(&self, z: f64, channel: usize) -> f64 {
        z * self.std[channel] + self.mean[channel]
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    use sfad_tensor::Tensor;

    use super::*;
    use crate::data::{split_and_window, TrafficSeries};

    fn noisy(steps: usize) -> Arc<TrafficSeries> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let d = Normal::new(50.0, 4.0).unwrap();
        let vals = (0..steps * 2).map(|_| d.sample(&mut rng)).collect();
        Arc::new(TrafficSeries::new("n", Tensor::new(vec![steps, 2, 1], vals).unwrap(), 10, 0).unwrap())
    }

    #[test]
    fn moments_match_direct_computation() {
        let series = noisy(200);
        let s = split_and_window(series.clone(), 6, 4, &[0.6, 0.2, 0.2]).unwrap();
        let norm = Normalizer::fit(&s.train).unwrap();
        let seen = series.slice(0, 120 - 4);
        let n = seen.len() as f64;
        let mean = seen.iter().sum::<f64>() / n;
        let var = seen.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((norm.mean[0] - mean).abs() < 1e-9);
        assert!((norm.std[0] - var.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn zeros_are_excluded_and_constants_rejected() {
        let vals = [0.0, 4.0, 0.0, 6.0, 5.0, 5.0, 0.0, 0.0];
        let t = Tensor::new(vec![8, 1, 1], vals.to_vec()).unwrap();
        let series = Arc::new(TrafficSeries::new("z", t, 4, 0).unwrap());
        let set = WindowSet::new(series, 0..8, 2, 2).unwrap();
        let norm = Normalizer::fit(&set).unwrap();
        assert_eq!(norm.mean, vec![5.0]);

        let t = Tensor::new(vec![8, 1, 1], vec![3.0; 8]).unwrap();
        let series = Arc::new(TrafficSeries::new("c", t, 4, 0).unwrap());
        let set = WindowSet::new(series, 0..8, 2, 2).unwrap();
        assert!(Normalizer::fit(&set).is_err());
    }

    #[test]
    fn round_trip_is_identity() {
        let norm = Normalizer::from_moments(vec![231.7], vec![88.3]).unwrap();
        for x in [0.0, 1.0, 123.456, 999.9, -3.0] {
            assert!((norm.invert(norm.apply(x, 0), 0) - x).abs() < 1e-6);
        }
    }

    #[test]
    fn validation_batches_use_training_statistics() {
        let series = noisy(200);
        let s = split_and_window(series.clone(), 6, 4, &[0.6, 0.2, 0.2]).unwrap();
        let norm = Normalizer::fit(&s.train).unwrap();
        let b = s.val.batch::<f64>(&[0], &norm);
        let raw = series.get(s.val.start_of(0), 0, 0);
        assert_eq!(b.x.data()[0], (raw - norm.mean[0]) / norm.std[0]);
    }
}

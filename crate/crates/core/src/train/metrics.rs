use serde::{Deserialize, Serialize};

/// Error metrics in raw flow units; MAPE in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

/// Averages over all horizon steps plus one entry per step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub horizon: Vec<Metrics>,
}

#[derive(Clone, Copy, Debug, Default)]
struct Sums {
    abs: f64,
    sq: f64,
    count: usize,
    ape: f64,
    ape_count: usize,
}

impl Sums {
    fn metrics(&self) -> Metrics {
        if self.count == 0 {
            return Metrics::default();
        }
        let n = self.count as f64;
        Metrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: if self.ape_count == 0 { 0.0 } else { 100.0 * self.ape / self.ape_count as f64 },
        }
    }

    fn merge(&mut self, o: &Sums) {
        self.abs += o.abs;
        self.sq += o.sq;
        self.count += o.count;
        self.ape += o.ape;
        self.ape_count += o.ape_count;
    }
}

/// Streams `[B, Tf, N, C]` prediction/target pairs into masked metrics.
///
/// MAE and RMSE use entries with `target > 0`; MAPE uses entries with
/// `target > mape_threshold`.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    horizon: usize,
    mape_threshold: f64,
    steps: Vec<Sums>,
}

impl MetricAccumulator {
    pub fn new(horizon: usize, mape_threshold: f64) -> Self {
        Self { horizon, mape_threshold, steps: vec![Sums::default(); horizon] }
    }

    /// `step_len` is `N·C`, the size of one horizon step of one window.
    pub fn add(&mut self, pred: &[f64], target: &[f64], step_len: usize) {
        assert_eq!(pred.len(), target.len(), "prediction and target lengths differ");
        for (i, (&p, &y)) in pred.iter().zip(target).enumerate() {
            let s = &mut self.steps[(i / step_len) % self.horizon];
            if y > 0.0 {
                let e = (p - y).abs();
                s.abs += e;
                s.sq += e * e;
                s.count += 1;
            }
            if y > self.mape_threshold && y != 0.0 {
                s.ape += (p - y).abs() / y.abs();
                s.ape_count += 1;
            }
        }
    }

    pub fn report(&self) -> MetricReport {
        let mut all = Sums::default();
        for s in &self.steps {
            all.merge(s);
        }
        let avg = all.metrics();
        MetricReport {
            mae: avg.mae,
            rmse: avg.rmse,
            mape: avg.mape,
            horizon: self.steps.iter().map(Sums::metrics).collect(),
        }
    }
}

/// Masked metrics of a single prediction/target pair.
pub fn metrics(pred: &[f64], target: &[f64], horizon: usize, mape_threshold: f64) -> MetricReport {
    let mut acc = MetricAccumulator::new(horizon, mape_threshold);
    acc.add(pred, target, (pred.len() / horizon).max(1));
    acc.report()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        let r = metrics(&[110.0], &[100.0], 1, 0.0);
        assert!((r.mape - 10.0).abs() < 1e-12);
        let r = metrics(&[1.0, 3.0], &[2.0, 2.0], 1, 0.0);
        assert_eq!((r.mae, r.rmse), (1.0, 1.0));
        let r = metrics(&[5.0, 7.0], &[5.0, 7.0], 2, 0.0);
        assert_eq!((r.mae, r.rmse, r.mape), (0.0, 0.0, 0.0));
    }

    #[test]
    fn masking_and_per_step_split() {
        let pred = [1.0, 9.0, 4.0, 4.0];
        let target = [2.0, 0.0, 2.0, 10.0];
        let r = metrics(&pred, &target, 2, 5.0);
        assert_eq!(r.horizon[0].mae, 1.0);
        assert_eq!(r.horizon[1].mae, 4.0);
        assert!((r.mae - 3.0).abs() < 1e-12);
        assert!((r.mape - 60.0).abs() < 1e-12);
        assert_eq!(r.horizon[0].mape, 0.0);
    }
}

//! Forecast error metrics over (batch, horizon, channel) tensors.
//!
//! `MetricsAccum` folds batches one at a time so evaluation never has to
//! materialize every window at once; `finish` yields the aggregate report
//! with per-horizon-step and per-channel breakdowns.

use crate::error::DtError;
use crate::tensor::Tensor;
use crate::Result;

fn check_pair(pred: &Tensor, truth: &Tensor) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(DtError::Shape(format!(
            "prediction shape {:?} does not match target shape {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.numel() == 0 {
        return Err(DtError::Shape("empty tensors have no error".into()));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_pair(pred, truth)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// Mean absolute error over all elements.
pub fn mae(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    check_pair(pred, truth)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// Aggregate error report. `per_horizon[k]` and `per_channel[c]` hold
/// (mse, mae) restricted to forecast step k / channel c.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    pub per_horizon: Vec<(f64, f64)>,
    pub per_channel: Vec<(f64, f64)>,
    pub n_windows: usize,
}

/// Equal-weight average of overall errors across reports — the "Avg" row
/// when one model family is scored at several horizons. Breakdowns do not
/// align across horizons, so only the headline numbers aggregate.
pub fn average_overall(reports: &[MetricsReport]) -> Option<(f64, f64)> {
    if reports.is_empty() {
        return None;
    }
    let k = reports.len() as f64;
    Some((
        reports.iter().map(|r| r.mse).sum::<f64>() / k,
        reports.iter().map(|r| r.mae).sum::<f64>() / k,
    ))
}

/// Streaming accumulator over (B, S, N) prediction/target batches.
#[derive(Debug, Clone)]
pub struct MetricsAccum {
    horizon: usize,
    channels: usize,
    sq_h: Vec<f64>,
    abs_h: Vec<f64>,
    sq_c: Vec<f64>,
    abs_c: Vec<f64>,
    n_windows: usize,
}

impl MetricsAccum {
    pub fn new(horizon: usize, channels: usize) -> Self {
        MetricsAccum {
            horizon,
            channels,
            sq_h: vec![0.0; horizon],
            abs_h: vec![0.0; horizon],
            sq_c: vec![0.0; channels],
            abs_c: vec![0.0; channels],
            n_windows: 0,
        }
    }

    pub fn add(&mut self, pred: &Tensor, truth: &Tensor) -> Result<()> {
        check_pair(pred, truth)?;
        let s = pred.shape();
        if s.len() != 3 || s[1] != self.horizon || s[2] != self.channels {
            return Err(DtError::Shape(format!(
                "expected (batch, {}, {}) batches, got {s:?}",
                self.horizon, self.channels
            )));
        }
        let (b, h, n) = (s[0], s[1], s[2]);
        let p = pred.data();
        let t = truth.data();
        for i in 0..b {
            for k in 0..h {
                for c in 0..n {
                    let d = p[(i * h + k) * n + c] - t[(i * h + k) * n + c];
                    self.sq_h[k] += d * d;
                    self.abs_h[k] += d.abs();
                    self.sq_c[c] += d * d;
                    self.abs_c[c] += d.abs();
                }
            }
        }
        self.n_windows += b;
        Ok(())
    }

    /// None when no windows were added.
    pub fn finish(self) -> Option<MetricsReport> {
        if self.n_windows == 0 {
            return None;
        }
        let wn = (self.n_windows * self.channels) as f64;
        let ws = (self.n_windows * self.horizon) as f64;
        let total = wn * self.horizon as f64;
        let per_horizon: Vec<(f64, f64)> = self
            .sq_h
            .iter()
            .zip(&self.abs_h)
            .map(|(&s, &a)| (s / wn, a / wn))
            .collect();
        let per_channel: Vec<(f64, f64)> = self
            .sq_c
            .iter()
            .zip(&self.abs_c)
            .map(|(&s, &a)| (s / ws, a / ws))
            .collect();
        Some(MetricsReport {
            mse: self.sq_h.iter().sum::<f64>() / total,
            mae: self.abs_h.iter().sum::<f64>() / total,
            per_horizon,
            per_channel,
            n_windows: self.n_windows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn hand_worked_values() {
        // Errors 1 and 2: mse (1+4)/2, mae (1+2)/2.
        let truth = t(vec![2], vec![1.0, 2.0]);
        let pred = t(vec![2], vec![2.0, 4.0]);
        assert_eq!(mse(&pred, &truth).unwrap(), 2.5);
        assert_eq!(mae(&pred, &truth).unwrap(), 1.5);
        assert_eq!(mse(&truth, &truth).unwrap(), 0.0);
        assert_eq!(mae(&truth, &truth).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = t(vec![2], vec![1.0, 2.0]);
        let b = t(vec![3], vec![1.0, 2.0, 3.0]);
        assert!(matches!(mse(&a, &b), Err(DtError::Shape(_))));
    }

    #[test]
    fn scaling_homogeneity() {
        let pred = t(vec![3], vec![1.0, 4.0, -2.0]);
        let truth = t(vec![3], vec![0.5, 3.0, 1.0]);
        let k = 3.0;
        let pred_k = t(vec![3], pred.data().iter().map(|v| k * v).collect());
        let truth_k = t(vec![3], truth.data().iter().map(|v| k * v).collect());
        let m = mse(&pred, &truth).unwrap();
        let a = mae(&pred, &truth).unwrap();
        assert!((mse(&pred_k, &truth_k).unwrap() - k * k * m).abs() < 1e-12);
        assert!((mae(&pred_k, &truth_k).unwrap() - k * a).abs() < 1e-12);
    }

    #[test]
    fn mae_bounded_by_rms() {
        let mut rng = crate::init::seeded_rng(11);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let pred = t(vec![n], (0..n).map(|_| rng.random_range(-5.0..5.0)).collect());
            let truth = t(vec![n], (0..n).map(|_| rng.random_range(-5.0..5.0)).collect());
            let m = mse(&pred, &truth).unwrap();
            let a = mae(&pred, &truth).unwrap();
            assert!(a <= m.sqrt() + 1e-12, "mae {a} exceeds rms {}", m.sqrt());
        }
    }

    #[test]
    fn accumulator_matches_brute_force() {
        let mut rng = crate::init::seeded_rng(7);
        let (s, n) = (5, 3);
        let mut accum = MetricsAccum::new(s, n);
        let mut all_p: Vec<f64> = Vec::new();
        let mut all_t: Vec<f64> = Vec::new();
        for _ in 0..4 {
            let b = rng.random_range(1..6);
            let p: Vec<f64> = (0..b * s * n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..b * s * n).map(|_| rng.random_range(-2.0..2.0)).collect();
            all_p.extend_from_slice(&p);
            all_t.extend_from_slice(&y);
            accum
                .add(&t(vec![b, s, n], p), &t(vec![b, s, n], y))
                .unwrap();
        }
        let report = accum.finish().unwrap();
        let b_total = all_p.len() / (s * n);
        assert_eq!(report.n_windows, b_total);

        // Brute force over the concatenated elements.
        let flat_mse: f64 = all_p
            .iter()
            .zip(&all_t)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / all_p.len() as f64;
        let flat_mae: f64 = all_p
            .iter()
            .zip(&all_t)
            .map(|(p, y)| (p - y).abs())
            .sum::<f64>()
            / all_p.len() as f64;
        assert!((report.mse - flat_mse).abs() < 1e-12);
        assert!((report.mae - flat_mae).abs() < 1e-12);

        for k in 0..s {
            let mut sq = 0.0;
            let mut ab = 0.0;
            for i in 0..b_total {
                for c in 0..n {
                    let d = all_p[(i * s + k) * n + c] - all_t[(i * s + k) * n + c];
                    sq += d * d;
                    ab += d.abs();
                }
            }
            let denom = (b_total * n) as f64;
            assert!((report.per_horizon[k].0 - sq / denom).abs() < 1e-12);
            assert!((report.per_horizon[k].1 - ab / denom).abs() < 1e-12);
        }
        for c in 0..n {
            let mut sq = 0.0;
            let mut ab = 0.0;
            for i in 0..b_total {
                for k in 0..s {
                    let d = all_p[(i * s + k) * n + c] - all_t[(i * s + k) * n + c];
                    sq += d * d;
                    ab += d.abs();
                }
            }
            let denom = (b_total * s) as f64;
            assert!((report.per_channel[c].0 - sq / denom).abs() < 1e-12);
            assert!((report.per_channel[c].1 - ab / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_accumulator_yields_none() {
        assert!(MetricsAccum::new(4, 2).finish().is_none());
    }

    #[test]
    fn across_horizon_average() {
        let report = |mse: f64, mae: f64| MetricsReport {
            mse,
            mae,
            per_horizon: vec![],
            per_channel: vec![],
            n_windows: 1,
        };
        let (m, a) =
            average_overall(&[report(0.4, 0.4), report(0.6, 0.5)]).unwrap();
        assert!((m - 0.5).abs() < 1e-15);
        assert!((a - 0.45).abs() < 1e-15);
        assert!(average_overall(&[]).is_none());
    }

    #[test]
    fn perfect_forecast_scores_zero() {
        let y = t(vec![2, 3, 2], (0..12).map(|k| k as f64).collect());
        let mut accum = MetricsAccum::new(3, 2);
        accum.add(&y, &y).unwrap();
        let report = accum.finish().unwrap();
        assert_eq!(report.mse, 0.0);
        assert_eq!(report.mae, 0.0);
        assert!(report.per_horizon.iter().all(|&(m, a)| m == 0.0 && a == 0.0));
    }
}

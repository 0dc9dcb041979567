//! Online evaluation: cumulative Top-1/Top-5 accuracy, a windowed moving loss,
//! per-sample losses and divergence detection.

use std::collections::VecDeque;
use std::io::Write;

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 1000;
/// Accuracy margin above chance below which a probe run counts as diverged.
pub const DIVERGENCE_MARGIN: f64 = 0.05;
pub const PROBE_HORIZON: usize = 1000;
/// Smallest probability fed into the cross-entropy logarithm.
const CE_FLOOR: f64 = 1e-12;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// True when `class` is among the `k` largest entries of `pred`, ranking ties by lower index.
pub fn in_top_k(pred: &[f64], class: usize, k: usize) -> bool {
    let target = pred[class];
    let ahead = pred
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > target || (v == target && i < class))
        .count();
    ahead < k
}

pub fn l1_loss(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum()
}

/// `−Σ t·ln(p)` with probabilities floored at `1e-12`.
pub fn cross_entropy(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| -t * p.max(CE_FLOOR).ln())
        .sum()
}

/// Mean of the most recent `window` losses.
#[derive(Clone, Debug)]
pub struct MovingLoss {
    window: usize,
    buf: VecDeque<f64>,
    sum: f64,
}

impl MovingLoss {
    pub fn new(window: usize) -> Self {
        MovingLoss {
            window: window.max(1),
            buf: VecDeque::new(),
            sum: 0.0,
        }
    }

    pub fn push(&mut self, loss: f64) {
        self.buf.push_back(loss);
        self.sum += loss;
        if self.buf.len() > self.window {
            let old = self.buf.pop_front().expect("non-empty");
            self.sum -= old;
        }
    }

    /// Averages over fewer samples until the window fills.
    pub fn value(&self) -> Result<f64> {
        if self.buf.is_empty() {
            return Err(Error::Empty("moving loss has no samples"));
        }
        // recompute exactly to avoid drift from the running sum
        Ok(self.buf.iter().sum::<f64>() / self.buf.len() as f64)
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OnlineAccuracy {
    pub top1: u64,
    pub top5: u64,
    pub seen: u64,
}

impl OnlineAccuracy {
    pub fn top1(&self) -> f64 {
        if self.seen == 0 {
            0.0
        } else {
            self.top1 as f64 / self.seen as f64
        }
    }

    pub fn top5(&self) -> f64 {
        if self.seen == 0 {
            0.0
        } else {
            self.top5 as f64 / self.seen as f64
        }
    }
}

/// One recorded step, also the CSV row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss_l1: f64,
    pub loss_ce: f64,
    pub moving_loss: f64,
    pub acc_top1: f64,
    pub acc_top5: f64,
    pub trace_r: f64,
    pub min_p: f64,
    pub max_p: f64,
}

pub const CSV_HEADER: &str = "step,loss_l1,loss_ce,moving_loss,acc_top1,acc_top5,trace_R,min_p,max_p";

impl MetricsRow {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step,
            self.loss_l1,
            self.loss_ce,
            self.moving_loss,
            self.acc_top1,
            self.acc_top5,
            self.trace_r,
            self.min_p,
            self.max_p
        )
    }
}

/// Optimizer-side quantities logged alongside the online metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateSummary {
    pub trace_r: f64,
    pub min_p: f64,
    pub max_p: f64,
}

impl StateSummary {
    /// For optimizers without a covariance.
    pub const NONE: StateSummary = StateSummary {
        trace_r: f64::NAN,
        min_p: f64::NAN,
        max_p: f64::NAN,
    };
}

/// Online classification metrics for a single run. The moving window tracks the
/// L1 loss.
#[derive(Clone, Debug)]
pub struct OnlineMetrics {
    classes: usize,
    accuracy: OnlineAccuracy,
    moving: MovingLoss,
    /// Correctness per step after the probe horizon, for divergence checks.
    probe_correct: u64,
    probe_seen: u64,
    probe_horizon: usize,
    non_finite: bool,
}

impl OnlineMetrics {
    pub fn new(classes: usize, window: usize) -> Self {
        OnlineMetrics {
            classes,
            accuracy: OnlineAccuracy::default(),
            moving: MovingLoss::new(window),
            probe_correct: 0,
            probe_seen: 0,
            probe_horizon: PROBE_HORIZON,
            non_finite: false,
        }
    }

    pub fn with_probe_horizon(mut self, horizon: usize) -> Self {
        self.probe_horizon = horizon;
        self
    }

    pub fn accuracy(&self) -> OnlineAccuracy {
        self.accuracy
    }

    pub fn moving_loss(&self) -> Result<f64> {
        self.moving.value()
    }

    pub fn mark_non_finite(&mut self) {
        self.non_finite = true;
    }

    pub fn record(&mut self, pred: &[f64], target: &[f64], state: StateSummary) -> Result<MetricsRow> {
        if pred.len() != self.classes || target.len() != self.classes {
            return Err(Error::dims(
                "metrics record",
                format!(
                    "pred[{}] target[{}] for {} classes",
                    pred.len(),
                    target.len(),
                    self.classes
                ),
            ));
        }
        let class = argmax(target);
        let top1 = argmax(pred) == class;
        let top5 = in_top_k(pred, class, 5);
        self.accuracy.seen += 1;
        self.accuracy.top1 += top1 as u64;
        self.accuracy.top5 += top5 as u64;
        if self.accuracy.seen > self.probe_horizon as u64 {
            self.probe_seen += 1;
            self.probe_correct += top1 as u64;
        }
        let loss_l1 = l1_loss(pred, target);
        let loss_ce = cross_entropy(pred, target);
        if !(loss_l1.is_finite() && pred.iter().all(|v| v.is_finite())) {
            self.non_finite = true;
        }
        self.moving.push(loss_l1);
        Ok(MetricsRow {
            step: self.accuracy.seen,
            loss_l1,
            loss_ce,
            moving_loss: self.moving.value()?,
            acc_top1: self.accuracy.top1(),
            acc_top5: self.accuracy.top5(),
            trace_r: state.trace_r,
            min_p: state.min_p,
            max_p: state.max_p,
        })
    }

    /// Divergence verdict: any non-finite value, or Top-1 accuracy over the
    /// steps after the probe horizon below chance plus [`DIVERGENCE_MARGIN`].
    /// When the run is no longer than the horizon the whole run is used.
    pub fn diverged(&self) -> bool {
        if self.non_finite {
            return true;
        }
        let acc = if self.probe_seen > 0 {
            self.probe_correct as f64 / self.probe_seen as f64
        } else {
            self.accuracy.top1()
        };
        detect_divergence(false, acc, self.classes)
    }
}

/// `true` iff a non-finite value occurred or accuracy is below `1/m + 0.05`.
pub fn detect_divergence(non_finite: bool, accuracy: f64, classes: usize) -> bool {
    non_finite || !accuracy.is_finite() || accuracy < 1.0 / classes as f64 + DIVERGENCE_MARGIN
}

/// Fraction of samples whose argmax matches the label.
pub fn test_accuracy(preds: &[Vec<f64>], labels: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, &l)| argmax(p) == l).count();
    hits as f64 / preds.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(c: usize, m: usize) -> Vec<f64> {
        let mut v = vec![0.0; m];
        v[c] = 1.0;
        v
    }

    #[test]
    fn all_correct_gives_full_accuracy() {
        let mut m = OnlineMetrics::new(3, 10);
        for k in 0..10 {
            let c = k % 3;
            m.record(&one_hot(c, 3), &one_hot(c, 3), StateSummary::NONE).unwrap();
        }
        assert_eq!(m.accuracy().top1(), 1.0);
    }

    #[test]
    fn uniform_prediction_ties_go_to_class_zero() {
        let mut m = OnlineMetrics::new(10, 10);
        m.record(&[0.1; 10], &one_hot(0, 10), StateSummary::NONE).unwrap();
        assert_eq!(m.accuracy().top1, 1);
        assert!(in_top_k(&[0.1; 10], 4, 5));
        assert!(!in_top_k(&[0.1; 10], 5, 5));
    }

    #[test]
    fn scripted_sequence_three_of_five() {
        let mut m = OnlineMetrics::new(2, 10);
        let seq = [(0, 0), (1, 1), (0, 1), (1, 1), (1, 0)];
        for (pred, truth) in seq {
            let mut p = vec![0.2, 0.2];
            p[pred] = 0.8;
            m.record(&p, &one_hot(truth, 2), StateSummary::NONE).unwrap();
        }
        assert!((m.accuracy().top1() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn moving_loss_cases() {
        let mut ml = MovingLoss::new(1000);
        assert!(ml.value().is_err());
        for _ in 0..5 {
            ml.push(2.5);
        }
        assert_eq!(ml.value().unwrap(), 2.5);
        let mut ml = MovingLoss::new(1000);
        ml.push(1.0);
        ml.push(2.0);
        assert_eq!(ml.value().unwrap(), 1.5);
        let mut ml = MovingLoss::new(1000);
        for v in 1..=2000 {
            ml.push(v as f64);
        }
        assert_eq!(ml.value().unwrap(), 1500.5);
    }

    #[test]
    fn divergence_thresholds() {
        assert!(detect_divergence(true, 0.9, 10));
        assert!(!detect_divergence(false, 0.95, 10));
        assert!(detect_divergence(false, 0.12, 10));
        assert!(detect_divergence(false, f64::NAN, 10));
    }

    #[test]
    fn nan_prediction_marks_divergence() {
        let mut m = OnlineMetrics::new(2, 10);
        m.record(&[f64::NAN, 0.5], &one_hot(0, 2), StateSummary::NONE).unwrap();
        assert!(m.diverged());
    }

    #[test]
    fn losses() {
        assert_eq!(l1_loss(&[0.5, 0.5], &[1.0, 0.0]), 1.0);
        assert!((cross_entropy(&[0.25, 0.75], &[0.0, 1.0]) + 0.75f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&[0.0, 1.0], &[1.0, 0.0]).is_finite());
    }

    #[test]
    fn csv_row_has_nine_fields() {
        let row = MetricsRow {
            step: 1,
            loss_l1: 0.5,
            loss_ce: 0.7,
            moving_loss: 0.5,
            acc_top1: 1.0,
            acc_top5: 1.0,
            trace_r: 0.1,
            min_p: 1e-3,
            max_p: 0.2,
        };
        let mut buf = Vec::new();
        row.write_csv(&mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(line.trim_end().split(',').count(), CSV_HEADER.split(',').count());
    }
}

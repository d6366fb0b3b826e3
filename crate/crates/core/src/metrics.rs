//! Segmentation metrics over pooled pixel counts. Road is the positive class.

use serde::Serialize;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};

pub const THRESHOLDS: usize = 256;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn record(&mut self, pred: bool, gt: bool) {
        match (pred, gt) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

fn check_len(pred: usize, gt: usize) -> Result<()> {
    if pred != gt {
        return Err(Error::InvalidOperand(format!("prediction has {pred} pixels, ground truth has {gt}")));
    }
    Ok(())
}

pub fn confusion(pred: &[bool], gt: &[bool]) -> Result<ConfusionCounts> {
    check_len(pred.len(), gt.len())?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        c.record(p, g);
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub iou: f64,
    /// Some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

pub fn derive(c: &ConfusionCounts) -> Metrics {
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let fpr = ratio(c.fp, c.fp + c.tn);
    let fnr = ratio(c.fn_, c.tp + c.fn_);
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        degenerate = true;
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics { precision, recall, f1, fpr, fnr, iou, degenerate }
}

/// Counts at thresholds `k/256`, `k = 0..=255`; a pixel is road when its
/// probability is strictly greater than the threshold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PrCurve {
    pub counts: Vec<ConfusionCounts>,
}

impl Default for PrCurve {
    fn default() -> Self {
        Self { counts: vec![ConfusionCounts::default(); THRESHOLDS] }
    }
}

impl PrCurve {
    pub fn threshold(k: usize) -> f64 {
        k as f64 / THRESHOLDS as f64
    }

    pub fn merge(&mut self, other: &PrCurve) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += *b;
        }
    }

    pub fn at(&self, k: usize) -> Metrics {
        derive(&self.counts[k])
    }
}

/// Number of thresholds `k/256` that `p` strictly exceeds.
fn bins_above(p: f64) -> usize {
    if p.is_nan() || p <= 0.0 {
        return 0;
    }
    // p > k/256  <=>  k < 256p
    let n = (p * THRESHOLDS as f64).ceil() as usize;
    n.min(THRESHOLDS)
}

fn sweep_by(bins: impl Iterator<Item = usize>, gt: &[bool]) -> PrCurve {
    // Histogram per class, then suffix sums give the counts at every threshold.
    let mut pos = [0u64; THRESHOLDS + 1];
    let mut neg = [0u64; THRESHOLDS + 1];
    for (b, &g) in bins.zip(gt) {
        if g {
            pos[b] += 1;
        } else {
            neg[b] += 1;
        }
    }
    let (total_pos, total_neg): (u64, u64) = (pos.iter().sum(), neg.iter().sum());
    let mut curve = PrCurve::default();
    let (mut tp, mut fp) = (0u64, 0u64);
    // Pixels in bin `b` are positive for thresholds k < b.
    for k in (0..THRESHOLDS).rev() {
        tp += pos[k + 1];
        fp += neg[k + 1];
        curve.counts[k] = ConfusionCounts { tp, fp, fn_: total_pos - tp, tn: total_neg - fp };
    }
    curve
}

/// Sweep over a probability map with values in `[0, 1]`.
pub fn sweep(prob: &[f32], gt: &[bool]) -> Result<PrCurve> {
    check_len(prob.len(), gt.len())?;
    if prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidOperand("probabilities must lie in [0, 1]".into()));
    }
    Ok(sweep_by(prob.iter().map(|&p| bins_above(p as f64)), gt))
}

/// Sweep over UINT8 probabilities `q/256`: road at threshold `k` iff `q > k`.
pub fn sweep_u8(prob: &[u8], gt: &[bool]) -> Result<PrCurve> {
    check_len(prob.len(), gt.len())?;
    Ok(sweep_by(prob.iter().map(|&q| q as usize), gt))
}

pub fn maxf(curve: &PrCurve) -> f64 {
    curve.counts.iter().map(|c| derive(c).f1).fold(0.0, f64::max)
}

/// Trapezoidal area under the precision-recall polyline. Thresholds with no
/// predicted road (undefined precision) are left out; the polyline is sorted
/// by recall and anchored at recall 0 with the first point's precision.
pub fn avg_precision(curve: &PrCurve) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve
        .counts
        .iter()
        .filter(|c| c.tp + c.fp > 0)
        .map(|c| {
            let m = derive(c);
            (m.recall, m.precision)
        })
        .collect();
    if pts.is_empty() {
        return 0.0;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut area = 0.0;
    let mut prev = (0.0, pts[0].1);
    for &p in &pts {
        area += (p.0 - prev.0) * (p.1 + prev.1) / 2.0;
        prev = p;
    }
    area
}

/// Summary row for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalSummary {
    pub maxf: f64,
    pub ap: f64,
    /// Metrics at the threshold achieving `maxf`.
    pub best: Metrics,
    pub best_threshold: f64,
}

pub fn summarize(curve: &PrCurve) -> EvalSummary {
    let (k, best) = curve.counts.iter().map(derive).enumerate().fold((0, derive(&curve.counts[0])), |acc, (k, m)| {
        if m.f1 > acc.1.f1 {
            (k, m)
        } else {
            acc
        }
    });
    EvalSummary { maxf: best.f1, ap: avg_precision(curve), best, best_threshold: PrCurve::threshold(k) }
}

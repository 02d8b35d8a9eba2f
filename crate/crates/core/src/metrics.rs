//! Pixelwise segmentation metrics and ROC analysis.
//!
//! Every scalar score derives from one [`ConfusionCounts`]. When a ratio's
//! denominator is zero the score is 1.0 if the prediction is vacuously
//! perfect for that ratio and 0.0 otherwise; each method states its rule.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Probabilities at or above this value are foreground.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

/// The scalar suite. `dic` is numerically identical to `f1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub ac: f64,
    pub se: f64,
    pub sp: f64,
    pub pc: f64,
    pub f1: f64,
    pub js: f64,
    pub dic: f64,
}

fn ratio(num: u64, den: u64, vacuous: bool) -> f64 {
    if den == 0 {
        if vacuous {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    /// True when neither the ground truth nor the prediction has a
    /// foreground pixel.
    fn positive_class_empty(&self) -> bool {
        self.tp == 0 && self.fp == 0 && self.fn_ == 0
    }

    fn negative_class_empty(&self) -> bool {
        self.tn == 0 && self.fp == 0 && self.fn_ == 0
    }

    /// `(tp+tn)/n`; 1.0 on an empty image.
    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total(), true)
    }

    /// `tp/(tp+fn)`; with no true foreground, 1.0 iff nothing was predicted
    /// foreground.
    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.positive_class_empty())
    }

    /// `tn/(tn+fp)`; with no true background, 1.0 iff nothing was predicted
    /// background.
    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp, self.negative_class_empty())
    }

    /// `tp/(tp+fp)`; with no predicted foreground, 1.0 iff there was none
    /// to find.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self.positive_class_empty())
    }

    /// `2tp/(2tp+fp+fn)`; the denominator vanishes only when the
    /// foreground is empty on both sides, which scores 1.0.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, true)
    }

    /// `tp/(tp+fp+fn)`, same vacuous rule as [`Self::f1`].
    pub fn jaccard(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_, true)
    }

    pub fn metrics(&self) -> Metrics {
        let f1 = self.f1();
        Metrics {
            ac: self.accuracy(),
            se: self.sensitivity(),
            sp: self.specificity(),
            pc: self.precision(),
            f1,
            js: self.jaccard(),
            dic: f1,
        }
    }
}

pub fn scalar_metrics(c: &ConfusionCounts) -> Metrics {
    c.metrics()
}

fn binary_value(v: f64, what: &str, index: usize) -> Result<bool> {
    if v == 0.0 {
        Ok(false)
    } else if v == 1.0 {
        Ok(true)
    } else {
        Err(Error::Data(format!("{what} value {v} at index {index} is not binary")))
    }
}

/// Pixelwise counts of two binary masks of equal shape.
pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        match (binary_value(p, "prediction", i)?, binary_value(g, "ground truth", i)?) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Thresholds probabilities at [`THRESHOLD`].
pub fn binarize(probs: &Tensor) -> Tensor {
    probs.map(|p| if p >= THRESHOLD { 1.0 } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// Pixels scoring at or above this value are called positive. The first
    /// point uses `+∞`.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// ROC curve over every distinct score, and its trapezoidal area.
///
/// Equal scores form one step, so a tie contributes a diagonal segment and
/// the area equals the pairwise statistic with ties counted one half.
pub fn roc_auc(scores: &Tensor, gt: &Tensor) -> Result<(RocCurve, f64)> {
    if scores.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "scores {:?} vs ground truth {:?}",
            scores.shape(),
            gt.shape()
        )));
    }
    let mut pairs = Vec::with_capacity(scores.len());
    for (i, (&s, &g)) in scores.data().iter().zip(gt.data()).enumerate() {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Data(format!("score {s} at index {i} outside [0, 1]")));
        }
        pairs.push((s, binary_value(g, "ground truth", i)?));
    }
    let positives = pairs.iter().filter(|p| p.1).count() as u64;
    let negatives = pairs.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric(format!(
            "ROC needs both classes, got {positives} positive and {negatives} negative pixels"
        )));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area in units of one positive-negative pair.
    let mut doubled_area = 0u64;
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        let (tp_before, fp_before) = (tp, fp);
        while i < pairs.len() && pairs[i].0 == threshold {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        doubled_area += (fp - fp_before) * (tp + tp_before);
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        });
    }
    let auc = doubled_area as f64 / (2 * positives * negatives) as f64;
    Ok((RocCurve { points }, auc))
}

/// `threshold,fpr,tpr` with a header row.
pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    out
}

/// `image,AC,SE,SP,PC,F1,JS,DIC`, one row per image and a final `aggregate`
/// row computed from the pooled counts.
pub fn metrics_csv(rows: &[(String, ConfusionCounts)]) -> String {
    let mut out = String::from("image,AC,SE,SP,PC,F1,JS,DIC\n");
    let mut pooled = ConfusionCounts::default();
    let mut line = |name: &str, c: &ConfusionCounts| {
        let m = c.metrics();
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{},{},{}",
            m.ac, m.se, m.sp, m.pc, m.f1, m.js, m.dic
        );
    };
    for (name, c) in rows {
        line(name, c);
        pooled.merge(c);
    }
    line("aggregate", &pooled);
    out
}

//! Confusion-matrix accumulation and the per-class IoU / precision / recall / F1 suite.

use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::LabelMask;

/// Pixel counters for the water class. Forms a commutative monoid under `+`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// The same counts viewed from the background class.
    pub fn inverted(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }

    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        *self = *self + confusion(pred, gt)?;
        Ok(())
    }
}

impl Add for ConfusionMatrix {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Confusion counts for a single prediction/ground-truth pair.
pub fn confusion(pred: &LabelMask, gt: &LabelMask) -> Result<ConfusionMatrix> {
    if !pred.same_dims(gt.width(), gt.height()) {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    // counts[2·gt + pred]
    let mut counts = [0u64; 4];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        counts[(2 * g + p) as usize] += 1;
    }
    Ok(ConfusionMatrix {
        tn: counts[0],
        fp: counts[1],
        fn_: counts[2],
        tp: counts[3],
    })
}

pub fn accumulate(cm: ConfusionMatrix, pred: &LabelMask, gt: &LabelMask) -> Result<ConfusionMatrix> {
    Ok(cm + confusion(pred, gt)?)
}

/// Metrics for one class. `None` marks a zero denominator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub class: String,
    pub iou: Option<f64>,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(cm: &ConfusionMatrix, class: &str) -> MetricRow {
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    MetricRow {
        class: class.to_string(),
        iou: ratio(cm.tp, cm.tp + cm.fp + cm.fn_),
        f1,
        precision,
        recall,
    }
}

/// Background and water rows, in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub background: MetricRow,
    pub water: MetricRow,
    pub confusion: ConfusionMatrix,
}

impl ClassReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Self {
        Self {
            background: compute_metrics(&cm.inverted(), "background"),
            water: compute_metrics(&cm, "water"),
            confusion: cm,
        }
    }

    pub fn rows(&self) -> [&MetricRow; 2] {
        [&self.background, &self.water]
    }
}

pub fn per_class_report(preds: &[LabelMask], gts: &[LabelMask]) -> Result<ClassReport> {
    if preds.len() != gts.len() {
        return Err(Error::Dimension(format!(
            "{} predictions vs {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, g) in preds.iter().zip(gts) {
        cm.accumulate(p, g)?;
    }
    Ok(ClassReport::from_confusion(cm))
}

/// Hard water mask from logits, thresholding `sigmoid(logit)` at `threshold`.
pub fn threshold_logits(logits: &[f32], width: usize, height: usize, threshold: f64) -> Result<LabelMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} not in (0,1)")));
    }
    let cut = (threshold / (1.0 - threshold)).ln();
    let data = logits.iter().map(|&z| u8::from(z as f64 > cut)).collect();
    LabelMask::new(width, height, data)
}

/// `xx.xx` percent, or `-` when undefined.
pub fn fmt_percent(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.2}", 100.0 * x),
        None => "-".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_example() {
        let cm = ConfusionMatrix { tp: 50, fp: 25, tn: 0, fn_: 25 };
        let r = compute_metrics(&cm, "water");
        assert_eq!(r.iou, Some(0.5));
        assert!((r.precision.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_class_is_undefined() {
        let r = compute_metrics(&ConfusionMatrix { tn: 10, ..Default::default() }, "water");
        assert_eq!((r.iou, r.f1, r.precision, r.recall), (None, None, None, None));
    }

    #[test]
    fn threshold_half_is_logit_zero() {
        let m = threshold_logits(&[-0.1, 0.0, 0.1], 3, 1, 0.5).unwrap();
        assert_eq!(m.data(), &[0, 0, 1]);
    }
}

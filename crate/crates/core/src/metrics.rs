//! Confusion counts and change-class metrics.

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;

/// Per-pixel counts with "change" as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
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
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::invalid(format!(
            "prediction {}x{} and label {}x{} differ in shape",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    // Index 2·pred + gt: tn, fn, fp, tp.
    let mut bins = [0u64; 4];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        bins[(2 * p + g) as usize] += 1;
    }
    Ok(ConfusionCounts {
        tn: bins[0],
        fn_: bins[1],
        fp: bins[2],
        tp: bins[3],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
}

/// Ratio with the degenerate-case conventions: `0/0` is 1 when there are no
/// positives anywhere, otherwise 0.
fn ratio(num: u64, den: u64, no_positives: bool) -> f64 {
    if den == 0 {
        if no_positives {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn report(c: &ConfusionCounts) -> MetricReport {
    let none = c.tp + c.fp + c.fn_ == 0;
    let precision = ratio(c.tp, c.tp + c.fp, none);
    let recall = ratio(c.tp, c.tp + c.fn_, none);
    let f1 = if none {
        1.0
    } else if precision > 0.0 && recall > 0.0 {
        2.0 / (1.0 / precision + 1.0 / recall)
    } else {
        0.0
    };
    MetricReport {
        precision,
        recall,
        f1,
        iou: ratio(c.tp, c.tp + c.fp + c.fn_, none),
        oa: ratio(c.tp + c.tn, c.total(), true),
    }
}

/// Metrics from a precision/recall pair alone (f1 and the derived iou).
pub fn report_from_rates(precision: f64, recall: f64) -> MetricReport {
    let f1 = if precision > 0.0 && recall > 0.0 {
        2.0 / (1.0 / precision + 1.0 / recall)
    } else {
        0.0
    };
    MetricReport {
        precision,
        recall,
        f1,
        iou: f1 / (2.0 - f1),
        oa: f64::NAN,
    }
}

//! Confusion counts and overlap metrics.
//!
//! Undefined ratios (`0/0`) are `None`. Per-case "overall" pools the two
//! sides' counts; dataset aggregates average the per-case values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::BinaryMask;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
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

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimMismatch(pred.dims(), gt.dims()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

pub fn report(c: &ConfusionCounts) -> MetricReport {
    // Counts below 2^52 convert exactly, so 0.5 * (fp + fn) and the doubled
    // dice numerator and denominator are exact and f1 equals dice bitwise.
    let [tp, fp, fn_, tn] = [c.tp, c.fp, c.fn_, c.tn].map(|v| v as f64);
    MetricReport {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(tp, tp + 0.5 * (fp + fn_)),
        iou: ratio(tp, tp + fp + fn_),
        dice: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
        specificity: ratio(tn, tn + fp),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub left: MetricReport,
    pub right: MetricReport,
    pub overall: MetricReport,
    pub left_counts: ConfusionCounts,
    pub right_counts: ConfusionCounts,
}

pub fn evaluate_case(pred_l: &BinaryMask, pred_r: &BinaryMask, gt_l: &BinaryMask, gt_r: &BinaryMask) -> Result<CaseReport> {
    let l = confusion(pred_l, gt_l)?;
    let r = confusion(pred_r, gt_r)?;
    Ok(CaseReport { left: report(&l), right: report(&r), overall: report(&(l + r)), left_counts: l, right_counts: r })
}

/// Mean of one metric across cases plus how many cases were undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetric {
    pub mean: Option<f64>,
    pub excluded: usize,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> MeanMetric {
    let (mut sum, mut n, mut excluded) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => excluded += 1,
        }
    }
    MeanMetric { mean: ratio(sum, n as f64), excluded }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub precision: MeanMetric,
    pub recall: MeanMetric,
    pub f1: MeanMetric,
    pub iou: MeanMetric,
    pub dice: MeanMetric,
    pub specificity: MeanMetric,
}

impl AggregateReport {
    pub fn of(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let m = |f: fn(&MetricReport) -> Option<f64>| mean_of(reports.iter().map(f));
        Ok(AggregateReport {
            precision: m(|r| r.precision),
            recall: m(|r| r.recall),
            f1: m(|r| r.f1),
            iou: m(|r| r.iou),
            dice: m(|r| r.dice),
            specificity: m(|r| r.specificity),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub cases: usize,
    pub left: AggregateReport,
    pub right: AggregateReport,
    /// Over every left and right report, one canal at a time.
    pub per_side: AggregateReport,
    pub overall: AggregateReport,
}

pub fn evaluate_dataset(cases: &[CaseReport]) -> Result<DatasetReport> {
    let side = |f: fn(&CaseReport) -> MetricReport| AggregateReport::of(&cases.iter().map(f).collect::<Vec<_>>());
    let both: Vec<MetricReport> = cases.iter().flat_map(|c| [c.left, c.right]).collect();
    Ok(DatasetReport {
        cases: cases.len(),
        left: side(|c| c.left)?,
        right: side(|c| c.right)?,
        per_side: AggregateReport::of(&both)?,
        overall: side(|c| c.overall)?,
    })
}

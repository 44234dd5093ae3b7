//! Multi-label evaluation: mean average precision, accuracy, precision,
//! recall and F1 over thresholded scores.
//!
//! Accuracy, precision and recall are micro-aggregated: confusion counts are
//! summed over every attribute and sample before the ratios are taken. The
//! instance-based and label-based variants common in attribute recognition
//! are reported separately in [`ExtendedMetrics`].

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    fn merge(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

/// `num / den`, or 0 when the denominator is empty.
fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-attribute confusion counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub per_attribute: Vec<Counts>,
}

impl ConfusionCounts {
    pub fn aggregate(&self) -> Counts {
        self.per_attribute.iter().fold(Counts::default(), |a, &c| a.merge(c))
    }
}

fn check(scores: &Tensor, targets: &Tensor) -> Result<(usize, usize)> {
    if scores.shape() != targets.shape() {
        return Err(Error::shape("metrics", scores.shape(), targets.shape()));
    }
    let (m, n) = scores.dims2()?;
    if targets.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument("metric targets must be 0 or 1".into()));
    }
    Ok((m, n))
}

/// Predicted positive iff `score > threshold`.
pub fn confusion(scores: &Tensor, targets: &Tensor, threshold: f32) -> Result<ConfusionCounts> {
    let (m, n) = check(scores, targets)?;
    let mut per_attribute = vec![Counts::default(); n];
    for i in 0..m {
        for (j, c) in per_attribute.iter_mut().enumerate() {
            let pred = scores.data()[i * n + j] > threshold;
            let truth = targets.data()[i * n + j] == 1.0;
            match (pred, truth) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
    }
    Ok(ConfusionCounts { per_attribute })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AveragePrecision {
    pub value: f64,
    /// False when the attribute has no positives; such attributes are
    /// excluded from mA and carry `value = 0`.
    pub defined: bool,
}

/// Step-function area under the precision-recall curve.
///
/// Samples are ranked by descending score with ties broken by ascending
/// sample index; AP is the mean of the precision at each positive's rank.
pub fn average_precision(scores: &[f32], targets: &[f32]) -> Result<AveragePrecision> {
    if scores.len() != targets.len() {
        return Err(Error::shape("average_precision", &[scores.len()], &[targets.len()]));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let positives = targets.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 {
        return Ok(AveragePrecision {
            value: 0.0,
            defined: false,
        });
    }
    let mut hits = 0usize;
    let mut total = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        if targets[i] == 1.0 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(AveragePrecision {
        value: total / positives as f64,
        defined: true,
    })
}

/// Instance-based and label-based metrics, reported alongside the defaults.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtendedMetrics {
    /// Mean over attributes of `(TPR + TNR) / 2`.
    pub label_mean_accuracy: f64,
    pub instance_accuracy: f64,
    pub instance_precision: f64,
    pub instance_recall: f64,
    pub instance_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub m_a: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: Vec<AveragePrecision>,
    pub confusion: ConfusionCounts,
    pub extended: ExtendedMetrics,
}

pub fn report(scores: &Tensor, targets: &Tensor, threshold: f32) -> Result<MetricsReport> {
    let (m, n) = check(scores, targets)?;
    if m == 0 {
        return Err(Error::InvalidArgument("metrics need at least one sample".into()));
    }
    let mut ap = Vec::with_capacity(n);
    for j in 0..n {
        let col_s: Vec<f32> = (0..m).map(|i| scores.data()[i * n + j]).collect();
        let col_t: Vec<f32> = (0..m).map(|i| targets.data()[i * n + j]).collect();
        ap.push(average_precision(&col_s, &col_t)?);
    }
    let defined: Vec<f64> = ap.iter().filter(|a| a.defined).map(|a| a.value).collect();
    let m_a = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };

    let confusion = confusion(scores, targets, threshold)?;
    let agg = confusion.aggregate();
    let (precision, recall) = (agg.precision(), agg.recall());
    let extended = extended_metrics(scores, targets, threshold, &confusion, m, n);
    Ok(MetricsReport {
        m_a,
        accuracy: agg.accuracy(),
        precision,
        recall,
        f1: f1(precision, recall),
        ap,
        confusion,
        extended,
    })
}

fn extended_metrics(
    scores: &Tensor,
    targets: &Tensor,
    threshold: f32,
    confusion: &ConfusionCounts,
    m: usize,
    n: usize,
) -> ExtendedMetrics {
    let label_mean_accuracy = confusion
        .per_attribute
        .iter()
        .map(|c| (ratio(c.tp, c.tp + c.fn_) + ratio(c.tn, c.tn + c.fp)) / 2.0)
        .sum::<f64>()
        / n as f64;
    let (mut acc, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for i in 0..m {
        let (mut inter, mut union, mut pred, mut truth) = (0, 0, 0, 0);
        for j in 0..n {
            let p = scores.data()[i * n + j] > threshold;
            let t = targets.data()[i * n + j] == 1.0;
            inter += (p && t) as usize;
            union += (p || t) as usize;
            pred += p as usize;
            truth += t as usize;
        }
        // an empty prediction of an empty label set is exact
        acc += if union == 0 { 1.0 } else { ratio(inter, union) };
        prec += ratio(inter, pred);
        rec += ratio(inter, truth);
    }
    let mf = m as f64;
    let (instance_precision, instance_recall) = (prec / mf, rec / mf);
    ExtendedMetrics {
        label_mean_accuracy,
        instance_accuracy: acc / mf,
        instance_precision,
        instance_recall,
        instance_f1: f1(instance_precision, instance_recall),
    }
}

impl MetricsReport {
    /// `metric,value` CSV with one `ap_<attribute>` row per attribute.
    ///
    /// Extended rows follow the defaults when `extended` is set.
    pub fn to_csv(&self, attribute_names: &[String], extended: bool) -> String {
        let mut s = String::from("metric,value\n");
        let mut row = |k: &str, v: f64| {
            let _ = writeln!(s, "{k},{v:.6}");
        };
        row("mA", self.m_a);
        row("accuracy", self.accuracy);
        row("precision", self.precision);
        row("recall", self.recall);
        row("f1", self.f1);
        if extended {
            let e = &self.extended;
            row("label_mA", e.label_mean_accuracy);
            row("instance_accuracy", e.instance_accuracy);
            row("instance_precision", e.instance_precision);
            row("instance_recall", e.instance_recall);
            row("instance_f1", e.instance_f1);
        }
        for (i, a) in self.ap.iter().enumerate() {
            let name = attribute_names.get(i).cloned().unwrap_or_else(|| i.to_string());
            row(&format!("ap_{name}"), a.value);
        }
        s
    }
}

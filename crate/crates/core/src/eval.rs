//! Micro / macro precision, recall and F1, with head and tail label buckets.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::data::NodeId;
use crate::MetricScalar;

/// Labels with score at or above `threshold`; falls back to the argmax when none qualify.
pub fn binarize(scores: &[f64], threshold: f64) -> BTreeSet<usize> {
    let mut out: BTreeSet<usize> = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= threshold)
        .map(|(i, _)| i)
        .collect();
    if out.is_empty() && !scores.is_empty() {
        // first index wins ties
        let best = scores
            .iter()
            .enumerate()
            .fold(0, |best, (i, &s)| if s > scores[best] { i } else { best });
        out.insert(best);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionTotals {
    pub per_label: BTreeMap<NodeId, Counts>,
    pub global: Counts,
    pub queries: u64,
}

impl ConfusionTotals {
    /// Merge another shard of counts.
    pub fn merge(&mut self, other: &ConfusionTotals) {
        for (id, c) in &other.per_label {
            self.per_label.entry(*id).or_default().add(*c);
        }
        self.global.add(other.global);
        self.queries += other.queries;
    }
}

/// Add one query's predictions against its gold labels.
pub fn accumulate(preds: &BTreeSet<NodeId>, golds: &BTreeSet<NodeId>, totals: &mut ConfusionTotals) {
    debug_assert!(!preds.is_empty(), "binarize always yields at least one label");
    for id in preds.union(golds) {
        let c = Counts {
            tp: u64::from(preds.contains(id) && golds.contains(id)),
            fp: u64::from(preds.contains(id) && !golds.contains(id)),
            fn_: u64::from(!preds.contains(id) && golds.contains(id)),
        };
        totals.per_label.entry(*id).or_default().add(c);
        totals.global.add(c);
    }
    totals.queries += 1;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prf<T> {
    pub precision: T,
    pub recall: T,
    pub f1: T,
}

fn ratio<T: MetricScalar>(num: u64, den: u64) -> T {
    if den == 0 {
        T::zero()
    } else {
        T::from_count(num) / T::from_count(den)
    }
}

fn harmonic<T: MetricScalar>(p: T, r: T) -> T {
    let sum = p.clone() + r.clone();
    if sum == T::zero() {
        T::zero()
    } else {
        T::from_count(2) * p * r / sum
    }
}

impl<T: MetricScalar> Prf<T> {
    pub fn from_counts(c: Counts) -> Self {
        let precision: T = ratio(c.tp, c.tp + c.fp);
        let recall: T = ratio(c.tp, c.tp + c.fn_);
        Prf {
            f1: harmonic(precision.clone(), recall.clone()),
            precision,
            recall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelRow<T> {
    pub id: NodeId,
    pub clicks: u64,
    pub counts: Counts,
    pub metrics: Prf<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport<T> {
    pub micro: Prf<T>,
    #[serde(rename = "macro")]
    pub macro_: Prf<T>,
    pub head: Prf<T>,
    pub tail: Prf<T>,
    pub queries: u64,
    pub per_label: Vec<LabelRow<T>>,
}

/// Fraction of labels in each of the head and tail buckets.
pub const BUCKET_FRACTION: f64 = 0.2;

/// Head (most clicked) and tail (least clicked) label buckets. Ties break by id.
pub fn buckets(label_click_counts: &BTreeMap<NodeId, u64>) -> (Vec<NodeId>, Vec<NodeId>) {
    let n = label_click_counts.len();
    if n == 0 {
        return (vec![], vec![]);
    }
    let k = ((n as f64 * BUCKET_FRACTION).floor() as usize).max(1);
    let mut by_clicks: Vec<(NodeId, u64)> = label_click_counts.iter().map(|(&id, &c)| (id, c)).collect();
    by_clicks.sort_by_key(|&(id, c)| (c, id));
    let tail = by_clicks[..k].iter().map(|&(id, _)| id).collect();
    by_clicks.sort_by_key(|&(id, c)| (std::cmp::Reverse(c), id));
    let head = by_clicks[..k].iter().map(|&(id, _)| id).collect();
    (head, tail)
}

/// Build a report. The keys of `label_click_counts` define the label universe
/// for macro averaging (labels without support contribute zeros).
pub fn report<T: MetricScalar>(totals: &ConfusionTotals, label_click_counts: &BTreeMap<NodeId, u64>) -> MetricsReport<T> {
    let counts_of = |id: &NodeId| totals.per_label.get(id).copied().unwrap_or_default();
    let per_label: Vec<LabelRow<T>> = label_click_counts
        .iter()
        .map(|(id, &clicks)| LabelRow {
            id: *id,
            clicks,
            counts: counts_of(id),
            metrics: Prf::from_counts(counts_of(id)),
        })
        .collect();

    let n = T::from_count(per_label.len().max(1) as u64);
    let mean = |f: fn(&Prf<T>) -> T| per_label.iter().fold(T::zero(), |acc, r| acc + f(&r.metrics)) / n.clone();
    let macro_ = Prf {
        precision: mean(|m| m.precision.clone()),
        recall: mean(|m| m.recall.clone()),
        f1: mean(|m| m.f1.clone()),
    };

    let pooled = |ids: &[NodeId]| {
        let mut c = Counts::default();
        for id in ids {
            c.add(counts_of(id));
        }
        Prf::from_counts(c)
    };
    let (head_ids, tail_ids) = buckets(label_click_counts);
    MetricsReport {
        micro: Prf::from_counts(totals.global),
        macro_,
        head: pooled(&head_ids),
        tail: pooled(&tail_ids),
        queries: totals.queries,
        per_label,
    }
}

/// Column names of [`MetricsReport::row`].
pub const ROW_COLUMNS: [&str; 12] = [
    "micro_p", "micro_r", "micro_f1", "macro_p", "macro_r", "macro_f1", "head_p", "head_r", "head_f1", "tail_p",
    "tail_r", "tail_f1",
];

impl<T: MetricScalar> MetricsReport<T> {
    /// The twelve summary values in [`ROW_COLUMNS`] order.
    pub fn row(&self) -> [T; 12] {
        let mut out = Vec::with_capacity(12);
        for p in [&self.micro, &self.macro_, &self.head, &self.tail] {
            out.extend([p.precision.clone(), p.recall.clone(), p.f1.clone()]);
        }
        out.try_into().expect("twelve columns")
    }
}

//! Knowledge fusion and semi-supervised target generation.
//!
//! Everything here consumes plain values and returns plain values: no trace is
//! recorded, so nothing computed in this module can contribute a gradient.
//! The trainer treats its outputs as constants.

use std::collections::BTreeMap;

use log::warn;
use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::cosine_from_parts;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct FusedQuery<T> {
    pub values: Array1<T>,
    /// Softmax weights over the knowledge rows; empty when there is no knowledge.
    pub attention_weights: Vec<T>,
}

/// `q' = q + sum_j softmax(q K^T)_j K_j` with unscaled dot-product logits.
pub fn attention_fuse<T: Scalar>(query: ArrayView1<'_, T>, knowledge: ArrayView2<'_, T>) -> Result<FusedQuery<T>> {
    if knowledge.nrows() == 0 {
        return Ok(FusedQuery {
            values: query.to_owned(),
            attention_weights: Vec::new(),
        });
    }
    if knowledge.ncols() != query.len() {
        return Err(Error::shape("knowledge embeddings", query.len(), knowledge.ncols()));
    }
    let logits = knowledge.dot(&query);
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exp = logits.mapv(|l| (l - max).exp());
    let total = exp.sum();
    let weights = exp / total;
    let values = &query + &weights.dot(&knowledge);
    Ok(FusedQuery {
        values,
        attention_weights: weights.to_vec(),
    })
}

/// Soft pseudo-labels: leaf row → cosine score, every score at least the threshold in force.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SemiTargets<T> {
    pub entries: BTreeMap<usize, T>,
}

impl<T: Scalar> SemiTargets<T> {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, leaf_row: usize) -> T {
        self.entries.get(&leaf_row).copied().unwrap_or_else(T::zero)
    }
}

/// Cosine of `query` against every label row, keeping scores `>= tau`.
///
/// A zero-norm query or label row scores 0 for that pair and is logged.
pub fn compute_semi_targets<T: Scalar>(
    query: ArrayView1<'_, T>,
    label_embeddings: ArrayView2<'_, T>,
    tau: f64,
) -> Result<SemiTargets<T>> {
    if label_embeddings.ncols() != query.len() {
        return Err(Error::shape("semi-target label embeddings", query.len(), label_embeddings.ncols()));
    }
    let tau_t = T::lit(tau);
    let q_sq = query.dot(&query);
    let mut entries = BTreeMap::new();
    for (j, row) in label_embeddings.outer_iter().enumerate() {
        let c_sq = row.dot(&row);
        let score = if q_sq == T::zero() || c_sq == T::zero() {
            warn!("zero-norm embedding in semi-target scoring (label row {j}); score set to 0");
            T::zero()
        } else {
            cosine_from_parts(query.dot(&row), q_sq, c_sq)
        };
        if score >= tau_t {
            entries.insert(j, score);
        }
    }
    Ok(SemiTargets { entries })
}

/// Linear warm-start schedule for the semi-target threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_epochs: usize,
}

impl TauSchedule {
    pub fn new(tau_start: f64, tau_end: f64, total_epochs: usize) -> Result<Self> {
        if !(0.0 <= tau_end && tau_end <= tau_start && tau_start <= 1.0) {
            return Err(Error::config(
                "tau_start",
                format!("need 0 <= tau_end <= tau_start <= 1, got start {tau_start}, end {tau_end}"),
            ));
        }
        Ok(TauSchedule {
            tau_start,
            tau_end,
            total_epochs,
        })
    }
}

/// `tau_start + (tau_end - tau_start) * epoch / (total_epochs - 1)`; a single epoch uses `tau_end`.
pub fn tau_at(schedule: &TauSchedule, epoch: usize) -> Result<f64> {
    if epoch >= schedule.total_epochs {
        return Err(Error::Validation(format!(
            "epoch {epoch} outside schedule of {} epochs",
            schedule.total_epochs
        )));
    }
    if schedule.total_epochs == 1 {
        return Ok(schedule.tau_end);
    }
    let frac = epoch as f64 / (schedule.total_epochs - 1) as f64;
    Ok(schedule.tau_start + (schedule.tau_end - schedule.tau_start) * frac)
}

/// `min(click + semi, 1)` elementwise.
pub fn fuse_targets<T: Scalar>(click: ArrayView1<'_, T>, semi: &SemiTargets<T>) -> Array1<T> {
    let mut y = click.to_owned();
    for (&j, &s) in &semi.entries {
        if j < y.len() {
            y[j] += s;
        }
    }
    y.mapv_inplace(|v| v.min(T::one()));
    y
}

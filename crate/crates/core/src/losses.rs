//! Training objectives: batch-hard triplet loss on `f_m`, softmax
//! identification loss on each classifier, and their weighted sum.

use std::collections::BTreeMap;
use std::fmt::Debug;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Added under the square root so identical embeddings have a finite gradient.
pub const DISTANCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub trp: f64,
    pub cls_p: f64,
    pub cls_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            trp: 1.0,
            cls_p: 1.0,
            cls_g: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(trp: f64, cls_p: f64, cls_g: f64) -> Self {
        Self { trp, cls_p, cls_g }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("trp", self.trp),
            ("cls_p", self.cls_p),
            ("cls_g", self.cls_g),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self { margin: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct TripletLoss {
    pub loss: f64,
    /// `dL/dembeddings`, same shape as the input.
    pub grad: Array2<f64>,
    /// `(hardest positive, hardest negative)` index per anchor.
    pub hardest: Vec<(usize, usize)>,
    pub active_anchors: usize,
}

fn distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let sq: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq + DISTANCE_EPS).sqrt()
}

/// Checks that every label has at least two samples and that at least two
/// labels are present.
pub fn check_pk_structure<L: Copy + Ord + Debug>(labels: &[L]) -> Result<()> {
    let mut counts: BTreeMap<L, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((l, _)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(Error::BatchStructure(format!(
            "identity {l:?} has a single sample, so its anchor has no positive"
        )));
    }
    if counts.len() < 2 {
        let only = counts
            .keys()
            .next()
            .map(|l| format!("{l:?}"))
            .unwrap_or_else(|| "<none>".into());
        return Err(Error::BatchStructure(format!(
            "only identity {only} is present, so no anchor has a negative"
        )));
    }
    Ok(())
}

/// Batch-hard triplet loss: for each anchor, the farthest same-identity
/// sample and the nearest other-identity sample form one hinge term
/// `[m + d(a, p) - d(a, n)]_+`; the loss is the mean over all anchors.
///
/// Ties on the hardest sample resolve to the lowest index.
pub fn triplet_batch_hard<L: Copy + Ord + Debug>(
    embeddings: ArrayView2<f64>,
    labels: &[L],
    config: &TripletConfig,
) -> Result<TripletLoss> {
    let n = embeddings.nrows();
    if labels.len() != n {
        return Err(Error::shape("triplet labels", n, labels.len()));
    }
    if !(config.margin >= 0.0) {
        return Err(Error::Config(format!(
            "triplet margin must be >= 0, got {}",
            config.margin
        )));
    }
    check_pk_structure(labels)?;

    let mut dist = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d = distance(embeddings.row(i), embeddings.row(j));
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }

    let mut grad = Array2::<f64>::zeros(embeddings.dim());
    let mut hardest = Vec::with_capacity(n);
    let mut total = 0.0;
    let mut active = 0;
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                if pos.is_none_or(|p| dist[[i, j]] > dist[[i, p]]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| dist[[i, j]] < dist[[i, q]]) {
                neg = Some(j);
            }
        }
        let (p, q) = (
            pos.expect("checked structure"),
            neg.expect("checked structure"),
        );
        hardest.push((p, q));
        let (dp, dn) = (dist[[i, p]], dist[[i, q]]);
        let hinge = (dp - dn) + config.margin;
        if hinge > 0.0 {
            total += hinge;
            active += 1;
            let a = embeddings.row(i);
            let dir_p = (&a - &embeddings.row(p)) / dp;
            let dir_n = (&a - &embeddings.row(q)) / dn;
            grad.row_mut(i).scaled_add(scale, &(&dir_p - &dir_n));
            grad.row_mut(p).scaled_add(-scale, &dir_p);
            grad.row_mut(q).scaled_add(scale, &dir_n);
        }
    }
    Ok(TripletLoss {
        loss: total * scale,
        grad,
        hardest,
        active_anchors: active,
    })
}

#[derive(Debug, Clone)]
pub struct IdentificationLoss {
    pub loss: f64,
    /// `dL/dlogits`, `N x N_c`.
    pub grad: Array2<f64>,
}

/// Mean softmax cross-entropy of `logits` (`N x N_c`) against class labels,
/// evaluated with a max-shifted log-sum-exp.
pub fn identification_loss(
    logits: ArrayView2<f64>,
    labels: &[usize],
) -> Result<IdentificationLoss> {
    let (n, classes) = logits.dim();
    if labels.len() != n {
        return Err(Error::shape("identification labels", n, labels.len()));
    }
    if n == 0 {
        return Err(Error::shape("identification logits", "at least one row", 0));
    }
    let mut grad = Array2::<f64>::zeros((n, classes));
    let mut total = 0.0;
    for (i, (row, &y)) in logits.outer_iter().zip(labels).enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange {
                sample: i,
                label: y,
                num_classes: classes,
            });
        }
        if let Some(bad) = row.iter().find(|v| v.is_nan()) {
            return Err(Error::NonFinite {
                term: format!("logits row {i}"),
                value: *bad,
            });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::INFINITY {
            // Limit case: a unique +inf logit on the true class has probability 1.
            let infs = row.iter().filter(|v| **v == f64::INFINITY).count();
            if row[y] == f64::INFINITY && infs == 1 {
                continue;
            }
            return Err(Error::NonFinite {
                term: format!("logits row {i}"),
                value: max,
            });
        }
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[y];
        let mut g = grad.row_mut(i);
        for (gj, z) in g.iter_mut().zip(row.iter()) {
            *gj = (z - lse).exp() / n as f64;
        }
        g[y] -= 1.0 / n as f64;
    }
    Ok(IdentificationLoss {
        loss: total / n as f64,
        grad,
    })
}

/// Per-branch loss values; `None` marks a disabled branch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BranchLosses {
    pub trp: Option<f64>,
    pub cls_p: Option<f64>,
    pub cls_g: Option<f64>,
}

/// Weighted sum of the enabled branch losses. Any non-finite term is
/// rejected with the name of the offending branch.
pub fn combined_loss(terms: &BranchLosses, weights: &LossWeights) -> Result<f64> {
    let parts = [
        ("loss_trp", terms.trp, weights.trp),
        ("loss_cls_p", terms.cls_p, weights.cls_p),
        ("loss_cls_g", terms.cls_g, weights.cls_g),
    ];
    let mut total = 0.0;
    for (name, value, weight) in parts {
        let Some(v) = value else { continue };
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: name.into(),
                value: v,
            });
        }
        total += weight * v;
    }
    Ok(total)
}

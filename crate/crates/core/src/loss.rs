//! Pair mining and the training losses.
//!
//! Mining is a hard selection: given the cosine-similarity matrix and the
//! pseudo-labels, each anchor keeps the negatives more similar than its least
//! similar positive minus a margin, and the positives less similar than its
//! most similar negative plus the margin. The selected index sets are frozen
//! for the step; gradients flow only through the similarity values.

use crate::error::{Error, Result};
use crate::graph::{Tape, TensorId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-anchor mined index sets. `positives[i]` holds only indices with the
/// anchor's label (never `i` itself); `negatives[i]` only other labels.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MinedPairs {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl MinedPairs {
    pub fn n_anchors(&self) -> usize {
        self.positives.len()
    }

    pub fn total_positives(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }

    pub fn total_negatives(&self) -> usize {
        self.negatives.iter().map(Vec::len).sum()
    }
}

/// Scale, offset, and weighting knobs shared by the losses.
#[derive(Clone, Debug)]
pub struct LossHyper<T> {
    /// Positive-pair scaling in the multi-similarity loss.
    pub alpha: T,
    /// Negative-pair scaling in the multi-similarity loss.
    pub beta: T,
    /// Similarity offset.
    pub lambda: T,
    /// Mining margin.
    pub epsilon: T,
    /// Rotation-loss weight.
    pub eta: T,
    /// Margin for the alternate pair losses.
    pub margin: T,
}

impl<T: Scalar> LossHyper<T> {
    /// The published multi-similarity settings, with the rotation weight at
    /// its strong-prior default.
    pub fn defaults() -> Self {
        LossHyper {
            alpha: T::from_f64(2.0),
            beta: T::from_f64(50.0),
            lambda: T::from_f64(1.0),
            epsilon: T::from_f64(0.1),
            eta: T::from_f64(0.1),
            margin: T::from_f64(0.2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha <= T::zero() || self.beta <= T::zero() {
            return Err(Error::Argument("alpha and beta must be > 0".into()));
        }
        if self.epsilon < T::zero() {
            return Err(Error::Argument("epsilon must be >= 0".into()));
        }
        if self.eta < T::zero() {
            return Err(Error::Argument("eta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Which metric loss drives training.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum LossKind {
    MultiSimilarity,
    Contrastive,
    Triplet,
    Lifted,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ms" | "multi_similarity" => Ok(LossKind::MultiSimilarity),
            "contrastive" => Ok(LossKind::Contrastive),
            "triplet" => Ok(LossKind::Triplet),
            "lifted" => Ok(LossKind::Lifted),
            other => Err(Error::Argument(format!(
                "unknown loss kind {other:?}; expected ms, contrastive, triplet, or lifted"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::MultiSimilarity => "ms",
            LossKind::Contrastive => "contrastive",
            LossKind::Triplet => "triplet",
            LossKind::Lifted => "lifted",
        }
    }
}

/// Cosine-similarity matrix of unit-norm embedding rows: `emb * emb^T`,
/// exactly symmetric with a near-one diagonal.
pub fn similarity_matrix<T: Scalar>(tape: &mut Tape<T>, emb: TensorId) -> Result<TensorId> {
    tape.row_gram(emb)
}

/// Hard-pair selection per anchor with strict inequalities; ties at the
/// threshold are excluded. Anchors lacking a same-label partner or lacking a
/// different-label point yield empty sets on both sides.
pub fn mine_pairs<T: Scalar>(s: &Tensor<T>, labels: &[usize], epsilon: T) -> Result<MinedPairs> {
    let (n, m) = s.dims2()?;
    if n != m {
        return Err(Error::Dimension(format!(
            "mine_pairs: similarity matrix must be square, got {:?}",
            s.shape()
        )));
    }
    if labels.len() != n {
        return Err(Error::Argument(format!(
            "mine_pairs: {} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if n < 2 {
        return Err(Error::Argument("mine_pairs: need at least 2 points".into()));
    }
    if epsilon < T::zero() {
        return Err(Error::Argument("mine_pairs: epsilon must be >= 0".into()));
    }
    let sv = s.data();
    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    for i in 0..n {
        let row = &sv[i * n..(i + 1) * n];
        let mut min_pos: Option<T> = None;
        let mut max_neg: Option<T> = None;
        for j in 0..n {
            if j == i {
                continue; // the anchor itself never counts as its own positive
            }
            if labels[j] == labels[i] {
                min_pos = Some(min_pos.map_or(row[j], |v| v.min(row[j])));
            } else {
                max_neg = Some(max_neg.map_or(row[j], |v| v.max(row[j])));
            }
        }
        let (Some(min_pos), Some(max_neg)) = (min_pos, max_neg) else {
            // Either threshold is vacuous; the anchor is skipped entirely.
            positives.push(Vec::new());
            negatives.push(Vec::new());
            continue;
        };
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                if row[j] < max_neg + epsilon {
                    pos.push(j);
                }
            } else if row[j] > min_pos - epsilon {
                neg.push(j);
            }
        }
        positives.push(pos);
        negatives.push(neg);
    }
    Ok(MinedPairs { positives, negatives })
}

fn check_pairs<T: Scalar>(tape: &Tape<T>, s: TensorId, pairs: &MinedPairs) -> Result<usize> {
    let (n, m) = tape.value(s).dims2()?;
    if n != m {
        return Err(Error::Dimension(format!(
            "loss: similarity matrix must be square, got {:?}",
            tape.value(s).shape()
        )));
    }
    if pairs.positives.len() != n || pairs.negatives.len() != n {
        return Err(Error::Argument(format!(
            "loss: pair sets for {} anchors, matrix has {} rows",
            pairs.positives.len(),
            n
        )));
    }
    for row in pairs.positives.iter().chain(&pairs.negatives) {
        if row.iter().any(|&j| j >= n) {
            return Err(Error::Index("loss: pair index outside matrix".into()));
        }
    }
    Ok(n)
}

/// The anchor-sum multi-similarity loss over mined pairs:
/// `sum_i [ log(1 + sum_{l in P_i} e^{-alpha (S_il - lambda)}) / alpha
///        + log(1 + sum_{l in N_i} e^{ beta (S_il - lambda)}) / beta ]`.
/// `mean_over_anchors` divides by the anchor count; it defaults off so the
/// value matches the printed sum form.
pub fn multi_similarity_loss<T: Scalar>(
    tape: &mut Tape<T>,
    s: TensorId,
    pairs: &MinedPairs,
    hyper: &LossHyper<T>,
    mean_over_anchors: bool,
) -> Result<TensorId> {
    hyper.validate()?;
    check_pairs(tape, s, pairs)?;
    Ok(tape.ms_loss_node(
        s,
        pairs.positives.clone(),
        pairs.negatives.clone(),
        hyper.alpha,
        hyper.beta,
        hyper.lambda,
        mean_over_anchors,
    ))
}

/// Rotation-prediction loss for a batch of `4m` rows holding the four
/// quarter-turn copies of `m` images: cross-entropy summed over all rows and
/// divided by `m`, i.e. four times the per-row mean.
pub fn rotation_loss<T: Scalar>(tape: &mut Tape<T>, logits: TensorId, z: &[usize]) -> Result<TensorId> {
    let (rows, cols) = tape.value(logits).dims2()?;
    if cols != crate::model::ROTATION_CLASSES {
        return Err(Error::Dimension(format!(
            "rotation_loss: logits must be 4 wide, got {cols}"
        )));
    }
    if rows == 0 || rows % 4 != 0 {
        return Err(Error::Argument(format!(
            "rotation_loss: row count {rows} is not a positive multiple of 4"
        )));
    }
    let ce = tape.softmax_cross_entropy(logits, z)?;
    Ok(tape.scale(ce, T::from_f64(4.0)))
}

/// Joint objective: metric loss plus `eta` times the rotation loss.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    l_metric: TensorId,
    l_rot: TensorId,
    eta: T,
) -> Result<TensorId> {
    if eta < T::zero() {
        return Err(Error::Argument("combined_loss: eta must be >= 0".into()));
    }
    let weighted = tape.scale(l_rot, eta);
    tape.add(l_metric, weighted)
}

/// The alternate metric losses, in cosine-similarity form over mined pairs:
/// contrastive `sum_pos (1 - S) + sum_neg max(0, S - margin)`, triplet
/// `sum max(0, S_neg - S_pos + margin)` over every mined (anchor, pos, neg),
/// and lifted `sum_pos max(0, log sum_neg e^{margin - (1 - S_neg)} + (1 - S_pos))^2`.
pub fn alternate_loss<T: Scalar>(
    tape: &mut Tape<T>,
    kind: LossKind,
    s: TensorId,
    pairs: &MinedPairs,
    margin: T,
) -> Result<TensorId> {
    check_pairs(tape, s, pairs)?;
    let pos = pairs.positives.clone();
    let neg = pairs.negatives.clone();
    match kind {
        LossKind::Contrastive => Ok(tape.contrastive_loss_node(s, pos, neg, margin)),
        LossKind::Triplet => Ok(tape.triplet_loss_node(s, pos, neg, margin)),
        LossKind::Lifted => Ok(tape.lifted_loss_node(s, pos, neg, margin)),
        LossKind::MultiSimilarity => Err(Error::Argument(
            "alternate_loss: use multi_similarity_loss for the ms kind".into(),
        )),
    }
}

/// Dispatch used by the training loop.
pub fn metric_loss<T: Scalar>(
    tape: &mut Tape<T>,
    kind: LossKind,
    s: TensorId,
    pairs: &MinedPairs,
    hyper: &LossHyper<T>,
) -> Result<TensorId> {
    match kind {
        LossKind::MultiSimilarity => multi_similarity_loss(tape, s, pairs, hyper, false),
        other => alternate_loss(tape, other, s, pairs, hyper.margin),
    }
}

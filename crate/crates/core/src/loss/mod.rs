//! Cross entropy, margin triplet loss and their sum (TEL).
//!
//! With `Reduction::Sum` the objective for a batch of `N` examples is
//!
//! ```text
//! Σ_i −log softmax(g(f(x_i)))[y_i]  +  λ · Σ_(a,p,n) [‖f(a) − f(p)‖² − ‖f(a) − f(n)‖² + α]_+
//! ```
//!
//! where `f` is the embedding head, `g` the classification head and the
//! triplets come from [`mine_triplets`]. `λ = 1` gives the plain sum.

mod mining;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Float, Tape, TensorError, Var};

pub use mining::{
    mine_from_distances, mine_triplets, pairwise_sq_dist, DistanceMatrix, MiningError,
    MiningStrategy, Triplet, TripletSet,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch size mismatch: {0}")]
    BatchMismatch(String),
    #[error("triplet index {index} out of range for batch of {batch}")]
    TripletIndex { index: usize, batch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Scalar values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub cel_term: f64,
    pub triplet_term: f64,
    /// Mined triplets whose hinge is strictly positive.
    pub active_triplets: usize,
    pub mined_triplets: usize,
}

/// `−Σ_i log softmax(logits_i)[label_i]`, divided by `B` for `Mean`.
pub fn cross_entropy<T: Float>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    reduction: Reduction,
) -> Result<Var, LossError> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 {
        return Err(LossError::BatchMismatch(format!(
            "logits must be [B, C], got {:?}",
            shape
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    if b == 0 {
        return Err(LossError::EmptyBatch);
    }
    if labels.len() != b {
        return Err(LossError::BatchMismatch(format!(
            "{} labels for {b} rows",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(LossError::LabelOutOfRange {
            label,
            n_classes: c,
        });
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick(logp, labels)?;
    let total = tape.sum_all(picked)?;
    let factor = match reduction {
        Reduction::Sum => -T::one(),
        Reduction::Mean => -T::one() / T::from_usize(b).unwrap(),
    };
    Ok(tape.scale(total, factor)?)
}

/// Hinge values `‖a − p‖² − ‖a − n‖² + α` before clamping, one per triplet.
fn triplet_margins<T: Float>(
    tape: &mut Tape<T>,
    embeddings: Var,
    triplets: &TripletSet,
    margin: T,
) -> Result<Var, LossError> {
    let shape = tape.shape(embeddings).to_vec();
    if shape.len() != 2 {
        return Err(LossError::BatchMismatch(format!(
            "embeddings must be [B, D], got {:?}",
            shape
        )));
    }
    let batch = shape[0];
    for t in &triplets.triples {
        for index in [t.anchor, t.positive, t.negative] {
            if index >= batch {
                return Err(LossError::TripletIndex { index, batch });
            }
        }
    }
    let pick = |f: fn(&Triplet) -> usize| triplets.triples.iter().map(f).collect::<Vec<_>>();
    let a = tape.gather_rows(embeddings, &pick(|t| t.anchor))?;
    let p = tape.gather_rows(embeddings, &pick(|t| t.positive))?;
    let n = tape.gather_rows(embeddings, &pick(|t| t.negative))?;
    let ap = tape.sub(a, p)?;
    let ap2 = tape.mul(ap, ap)?;
    let d_ap = tape.row_sum(ap2)?;
    let an = tape.sub(a, n)?;
    let an2 = tape.mul(an, an)?;
    let d_an = tape.row_sum(an2)?;
    let diff = tape.sub(d_ap, d_an)?;
    Ok(tape.add_scalar(diff, margin)?)
}

/// `Σ max(‖e_a − e_p‖² − ‖e_a − e_n‖² + α, 0)`. An empty set yields an
/// exact zero that still hangs off `embeddings`, with zero gradient.
pub fn triplet_loss<T: Float>(
    tape: &mut Tape<T>,
    embeddings: Var,
    triplets: &TripletSet,
    margin: T,
    reduction: Reduction,
) -> Result<Var, LossError> {
    let margins = triplet_margins(tape, embeddings, triplets, margin)?;
    let hinge = tape.relu(margins)?;
    let total = tape.sum_all(hinge)?;
    match reduction {
        Reduction::Mean if !triplets.is_empty() => {
            Ok(tape.scale(total, T::one() / T::from_usize(triplets.len()).unwrap())?)
        }
        _ => Ok(total),
    }
}

/// Graph handles of a TEL evaluation plus its scalar summary.
#[derive(Debug, Clone, Copy)]
pub struct TelLoss {
    pub total: Var,
    pub cel: Var,
    pub triplet: Var,
    pub breakdown: LossBreakdown,
}

/// `cross_entropy + triplet_weight · triplet_loss`. A zero weight leaves the
/// cross-entropy node itself as the total.
#[allow(clippy::too_many_arguments)]
pub fn tel_loss<T: Float>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    embeddings: Var,
    triplets: &TripletSet,
    margin: T,
    triplet_weight: T,
    reduction: Reduction,
) -> Result<TelLoss, LossError> {
    let (b_logits, b_emb) = (tape.shape(logits)[0], tape.shape(embeddings)[0]);
    if b_logits != b_emb {
        return Err(LossError::BatchMismatch(format!(
            "{b_logits} logit rows vs {b_emb} embedding rows"
        )));
    }
    let cel = cross_entropy(tape, logits, labels, reduction)?;
    let margins = triplet_margins(tape, embeddings, triplets, margin)?;
    let active_triplets = tape
        .value(margins)
        .data()
        .iter()
        .filter(|&&m| m > T::zero())
        .count();
    let hinge = tape.relu(margins)?;
    let mut triplet = tape.sum_all(hinge)?;
    if reduction == Reduction::Mean && !triplets.is_empty() {
        triplet = tape.scale(triplet, T::one() / T::from_usize(triplets.len()).unwrap())?;
    }
    let total = if triplet_weight == T::zero() {
        cel
    } else {
        let weighted = tape.scale(triplet, triplet_weight)?;
        tape.add(cel, weighted)?
    };
    let cel_term = tape.value(cel).item().as_f64();
    let triplet_term = tape.value(triplet).item().as_f64();
    Ok(TelLoss {
        total,
        cel,
        triplet,
        breakdown: LossBreakdown {
            total: tape.value(total).item().as_f64(),
            cel_term,
            triplet_term,
            active_triplets,
            mined_triplets: triplets.len(),
        },
    })
}

//! Online triplet selection inside a batch.
//!
//! Selection works on plain distance values and never touches the tape, so
//! the chosen indices act as constants during the backward pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningStrategy {
    /// Per (anchor, positive): the closest negative inside the band
    /// `d(a,p) < d(a,n) < d(a,p) + margin`; failing that, the farthest
    /// negative with `d(a,n) <= d(a,p)`; pairs whose negatives all clear the
    /// margin are skipped.
    SemiHard,
    /// Every (a, p, n) with `d(a,n) < d(a,p)`.
    PaperLiteral,
    /// Per anchor: farthest positive and closest negative.
    Hardest,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MiningError {
    #[error("mining needs at least 2 examples, got {0}")]
    BatchTooSmall(usize),
    #[error("{labels} labels for {rows} embeddings")]
    LabelCount { labels: usize, rows: usize },
    #[error("no valid triplets in batch")]
    NoValidTriples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub const fn new(anchor: usize, positive: usize, negative: usize) -> Self {
        Self {
            anchor,
            positive,
            negative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletSet {
    pub triples: Vec<Triplet>,
    pub strategy: MiningStrategy,
}

impl TripletSet {
    pub fn empty(strategy: MiningStrategy) -> Self {
        Self {
            triples: Vec::new(),
            strategy,
        }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Checks the label and index invariants against a batch.
    pub fn is_valid_for(&self, labels: &[usize]) -> bool {
        self.triples.iter().all(|t| {
            t.anchor < labels.len()
                && t.positive < labels.len()
                && t.negative < labels.len()
                && t.anchor != t.positive
                && labels[t.anchor] == labels[t.positive]
                && labels[t.anchor] != labels[t.negative]
        })
    }
}

/// Symmetric matrix of squared Euclidean distances, in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_values(n: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n * n);
        Self { n, values }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn sq(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Non-squared distance.
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.sq(i, j).sqrt()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `M[i][j] = ‖e_i − e_j‖²` through the Gram expansion
/// `‖e_i‖² + ‖e_j‖² − 2 e_i·e_j`, accumulated in `f64` and clamped at zero.
/// The diagonal is exactly zero and the matrix exactly symmetric.
pub fn pairwise_sq_dist<T: Float>(embeddings: &Tensor<T>) -> DistanceMatrix {
    assert_eq!(embeddings.shape().len(), 2, "embeddings must be [B, D]");
    let n = embeddings.shape()[0];
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| embeddings.row(i).iter().map(|v| v.as_f64()).collect())
        .collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let d = (norms[i] + norms[j] - 2.0 * dot).max(0.0);
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    DistanceMatrix { n, values }
}

pub fn mine_triplets<T: Float>(
    embeddings: &Tensor<T>,
    labels: &[usize],
    margin: f64,
    strategy: MiningStrategy,
) -> Result<TripletSet, MiningError> {
    let rows = embeddings.shape().first().copied().unwrap_or(0);
    if labels.len() != rows {
        return Err(MiningError::LabelCount {
            labels: labels.len(),
            rows,
        });
    }
    mine_from_distances(&pairwise_sq_dist(embeddings), labels, margin, strategy)
}

/// Mining over a precomputed distance matrix. Triples come out sorted by
/// anchor, then positive, then negative; ties between equally distant
/// candidates go to the lower batch index.
pub fn mine_from_distances(
    dist: &DistanceMatrix,
    labels: &[usize],
    margin: f64,
    strategy: MiningStrategy,
) -> Result<TripletSet, MiningError> {
    let b = dist.len();
    if labels.len() != b {
        return Err(MiningError::LabelCount {
            labels: labels.len(),
            rows: b,
        });
    }
    if b < 2 {
        return Err(MiningError::BatchTooSmall(b));
    }
    let mut triples = Vec::new();
    for a in 0..b {
        let positives = (0..b).filter(|&p| p != a && labels[p] == labels[a]);
        let negatives: Vec<usize> = (0..b).filter(|&n| labels[n] != labels[a]).collect();
        if negatives.is_empty() {
            continue;
        }
        match strategy {
            MiningStrategy::SemiHard => {
                for p in positives {
                    let d_ap = dist.dist(a, p);
                    let mut in_band: Option<(usize, f64)> = None;
                    let mut violating: Option<(usize, f64)> = None;
                    for &n in &negatives {
                        let d_an = dist.dist(a, n);
                        if d_an > d_ap && d_an < d_ap + margin {
                            if in_band.is_none_or(|(_, best)| d_an < best) {
                                in_band = Some((n, d_an));
                            }
                        } else if d_an <= d_ap && violating.is_none_or(|(_, best)| d_an > best) {
                            violating = Some((n, d_an));
                        }
                    }
                    if let Some((n, _)) = in_band.or(violating) {
                        triples.push(Triplet::new(a, p, n));
                    }
                }
            }
            MiningStrategy::PaperLiteral => {
                for p in positives {
                    let d_ap = dist.dist(a, p);
                    triples.extend(
                        negatives
                            .iter()
                            .filter(|&&n| dist.dist(a, n) < d_ap)
                            .map(|&n| Triplet::new(a, p, n)),
                    );
                }
            }
            MiningStrategy::Hardest => {
                let hardest_p = positives.fold(None, |best: Option<(usize, f64)>, p| {
                    let d = dist.dist(a, p);
                    match best {
                        Some((_, bd)) if bd >= d => best,
                        _ => Some((p, d)),
                    }
                });
                let hardest_n = negatives
                    .iter()
                    .fold(None, |best: Option<(usize, f64)>, &n| {
                        let d = dist.dist(a, n);
                        match best {
                            Some((_, bd)) if bd <= d => best,
                            _ => Some((n, d)),
                        }
                    });
                if let (Some((p, _)), Some((n, _))) = (hardest_p, hardest_n) {
                    triples.push(Triplet::new(a, p, n));
                }
            }
        }
    }
    if triples.is_empty() {
        return Err(MiningError::NoValidTriples);
    }
    Ok(TripletSet { triples, strategy })
}

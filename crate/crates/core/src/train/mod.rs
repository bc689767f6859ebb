//! Training loop for the three regimes, with early stopping on validation
//! loss.
//!
//! | regime    | objective                         | classification head |
//! |-----------|-----------------------------------|---------------------|
//! | `cel`     | cross entropy                     | trained             |
//! | `triplet` | mined triplet loss                | frozen              |
//! | `tel`     | cross entropy + λ · triplet loss  | trained             |

mod adam;
mod batching;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{spec_augment, AugmentSpec, Spectrogram};
use crate::data::Dataset;
use crate::eval::{
    accuracy_of, argmax, cross_entropy_row, evaluate, infer, knn_classify, stack_features,
    EvalError, EvalOptions, KnnMetric, SelfMatch,
};
use crate::loss::{
    cross_entropy, mine_triplets, tel_loss, triplet_loss, LossBreakdown, LossError, MiningError,
    MiningStrategy, Reduction, TripletSet,
};
use crate::model::{is_head_param, save_checkpoint, CheckpointError, Model, ModelError};
use crate::tensor::{Float, Tape, TensorError};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use batching::{make_batches, resolve_sampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Cel,
    Triplet,
    #[default]
    Tel,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Cel => "cel",
            Regime::Triplet => "triplet",
            Regime::Tel => "tel",
        })
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cel" => Ok(Regime::Cel),
            "triplet" => Ok(Regime::Triplet),
            "tel" => Ok(Regime::Tel),
            other => Err(format!(
                "unknown regime {other:?} (expected cel, triplet or tel)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Shuffle for `cel`; for `triplet` and `tel`, class-balanced with the
    /// largest feasible `P` dividing the batch size (`K = B / P ≥ 2`).
    #[default]
    Auto,
    Shuffle,
    ClassBalanced {
        p: usize,
        k: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Triplet margin α.
    pub margin: f64,
    /// λ multiplying the triplet term in `tel`.
    pub triplet_weight: f64,
    pub reduction: Reduction,
    pub mining: MiningStrategy,
    pub sampler: Sampler,
    /// Training-time masking; configured in its own `[augment]` section.
    #[serde(skip)]
    pub augment: Option<AugmentSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Tel,
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            early_stop_patience: 2,
            seed: 0,
            margin: 0.2,
            triplet_weight: 1.0,
            reduction: Reduction::Sum,
            mining: MiningStrategy::SemiHard,
            sampler: Sampler::Auto,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        let min_batch = if self.regime == Regime::Cel { 1 } else { 2 };
        if self.batch_size < min_batch {
            return bad(format!(
                "batch_size {} too small for regime {}",
                self.batch_size, self.regime
            ));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return bad(format!("margin must be non-negative, got {}", self.margin));
        }
        if !(self.triplet_weight.is_finite() && self.triplet_weight >= 0.0) {
            return bad(format!(
                "triplet_weight must be non-negative, got {}",
                self.triplet_weight
            ));
        }
        if let Sampler::ClassBalanced { p, k } = self.sampler {
            if p < 2 || k < 2 || p * k != self.batch_size {
                return bad(format!(
                    "class_balanced needs P, K >= 2 with P*K = batch_size, got {p}x{k} vs {}",
                    self.batch_size
                ));
            }
        }
        Ok(())
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            margin: self.margin,
            strategy: self.mining,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("{set} set has label {label} but the model has {n_classes} classes")]
    Label {
        set: &'static str,
        label: usize,
        n_classes: usize,
    },
    #[error("batch sampler: {0}")]
    Sampler(String),
    #[error(
        "epoch {epoch}: no batch held a valid triplet (needs a same-class pair and another class)"
    )]
    NoTriplets { epoch: usize },
    #[error("non-finite gradient or update in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Audio(#[from] crate::audio::AudioError),
}

impl TrainError {
    /// True for failures caused by non-finite numbers.
    pub fn is_numerical(&self) -> bool {
        let tensor_non_finite = |e: &TensorError| matches!(e, TensorError::NonFinite { .. });
        match self {
            TrainError::NonFiniteGradient { .. } => true,
            TrainError::Loss(LossError::Tensor(e)) => tensor_non_finite(e),
            TrainError::Model(ModelError::Tensor(e))
            | TrainError::Eval(EvalError::Model(ModelError::Tensor(e))) => tensor_non_finite(e),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    pub train_acc: f64,
    pub val_acc: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// `max_epochs` was zero.
    NoEpochs,
    MaxEpochs,
    EarlyStop,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::NoEpochs => "no_epochs",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::EarlyStop => "early_stop",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub regime: Regime,
    pub rows: Vec<EpochRow>,
    pub stop: StopReason,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
    /// Times mined triplets fed an optimizer step's loss.
    pub optimizer_mining_calls: u64,
    /// Batches with no update because nothing was mined (`triplet` only);
    /// with a converged embedding every pair already clears the margin.
    pub skipped_batches: usize,
}

impl RunReport {
    pub fn best_row(&self) -> Option<&EpochRow> {
        self.best_epoch.map(|e| &self.rows[e - 1])
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_row().map(|r| r.val.total)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Written every time validation loss improves.
    pub checkpoint: Option<&'a Path>,
    /// Per-epoch progress lines on standard error.
    pub progress: bool,
}

const STREAM_BATCHES: u64 = 0x6261_7463;
const STREAM_AUGMENT: u64 = 0x6175_676d;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the random stream for `(seed, stream, epoch, batch)`.
pub fn derive_seed(seed: u64, stream: u64, epoch: u64, batch: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed ^ stream) ^ epoch) ^ batch)
}

fn regime_total(regime: Regime, cel: f64, triplet: f64, weight: f64) -> f64 {
    match regime {
        Regime::Cel => cel,
        Regime::Triplet => triplet,
        Regime::Tel => cel + weight * triplet,
    }
}

fn check_labels<T: Float>(
    model: &Model<T>,
    set: &Dataset,
    name: &'static str,
) -> Result<(), TrainError> {
    if set.is_empty() {
        return Err(TrainError::EmptySet(name));
    }
    let n_classes = model.config.n_classes;
    match set.examples.iter().find(|e| e.label >= n_classes) {
        Some(e) => Err(TrainError::Label {
            set: name,
            label: e.label,
            n_classes,
        }),
        None => Ok(()),
    }
}

/// Running sums over one epoch of optimizer steps.
#[derive(Default)]
struct EpochSums {
    examples: usize,
    correct: usize,
    ce_sum: f64,
    hinge_sum: f64,
    mined: usize,
    active: usize,
    /// Batches where some (anchor, positive, negative) exists at all.
    feasible_batches: usize,
}

/// Whether any triple with a same-class pair and a different-class
/// negative exists among `labels`.
fn has_candidate_triples(labels: &[usize]) -> bool {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    let repeated = sorted.windows(2).any(|w| w[0] == w[1]);
    repeated && sorted.first() != sorted.last()
}

/// Trains `model` in place and leaves it holding the parameters of the best
/// validation epoch.
pub fn train<T: Float>(
    model: &mut Model<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    opts: &TrainOptions<'_>,
) -> Result<RunReport, TrainError> {
    cfg.validate()?;
    check_labels(model, train_set, "training")?;
    check_labels(model, val_set, "validation")?;
    if let Some(aug) = &cfg.augment {
        let (m, f) = model.config.input_shape;
        aug.validate(m, f)?;
    }
    let mut report = RunReport {
        regime: cfg.regime,
        rows: Vec::new(),
        stop: StopReason::NoEpochs,
        best_epoch: None,
        best_checkpoint: None,
        optimizer_mining_calls: 0,
        skipped_batches: 0,
    };
    if cfg.max_epochs == 0 {
        return Ok(report);
    }

    let labels = train_set.labels();
    let penalized: Vec<bool> = model
        .params()
        .iter()
        .map(|p| model.is_penalized(p))
        .collect();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new(model.params());
    let margin = T::from_f64_lossy(cfg.margin);
    let weight = T::from_f64_lossy(cfg.triplet_weight);
    let eval_opts = cfg.eval_options();
    let mut best: Option<(f64, Vec<crate::model::Param<T>>)> = None;
    report.stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let batches = make_batches(
            &labels,
            cfg,
            derive_seed(cfg.seed, STREAM_BATCHES, epoch as u64, 0),
        )?;
        let mut sums = EpochSums::default();
        for (bi, idx) in batches.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                STREAM_AUGMENT,
                epoch as u64,
                bi as u64,
            ));
            let mut owned: Vec<Spectrogram> = Vec::new();
            let mut specs: Vec<&Spectrogram> = Vec::with_capacity(idx.len());
            if let Some(aug) = &cfg.augment {
                for &i in idx {
                    let src = &train_set.examples[i].features;
                    owned.push(if rng.random_bool(aug.apply_probability) {
                        spec_augment(src, aug, &mut rng)?
                    } else {
                        src.clone()
                    });
                }
                specs.extend(owned.iter());
            } else {
                specs.extend(idx.iter().map(|&i| &train_set.examples[i].features));
            }
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();

            let mut tape = Tape::new();
            let frozen_head = cfg.regime == Regime::Triplet;
            let bound = model.bind(&mut tape, |name| !(frozen_head && is_head_param(name)));
            let x = tape.constant(stack_features(&specs));
            let emb = bound.embed(&mut tape, x)?;
            let logits = bound.classify(&mut tape, emb)?;

            let mined = match cfg.regime {
                Regime::Cel => None,
                _ => {
                    report.optimizer_mining_calls += 1;
                    match mine_triplets(tape.value(emb), &batch_labels, cfg.margin, cfg.mining) {
                        Ok(set) => Some(set),
                        Err(MiningError::NoValidTriples) => Some(TripletSet::empty(cfg.mining)),
                        Err(e) => return Err(TrainError::Sampler(e.to_string())),
                    }
                }
            };
            let b = idx.len();
            sums.feasible_batches += usize::from(has_candidate_triples(&batch_labels));
            let loss = match (cfg.regime, &mined) {
                (Regime::Cel, _) => cross_entropy(&mut tape, logits, &batch_labels, cfg.reduction)?,
                (Regime::Triplet, Some(set)) if set.is_empty() => {
                    report.skipped_batches += 1;
                    continue;
                }
                (Regime::Triplet, Some(set)) => {
                    triplet_loss(&mut tape, emb, set, margin, cfg.reduction)?
                }
                (_, set) => {
                    let empty = TripletSet::empty(cfg.mining);
                    let set = set.as_ref().unwrap_or(&empty);
                    tel_loss(
                        &mut tape,
                        logits,
                        &batch_labels,
                        emb,
                        set,
                        margin,
                        weight,
                        cfg.reduction,
                    )?
                    .total
                }
            };

            let logit_values = tape.value(logits);
            for (r, &l) in batch_labels.iter().enumerate() {
                let row = logit_values.row(r);
                sums.ce_sum += cross_entropy_row(row, l);
                sums.correct += usize::from(argmax(row) == l);
            }
            sums.examples += b;
            if let Some(set) = &mined {
                let e = tape.value(emb);
                for t in &set.triples {
                    let sq = |i: usize, j: usize| -> f64 {
                        e.row(i)
                            .iter()
                            .zip(e.row(j))
                            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                            .sum()
                    };
                    let h = sq(t.anchor, t.positive) - sq(t.anchor, t.negative) + cfg.margin;
                    if h > 0.0 {
                        sums.hinge_sum += h;
                        sums.active += 1;
                    }
                }
                sums.mined += set.len();
            }

            tape.backward(loss).map_err(LossError::from)?;
            let grads = bound.grads(&tape);
            drop(tape);
            let l2_lambda = model.config.l2_lambda;
            adam_step(
                model.params_mut(),
                &grads,
                &penalized,
                l2_lambda,
                &mut state,
                &adam,
            )?;
        }
        if cfg.regime == Regime::Triplet && sums.feasible_batches == 0 {
            return Err(TrainError::NoTriplets { epoch });
        }

        let val = evaluate(model, val_set, &eval_opts)?;
        let (train_acc, val_acc) = if cfg.regime == Regime::Triplet {
            // The head is never trained here, so accuracy is nearest-neighbour
            // over clean training embeddings.
            let (train_emb, _) = infer(model, &train_set.examples, cfg.batch_size)?;
            let (val_emb, _) = infer(model, &val_set.examples, cfg.batch_size)?;
            let loo = knn_classify(
                &train_emb,
                &labels,
                &train_emb,
                1,
                KnnMetric::Euclidean,
                SelfMatch::Exclude,
            );
            let train_acc = match loo {
                Ok(p) => accuracy_of(&p, &labels),
                Err(_) => 0.0,
            };
            let val_pred = knn_classify(
                &train_emb,
                &labels,
                &val_emb,
                1,
                KnnMetric::Euclidean,
                SelfMatch::Allow,
            )?;
            (train_acc, accuracy_of(&val_pred, &val_set.labels()))
        } else {
            (
                sums.correct as f64 / sums.examples.max(1) as f64,
                val.accuracy,
            )
        };
        let train_cel = sums.ce_sum / sums.examples.max(1) as f64;
        let train_trip = if sums.mined == 0 {
            0.0
        } else {
            sums.hinge_sum / sums.mined as f64
        };
        let row = EpochRow {
            epoch,
            train: LossBreakdown {
                total: regime_total(cfg.regime, train_cel, train_trip, cfg.triplet_weight),
                cel_term: train_cel,
                triplet_term: train_trip,
                active_triplets: sums.active,
                mined_triplets: sums.mined,
            },
            val: LossBreakdown {
                total: regime_total(
                    cfg.regime,
                    val.mean_cel,
                    val.mean_triplet,
                    cfg.triplet_weight,
                ),
                cel_term: val.mean_cel,
                triplet_term: val.mean_triplet,
                active_triplets: val.active_triplets,
                mined_triplets: val.mined_triplets,
            },
            train_acc,
            val_acc,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if opts.progress {
            eprintln!(
                "epoch={} train_loss={:.3} val_loss={:.3} val_acc={:.3}",
                epoch, row.train.total, row.val.total, row.val_acc
            );
        }
        report.rows.push(row);

        if best.as_ref().is_none_or(|(b, _)| row.val.total < *b) {
            best = Some((row.val.total, model.params().to_vec()));
            report.best_epoch = Some(epoch);
            if let Some(path) = opts.checkpoint {
                save_checkpoint(model, path)?;
                report.best_checkpoint = Some(path.to_path_buf());
            }
        } else if epoch - report.best_epoch.unwrap_or(0) >= cfg.early_stop_patience {
            report.stop = StopReason::EarlyStop;
            break;
        }
    }
    if let Some((_, params)) = best {
        for (dst, src) in model.params_mut().iter_mut().zip(params) {
            *dst = src;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(1, STREAM_BATCHES, 1, 0);
        assert_eq!(a, derive_seed(1, STREAM_BATCHES, 1, 0));
        assert_ne!(a, derive_seed(1, STREAM_AUGMENT, 1, 0));
        assert_ne!(a, derive_seed(1, STREAM_BATCHES, 2, 0));
        assert_ne!(a, derive_seed(2, STREAM_BATCHES, 1, 0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad_lr = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad_lr.validate().is_err());
        let bad_pk = TrainConfig {
            sampler: Sampler::ClassBalanced { p: 3, k: 3 },
            ..TrainConfig::default()
        };
        assert!(bad_pk.validate().is_err());
        let tiny = TrainConfig {
            batch_size: 1,
            regime: Regime::Triplet,
            ..TrainConfig::default()
        };
        assert!(tiny.validate().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = TrainConfig {
            sampler: Sampler::ClassBalanced { p: 4, k: 8 },
            regime: Regime::Cel,
            ..TrainConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), cfg);
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    }
}

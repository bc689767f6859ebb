//! Epoch batch construction.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Regime, Sampler, TrainConfig, TrainError};

/// Concrete sampler after resolving [`Sampler::Auto`] against a label set.
pub fn resolve_sampler(cfg: &TrainConfig, labels: &[usize]) -> Sampler {
    match cfg.sampler {
        Sampler::Auto if cfg.regime == Regime::Cel => Sampler::Shuffle,
        Sampler::Auto => {
            let counts = class_counts(labels);
            let b = cfg.batch_size;
            (2..=b / 2)
                .rev()
                .filter(|&p| b.is_multiple_of(p))
                .find(|&p| counts.values().filter(|&&c| c >= b / p).count() >= p)
                .map_or(Sampler::Shuffle, |p| Sampler::ClassBalanced { p, k: b / p })
        }
        s => s,
    }
}

fn class_counts(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    counts
}

/// Index batches for one epoch, fully determined by `epoch_seed`.
///
/// Shuffle: a random permutation cut into `batch_size` pieces; the short
/// tail is kept for `cel` and dropped otherwise. Class-balanced: `N / (P·K)`
/// batches (at least one), each with `K` examples from each of `P` randomly
/// drawn classes. Every class cycles through a private shuffled queue.
pub fn make_batches(
    labels: &[usize],
    cfg: &TrainConfig,
    epoch_seed: u64,
) -> Result<Vec<Vec<usize>>, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    match resolve_sampler(cfg, labels) {
        Sampler::ClassBalanced { p, k } => {
            let counts = class_counts(labels);
            let eligible: Vec<usize> = counts
                .iter()
                .filter(|(_, &c)| c >= k)
                .map(|(&l, _)| l)
                .collect();
            if eligible.len() < p {
                let short: Vec<String> = counts
                    .iter()
                    .filter(|(_, &c)| c < k)
                    .map(|(l, c)| format!("class {l} has {c}"))
                    .collect();
                return Err(TrainError::Sampler(format!(
                    "class-balanced sampling needs {p} classes with at least {k} examples, found {} ({})",
                    eligible.len(),
                    short.join(", ")
                )));
            }
            let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &l) in labels.iter().enumerate() {
                members.entry(l).or_default().push(i);
            }
            let mut queues: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            let n_batches = (labels.len() / (p * k)).max(1);
            let mut out = Vec::with_capacity(n_batches);
            for _ in 0..n_batches {
                let mut classes = eligible.clone();
                classes.shuffle(&mut rng);
                classes.truncate(p);
                classes.sort_unstable();
                let mut batch = Vec::with_capacity(p * k);
                for c in classes {
                    let queue = queues.entry(c).or_default();
                    if queue.len() < k {
                        *queue = members[&c].clone();
                        queue.shuffle(&mut rng);
                    }
                    batch.extend(queue.drain(queue.len() - k..));
                }
                out.push(batch);
            }
            Ok(out)
        }
        _ => {
            let mut order: Vec<usize> = (0..labels.len()).collect();
            order.shuffle(&mut rng);
            let keep_tail = cfg.regime == Regime::Cel;
            let out: Vec<Vec<usize>> = order
                .chunks(cfg.batch_size)
                .filter(|c| keep_tail || c.len() == cfg.batch_size)
                .map(<[usize]>::to_vec)
                .collect();
            if out.is_empty() {
                return Err(TrainError::Sampler(format!(
                    "{} examples cannot fill one batch of {}",
                    labels.len(),
                    cfg.batch_size
                )));
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(regime: Regime, batch_size: usize, sampler: Sampler) -> TrainConfig {
        TrainConfig {
            regime,
            batch_size,
            sampler,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn shuffle_cel_keeps_tail() {
        let labels = vec![0; 10];
        let b = make_batches(&labels, &cfg(Regime::Cel, 4, Sampler::Auto), 3).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn shuffle_tel_drops_tail() {
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let b = make_batches(&labels, &cfg(Regime::Tel, 4, Sampler::Shuffle), 3).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4]);
    }

    #[test]
    fn balanced_batches_hold_k_of_p_classes() {
        let labels: Vec<usize> = (0..200).map(|i| i % 5).collect();
        let c = cfg(Regime::Tel, 32, Sampler::ClassBalanced { p: 4, k: 8 });
        for batch in make_batches(&labels, &c, 11).unwrap() {
            let counts = class_counts(&batch.iter().map(|&i| labels[i]).collect::<Vec<_>>());
            assert_eq!(counts.len(), 4);
            assert!(counts.values().all(|&n| n == 8));
            let mut uniq = batch.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), 32);
        }
    }

    #[test]
    fn same_seed_same_batches() {
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let c = cfg(Regime::Triplet, 6, Sampler::Auto);
        assert_eq!(
            make_batches(&labels, &c, 5).unwrap(),
            make_batches(&labels, &c, 5).unwrap()
        );
        assert_ne!(
            make_batches(&labels, &c, 5).unwrap(),
            make_batches(&labels, &c, 6).unwrap()
        );
    }

    #[test]
    fn auto_picks_largest_feasible_class_count() {
        let labels: Vec<usize> = (0..3000).map(|i| i % 10).collect();
        let c = cfg(Regime::Tel, 64, Sampler::Auto);
        assert_eq!(
            resolve_sampler(&c, &labels),
            Sampler::ClassBalanced { p: 8, k: 8 }
        );
        let c = cfg(Regime::Cel, 64, Sampler::Auto);
        assert_eq!(resolve_sampler(&c, &labels), Sampler::Shuffle);
    }

    #[test]
    fn infeasible_balance_names_short_class() {
        let labels = vec![0, 0, 0, 0, 1, 1, 1, 1, 2];
        let c = cfg(Regime::Tel, 6, Sampler::ClassBalanced { p: 3, k: 2 });
        let err = make_batches(&labels, &c, 0).unwrap_err().to_string();
        assert!(err.contains("class 2 has 1"), "{err}");
    }
}

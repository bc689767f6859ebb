use tel_core::audio::Spectrogram;
use tel_core::data::{Dataset, LabeledExample};
use tel_core::model::{is_head_param, ConvBlock, Model, ModelConfig};
use tel_core::train::{train, Regime, Sampler, StopReason, TrainConfig, TrainOptions};

const N_MELS: usize = 8;
const N_FRAMES: usize = 12;

/// Class 0 has energy in the low bands, class 1 in the high bands, plus a
/// small deterministic ripple so examples differ.
fn separable(n_per_class: usize, offset: usize) -> Dataset {
    let mut examples = Vec::new();
    for i in 0..n_per_class {
        for label in 0..2 {
            let k = i + offset;
            let values = (0..N_MELS * N_FRAMES)
                .map(|j| {
                    let mel = j / N_FRAMES;
                    let on = (label == 0 && mel < N_MELS / 2) || (label == 1 && mel >= N_MELS / 2);
                    let ripple = (((j * 7 + k * 13) % 11) as f32 - 5.0) * 0.02;
                    if on {
                        1.0 + ripple
                    } else {
                        ripple
                    }
                })
                .collect();
            examples.push(LabeledExample {
                id: format!("{label}_{k}"),
                label,
                speaker: format!("s{}", k % 3),
                group: None,
                features: Spectrogram::new(values, N_MELS, N_FRAMES, 0.01),
            });
        }
    }
    Dataset {
        class_names: vec!["low".into(), "high".into()],
        examples,
    }
}

fn model() -> Model<f32> {
    let cfg = ModelConfig {
        conv_blocks: vec![ConvBlock::new(4, 3, 1, 2)],
        embedding_dim: 8,
        n_classes: 2,
        l2_lambda: 1e-4,
        l2_conv: false,
        normalize_embeddings: false,
        input_shape: (N_MELS, N_FRAMES),
    };
    Model::init(cfg, 7).unwrap()
}

fn cfg(regime: Regime) -> TrainConfig {
    TrainConfig {
        regime,
        lr: 1e-2,
        batch_size: 8,
        max_epochs: 50,
        early_stop_patience: 50,
        seed: 3,
        margin: 0.2,
        sampler: Sampler::Auto,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_data_is_learned_in_every_regime() {
    let (tr, va) = (separable(12, 0), separable(4, 100));
    for regime in [Regime::Cel, Regime::Triplet, Regime::Tel] {
        let mut m = model();
        let report = train(&mut m, &tr, &va, &cfg(regime), &TrainOptions::default()).unwrap();
        let best = report.rows.iter().map(|r| r.train_acc).fold(0.0, f64::max);
        assert_eq!(best, 1.0, "{regime}: train accuracy peaked at {best}");
    }
}

#[test]
fn identical_seeds_identical_reports() {
    let (tr, va) = (separable(6, 0), separable(3, 50));
    let c = TrainConfig {
        max_epochs: 4,
        ..cfg(Regime::Tel)
    };
    let run = || {
        let mut m = model();
        let r = train(&mut m, &tr, &va, &c, &TrainOptions::default()).unwrap();
        (r, m)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(
        tel_core::eval::metrics_csv(&a),
        tel_core::eval::metrics_csv(&b)
    );
    assert_eq!(ma.checksum(), mb.checksum());
}

#[test]
fn zero_epochs_leave_model_untouched() {
    let (tr, va) = (separable(4, 0), separable(2, 50));
    let mut m = model();
    let before = m.clone();
    let r = train(
        &mut m,
        &tr,
        &va,
        &TrainConfig {
            max_epochs: 0,
            ..cfg(Regime::Tel)
        },
        &TrainOptions::default(),
    )
    .unwrap();
    assert!(r.rows.is_empty());
    assert_eq!(r.stop, StopReason::NoEpochs);
    assert_eq!(m, before);
}

#[test]
fn triplet_regime_never_moves_the_head() {
    let (tr, va) = (separable(6, 0), separable(3, 50));
    let mut m = model();
    let before = m.clone();
    let r = train(
        &mut m,
        &tr,
        &va,
        &TrainConfig {
            max_epochs: 5,
            ..cfg(Regime::Triplet)
        },
        &TrainOptions::default(),
    )
    .unwrap();
    assert!(r.optimizer_mining_calls > 0);
    for (a, b) in m.params().iter().zip(before.params()) {
        let same = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert_eq!(same, is_head_param(&a.name), "{}", a.name);
    }
}

#[test]
fn cel_regime_never_mines_for_the_optimizer() {
    let (tr, va) = (separable(6, 0), separable(3, 50));
    let mut m = model();
    let r = train(
        &mut m,
        &tr,
        &va,
        &TrainConfig {
            max_epochs: 3,
            ..cfg(Regime::Cel)
        },
        &TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(r.optimizer_mining_calls, 0);
    // Validation still reports mined-triplet loss.
    assert!(r.rows.iter().all(|row| row.val.mined_triplets > 0));
}

#[test]
fn early_stopping_respects_patience() {
    let (tr, va) = (separable(6, 0), separable(3, 50));
    let mut m = model();
    let c = TrainConfig {
        early_stop_patience: 1,
        lr: 0.5,
        max_epochs: 30,
        ..cfg(Regime::Cel)
    };
    let r = train(&mut m, &tr, &va, &c, &TrainOptions::default()).unwrap();
    let best = r.best_epoch.unwrap();
    assert!(r.rows.len() <= best + 1);
    let min = r
        .rows
        .iter()
        .map(|row| row.val.total)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(r.best_val_loss().unwrap(), min);
    assert_eq!(
        r.rows.iter().map(|row| row.epoch).collect::<Vec<_>>(),
        (1..=r.rows.len()).collect::<Vec<_>>()
    );
}

#[test]
fn single_class_triplet_run_fails_for_lack_of_triplets() {
    let mut tr = separable(6, 0);
    tr.examples.retain(|e| e.label == 0);
    let va = separable(2, 50);
    let mut m = model();
    let c = TrainConfig {
        max_epochs: 2,
        batch_size: 4,
        sampler: Sampler::Shuffle,
        ..cfg(Regime::Triplet)
    };
    let err = train(&mut m, &tr, &va, &c, &TrainOptions::default()).unwrap_err();
    assert!(
        err.to_string().contains("no batch held a valid triplet"),
        "{err}"
    );
}

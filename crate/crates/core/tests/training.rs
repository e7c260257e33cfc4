mod common;

use contrastive_age::autodiff::Tape;
use contrastive_age::model::{Model, ModelConfig};
use contrastive_age::protocol::{cross_validate, Protocol};
use contrastive_age::synth::{generate_dataset, SynthConfig};
use contrastive_age::tensor::Tensor;
use contrastive_age::train::{train, train_from, TrainConfig};
use contrastive_age::Error;

/// Straight-line forward pass written against the raw parameter arrays.
fn reference_forward(m: &Model, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let affine = |layer: &contrastive_age::model::Dense, h: &[f64]| -> Vec<f64> {
        let fan_out = layer.bias.len();
        (0..fan_out)
            .map(|o| {
                layer.bias.data()[o]
                    + (0..h.len())
                        .map(|i| h[i] * layer.weight.data()[i * fan_out + o])
                        .sum::<f64>()
            })
            .collect()
    };
    let (head, extractor) = m.layers().split_last().unwrap();
    let mut h = x.to_vec();
    for layer in extractor {
        h = affine(layer, &h)
            .into_iter()
            .map(|v| if v > 0.0 { v } else { 0.0 })
            .collect();
    }
    let logits = affine(head, &h);
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    (h, e.iter().map(|v| v / z).collect())
}

#[test]
fn forward_matches_reference_implementation() {
    let cfg = ModelConfig {
        input_dim: 6,
        hidden_widths: vec![9, 7],
        feature_dim: 5,
        num_ages: 11,
    };
    let m = Model::init(cfg, 21).unwrap();
    let mut tape = Tape::new();
    let params = m.bind(&mut tape, false);
    let xs: Vec<Vec<f64>> = (0..4)
        .map(|r| (0..6).map(|c| ((r * 6 + c) as f64 * 0.37).sin()).collect())
        .collect();
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let input = tape.constant(Tensor::from_rows(&refs).unwrap());
    let batch = m.forward_tape(&mut tape, &params, input).unwrap();
    let (bf, bp) = (
        tape.value(batch.features).unwrap().clone(),
        tape.value(batch.probs).unwrap().clone(),
    );
    for (r, x) in xs.iter().enumerate() {
        let (f, s) = reference_forward(&m, x);
        let out = m.forward(x).unwrap();
        for (a, b) in f.iter().zip(&out.features).chain(f.iter().zip(bf.row(r))) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in s.iter().zip(&out.probs).chain(s.iter().zip(bp.row(r))) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!((out.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

fn small_synth(noise: f64, seed: u64) -> contrastive_age::dataset::LabeledDataset {
    let cfg = SynthConfig {
        num_identities: 40,
        samples_per_identity: 5,
        num_ages: 20,
        input_dim: 16,
        identity_dims: 8,
        age_dims: 4,
        noise_std: noise,
        age_bin_weights: None,
    };
    generate_dataset(&cfg, seed).unwrap().0
}

#[test]
fn zero_epochs_returns_initialization() {
    let ds = small_synth(0.1, 0);
    let cfg = TrainConfig {
        epochs: 0,
        seed: 13,
        ..TrainConfig::default()
    };
    let out = train(&ds, &cfg).unwrap();
    let init = Model::init(cfg.model_config(&ds), 13).unwrap();
    assert!(out.model.bitwise_eq(&init));
    assert!(out.history.is_empty());
}

#[test]
fn training_is_bitwise_reproducible() {
    let ds = small_synth(0.1, 1);
    let cfg = TrainConfig {
        epochs: 3,
        seed: 4,
        ..TrainConfig::default()
    };
    let a = train(&ds, &cfg).unwrap();
    let b = train(&ds, &cfg).unwrap();
    assert!(a.model.bitwise_eq(&b.model));
    assert_eq!(
        serde_json::to_string(&a.history).unwrap(),
        serde_json::to_string(&b.history).unwrap()
    );
}

#[test]
fn training_loss_mostly_decreases_on_noiseless_data() {
    let (mut steps, mut down) = (0, 0);
    for seed in 0..3 {
        let ds = small_synth(0.0, seed);
        let cfg = TrainConfig {
            epochs: 20,
            seed,
            ..TrainConfig::default()
        };
        let hist = train(&ds, &cfg).unwrap().history;
        for w in hist.windows(2) {
            steps += 1;
            if w[1].loss.total <= w[0].loss.total {
                down += 1;
            }
        }
        assert!(hist.last().unwrap().loss.total < hist[0].loss.total);
    }
    assert!(
        down as f64 >= 0.9 * steps as f64,
        "{down}/{steps} epochs decreased"
    );
}

#[test]
fn mv_configuration_reports_no_contrastive_terms() {
    let ds = small_synth(0.1, 2);
    let cfg = TrainConfig {
        epochs: 2,
        lambda_c: 0.0,
        lambda_t: 0.0,
        ..TrainConfig::default()
    };
    for r in train(&ds, &cfg).unwrap().history {
        assert_eq!((r.loss.l_c, r.loss.l_t), (0.0, 0.0));
        let expect = r.loss.l_s + 0.2 * r.loss.l_m + 0.05 * r.loss.l_v;
        assert!((r.loss.total - expect).abs() <= 1e-9 * expect.max(1.0));
    }
}

#[test]
fn continuing_training_matches_longer_run_start() {
    let ds = small_synth(0.1, 3);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let init = Model::init(cfg.model_config(&ds), cfg.seed).unwrap();
    let a = train_from(init, &ds, &cfg).unwrap();
    let b = train(&ds, &cfg).unwrap();
    assert!(a.model.bitwise_eq(&b.model));
}

#[test]
fn infeasible_triplets_are_reported() {
    let ds = common::labeled(&[("solo", 1), ("solo", 2), ("solo", 3)], 3);
    let cfg = TrainConfig {
        epochs: 1,
        lambda_t: 1.0,
        ..TrainConfig::default()
    };
    let err = train(&ds, &cfg).unwrap_err();
    assert!(matches!(err, Error::ProtocolIncompatible(_)), "{err}");
    // The MV objective has no sampling prerequisites.
    let mv = TrainConfig {
        lambda_c: 0.0,
        lambda_t: 0.0,
        ..cfg
    };
    assert!(train(&ds, &mv).is_ok());
}

#[test]
fn lopo_needs_two_identities() {
    let ds = common::labeled(&[("solo", 1), ("solo", 2)], 3);
    let cfg = TrainConfig {
        epochs: 1,
        lambda_c: 0.0,
        lambda_t: 0.0,
        ..TrainConfig::default()
    };
    let err = cross_validate(&ds, &cfg, Protocol::Lopo, 0, 0, 1).unwrap_err();
    assert!(matches!(err, Error::ProtocolIncompatible(_)), "{err}");
}

#[test]
fn cross_validation_mean_is_fold_average() {
    let ds = small_synth(0.1, 5);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let r = cross_validate(&ds, &cfg, Protocol::Se, 4, 1, 2).unwrap();
    assert_eq!(r.folds.len(), 4);
    let mean = r.folds.iter().map(|f| f.mae).sum::<f64>() / 4.0;
    assert_eq!(r.mean_mae, mean);
    let serial = cross_validate(&ds, &cfg, Protocol::Se, 4, 1, 1).unwrap();
    assert_eq!(
        serde_json::to_string(&r).unwrap(),
        serde_json::to_string(&serial).unwrap()
    );
}

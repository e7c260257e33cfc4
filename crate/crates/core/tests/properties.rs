mod common;

use contrastive_age::dataset::{DatasetMeta, FaceSample, LabeledDataset};
use contrastive_age::losses;
use contrastive_age::model::{predict_age, Model, ModelConfig};
use contrastive_age::sampler::{negative_set, positive_set};
use proptest::prelude::*;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0..20.0f64, len)
}

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, len).prop_filter_map("non-zero mass", |v| {
        let z: f64 = v.iter().sum();
        (z > 1e-6).then(|| v.iter().map(|x| x / z).collect())
    })
}

proptest! {
    #[test]
    fn softmax_is_normalized_and_shift_invariant(x in finite_vec(7), c in -50.0..50.0f64) {
        let s = losses::softmax(&x).unwrap();
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let t = losses::softmax(&shifted).unwrap();
        for (a, b) in s.iter().zip(&t) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn cosine_loss_ignores_positive_scale(
        f in finite_vec(6), g in finite_vec(6), c in 1e-3..1e3f64,
    ) {
        prop_assume!(f.iter().any(|v| v.abs() > 1e-3) && g.iter().any(|v| v.abs() > 1e-3));
        let base = losses::cosine_loss(&f, &g).unwrap();
        let scaled: Vec<f64> = f.iter().map(|v| c * v).collect();
        prop_assert!((losses::cosine_loss(&scaled, &g).unwrap() - base).abs() <= 1e-12);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&base));
    }

    #[test]
    fn triplet_loss_is_monotone_in_distances(
        sa in finite_vec(4), sp in finite_vec(4), sn in finite_vec(4),
        t in 1.0..3.0f64, alpha in 0.0..1.0f64,
    ) {
        let base = losses::triplet_margin_loss(&sa, &sp, &sn, alpha);
        let away = |s: &[f64]| -> Vec<f64> { sa.iter().zip(s).map(|(a, v)| a + t * (v - a)).collect() };
        // Pushing the negative away never increases the loss.
        prop_assert!(losses::triplet_margin_loss(&sa, &sp, &away(&sn), alpha) <= base + 1e-9);
        // Pushing the positive away never decreases it.
        prop_assert!(losses::triplet_margin_loss(&sa, &away(&sp), &sn, alpha) >= base - 1e-9);
    }

    #[test]
    fn losses_are_non_negative(s in distribution(6), q in distribution(6), y in 1usize..=6) {
        prop_assert!(losses::kld_loss(&s, &q) >= -1e-15);
        prop_assert!(losses::variance_loss(&s) >= 0.0);
        prop_assert!(losses::mean_loss(&s, y, losses::MeanLossForm::Squared) >= 0.0);
        prop_assert!(losses::softmax_ce(&s, y).unwrap() >= 0.0);
    }

    #[test]
    fn predicted_age_moves_up_with_mass(s in distribution(8), j in 0usize..8, k in 0usize..8, frac in 0.0..1.0f64) {
        let (lo, hi) = (j.min(k), j.max(k));
        let before = predict_age(&s);
        let mut moved = s.clone();
        let m = frac * moved[lo];
        moved[lo] -= m;
        moved[hi] += m;
        prop_assert!(predict_age(&moved) >= before - 1e-12);
        prop_assert!((1.0 - 1e-12..=8.0 + 1e-12).contains(&before));
    }

    #[test]
    fn indexes_survive_shuffles(
        rows in prop::collection::vec((0usize..6, 1usize..=5), 1..40),
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rows = rows;
        rows.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let names: Vec<(String, usize)> = rows.iter().map(|&(i, a)| (format!("p{i}"), a)).collect();
        let refs: Vec<(&str, usize)> = names.iter().map(|(s, a)| (s.as_str(), *a)).collect();
        let ds = common::labeled(&refs, 5);
        prop_assert!(ds.indexes_consistent());
        for a in 0..ds.len() {
            prop_assert_eq!(positive_set(&ds, a), common::brute_positives(&ds, a));
            prop_assert_eq!(negative_set(&ds, a), common::brute_negatives(&ds, a));
        }
    }

    #[test]
    fn checkpoints_round_trip_bitwise(seed in any::<u64>()) {
        let cfg = ModelConfig { input_dim: 5, hidden_widths: vec![7, 3], feature_dim: 4, num_ages: 6 };
        let m = Model::init(cfg, seed).unwrap();
        let back = Model::from_checkpoint_str(&m.to_checkpoint_string()).unwrap();
        prop_assert!(m.bitwise_eq(&back));
    }
}

#[test]
fn forward_shapes_hold_for_valid_inputs() {
    let cfg = ModelConfig {
        input_dim: 3,
        hidden_widths: vec![5],
        feature_dim: 4,
        num_ages: 9,
    };
    let m = Model::init(cfg, 1).unwrap();
    let out = m.forward(&[0.1, -2.0, 3.0]).unwrap();
    assert_eq!((out.features.len(), out.probs.len()), (4, 9));
    assert!(m.forward(&[0.0; 2]).is_err());
    assert!(m.forward(&[0.0, f64::NAN, 1.0]).is_err());
}

#[test]
fn out_of_range_ages_are_rejected() {
    let bad = vec![FaceSample {
        input: vec![0.0],
        age: 0,
        identity: "a".into(),
    }];
    assert!(LabeledDataset::new(
        bad,
        DatasetMeta {
            input_dim: 1,
            num_ages: 3
        }
    )
    .is_err());
    let text = "identity,age,v0\na,4,0.5\n";
    let err = LabeledDataset::parse_csv(
        text,
        Some(DatasetMeta {
            input_dim: 1,
            num_ages: 3,
        }),
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

mod common;

use std::collections::HashMap;

use contrastive_age::sampler::{
    negative_set, positive_set, sample_triplet_batch, SamplerConfig, TripletSampler,
};
use contrastive_age::synth::{
    age_bin, generate_dataset, SynthConfig, FGNET_AGE_BINS, MORPH_AGE_BINS,
};

use common::chi_square_p;

/// Pooled goodness-of-fit of observed draws against uniform over each anchor's set.
fn pooled_uniformity(
    counts: &HashMap<(usize, usize), u64>,
    sets: &[Vec<usize>],
    per_anchor: &[u64],
) -> (f64, f64) {
    let (mut stat, mut dof) = (0.0, 0.0);
    for (a, set) in sets.iter().enumerate() {
        if set.len() < 2 || per_anchor[a] == 0 {
            continue;
        }
        let expected = per_anchor[a] as f64 / set.len() as f64;
        for &p in set {
            let obs = *counts.get(&(a, p)).unwrap_or(&0) as f64;
            stat += (obs - expected).powi(2) / expected;
        }
        dof += (set.len() - 1) as f64;
    }
    (stat, dof)
}

#[test]
fn positives_and_negatives_are_uniform() {
    // 30 samples: 6 identities, ages 1..=4.
    let rows: Vec<(String, usize)> = (0..30)
        .map(|i| (format!("p{}", i % 6), 1 + (i * 7 / 3) % 4))
        .collect();
    let refs: Vec<(&str, usize)> = rows.iter().map(|(s, a)| (s.as_str(), *a)).collect();
    let ds = common::labeled(&refs, 4);
    let sampler = TripletSampler::new(
        &ds,
        SamplerConfig {
            batch_size: 30,
            triplets_per_anchor: 1,
            require_negatives: true,
        },
    )
    .unwrap();

    let mut pos = HashMap::new();
    let mut neg = HashMap::new();
    let mut pos_draws = vec![0u64; ds.len()];
    let mut neg_draws = vec![0u64; ds.len()];
    let mut draws = 0;
    let mut epoch = 0;
    while draws < 100_000 {
        for t in sampler.epoch(5, epoch).into_iter().flatten() {
            if let Some(p) = t.positive {
                *pos.entry((t.anchor, p)).or_insert(0) += 1;
                pos_draws[t.anchor] += 1;
            }
            if let Some(n) = t.negative {
                *neg.entry((t.anchor, n)).or_insert(0) += 1;
                neg_draws[t.anchor] += 1;
            }
            draws += 1;
        }
        epoch += 1;
    }
    let pos_sets: Vec<Vec<usize>> = (0..ds.len()).map(|a| positive_set(&ds, a)).collect();
    let neg_sets: Vec<Vec<usize>> = (0..ds.len()).map(|a| negative_set(&ds, a)).collect();
    for (name, counts, sets, per) in [
        ("positive", &pos, &pos_sets, &pos_draws),
        ("negative", &neg, &neg_sets, &neg_draws),
    ] {
        let (stat, dof) = pooled_uniformity(counts, sets, per);
        assert!(dof > 0.0, "{name}: no anchor with a choice");
        let p = chi_square_p(stat, dof);
        assert!(p > 0.01, "{name}: chi2 {stat:.1} on {dof} dof, p = {p:.4}");
        assert!(
            counts.keys().all(|(a, x)| sets[*a].contains(x)),
            "{name}: draw outside its set"
        );
    }
}

#[test]
fn batches_repeat_per_seed() {
    let ds = common::random_labeled(200, 20, 10, 1);
    let a = sample_triplet_batch(&ds, 32, 99, true).unwrap();
    let b = sample_triplet_batch(&ds, 32, 99, true).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, sample_triplet_batch(&ds, 32, 100, true).unwrap());
}

fn bin_frequency_p(weights: [f64; 4], seed: u64) -> f64 {
    let cfg = SynthConfig {
        num_identities: 2000,
        samples_per_identity: 5,
        age_bin_weights: Some(weights),
        ..SynthConfig::default()
    };
    let (ds, _) = generate_dataset(&cfg, seed).unwrap();
    assert_eq!(ds.len(), 10_000);
    let mut observed = [0.0; 4];
    for s in ds.samples() {
        observed[age_bin(s.age, cfg.num_ages)] += 1.0;
    }
    let total: f64 = weights.iter().sum();
    let stat: f64 = (0..4)
        .map(|b| {
            let e = ds.len() as f64 * weights[b] / total;
            (observed[b] - e).powi(2) / e
        })
        .sum();
    chi_square_p(stat, 3.0)
}

#[test]
fn age_bins_follow_configured_weights() {
    for (weights, seed) in [(MORPH_AGE_BINS, 1), (FGNET_AGE_BINS, 2)] {
        let p = bin_frequency_p(weights, seed);
        assert!(p > 0.01, "{weights:?}: p = {p}");
    }
}

#[test]
fn noiseless_generator_factorizes_identity_and_age() {
    let cfg = SynthConfig {
        noise_std: 0.0,
        ..SynthConfig::default()
    };
    let (ds, truth) = generate_dataset(&cfg, 4).unwrap();
    let id_dims = cfg.identity_dims;

    // Linear identity probe: score_k(x) = 2 z_k·x − ‖z_k‖² over the identity coordinates.
    for (i, s) in ds.samples().iter().enumerate() {
        let x = &s.input[..id_dims];
        let best = truth
            .identity_codes
            .iter()
            .enumerate()
            .map(|(k, z)| {
                (
                    k,
                    2.0 * z.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                        - z.iter().map(|a| a * a).sum::<f64>(),
                )
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        assert_eq!(best, truth.identity_index[i]);
    }

    // Monotone age probe: every age coordinate orders samples exactly by age.
    let samples = ds.samples();
    for k in 0..cfg.age_dims {
        let c = id_dims + k;
        for a in samples {
            for b in samples {
                if a.age < b.age {
                    assert!(a.input[c] < b.input[c], "coordinate {c}");
                } else if a.age == b.age {
                    assert_eq!(a.input[c], b.input[c]);
                }
            }
        }
    }
}

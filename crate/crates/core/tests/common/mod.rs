#![allow(dead_code)]

use contrastive_age::autodiff::{Tape, Var};
use contrastive_age::dataset::{DatasetMeta, FaceSample, LabeledDataset};
use contrastive_age::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Dataset from `(identity, age)` pairs with one-dimensional dummy inputs.
pub fn labeled(rows: &[(&str, usize)], num_ages: usize) -> LabeledDataset {
    let samples = rows
        .iter()
        .map(|&(id, age)| FaceSample {
            input: vec![age as f64],
            age,
            identity: id.to_string(),
        })
        .collect();
    LabeledDataset::new(
        samples,
        DatasetMeta {
            input_dim: 1,
            num_ages,
        },
    )
    .unwrap()
}

pub fn random_labeled(n: usize, identities: usize, num_ages: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<(String, usize)> = (0..n)
        .map(|_| {
            (
                format!("q{}", rng.random_range(0..identities)),
                rng.random_range(1..=num_ages),
            )
        })
        .collect();
    let refs: Vec<(&str, usize)> = rows.iter().map(|(s, a)| (s.as_str(), *a)).collect();
    labeled(&refs, num_ages)
}

/// Brute-force positives: same age, different identity.
pub fn brute_positives(ds: &LabeledDataset, a: usize) -> Vec<usize> {
    let s = ds.samples();
    (0..s.len())
        .filter(|&p| s[p].age == s[a].age && s[p].identity != s[a].identity)
        .collect()
}

/// Brute-force negatives: different age and different identity.
pub fn brute_negatives(ds: &LabeledDataset, a: usize) -> Vec<usize> {
    let s = ds.samples();
    (0..s.len())
        .filter(|&n| s[n].age != s[a].age && s[n].identity != s[a].identity)
        .collect()
}

/// Upper-tail p-value of a chi-square statistic.
pub fn chi_square_p(statistic: f64, dof: f64) -> f64 {
    1.0 - ChiSquared::new(dof).unwrap().cdf(statistic)
}

/// Tape gradient of `f` at `point` and central differences of `value` at
/// `point`, compared as `max |g − fd| / max(1, |fd|)`.
pub fn gradient_error(
    f: impl Fn(&mut Tape, Var) -> Var,
    value: impl Fn(&Tensor) -> f64,
    point: &Tensor,
) -> f64 {
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let loss = f(&mut tape, x);
    let grads = tape.backward(loss).unwrap();
    let analytic = grads
        .get(x)
        .map(|g| g.data().to_vec())
        .unwrap_or(vec![0.0; point.len()]);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (j, &g) in analytic.iter().enumerate() {
        let mut up = point.clone();
        up.data_mut()[j] += h;
        let mut down = point.clone();
        down.data_mut()[j] -= h;
        let fd = (value(&up) - value(&down)) / (2.0 * h);
        worst = worst_of(worst, (g - fd).abs() / fd.abs().max(1.0));
    }
    worst
}

/// Maximum that keeps NaN instead of discarding it.
pub fn worst_of(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

/// Value of `f` evaluated on a fresh tape with a constant input.
pub fn tape_value(f: impl Fn(&mut Tape, Var) -> Var, point: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(point.clone());
    let out = f(&mut tape, x);
    tape.value(out).unwrap().item().unwrap()
}

//! Built-in verification suites: gradients against finite differences,
//! sampler membership constraints, and fold invariants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{grad_check_with, Tape, Var};
use crate::dataset::{DatasetMeta, FaceSample, LabeledDataset};
use crate::error::Result;
use crate::losses::{self, LossWeights, MeanLossForm};
use crate::model::{Model, ModelConfig};
use crate::protocol::{fold_identities, make_folds, Fold, Protocol};
use crate::sampler::{
    negative_set, positive_set, triplet_is_valid, SamplerConfig, Triplet, TripletSampler,
};
use crate::tensor::Tensor;
use crate::train::{batch_objective, TrainConfig};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;
/// Minimum distance of relu inputs and hinge arguments from their kink.
pub const KINK_MARGIN: f64 = 1e-2;

pub const GRADIENT_CASES: [&str; 8] = [
    "softmax_ce",
    "mean",
    "variance",
    "cosine",
    "triplet",
    "kld",
    "total",
    "end_to_end",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfCheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfCheckOptions {
    /// Random points per gradient case.
    pub points: usize,
    pub seed: u64,
    /// Gradient case whose analytic gradient is deliberately corrupted.
    pub inject_fault: Option<String>,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        Self {
            points: 100,
            seed: 0,
            inject_fault: None,
        }
    }
}

pub fn run(opts: &SelfCheckOptions) -> SelfCheckReport {
    let mut outcomes = gradient_suite(opts.points, opts.seed, opts.inject_fault.as_deref());
    outcomes.extend(sampler_suite(opts.seed));
    outcomes.extend(split_suite(opts.seed));
    SelfCheckReport { outcomes }
}

// Shapes used by the loss-level cases.
const B: usize = 3;
const A: usize = 5;
const D: usize = 4;

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn block(tape: &mut Tape, x: Var, k: usize, rows: usize) -> Result<Var> {
    let idx: Vec<usize> = (k * rows..(k + 1) * rows).collect();
    tape.select_rows(x, &idx)
}

const LABELS: [usize; B] = [1, 3, 5];

fn row_softmax(t: &Tensor, row: usize) -> Vec<f64> {
    losses::softmax(t.row(row)).expect("finite logits")
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Hinge arguments of the triplet term for stacked `[anchors; positives; negatives]` logits.
fn hinge_clear(logits: &Tensor, alpha: f64) -> bool {
    (0..B).all(|i| {
        let (sa, sp, sn) = (
            row_softmax(logits, i),
            row_softmax(logits, B + i),
            row_softmax(logits, 2 * B + i),
        );
        (sq_dist(&sa, &sp) - sq_dist(&sa, &sn) + alpha).abs() >= KINK_MARGIN
    })
}

fn loss_total(tape: &mut Tape, x: Var, mix: &Tensor, w: &LossWeights) -> Result<Var> {
    let probs = tape.softmax(x)?;
    let anchors = block(tape, x, 0, B)?;
    let log_a = tape.log_softmax(anchors)?;
    let sa = block(tape, probs, 0, B)?;
    let sp = block(tape, probs, 1, B)?;
    let sn = block(tape, probs, 2, B)?;
    let mix = tape.constant(mix.clone());
    let feats = tape.matmul(x, mix)?;
    let fa = block(tape, feats, 0, B)?;
    let fp = block(tape, feats, 1, B)?;

    let terms = [
        (1.0, losses::softmax_ce_batch(tape, log_a, &LABELS)?),
        (
            w.lambda_m,
            losses::mean_loss_batch(tape, sa, &LABELS, MeanLossForm::Squared)?,
        ),
        (w.lambda_v, losses::variance_loss_batch(tape, sa)?),
        (w.lambda_c, losses::cosine_loss_batch(tape, fa, fp)?),
        (
            w.lambda_t,
            losses::triplet_margin_loss_batch(tape, sa, sp, sn, w.alpha)?,
        ),
    ];
    let mut total = terms[0].1;
    for &(lambda, term) in &terms[1..] {
        let scaled = tape.scale(term, lambda)?;
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

/// Worst relative error of one loss-level case at one random point.
fn loss_case_point(case: &str, rng: &mut ChaCha8Rng, tamper: &dyn Fn(&mut [f64])) -> Result<f64> {
    let w = LossWeights::default();
    let check = |point: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Result<Var>| {
        grad_check_with(f, point, GRAD_EPS, tamper).map(|r| r.max_relative_error)
    };
    match case {
        "softmax_ce" => {
            let p = normal_tensor(rng, &[B, A], 2.0);
            check(&p, &|t, x| {
                let lp = t.log_softmax(x)?;
                losses::softmax_ce_batch(t, lp, &LABELS)
            })
        }
        "mean" => {
            let p = normal_tensor(rng, &[B, A], 2.0);
            check(&p, &|t, x| {
                let s = t.softmax(x)?;
                losses::mean_loss_batch(t, s, &LABELS, MeanLossForm::Squared)
            })
        }
        "variance" => {
            let p = normal_tensor(rng, &[B, A], 2.0);
            check(&p, &|t, x| {
                let s = t.softmax(x)?;
                losses::variance_loss_batch(t, s)
            })
        }
        "cosine" => {
            let p = normal_tensor(rng, &[2 * B, D], 1.0);
            check(&p, &|t, x| {
                let fa = block(t, x, 0, B)?;
                let fp = block(t, x, 1, B)?;
                losses::cosine_loss_batch(t, fa, fp)
            })
        }
        "triplet" => {
            let p = loop {
                let p = normal_tensor(rng, &[3 * B, A], 2.0);
                if hinge_clear(&p, w.alpha) {
                    break p;
                }
            };
            check(&p, &|t, x| {
                let s = t.softmax(x)?;
                let sa = block(t, s, 0, B)?;
                let sp = block(t, s, 1, B)?;
                let sn = block(t, s, 2, B)?;
                losses::triplet_margin_loss_batch(t, sa, sp, sn, w.alpha)
            })
        }
        "kld" => {
            let p = normal_tensor(rng, &[2 * B, A], 2.0);
            check(&p, &|t, x| {
                let s = t.softmax(x)?;
                let sa = block(t, s, 0, B)?;
                let sp = block(t, s, 1, B)?;
                losses::kld_loss_batch(t, sa, sp)
            })
        }
        "total" => {
            let mix = normal_tensor(rng, &[A, D], 1.0);
            let p = loop {
                let p = normal_tensor(rng, &[3 * B, A], 2.0);
                if hinge_clear(&p, w.alpha) {
                    break p;
                }
            };
            check(&p, &|t, x| loss_total(t, x, &mix, &w))
        }
        other => unreachable!("unknown loss case {other}"),
    }
}

/// Tiny model and batch for the end-to-end case: two age groups with two
/// identities each, plus an anchor without a positive.
fn tiny_problem(rng: &mut ChaCha8Rng) -> Result<(Model, LabeledDataset, Vec<Triplet>)> {
    let config = ModelConfig {
        input_dim: 8,
        hidden_widths: vec![16],
        feature_dim: 8,
        num_ages: 5,
    };
    let people = [("a", 2), ("b", 2), ("c", 4), ("d", 4), ("a", 5)];
    let samples = people
        .iter()
        .map(|&(id, age)| FaceSample {
            input: (0..8)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
            age,
            identity: id.into(),
        })
        .collect();
    let ds = LabeledDataset::new(
        samples,
        DatasetMeta {
            input_dim: 8,
            num_ages: 5,
        },
    )?;
    let mut model = Model::init(config, rng.random())?;
    for layer in model.layers_mut() {
        for b in layer.bias.data_mut() {
            *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let triplets = vec![
        Triplet {
            anchor: 0,
            positive: Some(1),
            negative: Some(2),
        },
        Triplet {
            anchor: 2,
            positive: Some(3),
            negative: Some(0),
        },
        Triplet {
            anchor: 4,
            positive: None,
            negative: Some(1),
        },
    ];
    Ok((model, ds, triplets))
}

fn tiny_problem_clear(
    model: &Model,
    ds: &LabeledDataset,
    triplets: &[Triplet],
    alpha: f64,
) -> Result<bool> {
    let mut probs = Vec::with_capacity(ds.len());
    for s in ds.samples() {
        let trace = model.forward_trace(&s.input)?;
        if trace
            .preactivations
            .iter()
            .flatten()
            .any(|z| z.abs() < KINK_MARGIN)
        {
            return Ok(false);
        }
        probs.push(trace.probs);
    }
    Ok(triplets.iter().all(|t| match (t.positive, t.negative) {
        (Some(p), Some(n)) => {
            let a = &probs[t.anchor];
            (sq_dist(a, &probs[p]) - sq_dist(a, &probs[n]) + alpha).abs() >= KINK_MARGIN
        }
        _ => true,
    }))
}

/// Worst relative error over every parameter of a tiny model at one random point.
fn end_to_end_point(rng: &mut ChaCha8Rng, tamper: &dyn Fn(&mut [f64])) -> Result<f64> {
    let cfg = TrainConfig::default();
    let (model, ds, triplets) = loop {
        let (m, ds, t) = tiny_problem(rng)?;
        if tiny_problem_clear(&m, &ds, &t, cfg.alpha)? {
            break (m, ds, t);
        }
    };
    let mut worst: f64 = 0.0;
    for (k, point) in model.parameters().into_iter().enumerate() {
        let f = |tape: &mut Tape, x: Var| -> Result<Var> {
            let mut params = model.bind(tape, false);
            let (layer, slot) = (k / 2, k % 2);
            if slot == 0 {
                params.layers[layer].0 = x;
            } else {
                params.layers[layer].1 = x;
            }
            Ok(batch_objective(tape, &model, &params, &ds, &triplets, &cfg)?.0)
        };
        let r = grad_check_with(f, point, GRAD_EPS, tamper)?;
        worst = worst_of(worst, r.max_relative_error);
    }
    Ok(worst)
}

fn worst_of(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

fn corrupt(g: &mut [f64]) {
    for v in g {
        *v = *v * 1.01 + 1e-2;
    }
}

/// Worst relative error of a gradient case over `points` seeded points.
pub fn gradient_case(case: &str, points: usize, seed: u64, faulty: bool) -> Result<f64> {
    let tamper: &dyn Fn(&mut [f64]) = if faulty { &corrupt } else { &|_| {} };
    let stream = GRADIENT_CASES.iter().position(|c| *c == case).unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, stream));
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let err = if case == "end_to_end" {
            end_to_end_point(&mut rng, tamper)?
        } else {
            loss_case_point(case, &mut rng, tamper)?
        };
        worst = worst_of(worst, err);
    }
    Ok(worst)
}

pub fn gradient_suite(points: usize, seed: u64, fault: Option<&str>) -> Vec<CheckOutcome> {
    GRADIENT_CASES
        .iter()
        .map(|&case| {
            let faulty = fault == Some(case);
            let (passed, detail) = match gradient_case(case, points, seed, faulty) {
                Ok(err) => (
                    err < GRAD_TOLERANCE,
                    format!("max relative error {err:.3e} over {points} points (tolerance {GRAD_TOLERANCE:e})"),
                ),
                Err(e) => (false, e.to_string()),
            };
            CheckOutcome {
                suite: "gradients",
                name: case.into(),
                passed,
                detail,
            }
        })
        .collect()
}

/// Dataset with random identities and ages; inputs are irrelevant and one-dimensional.
pub fn random_dataset(n: usize, identities: usize, num_ages: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| FaceSample {
            input: vec![0.0],
            age: rng.random_range(1..=num_ages),
            identity: format!("p{}", rng.random_range(0..identities)),
        })
        .collect();
    LabeledDataset::new(
        samples,
        DatasetMeta {
            input_dim: 1,
            num_ages,
        },
    )
    .expect("labels are in range")
}

fn outcome(
    suite: &'static str,
    name: &str,
    failure: Option<String>,
    ok_detail: String,
) -> CheckOutcome {
    CheckOutcome {
        suite,
        name: name.into(),
        passed: failure.is_none(),
        detail: failure.unwrap_or(ok_detail),
    }
}

pub fn sampler_suite(seed: u64) -> Vec<CheckOutcome> {
    let ds = random_dataset(1000, 60, 30, crate::derive_seed(seed, 100));
    let mut out = Vec::new();

    let mut failure = None;
    for a in 0..ds.len() {
        let (ya, ia) = (ds.age(a), ds.identity_id(a));
        let pos: Vec<usize> = (0..ds.len())
            .filter(|&p| ds.age(p) == ya && ds.identity_id(p) != ia)
            .collect();
        let neg: Vec<usize> = (0..ds.len())
            .filter(|&n| ds.age(n) != ya && ds.identity_id(n) != ia)
            .collect();
        if positive_set(&ds, a) != pos || negative_set(&ds, a) != neg {
            failure = Some(format!("anchor {a} disagrees with the brute-force filter"));
            break;
        }
    }
    out.push(outcome(
        "sampler",
        "membership_sets",
        failure,
        format!("{} anchors match brute force", ds.len()),
    ));

    let target = 100_000;
    let config = SamplerConfig {
        batch_size: 64,
        triplets_per_anchor: 1,
        require_negatives: true,
    };
    let failure = match TripletSampler::new(&ds, config) {
        Err(e) => Some(e.to_string()),
        Ok(sampler) => {
            let mut seen = 0;
            let mut failure = None;
            let mut epoch = 0;
            'draw: while seen < target {
                for t in sampler.epoch(seed, epoch).into_iter().flatten() {
                    let presence_ok = t.positive.is_some()
                        == !positive_set(&ds, t.anchor).is_empty()
                        && t.negative.is_some() == (sampler.negative_count(t.anchor) > 0);
                    if !triplet_is_valid(&ds, &t) || !presence_ok {
                        failure = Some(format!("invalid triplet {t:?}"));
                        break 'draw;
                    }
                    seen += 1;
                }
                epoch += 1;
            }
            failure
        }
    };
    out.push(outcome(
        "sampler",
        "triplet_constraints",
        failure,
        format!("{target} triplets valid"),
    ));

    let single = random_dataset(10, 1, 5, seed);
    let failure = match TripletSampler::new(&single, config) {
        Err(crate::Error::ProtocolIncompatible(_)) => None,
        other => Some(format!("single-identity dataset not rejected: {other:?}")),
    };
    out.push(outcome(
        "sampler",
        "infeasible_rejected",
        failure,
        "single identity rejected".into(),
    ));
    out
}

fn partition_failure(ds: &LabeledDataset, folds: &[Fold]) -> Option<String> {
    let mut hits = vec![0usize; ds.len()];
    for (i, f) in folds.iter().enumerate() {
        for &t in &f.test {
            hits[t] += 1;
        }
        let mut covered: Vec<usize> = f.train.iter().chain(&f.test).copied().collect();
        covered.sort_unstable();
        if covered != (0..ds.len()).collect::<Vec<_>>() {
            return Some(format!("fold {i}: train and test do not split the dataset"));
        }
    }
    hits.iter()
        .position(|&h| h != 1)
        .map(|s| format!("sample {s} appears in {} test folds", hits[s]))
}

pub fn split_suite(seed: u64) -> Vec<CheckOutcome> {
    let ds = random_dataset(400, 82, 20, crate::derive_seed(seed, 200));
    let mut out = Vec::new();
    for protocol in [Protocol::Rs, Protocol::Se, Protocol::Lopo] {
        let name = format!("{protocol}_partition");
        let failure = match make_folds(&ds, protocol, 5, seed) {
            Err(e) => Some(e.to_string()),
            Ok(folds) => partition_failure(&ds, &folds).or_else(|| match protocol {
                Protocol::Se => folds.iter().enumerate().find_map(|(i, f)| {
                    let (train, test) = fold_identities(&ds, f);
                    test.keys()
                        .any(|id| train.contains_key(id))
                        .then(|| format!("fold {i}: an identity is on both sides"))
                }),
                Protocol::Lopo => (folds.len() != ds.num_identities()).then(|| {
                    format!(
                        "{} folds for {} identities",
                        folds.len(),
                        ds.num_identities()
                    )
                }),
                Protocol::Rs => None,
            }),
        };
        out.push(outcome("splits", &name, failure, "ok".into()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_cases_pass_at_few_points() {
        for case in GRADIENT_CASES {
            let err = gradient_case(case, 3, 7, false).unwrap();
            assert!(err < GRAD_TOLERANCE, "{case}: {err}");
        }
    }

    #[test]
    fn injected_fault_is_named() {
        let outcomes = gradient_suite(2, 0, Some("kld"));
        let failed: Vec<&str> = outcomes
            .iter()
            .filter(|o| !o.passed)
            .map(|o| o.name.as_str())
            .collect();
        assert_eq!(failed, vec!["kld"]);
    }

    #[test]
    fn structural_suites_pass() {
        for o in sampler_suite(1).into_iter().chain(split_suite(1)) {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }
}

//! Evaluation protocols, MAE and the within-identity variance diagnostic.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{Model, PredictionMode};
use crate::synth::prior_baseline_mae_split;
use crate::train::{self, EpochRecord, TrainConfig};

/// Scale applied to age distributions before their variance is measured.
pub const S_SCALE: f64 = 100.0;

const FOLD_STREAM: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// k-fold over samples.
    Rs,
    /// k-fold over identities.
    Se,
    /// One fold per identity.
    Lopo,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Rs => "rs",
            Protocol::Se => "se",
            Protocol::Lopo => "lopo",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rs" => Ok(Protocol::Rs),
            "se" => Ok(Protocol::Se),
            "lopo" => Ok(Protocol::Lopo),
            other => Err(Error::Config(format!(
                "unknown protocol `{other}` (expected rs, se or lopo)"
            ))),
        }
    }
}

/// Chunk sizes for splitting `n` items into `k` groups, larger groups first.
fn chunk_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

fn complement(n: usize, test: &[usize]) -> Vec<usize> {
    let mut in_test = vec![false; n];
    for &i in test {
        in_test[i] = true;
    }
    (0..n).filter(|&i| !in_test[i]).collect()
}

fn folds_from_groups(n: usize, groups: Vec<Vec<usize>>) -> Vec<Fold> {
    groups
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            Fold {
                train: complement(n, &test),
                test,
            }
        })
        .collect()
}

/// Seeded permutation of the samples chunked into `k` near-equal test folds.
pub fn split_random(ds: &LabeledDataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    if k > ds.len() {
        return Err(Error::ProtocolIncompatible(format!(
            "random split needs at least k={k} samples, dataset has {}",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups = Vec::with_capacity(k);
    let mut start = 0;
    for size in chunk_sizes(ds.len(), k) {
        groups.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(folds_from_groups(ds.len(), groups))
}

/// Identities partitioned into `k` folds; every sample follows its identity.
pub fn split_subject_exclusive(ds: &LabeledDataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    let ids = ds.num_identities();
    if ids < k {
        return Err(Error::ProtocolIncompatible(format!(
            "subject-exclusive split needs at least k={k} identities, dataset has {ids}"
        )));
    }
    let mut order: Vec<usize> = (0..ids).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups = Vec::with_capacity(k);
    let mut start = 0;
    for size in chunk_sizes(ids, k) {
        let members = order[start..start + size]
            .iter()
            .flat_map(|&id| ds.indices_of_identity(id).iter().copied())
            .collect();
        groups.push(members);
        start += size;
    }
    Ok(folds_from_groups(ds.len(), groups))
}

/// One fold per identity, in order of first appearance.
pub fn split_lopo(ds: &LabeledDataset) -> Result<Vec<Fold>> {
    if ds.num_identities() < 2 {
        return Err(Error::ProtocolIncompatible(format!(
            "leave-one-person-out needs at least 2 identities, dataset has {}",
            ds.num_identities()
        )));
    }
    let groups = (0..ds.num_identities())
        .map(|id| ds.indices_of_identity(id).to_vec())
        .collect();
    Ok(folds_from_groups(ds.len(), groups))
}

pub fn make_folds(
    ds: &LabeledDataset,
    protocol: Protocol,
    k: usize,
    seed: u64,
) -> Result<Vec<Fold>> {
    match protocol {
        Protocol::Rs => split_random(ds, k, seed),
        Protocol::Se => split_subject_exclusive(ds, k, seed),
        Protocol::Lopo => split_lopo(ds),
    }
}

/// `(1/N)·Σ |ŷ_i − y_i|`.
pub fn mae(predictions: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(predictions.len(), labels.len());
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y).abs())
        .sum();
    total / predictions.len() as f64
}

pub fn evaluate_mae(
    model: &Model,
    ds: &LabeledDataset,
    test: &[usize],
    mode: PredictionMode,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config(
            "evaluate_mae needs a non-empty test set".into(),
        ));
    }
    let mut preds = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for &i in test {
        let out = model.forward(&ds.sample(i).input)?;
        preds.push(mode.predict(&out.probs));
        labels.push(ds.age(i) as f64);
    }
    Ok(mae(&preds, &labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityVariance {
    /// Mean within-identity variance of the features.
    pub mu_vf: f64,
    /// Mean within-identity variance of `S_SCALE · s`.
    pub mu_vs: f64,
    /// Identities with at least two samples.
    pub identities: usize,
}

/// Mean over coordinates of the population variance of `rows`.
fn mean_coordinate_variance(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    let dim = rows[0].len();
    let mut total = 0.0;
    for j in 0..dim {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        total += rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
    }
    total / dim as f64
}

/// Within-identity variance of a set of per-sample vectors: per-coordinate
/// population variance over each identity's rows, averaged over coordinates,
/// then over identities with at least two samples.
pub fn grouped_variance(groups: &[Vec<Vec<f64>>]) -> Option<f64> {
    let usable: Vec<f64> = groups
        .iter()
        .filter(|g| g.len() >= 2)
        .map(|g| mean_coordinate_variance(g))
        .collect();
    (!usable.is_empty()).then(|| usable.iter().sum::<f64>() / usable.len() as f64)
}

pub fn identity_variance(model: &Model, ds: &LabeledDataset) -> Result<IdentityVariance> {
    let mut features = Vec::new();
    let mut probs = Vec::new();
    for id in 0..ds.num_identities() {
        let members = ds.indices_of_identity(id);
        if members.len() < 2 {
            continue;
        }
        let mut f = Vec::with_capacity(members.len());
        let mut s = Vec::with_capacity(members.len());
        for &i in members {
            let out = model.forward(&ds.sample(i).input)?;
            f.push(out.features);
            s.push(out.probs.iter().map(|p| p * S_SCALE).collect());
        }
        features.push(f);
        probs.push(s);
    }
    if features.is_empty() {
        return Err(Error::ProtocolIncompatible(
            "identity variance needs an identity with at least 2 samples".into(),
        ));
    }
    Ok(IdentityVariance {
        mu_vf: grouped_variance(&features).expect("non-empty"),
        mu_vs: grouped_variance(&probs).expect("non-empty"),
        identities: features.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub mae: f64,
    /// MAE of predicting the training-set median age.
    pub prior_mae: f64,
    /// Measured on the fold's test samples; absent when no test identity has two samples.
    pub identity_variance: Option<IdentityVariance>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub k: usize,
    pub split_seed: u64,
    pub folds: Vec<FoldReport>,
    pub mean_mae: f64,
    pub mean_prior_mae: f64,
    /// Average over folds that report a variance.
    pub mu_vf: Option<f64>,
    pub mu_vs: Option<f64>,
    pub s_scale: f64,
    pub variance_estimator: String,
    /// Training configuration when folds were trained, absent for a fixed checkpoint.
    pub config: Option<TrainConfig>,
}

impl EvalReport {
    fn assemble(
        protocol: Protocol,
        k: usize,
        split_seed: u64,
        folds: Vec<FoldReport>,
        config: Option<TrainConfig>,
    ) -> Self {
        let n = folds.len() as f64;
        let mean_mae = folds.iter().map(|f| f.mae).sum::<f64>() / n;
        let mean_prior_mae = folds.iter().map(|f| f.prior_mae).sum::<f64>() / n;
        let vars: Vec<&IdentityVariance> = folds
            .iter()
            .filter_map(|f| f.identity_variance.as_ref())
            .collect();
        let avg = |g: fn(&IdentityVariance) -> f64| {
            (!vars.is_empty()).then(|| vars.iter().map(|v| g(v)).sum::<f64>() / vars.len() as f64)
        };
        Self {
            protocol,
            k,
            split_seed,
            mean_mae,
            mean_prior_mae,
            mu_vf: avg(|v| v.mu_vf),
            mu_vs: avg(|v| v.mu_vs),
            folds,
            s_scale: S_SCALE,
            variance_estimator:
                "population variance per coordinate, averaged over coordinates then identities"
                    .into(),
            config,
        }
    }

    /// Flat CSV: one row per fold.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("fold,train_size,test_size,mae,prior_mae,mu_vf,mu_vs\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for f in &self.folds {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                f.fold,
                f.train_size,
                f.test_size,
                f.mae,
                f.prior_mae,
                opt(f.identity_variance.map(|v| v.mu_vf)),
                opt(f.identity_variance.map(|v| v.mu_vs)),
            ));
        }
        out
    }
}

fn fold_variance(model: &Model, test_ds: &LabeledDataset) -> Result<Option<IdentityVariance>> {
    match identity_variance(model, test_ds) {
        Ok(v) => Ok(Some(v)),
        Err(Error::ProtocolIncompatible(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Runs `job` over every fold with up to `jobs` worker threads, keeping fold order.
fn run_folds<T, F>(folds: &[Fold], jobs: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &Fold) -> Result<T> + Sync,
{
    let jobs = jobs.max(1).min(folds.len().max(1));
    if jobs == 1 {
        return folds.iter().enumerate().map(|(i, f)| job(i, f)).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..folds.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let job = &job;
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                scope.spawn(move || {
                    (w..folds.len())
                        .step_by(jobs)
                        .map(|i| (i, job(i, &folds[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("fold worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every fold ran"))
        .collect()
}

/// Evaluates a fixed model on each test fold of a protocol.
pub fn evaluate_checkpoint(
    model: &Model,
    ds: &LabeledDataset,
    protocol: Protocol,
    k: usize,
    split_seed: u64,
    mode: PredictionMode,
) -> Result<EvalReport> {
    let folds = make_folds(ds, protocol, k, split_seed)?;
    let reports = run_folds(&folds, 1, |i, fold| {
        let test_ds = ds.subset(&fold.test)?;
        Ok(FoldReport {
            fold: i,
            train_size: fold.train.len(),
            test_size: fold.test.len(),
            mae: evaluate_mae(model, ds, &fold.test, mode)?,
            prior_mae: prior_baseline_mae_split(ds, &fold.train, &fold.test)?,
            identity_variance: fold_variance(model, &test_ds)?,
            history: Vec::new(),
        })
    })?;
    Ok(EvalReport::assemble(protocol, k, split_seed, reports, None))
}

/// Trains on each fold's training part and evaluates on its test part.
/// Fold `i` trains with seed `derive_seed(cfg.seed, FOLD_STREAM + i)`.
pub fn cross_validate(
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    protocol: Protocol,
    k: usize,
    split_seed: u64,
    jobs: usize,
) -> Result<EvalReport> {
    cfg.validate()?;
    let folds = make_folds(ds, protocol, k, split_seed)?;
    let reports = run_folds(&folds, jobs, |i, fold| {
        let train_ds = ds.subset(&fold.train)?;
        let test_ds = ds.subset(&fold.test)?;
        let fold_cfg = TrainConfig {
            seed: crate::derive_seed(cfg.seed, FOLD_STREAM + i as u64),
            ..cfg.clone()
        };
        let outcome = train::train(&train_ds, &fold_cfg)?;
        Ok(FoldReport {
            fold: i,
            train_size: fold.train.len(),
            test_size: fold.test.len(),
            mae: evaluate_mae(&outcome.model, ds, &fold.test, cfg.prediction)?,
            prior_mae: prior_baseline_mae_split(ds, &fold.train, &fold.test)?,
            identity_variance: fold_variance(&outcome.model, &test_ds)?,
            history: outcome.history,
        })
    })?;
    Ok(EvalReport::assemble(
        protocol,
        k,
        split_seed,
        reports,
        Some(cfg.clone()),
    ))
}

/// Identity sets of a fold's train and test parts, for disjointness checks.
pub fn fold_identities(
    ds: &LabeledDataset,
    fold: &Fold,
) -> (BTreeMap<usize, usize>, BTreeMap<usize, usize>) {
    let count = |idx: &[usize]| {
        let mut m = BTreeMap::new();
        for &i in idx {
            *m.entry(ds.identity_id(i)).or_insert(0) += 1;
        }
        m
    };
    (count(&fold.train), count(&fold.test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetMeta, FaceSample};

    fn ds_with(identities: &[(&str, usize)]) -> LabeledDataset {
        let mut samples = Vec::new();
        for (id, count) in identities {
            for j in 0..*count {
                samples.push(FaceSample {
                    input: vec![j as f64],
                    age: 1 + j % 3,
                    identity: id.to_string(),
                });
            }
        }
        LabeledDataset::new(
            samples,
            DatasetMeta {
                input_dim: 1,
                num_ages: 3,
            },
        )
        .unwrap()
    }

    fn flat(n: usize) -> LabeledDataset {
        let names: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        ds_with(&names.iter().map(|s| (s.as_str(), 1)).collect::<Vec<_>>())
    }

    fn check_partition(n: usize, folds: &[Fold]) {
        let mut seen = vec![0; n];
        for f in folds {
            for &i in &f.test {
                seen[i] += 1;
            }
            let mut both = f.train.clone();
            both.extend(&f.test);
            both.sort_unstable();
            assert_eq!(both, (0..n).collect::<Vec<_>>());
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn random_split_sizes() {
        let folds = split_random(&flat(10), 5, 3).unwrap();
        assert!(folds.iter().all(|f| f.test.len() == 2));
        check_partition(10, &folds);
        let folds = split_random(&flat(11), 5, 3).unwrap();
        assert_eq!(
            folds.iter().map(|f| f.test.len()).collect::<Vec<_>>(),
            vec![3, 2, 2, 2, 2]
        );
        check_partition(11, &folds);
        assert_eq!(folds, split_random(&flat(11), 5, 3).unwrap());
        assert!(split_random(&flat(4), 5, 0).is_err());
        assert!(split_random(&flat(4), 1, 0).is_err());
    }

    #[test]
    fn subject_exclusive_split() {
        let names: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let layout: Vec<(&str, usize)> = names
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), 1 + i % 4))
            .collect();
        let ds = ds_with(&layout);
        let folds = split_subject_exclusive(&ds, 5, 8).unwrap();
        check_partition(ds.len(), &folds);
        for f in &folds {
            let (tr, te) = fold_identities(&ds, f);
            assert_eq!(te.len(), 2);
            assert!(te.keys().all(|id| !tr.contains_key(id)));
            for (id, count) in te {
                assert_eq!(count, ds.indices_of_identity(id).len());
            }
        }
        assert!(split_subject_exclusive(&ds_with(&[("a", 3), ("b", 2)]), 3, 0).is_err());
    }

    #[test]
    fn lopo_split() {
        let ds = ds_with(&[("a", 3), ("b", 1), ("c", 2)]);
        let folds = split_lopo(&ds).unwrap();
        assert_eq!(folds.len(), 3);
        check_partition(ds.len(), &folds);
        for f in &folds {
            assert_eq!(fold_identities(&ds, f).1.len(), 1);
        }
        assert!(split_lopo(&ds_with(&[("a", 3)])).is_err());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 5.0], &[1.0, 5.0]), 0.0);
        assert_eq!(mae(&[2.0, 4.0, 9.0], &[1.0, 5.0, 8.0]), 1.0);
        assert!((mae(&[2.5, 4.0, 7.0], &[2.0, 4.0, 9.0]) - 2.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn grouped_variance_examples() {
        let two = vec![vec![vec![0.0, 0.0], vec![2.0, 0.0]]];
        assert_eq!(grouped_variance(&two), Some(0.5));
        let constant = vec![vec![vec![1.0, 3.0]; 4], vec![vec![-2.0, 0.5]; 2]];
        assert_eq!(grouped_variance(&constant), Some(0.0));
        assert_eq!(grouped_variance(&[vec![vec![1.0]]]), None);
    }

    #[test]
    fn protocol_parsing() {
        assert_eq!("SE".parse::<Protocol>().unwrap(), Protocol::Se);
        assert!("xx".parse::<Protocol>().is_err());
        assert_eq!(Protocol::Lopo.to_string(), "lopo");
    }
}

//! Synthetic datasets with separate identity and age factors.
//!
//! Coordinates `[0, identity_dims)` carry a fixed per-identity code,
//! coordinates `[identity_dims, identity_dims + age_dims)` carry a saturating
//! monotone function of age, and the remaining coordinates carry noise only.
//! Zero-mean Gaussian noise at `noise_std` is added to every coordinate.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetMeta, FaceSample, LabeledDataset};
use crate::error::{Error, Result};

/// Age-bin counts of a large adult face corpus over
/// {0–19, 20–39, 40–59, 60+}.
pub const MORPH_AGE_BINS: [f64; 4] = [7469.0, 31682.0, 15649.0, 334.0];
/// Age-bin counts of a small, young-skewed face corpus.
pub const FGNET_AGE_BINS: [f64; 4] = [710.0, 223.0, 61.0, 8.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub num_ages: usize,
    pub input_dim: usize,
    pub identity_dims: usize,
    pub age_dims: usize,
    pub noise_std: f64,
    /// Relative weights of the four age bins; `None` means uniform over labels.
    pub age_bin_weights: Option<[f64; 4]>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 200,
            samples_per_identity: 5,
            num_ages: 60,
            input_dim: 64,
            identity_dims: 24,
            age_dims: 8,
            noise_std: 0.1,
            age_bin_weights: Some(MORPH_AGE_BINS),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::Config("num_identities must be at least 2".into()));
        }
        if self.samples_per_identity < 1 {
            return Err(Error::Config(
                "samples_per_identity must be at least 1".into(),
            ));
        }
        if self.num_ages < 2 {
            return Err(Error::Config("num_ages must be at least 2".into()));
        }
        if self.age_dims < 1 {
            return Err(Error::Config("age_dims must be at least 1".into()));
        }
        if self.identity_dims + self.age_dims > self.input_dim {
            return Err(Error::Config(format!(
                "identity_dims ({}) + age_dims ({}) exceeds input_dim ({})",
                self.identity_dims, self.age_dims, self.input_dim
            )));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        if let Some(w) = self.age_bin_weights {
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config(
                    "age_bin_weights must be finite and >= 0".into(),
                ));
            }
            let usable: f64 = (0..4)
                .filter(|&b| !bin_labels(b, self.num_ages).is_empty())
                .map(|b| w[b])
                .sum();
            if usable <= 0.0 {
                return Err(Error::Config(
                    "age_bin_weights put no mass on any non-empty bin".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn age_range(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.num_ages
    }
}

/// Which of the four age bins label `age` falls into; the label range
/// `1..=num_ages` is divided into quarters.
pub fn age_bin(age: usize, num_ages: usize) -> usize {
    ((age - 1) * 4 / num_ages).min(3)
}

/// Labels belonging to bin `bin`.
pub fn bin_labels(bin: usize, num_ages: usize) -> Vec<usize> {
    (1..=num_ages)
        .filter(|&y| age_bin(y, num_ages) == bin)
        .collect()
}

/// Latent factors behind each generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// One code of length `identity_dims` per identity.
    pub identity_codes: Vec<Vec<f64>>,
    /// Per sample: identity index into `identity_codes`.
    pub identity_index: Vec<usize>,
    /// Per sample: age rescaled to `[0, 1]`.
    pub age_latent: Vec<f64>,
    /// Per age coordinate: amplitude and curvature of `a·tanh(c·t)/tanh(c) − a/2`.
    pub age_curves: Vec<(f64, f64)>,
}

impl GroundTruth {
    /// CSV with one row per sample: identity index, age latent, identity code.
    pub fn to_csv_string(&self) -> String {
        let dims = self.identity_codes.first().map_or(0, Vec::len);
        let mut out = String::from("identity_index,age_latent");
        for j in 0..dims {
            out.push_str(&format!(",z{j}"));
        }
        out.push('\n');
        for (id, t) in self.identity_index.iter().zip(&self.age_latent) {
            out.push_str(&format!("{id},{t}"));
            for v in &self.identity_codes[*id] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn age_curve(t: f64, amplitude: f64, curvature: f64) -> f64 {
    amplitude * (curvature * t).tanh() / curvature.tanh() - 0.5 * amplitude
}

pub fn identity_name(i: usize) -> String {
    format!("id{i:04}")
}

/// Generates a dataset deterministically from `(cfg, seed)`.
pub fn generate_dataset(cfg: &SynthConfig, seed: u64) -> Result<(LabeledDataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let age_curves: Vec<(f64, f64)> = (0..cfg.age_dims)
        .map(|_| (rng.random_range(1.5..2.5), rng.random_range(1.0..3.0)))
        .collect();
    let identity_codes: Vec<Vec<f64>> = (0..cfg.num_identities)
        .map(|_| {
            (0..cfg.identity_dims)
                .map(|_| unit.sample(&mut rng))
                .collect()
        })
        .collect();

    let bins: Vec<Vec<usize>> = (0..4).map(|b| bin_labels(b, cfg.num_ages)).collect();
    let bin_picker = match cfg.age_bin_weights {
        Some(w) => {
            let masked: Vec<f64> = (0..4)
                .map(|b| if bins[b].is_empty() { 0.0 } else { w[b] })
                .collect();
            Some(
                WeightedIndex::new(&masked)
                    .map_err(|e| Error::Config(format!("age_bin_weights: {e}")))?,
            )
        }
        None => None,
    };

    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("valid std"));
    let n = cfg.num_identities * cfg.samples_per_identity;
    let mut samples = Vec::with_capacity(n);
    let mut identity_index = Vec::with_capacity(n);
    let mut age_latent = Vec::with_capacity(n);

    for (id, code) in identity_codes.iter().enumerate() {
        for _ in 0..cfg.samples_per_identity {
            let age = match &bin_picker {
                Some(picker) => {
                    let labels = &bins[picker.sample(&mut rng)];
                    labels[rng.random_range(0..labels.len())]
                }
                None => rng.random_range(1..=cfg.num_ages),
            };
            let t = (age - 1) as f64 / (cfg.num_ages - 1) as f64;
            let mut input = vec![0.0; cfg.input_dim];
            input[..cfg.identity_dims].copy_from_slice(code);
            for (k, &(amp, curv)) in age_curves.iter().enumerate() {
                input[cfg.identity_dims + k] = age_curve(t, amp, curv);
            }
            if let Some(noise) = &noise {
                for v in &mut input {
                    *v += noise.sample(&mut rng);
                }
            }
            samples.push(FaceSample {
                input,
                age,
                identity: identity_name(id),
            });
            identity_index.push(id);
            age_latent.push(t);
        }
    }

    let ds = LabeledDataset::new(
        samples,
        DatasetMeta {
            input_dim: cfg.input_dim,
            num_ages: cfg.num_ages,
        },
    )?;
    Ok((
        ds,
        GroundTruth {
            identity_codes,
            identity_index,
            age_latent,
            age_curves,
        },
    ))
}

/// Lower median of the ages of `indices`.
pub fn median_age(ds: &LabeledDataset, indices: &[usize]) -> Option<usize> {
    let mut ages: Vec<usize> = indices.iter().map(|&i| ds.age(i)).collect();
    if ages.is_empty() {
        return None;
    }
    ages.sort_unstable();
    Some(ages[(ages.len() - 1) / 2])
}

/// MAE of always predicting the dataset's median age.
pub fn prior_baseline_mae(ds: &LabeledDataset) -> Result<f64> {
    let all: Vec<usize> = (0..ds.len()).collect();
    prior_baseline_mae_split(ds, &all, &all)
}

/// MAE on `test` of always predicting the median age of `train`.
pub fn prior_baseline_mae_split(
    ds: &LabeledDataset,
    train: &[usize],
    test: &[usize],
) -> Result<f64> {
    let median = median_age(ds, train)
        .ok_or_else(|| Error::Config("prior baseline needs a non-empty training set".into()))?;
    if test.is_empty() {
        return Err(Error::Config(
            "prior baseline needs a non-empty test set".into(),
        ));
    }
    let total: f64 = test
        .iter()
        .map(|&i| (ds.age(i) as f64 - median as f64).abs())
        .sum();
    Ok(total / test.len() as f64)
}

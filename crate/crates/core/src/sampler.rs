//! Positive/negative sets and seeded triplet batches.
//!
//! For an anchor `a`, positives share its age but not its identity and
//! negatives differ from it in both age and identity.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: usize,
    /// `None` when the anchor has an empty positive set.
    pub positive: Option<usize>,
    /// `None` when the anchor has an empty negative set.
    pub negative: Option<usize>,
}

/// `{ p : y_p = y_a ∧ i_p ≠ i_a }`, ascending.
pub fn positive_set(ds: &LabeledDataset, anchor: usize) -> Vec<usize> {
    let id = ds.identity_id(anchor);
    ds.indices_with_age(ds.age(anchor))
        .iter()
        .copied()
        .filter(|&p| ds.identity_id(p) != id)
        .collect()
}

/// `{ n : y_n ≠ y_a ∧ i_n ≠ i_a }`, ascending.
pub fn negative_set(ds: &LabeledDataset, anchor: usize) -> Vec<usize> {
    (0..ds.len())
        .filter(|&n| is_negative(ds, anchor, n))
        .collect()
}

fn is_negative(ds: &LabeledDataset, anchor: usize, n: usize) -> bool {
    ds.age(n) != ds.age(anchor) && ds.identity_id(n) != ds.identity_id(anchor)
}

/// Checks both membership constraints of a triplet.
pub fn triplet_is_valid(ds: &LabeledDataset, t: &Triplet) -> bool {
    let (ya, ia) = (ds.age(t.anchor), ds.identity_id(t.anchor));
    let p_ok = t
        .positive
        .is_none_or(|p| ds.age(p) == ya && ds.identity_id(p) != ia);
    let n_ok = t
        .negative
        .is_none_or(|n| ds.age(n) != ya && ds.identity_id(n) != ia);
    p_ok && n_ok
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Anchors per batch.
    pub batch_size: usize,
    /// Independent (positive, negative) draws per anchor.
    pub triplets_per_anchor: usize,
    /// Fail when no anchor has any negative.
    pub require_negatives: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            triplets_per_anchor: 1,
            require_negatives: true,
        }
    }
}

/// Precomputed per-anchor set sizes over one dataset.
#[derive(Debug, Clone)]
pub struct TripletSampler<'a> {
    ds: &'a LabeledDataset,
    config: SamplerConfig,
    negative_counts: Vec<usize>,
}

/// Rejection attempts before falling back to an exact scan.
const REJECTION_TRIES: usize = 32;

impl<'a> TripletSampler<'a> {
    pub fn new(ds: &'a LabeledDataset, config: SamplerConfig) -> Result<Self> {
        if config.batch_size == 0 || config.triplets_per_anchor == 0 {
            return Err(Error::Config(
                "batch_size and triplets_per_anchor must be at least 1".into(),
            ));
        }
        if ds.is_empty() {
            return Err(Error::ProtocolIncompatible("dataset has no samples".into()));
        }
        let negative_counts: Vec<usize> = (0..ds.len())
            .map(|a| {
                let id = ds.identity_id(a);
                let same_age = ds.indices_with_age(ds.age(a)).len();
                let same_id = ds.indices_of_identity(id);
                let both = same_id.iter().filter(|&&i| ds.age(i) == ds.age(a)).count();
                ds.len() + both - same_age - same_id.len()
            })
            .collect();
        if config.require_negatives && negative_counts.iter().all(|&c| c == 0) {
            return Err(Error::ProtocolIncompatible(format!(
                "no anchor has a negative (different age and identity): {} identities, {} distinct ages; \
                 the triplet term needs at least two of each",
                ds.num_identities(),
                ds.distinct_ages()
            )));
        }
        Ok(Self {
            ds,
            config,
            negative_counts,
        })
    }

    pub fn config(&self) -> SamplerConfig {
        self.config
    }

    pub fn negative_count(&self, anchor: usize) -> usize {
        self.negative_counts[anchor]
    }

    fn draw_positive(&self, anchor: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
        let id = self.ds.identity_id(anchor);
        let bucket = self.ds.indices_with_age(self.ds.age(anchor));
        let count = bucket
            .iter()
            .filter(|&&p| self.ds.identity_id(p) != id)
            .count();
        if count == 0 {
            return None;
        }
        let k = rng.random_range(0..count);
        bucket
            .iter()
            .copied()
            .filter(|&p| self.ds.identity_id(p) != id)
            .nth(k)
    }

    fn draw_negative(&self, anchor: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
        let count = self.negative_counts[anchor];
        if count == 0 {
            return None;
        }
        let n = self.ds.len();
        for _ in 0..REJECTION_TRIES {
            let c = rng.random_range(0..n);
            if is_negative(self.ds, anchor, c) {
                return Some(c);
            }
        }
        let k = rng.random_range(0..count);
        (0..n).filter(|&c| is_negative(self.ds, anchor, c)).nth(k)
    }

    fn triplets_for(&self, anchor: usize, rng: &mut ChaCha8Rng, out: &mut Vec<Triplet>) {
        for _ in 0..self.config.triplets_per_anchor {
            let positive = self.draw_positive(anchor, rng);
            let negative = self.draw_negative(anchor, rng);
            out.push(Triplet {
                anchor,
                positive,
                negative,
            });
        }
    }

    /// One epoch: every sample serves as anchor once, in a seeded order,
    /// chunked into batches of `batch_size` anchors.
    pub fn epoch(&self, seed: u64, epoch: u64) -> Vec<Vec<Triplet>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.ds.len()).collect();
        order.shuffle(&mut rng);
        order
            .chunks(self.config.batch_size)
            .map(|anchors| {
                let mut batch = Vec::with_capacity(anchors.len() * self.config.triplets_per_anchor);
                for &a in anchors {
                    self.triplets_for(a, &mut rng, &mut batch);
                }
                batch
            })
            .collect()
    }

    /// `batch_size` anchors drawn without replacement within each pass over
    /// the dataset; a batch larger than the dataset continues into a fresh pass.
    pub fn batch(&self, seed: u64) -> Vec<Triplet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(self.config.batch_size * self.config.triplets_per_anchor);
        let mut remaining = self.config.batch_size;
        while remaining > 0 {
            let mut order: Vec<usize> = (0..self.ds.len()).collect();
            order.shuffle(&mut rng);
            for &a in order.iter().take(remaining) {
                self.triplets_for(a, &mut rng, &mut out);
            }
            remaining = remaining.saturating_sub(order.len());
        }
        out
    }
}

/// One seeded batch of triplets over `ds`.
pub fn sample_triplet_batch(
    ds: &LabeledDataset,
    batch_size: usize,
    seed: u64,
    require_negatives: bool,
) -> Result<Vec<Triplet>> {
    let sampler = TripletSampler::new(
        ds,
        SamplerConfig {
            batch_size,
            triplets_per_anchor: 1,
            require_negatives,
        },
    )?;
    Ok(sampler.batch(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetMeta, FaceSample};

    fn ds(rows: &[(&str, usize)]) -> LabeledDataset {
        let samples = rows
            .iter()
            .map(|(id, age)| FaceSample {
                input: vec![0.0],
                age: *age,
                identity: id.to_string(),
            })
            .collect();
        LabeledDataset::new(
            samples,
            DatasetMeta {
                input_dim: 1,
                num_ages: 10,
            },
        )
        .unwrap()
    }

    #[test]
    fn single_sample_has_no_positive() {
        let d = ds(&[("A", 5)]);
        assert!(positive_set(&d, 0).is_empty());
        assert!(negative_set(&d, 0).is_empty());
    }

    #[test]
    fn small_enumerations() {
        let d = ds(&[("A", 5), ("B", 5), ("A", 6)]);
        assert_eq!(positive_set(&d, 0), vec![1]);
        let d = ds(&[("A", 5), ("B", 5), ("C", 6)]);
        assert_eq!(negative_set(&d, 0), vec![2]);
        let d = ds(&[("A", 5), ("B", 6), ("C", 6)]);
        assert!(positive_set(&d, 0).is_empty());
    }

    #[test]
    fn single_identity_has_no_negatives() {
        let d = ds(&[("A", 1), ("A", 2), ("A", 3)]);
        for a in 0..3 {
            assert!(negative_set(&d, a).is_empty());
        }
        let err = sample_triplet_batch(&d, 2, 0, true).unwrap_err();
        assert!(matches!(err, Error::ProtocolIncompatible(_)), "{err}");
        // Without the triplet term the dataset is still usable.
        let batch = sample_triplet_batch(&d, 2, 0, false).unwrap();
        assert!(batch.iter().all(|t| t.negative.is_none()));
    }

    #[test]
    fn positive_and_negative_sets_are_disjoint() {
        let d = ds(&[("A", 5), ("B", 5), ("C", 6), ("A", 6), ("B", 7), ("C", 5)]);
        for a in 0..d.len() {
            let pos = positive_set(&d, a);
            let neg = negative_set(&d, a);
            assert!(pos.iter().all(|p| !neg.contains(p)));
        }
    }

    #[test]
    fn negative_counts_match_enumeration() {
        let d = ds(&[("A", 5), ("B", 5), ("C", 6), ("A", 6), ("B", 7), ("C", 5)]);
        let s = TripletSampler::new(&d, SamplerConfig::default()).unwrap();
        for a in 0..d.len() {
            assert_eq!(s.negative_count(a), negative_set(&d, a).len());
        }
    }

    #[test]
    fn epoch_covers_each_anchor_once() {
        let d = ds(&[
            ("A", 5),
            ("B", 5),
            ("C", 6),
            ("A", 6),
            ("B", 7),
            ("C", 5),
            ("D", 7),
        ]);
        let s = TripletSampler::new(
            &d,
            SamplerConfig {
                batch_size: 3,
                ..SamplerConfig::default()
            },
        )
        .unwrap();
        let batches = s.epoch(9, 2);
        assert_eq!(
            batches.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![3, 3, 1]
        );
        let mut anchors: Vec<usize> = batches.iter().flatten().map(|t| t.anchor).collect();
        anchors.sort_unstable();
        assert_eq!(anchors, (0..7).collect::<Vec<_>>());
        assert!(batches.iter().flatten().all(|t| triplet_is_valid(&d, t)));
        assert_eq!(batches, s.epoch(9, 2));
        assert_ne!(batches, s.epoch(9, 3));
    }

    #[test]
    fn oversized_batch_wraps_into_new_pass() {
        let d = ds(&[("A", 5), ("B", 5), ("C", 6)]);
        let batch = sample_triplet_batch(&d, 7, 1, true).unwrap();
        assert_eq!(batch.len(), 7);
        let mut first: Vec<usize> = batch[..3].iter().map(|t| t.anchor).collect();
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2]);
    }

    #[test]
    fn multiple_triplets_per_anchor() {
        let d = ds(&[("A", 5), ("B", 5), ("C", 6), ("D", 5)]);
        let s = TripletSampler::new(
            &d,
            SamplerConfig {
                batch_size: 2,
                triplets_per_anchor: 3,
                require_negatives: true,
            },
        )
        .unwrap();
        let b = s.batch(4);
        assert_eq!(b.len(), 6);
        assert!(b
            .chunks(3)
            .all(|c| c.iter().all(|t| t.anchor == c[0].anchor)));
    }
}

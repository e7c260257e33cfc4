//! Labeled samples with age and identity indexes, and their CSV format.
//!
//! The CSV header is `identity,age,v0,v1,...,v{input_dim-1}`. A sidecar
//! `<stem>.meta.json` next to the CSV records `input_dim` and `num_ages`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FaceSample {
    pub input: Vec<f64>,
    /// Age label in `1..=num_ages`.
    pub age: usize,
    pub identity: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub input_dim: usize,
    pub num_ages: usize,
}

/// Samples plus exact inverse indexes by age and by identity.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    meta: DatasetMeta,
    samples: Vec<FaceSample>,
    /// Identity names in order of first appearance.
    identities: Vec<String>,
    identity_of: Vec<usize>,
    by_age: Vec<Vec<usize>>,
    by_identity: Vec<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(samples: Vec<FaceSample>, meta: DatasetMeta) -> Result<Self> {
        if meta.input_dim == 0 || meta.num_ages == 0 {
            return Err(Error::Config(
                "input_dim and num_ages must be at least 1".into(),
            ));
        }
        let mut identities = Vec::new();
        let mut lookup: HashMap<&str, usize> = HashMap::new();
        let mut identity_of = Vec::with_capacity(samples.len());
        let mut by_age = vec![Vec::new(); meta.num_ages];
        let mut by_identity: Vec<Vec<usize>> = Vec::new();

        for (i, s) in samples.iter().enumerate() {
            if s.input.len() != meta.input_dim {
                return Err(Error::Config(format!(
                    "sample {i}: expected {} input values, got {}",
                    meta.input_dim,
                    s.input.len()
                )));
            }
            if s.age < 1 || s.age > meta.num_ages {
                return Err(Error::AgeOutOfRange {
                    age: s.age as i64,
                    num_ages: meta.num_ages,
                });
            }
            if s.identity.is_empty() {
                return Err(Error::Config(format!("sample {i}: empty identity")));
            }
            let id = *lookup.entry(s.identity.as_str()).or_insert_with(|| {
                identities.push(s.identity.clone());
                by_identity.push(Vec::new());
                identities.len() - 1
            });
            identity_of.push(id);
            by_identity[id].push(i);
            by_age[s.age - 1].push(i);
        }

        Ok(Self {
            meta,
            samples,
            identities,
            identity_of,
            by_age,
            by_identity,
        })
    }

    pub fn meta(&self) -> DatasetMeta {
        self.meta
    }

    pub fn input_dim(&self) -> usize {
        self.meta.input_dim
    }

    pub fn num_ages(&self) -> usize {
        self.meta.num_ages
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[FaceSample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &FaceSample {
        &self.samples[i]
    }

    pub fn age(&self, i: usize) -> usize {
        self.samples[i].age
    }

    /// Dense identity id of sample `i` (position in [`Self::identities`]).
    pub fn identity_id(&self, i: usize) -> usize {
        self.identity_of[i]
    }

    pub fn identities(&self) -> &[String] {
        &self.identities
    }

    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    /// Sample indices with age label `age`; empty when out of range.
    pub fn indices_with_age(&self, age: usize) -> &[usize] {
        age.checked_sub(1)
            .and_then(|a| self.by_age.get(a))
            .map_or(&[], Vec::as_slice)
    }

    /// Sample indices of the identity with dense id `id`.
    pub fn indices_of_identity(&self, id: usize) -> &[usize] {
        &self.by_identity[id]
    }

    pub fn distinct_ages(&self) -> usize {
        self.by_age.iter().filter(|v| !v.is_empty()).count()
    }

    /// New dataset holding the listed samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Self::new(samples, self.meta)
    }

    /// Rebuilds the indexes from scratch and compares them with the stored ones.
    pub fn indexes_consistent(&self) -> bool {
        match Self::new(self.samples.clone(), self.meta) {
            Ok(fresh) => {
                fresh.identities == self.identities
                    && fresh.identity_of == self.identity_of
                    && fresh.by_age == self.by_age
                    && fresh.by_identity == self.by_identity
            }
            Err(_) => false,
        }
    }

    /// Sidecar path for a dataset CSV: `data.csv` → `data.meta.json`.
    pub fn meta_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("meta.json")
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("identity,age");
        for j in 0..self.meta.input_dim {
            out.push_str(&format!(",v{j}"));
        }
        out.push('\n');
        for s in &self.samples {
            out.push_str(&csv_field(&s.identity));
            out.push_str(&format!(",{}", s.age));
            for v in &s.input {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn meta_json(&self) -> String {
        serde_json::to_string_pretty(&self.meta).expect("meta serializes") + "\n"
    }

    /// Writes the CSV and its sidecar.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))?;
        let meta = Self::meta_path(path);
        fs::write(&meta, self.meta_json()).map_err(|e| Error::io(&meta, e))
    }

    /// Reads a CSV and its sidecar. Without a sidecar, `num_ages` defaults
    /// to the largest age present.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let meta_path = Self::meta_path(path);
        let meta: Option<DatasetMeta> = match fs::read_to_string(&meta_path) {
            Ok(text) => Some(
                serde_json::from_str(&text).map_err(|e| Error::parse(&meta_path, e.to_string()))?,
            ),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(Error::io(&meta_path, e)),
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, meta).map_err(|e| match e {
            Error::Config(msg) => Error::parse(path, msg),
            other => other,
        })
    }

    pub fn parse_csv(text: &str, meta: Option<DatasetMeta>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::Config(e.to_string()))?
            .clone();
        if headers.len() < 3 || &headers[0] != "identity" || &headers[1] != "age" {
            return Err(Error::Config(
                "header must start with `identity,age` followed by v0..".into(),
            ));
        }
        let input_dim = headers.len() - 2;
        for (j, h) in headers.iter().skip(2).enumerate() {
            if h != format!("v{j}") {
                return Err(Error::Config(format!(
                    "column {}: expected `v{j}`, got `{h}`",
                    j + 2
                )));
            }
        }
        if let Some(m) = meta {
            if m.input_dim != input_dim {
                return Err(Error::Config(format!(
                    "metadata says input_dim {} but header has {input_dim} value columns",
                    m.input_dim
                )));
            }
        }

        let mut samples = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let line = row + 2;
            let record = record.map_err(|e| Error::Config(format!("line {line}: {e}")))?;
            let age: i64 = record[1].trim().parse().map_err(|_| {
                Error::Config(format!(
                    "line {line}: age `{}` is not an integer",
                    &record[1]
                ))
            })?;
            if age < 1 || meta.is_some_and(|m| age as usize > m.num_ages) {
                return Err(Error::AgeOutOfRange {
                    age,
                    num_ages: meta.map_or(0, |m| m.num_ages),
                });
            }
            let input = record
                .iter()
                .skip(2)
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| Error::Config(format!("line {line}: bad value `{v}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(FaceSample {
                input,
                age: age as usize,
                identity: record[0].to_string(),
            });
        }
        let meta = meta.unwrap_or(DatasetMeta {
            input_dim,
            num_ages: samples.iter().map(|s| s.age).max().unwrap_or(1),
        });
        Self::new(samples, meta)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

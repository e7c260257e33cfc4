//! Flat TOML configuration files.
//!
//! Training, evaluation and sweep commands read [`TrainConfig`] keys; `gen`
//! reads [`SynthConfig`] keys. Unknown keys are rejected and missing keys
//! take their defaults.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::error::{Error, Result};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

pub fn parse_toml<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::parse(origin, e.message().to_string()))
}

fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_toml(&text, p)
        }
    }
}

pub fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    load(path)
}

pub fn load_synth_config(path: Option<&Path>) -> Result<SynthConfig> {
    load(path)
}

//! Fully-connected feature extractor followed by an age-distribution head.
//!
//! The extractor maps `input_dim → hidden_widths… → feature_dim` with a relu
//! after every layer; its output is the feature vector `f`. The head is a
//! single linear layer `feature_dim → num_ages` whose softmax gives the age
//! distribution `s` over labels `1..=num_ages`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    /// Width of the extractor output `f`.
    pub feature_dim: usize,
    /// Largest age label `A`.
    pub num_ages: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            hidden_widths: vec![128],
            feature_dim: 64,
            num_ages: 60,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.num_ages == 0 {
            return Err(Error::Config(
                "input_dim, feature_dim and num_ages must all be at least 1".into(),
            ));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden widths must be at least 1".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each layer, extractor first, head last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_widths);
        widths.push(self.feature_dim);
        widths.push(self.num_ages);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `fan_in × fan_out`.
    pub weight: Tensor,
    /// Length `fan_out`.
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Dense>,
}

/// How a distribution is turned into a scalar age.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Expected label `Σ j·s_j`.
    #[default]
    Mean,
    /// Most probable label; lowest label wins ties.
    Argmax,
}

/// Expected age `Σ_{j=1..A} j·s_j`.
pub fn predict_age(s: &[f64]) -> f64 {
    s.iter().enumerate().map(|(j, p)| (j + 1) as f64 * p).sum()
}

pub fn predict_argmax(s: &[f64]) -> f64 {
    let mut best = 0;
    for (j, &p) in s.iter().enumerate() {
        if p > s[best] {
            best = j;
        }
    }
    (best + 1) as f64
}

impl PredictionMode {
    pub fn predict(self, s: &[f64]) -> f64 {
        match self {
            PredictionMode::Mean => predict_age(s),
            PredictionMode::Argmax => predict_argmax(s),
        }
    }
}

/// Output of a value-only forward pass for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub features: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Intermediate values of a value-only forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Pre-activation of each extractor layer.
    pub preactivations: Vec<Vec<f64>>,
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Parameters bound onto a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub layers: Vec<(Var, Var)>,
}

impl BoundParams {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Tape handles produced by [`Model::forward_tape`] for a batch of inputs.
#[derive(Debug, Clone, Copy)]
pub struct TapeForward {
    /// `B × feature_dim`.
    pub features: Var,
    /// `B × num_ages`.
    pub logits: Var,
    pub probs: Var,
    pub log_probs: Var,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Model {
    /// He-normal weights (variance `2/fan_in`), zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let data = (0..fan_in * fan_out)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                Dense {
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("dims"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Builds a model from explicit layers, checking that shapes chain.
    pub fn from_layers(config: ModelConfig, layers: Vec<Dense>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::Config(format!(
                "expected {} layers, got {}",
                dims.len(),
                layers.len()
            )));
        }
        for (i, ((fan_in, fan_out), layer)) in dims.iter().zip(&layers).enumerate() {
            if layer.weight.shape() != [*fan_in, *fan_out] || layer.bias.shape() != [*fan_out] {
                return Err(Error::Config(format!(
                    "layer {i}: expected weight [{fan_in}, {fan_out}] and bias [{fan_out}], got {:?} and {:?}",
                    layer.weight.shape(),
                    layer.bias.shape()
                )));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    /// Parameter names in the same order as [`Model::parameters`].
    pub fn parameter_names(&self) -> Vec<String> {
        let last = self.layers.len() - 1;
        (0..self.layers.len())
            .flat_map(|i| {
                let prefix = if i == last {
                    "head".to_string()
                } else {
                    format!("extractor.{i}")
                };
                [format!("{prefix}.weight"), format!("{prefix}.bias")]
            })
            .collect()
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn bitwise_eq(&self, other: &Model) -> bool {
        self.config == other.config
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.bitwise_eq(&b.weight) && a.bias.bitwise_eq(&b.bias))
    }

    /// Puts every parameter on `tape`, tracked or as constants.
    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> BoundParams {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if tracked {
                    (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()))
                } else {
                    (
                        tape.constant(l.weight.clone()),
                        tape.constant(l.bias.clone()),
                    )
                }
            })
            .collect();
        BoundParams { layers }
    }

    /// Batched forward pass on the tape; `inputs` is `B × input_dim`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        inputs: Var,
    ) -> Result<TapeForward> {
        let shape = tape.value(inputs)?.shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: shape,
                rhs: vec![self.config.input_dim],
            });
        }
        let (head, extractor) = params.layers.split_last().expect("at least one layer");
        let mut h = inputs;
        for &(w, b) in extractor {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = tape.relu(z)?;
        }
        let z = tape.matmul(h, head.0)?;
        let logits = tape.add_row(z, head.1)?;
        let probs = tape.softmax(logits)?;
        let log_probs = tape.log_softmax(logits)?;
        Ok(TapeForward {
            features: h,
            logits,
            probs,
            log_probs,
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        let t = self.forward_trace(x)?;
        Ok(Forward {
            features: t.features,
            probs: t.probs,
        })
    }

    /// Value-only forward pass keeping intermediate values.
    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: vec![x.len()],
                rhs: vec![self.config.input_dim],
            });
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "forward",
                index,
            });
        }
        let affine = |layer: &Dense, h: &[f64]| -> Vec<f64> {
            let fan_out = layer.bias.len();
            let w = layer.weight.data();
            let mut out = layer.bias.data().to_vec();
            for (i, &hi) in h.iter().enumerate() {
                for (o, &wij) in out.iter_mut().zip(&w[i * fan_out..(i + 1) * fan_out]) {
                    *o += hi * wij;
                }
            }
            out
        };
        let (head, extractor) = self.layers.split_last().expect("at least one layer");
        let mut preactivations = Vec::with_capacity(extractor.len());
        let mut h = x.to_vec();
        for layer in extractor {
            let z = affine(layer, &h);
            h = z.iter().map(|v| v.max(0.0)).collect();
            preactivations.push(z);
        }
        let logits = affine(head, &h);
        let probs = softmax(&logits);
        Ok(ForwardTrace {
            preactivations,
            features: h,
            logits,
            probs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            model: self.clone(),
        })
        .map_err(|e| Error::parse(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::parse(path, msg),
            other => other,
        })
    }

    pub fn to_checkpoint_string(&self) -> String {
        serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            model: self.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unknown checkpoint format `{}`",
                ck.format
            )));
        }
        Model::from_layers(ck.model.config, ck.model.layers)
    }
}

const CHECKPOINT_FORMAT: &str = "contrastive-age-checkpoint/1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    model: Model,
}

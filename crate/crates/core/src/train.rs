//! Adam optimisation of the combined objective over triplet batches.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossWeights, MeanLossForm, PairLoss, NORM_FLOOR};
use crate::model::{BoundParams, Model, ModelConfig, PredictionMode};
use crate::sampler::{SamplerConfig, Triplet, TripletSampler};
use crate::tensor::Tensor;

/// Everything that determines a training run besides the data.
///
/// Stored flat so it maps one-to-one onto a key-value config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_m: f64,
    pub lambda_v: f64,
    pub lambda_c: f64,
    pub lambda_t: f64,
    pub alpha: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub hidden_widths: Vec<usize>,
    pub feature_dim: usize,
    pub pair_loss: PairLoss,
    pub mean_loss_form: MeanLossForm,
    /// Apply the softmax, mean and variance terms to positives and negatives too.
    pub supervise_all_triplet_members: bool,
    pub triplets_per_anchor: usize,
    pub prediction: PredictionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            learning_rate: 0.001,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            lambda_m: w.lambda_m,
            lambda_v: w.lambda_v,
            lambda_c: w.lambda_c,
            lambda_t: w.lambda_t,
            alpha: w.alpha,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            hidden_widths: vec![128],
            feature_dim: 64,
            pair_loss: PairLoss::Cosine,
            mean_loss_form: MeanLossForm::Squared,
            supervise_all_triplet_members: false,
            triplets_per_anchor: 1,
            prediction: PredictionMode::Mean,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_m: self.lambda_m,
            lambda_v: self.lambda_v,
            lambda_c: self.lambda_c,
            lambda_t: self.lambda_t,
            alpha: self.alpha,
        }
    }

    pub fn set_weights(&mut self, w: LossWeights) {
        self.lambda_m = w.lambda_m;
        self.lambda_v = w.lambda_v;
        self.lambda_c = w.lambda_c;
        self.lambda_t = w.lambda_t;
        self.alpha = w.alpha;
    }

    pub fn model_config(&self, ds: &LabeledDataset) -> ModelConfig {
        ModelConfig {
            input_dim: ds.input_dim(),
            hidden_widths: self.hidden_widths.clone(),
            feature_dim: self.feature_dim,
            num_ages: ds.num_ages(),
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            batch_size: self.batch_size,
            triplets_per_anchor: self.triplets_per_anchor,
            require_negatives: self.lambda_t > 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.triplets_per_anchor == 0 {
            return Err(Error::Config(
                "triplets_per_anchor must be at least 1".into(),
            ));
        }
        if self.feature_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::Config("layer widths must be at least 1".into()));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        self.weights().validate()
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor> = model
            .parameters()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any parameter.
pub fn adam_step(
    model: &mut Model,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let names = model.parameter_names();
    let params = model.parameters_mut();
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::Config(format!(
            "adam: {} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(&names) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                param: name.clone(),
                step: state.step + 1,
            });
        }
    }

    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.into_iter().enumerate() {
        let g = grads[i].data();
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((w, &gj), mj), vj) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mj = b1 * *mj + (1.0 - b1) * gj;
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
            let m_hat = *mj / c1;
            let v_hat = *vj / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Loss values of one epoch, averaged over its batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

fn stack_inputs(ds: &LabeledDataset, rows: &[usize]) -> Result<Tensor> {
    let dim = ds.input_dim();
    let mut data = Vec::with_capacity(rows.len() * dim);
    for &r in rows {
        data.extend_from_slice(&ds.sample(r).input);
    }
    Tensor::matrix(rows.len(), dim, data)
}

/// The weighted objective for one batch of triplets, built on `tape`.
///
/// Positives are forwarded only when `λ_c` or `λ_t` is positive and
/// negatives only when `λ_t` is positive. Anchors without a positive are
/// left out of both contrastive terms; anchors without a negative are left
/// out of the triplet term.
pub fn batch_objective(
    tape: &mut Tape,
    model: &Model,
    params: &BoundParams,
    ds: &LabeledDataset,
    triplets: &[Triplet],
    cfg: &TrainConfig,
) -> Result<(Var, LossBreakdown)> {
    if triplets.is_empty() {
        return Err(Error::Config("empty triplet batch".into()));
    }
    let w = cfg.weights();
    let use_pair = w.lambda_c > 0.0;
    let use_triplet = w.lambda_t > 0.0;

    // Row layout of the stacked forward pass: anchors, then positives, then negatives.
    let mut rows: Vec<usize> = triplets.iter().map(|t| t.anchor).collect();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut triples: Vec<(usize, usize, usize)> = Vec::new();
    if use_pair || use_triplet {
        let mut pos_row = vec![None; triplets.len()];
        for (i, t) in triplets.iter().enumerate() {
            if let Some(p) = t.positive {
                pos_row[i] = Some(rows.len());
                rows.push(p);
            }
        }
        if use_pair {
            pairs = pos_row
                .iter()
                .enumerate()
                .filter_map(|(i, r)| r.map(|r| (i, r)))
                .collect();
        }
        if use_triplet {
            for (i, t) in triplets.iter().enumerate() {
                if let (Some(pr), Some(n)) = (pos_row[i], t.negative) {
                    triples.push((i, pr, rows.len()));
                    rows.push(n);
                }
            }
        }
    }

    let inputs = tape.constant(stack_inputs(ds, &rows)?);
    let out = model.forward_tape(tape, params, inputs)?;

    let supervised: Vec<usize> = if cfg.supervise_all_triplet_members {
        (0..rows.len()).collect()
    } else {
        (0..triplets.len()).collect()
    };
    let labels: Vec<usize> = supervised.iter().map(|&r| ds.age(rows[r])).collect();
    let sup_log_probs = tape.select_rows(out.log_probs, &supervised)?;
    let sup_probs = tape.select_rows(out.probs, &supervised)?;

    let l_s = losses::softmax_ce_batch(tape, sup_log_probs, &labels)?;
    let mut total = l_s;
    let value = |tape: &Tape, v: Var| tape.value(v).map(|t| t.data()[0]);

    let add_term = |tape: &mut Tape, total: &mut Var, term: Var, lambda: f64| -> Result<f64> {
        let scaled = tape.scale(term, lambda)?;
        *total = tape.add(*total, scaled)?;
        value(tape, term)
    };

    let mut l_m = 0.0;
    if w.lambda_m > 0.0 {
        let t = losses::mean_loss_batch(tape, sup_probs, &labels, cfg.mean_loss_form)?;
        l_m = add_term(tape, &mut total, t, w.lambda_m)?;
    }
    let mut l_v = 0.0;
    if w.lambda_v > 0.0 {
        let t = losses::variance_loss_batch(tape, sup_probs)?;
        l_v = add_term(tape, &mut total, t, w.lambda_v)?;
    }

    let mut l_c = 0.0;
    if use_pair {
        if cfg.pair_loss != PairLoss::Kld {
            let feats = tape.value(out.features)?;
            let d = feats.shape()[1];
            let alive = |r: usize| {
                feats.data()[r * d..(r + 1) * d]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
                    >= NORM_FLOOR
            };
            pairs.retain(|&(a, p)| alive(a) && alive(p));
        }
        if !pairs.is_empty() {
            let (a_rows, p_rows): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let t = match cfg.pair_loss {
                PairLoss::Cosine | PairLoss::NegCosine => {
                    let fa = tape.select_rows(out.features, &a_rows)?;
                    let fp = tape.select_rows(out.features, &p_rows)?;
                    if cfg.pair_loss == PairLoss::Cosine {
                        losses::cosine_loss_batch(tape, fa, fp)?
                    } else {
                        losses::neg_cosine_loss_batch(tape, fa, fp)?
                    }
                }
                PairLoss::Kld => {
                    let sa = tape.select_rows(out.probs, &a_rows)?;
                    let sp = tape.select_rows(out.probs, &p_rows)?;
                    losses::kld_loss_batch(tape, sa, sp)?
                }
            };
            l_c = add_term(tape, &mut total, t, w.lambda_c)?;
        }
    }

    let mut l_t = 0.0;
    if use_triplet && !triples.is_empty() {
        let a_rows: Vec<usize> = triples.iter().map(|t| t.0).collect();
        let p_rows: Vec<usize> = triples.iter().map(|t| t.1).collect();
        let n_rows: Vec<usize> = triples.iter().map(|t| t.2).collect();
        let sa = tape.select_rows(out.probs, &a_rows)?;
        let sp = tape.select_rows(out.probs, &p_rows)?;
        let sn = tape.select_rows(out.probs, &n_rows)?;
        let t = losses::triplet_margin_loss_batch(tape, sa, sp, sn, w.alpha)?;
        l_t = add_term(tape, &mut total, t, w.lambda_t)?;
    }

    let l_s = value(tape, l_s)?;
    let breakdown = LossBreakdown::compose(l_s, l_m, l_v, l_c, l_t, &w);
    Ok((total, breakdown))
}

/// Loss and parameter gradients for one batch.
pub fn batch_gradients(
    model: &Model,
    ds: &LabeledDataset,
    triplets: &[Triplet],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let (loss, breakdown) = batch_objective(&mut tape, model, &params, ds, triplets, cfg)?;
    let mut grads = tape.backward(loss)?;
    let grads = params
        .vars()
        .map(|v| {
            let shape = tape
                .value(v)
                .map(|t| t.shape().to_vec())
                .unwrap_or_default();
            grads.take(v).unwrap_or_else(|| Tensor::zeros(&shape))
        })
        .collect();
    Ok((breakdown, grads))
}

fn check_compatible(ds: &LabeledDataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::ProtocolIncompatible("training set is empty".into()));
    }
    Ok(())
}

/// Trains a freshly initialised model (seeded by `cfg.seed`).
pub fn train(ds: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_compatible(ds, cfg)?;
    let model = Model::init(cfg.model_config(ds), cfg.seed)?;
    train_from(model, ds, cfg)
}

/// Continues training `model`. One epoch uses every sample as anchor once.
pub fn train_from(
    mut model: Model,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    check_compatible(ds, cfg)?;
    let expected = cfg.model_config(ds);
    if model.config().input_dim != expected.input_dim
        || model.config().num_ages != expected.num_ages
    {
        return Err(Error::Config(format!(
            "model expects input_dim {} and {} ages, dataset has {} and {}",
            model.config().input_dim,
            model.config().num_ages,
            expected.input_dim,
            expected.num_ages
        )));
    }
    let sampler = TripletSampler::new(ds, cfg.sampler_config())?;
    let mut state = AdamState::new(&model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let sampling_seed = crate::derive_seed(cfg.seed, 1);

    for epoch in 0..cfg.epochs {
        let batches = sampler.epoch(sampling_seed, epoch as u64);
        let mut sum = [0.0; 6];
        for batch in &batches {
            let (b, grads) = batch_gradients(&model, ds, batch, cfg)?;
            adam_step(&mut model, &grads, &mut state, cfg)?;
            for (s, v) in sum
                .iter_mut()
                .zip([b.l_s, b.l_m, b.l_v, b.l_c, b.l_t, b.total])
            {
                *s += v;
            }
        }
        let n = batches.len() as f64;
        history.push(EpochRecord {
            epoch,
            loss: LossBreakdown {
                l_s: sum[0] / n,
                l_m: sum[1] / n,
                l_v: sum[2] / n,
                l_c: sum[3] / n,
                l_t: sum[4] / n,
                total: sum[5] / n,
            },
        });
    }
    Ok(TrainOutcome { model, history })
}

//! Training objectives over age distributions and feature vectors.
//!
//! Each loss comes in two forms: a value-level function over slices, used
//! for evaluation and as a reference, and a batched tape function that
//! averages the per-row loss over a batch and supports backpropagation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Norm below which a feature vector counts as zero.
pub const NORM_FLOOR: f64 = 1e-12;
/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_m: f64,
    pub lambda_v: f64,
    pub lambda_c: f64,
    pub lambda_t: f64,
    /// Triplet margin.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_m: 0.2,
            lambda_v: 0.05,
            lambda_c: 10.0,
            lambda_t: 1.0,
            alpha: 0.2,
        }
    }
}

impl LossWeights {
    /// Mean and variance terms only (`λ_c = λ_t = 0`).
    pub fn mean_variance() -> Self {
        Self {
            lambda_c: 0.0,
            lambda_t: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_m", self.lambda_m),
            ("lambda_v", self.lambda_v),
            ("lambda_c", self.lambda_c),
            ("lambda_t", self.lambda_t),
            ("alpha", self.alpha),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Form of the mean-age penalty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanLossForm {
    /// `½(Σ j·s_j − y)²`
    #[default]
    Squared,
    /// `|Σ j·s_j − y|`
    Absolute,
}

/// The anchor/positive term weighted by `λ_c`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLoss {
    /// `1 − cos(f_a, f_p)` on features.
    #[default]
    Cosine,
    /// `−cos(f_a, f_p)`, the similarity maximised directly.
    NegCosine,
    /// KL divergence between the positive's and the anchor's distributions.
    Kld,
}

/// Per-term losses and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_m: f64,
    pub l_v: f64,
    pub l_c: f64,
    pub l_t: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `l_s + λ_m·l_m + λ_v·l_v + λ_c·l_c + λ_t·l_t`, evaluated left to right.
    pub fn compose(l_s: f64, l_m: f64, l_v: f64, l_c: f64, l_t: f64, w: &LossWeights) -> Self {
        let total = l_s + w.lambda_m * l_m + w.lambda_v * l_v + w.lambda_c * l_c + w.lambda_t * l_t;
        Self {
            l_s,
            l_m,
            l_v,
            l_c,
            l_t,
            total,
        }
    }
}

/// Alias of [`LossBreakdown::compose`].
pub fn total_loss(
    l_s: f64,
    l_m: f64,
    l_v: f64,
    l_c: f64,
    l_t: f64,
    w: &LossWeights,
) -> LossBreakdown {
    LossBreakdown::compose(l_s, l_m, l_v, l_c, l_t, w)
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidTensor("softmax of an empty vector".into()));
    }
    if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "softmax",
            index,
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn check_label(y: usize, num_ages: usize) -> Result<()> {
    if y < 1 || y > num_ages {
        return Err(Error::AgeOutOfRange {
            age: y as i64,
            num_ages,
        });
    }
    Ok(())
}

/// `−log s_y`.
pub fn softmax_ce(s: &[f64], y: usize) -> Result<f64> {
    check_label(y, s.len())?;
    Ok(-s[y - 1].ln())
}

/// `−log softmax(logits)_y`, via log-sum-exp.
pub fn softmax_ce_logits(logits: &[f64], y: usize) -> Result<f64> {
    check_label(y, logits.len())?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[y - 1])
}

fn expected_label(s: &[f64]) -> f64 {
    s.iter().enumerate().map(|(j, p)| (j + 1) as f64 * p).sum()
}

pub fn mean_loss(s: &[f64], y: usize, form: MeanLossForm) -> f64 {
    let diff = expected_label(s) - y as f64;
    match form {
        MeanLossForm::Squared => 0.5 * diff * diff,
        MeanLossForm::Absolute => diff.abs(),
    }
}

/// `Σ_j s_j (j − Σ_k k·s_k)²`.
pub fn variance_loss(s: &[f64]) -> f64 {
    let mean = expected_label(s);
    s.iter()
        .enumerate()
        .map(|(j, p)| {
            let d = (j + 1) as f64 - mean;
            p * d * d
        })
        .sum()
}

pub fn cosine_similarity(f_a: &[f64], f_p: &[f64]) -> Result<f64> {
    if f_a.len() != f_p.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_loss",
            lhs: vec![f_a.len()],
            rhs: vec![f_p.len()],
        });
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, np) = (norm(f_a), norm(f_p));
    for n in [na, np] {
        if n.is_nan() || n < NORM_FLOOR {
            return Err(Error::ZeroNorm {
                norm: n,
                floor: NORM_FLOOR,
            });
        }
    }
    let dot: f64 = f_a.iter().zip(f_p).map(|(a, b)| a * b).sum();
    Ok(dot / (na * np))
}

/// `1 − cos(f_a, f_p)`, in `[0, 2]`.
pub fn cosine_loss(f_a: &[f64], f_p: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_similarity(f_a, f_p)?)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max(‖s_a − s_p‖² − ‖s_a − s_n‖² + α, 0)`.
pub fn triplet_margin_loss(s_a: &[f64], s_p: &[f64], s_n: &[f64], alpha: f64) -> f64 {
    (sq_dist(s_a, s_p) - sq_dist(s_a, s_n) + alpha).max(0.0)
}

/// `(1/A)·Σ_j s_{p,j}(log s_{p,j} − log s_{a,j})`, probabilities clamped at [`PROB_FLOOR`].
pub fn kld_loss(s_a: &[f64], s_p: &[f64]) -> f64 {
    let a = s_a.len() as f64;
    s_a.iter()
        .zip(s_p)
        .map(|(&qa, &qp)| qp * (qp.max(PROB_FLOOR).ln() - qa.max(PROB_FLOOR).ln()))
        .sum::<f64>()
        / a
}

// ---- batched tape versions: each returns the mean over rows ----

fn dims(tape: &Tape, x: Var) -> Result<(usize, usize)> {
    let t = tape.value(x)?;
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::ShapeMismatch {
            op: "batch loss",
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Row sums of an `r×c` matrix as an `r×1` column.
pub fn row_sums(tape: &mut Tape, x: Var) -> Result<Var> {
    let (_, c) = dims(tape, x)?;
    let ones = tape.constant(Tensor::ones(&[c, 1]));
    tape.matmul(x, ones)
}

/// Expected label of each row as a `B×1` column.
fn row_means(tape: &mut Tape, probs: Var) -> Result<Var> {
    let (_, a) = dims(tape, probs)?;
    let labels = (1..=a).map(|j| j as f64).collect();
    let labels = tape.constant(Tensor::matrix(a, 1, labels)?);
    tape.matmul(probs, labels)
}

fn check_labels(labels: &[usize], rows: usize, num_ages: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "labels",
            lhs: vec![rows],
            rhs: vec![labels.len()],
        });
    }
    labels.iter().try_for_each(|&y| check_label(y, num_ages))
}

/// Mean cross-entropy from `B×A` log-probabilities.
pub fn softmax_ce_batch(tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let (b, a) = dims(tape, log_probs)?;
    check_labels(labels, b, a)?;
    let mut one_hot = Tensor::zeros(&[b, a]);
    for (i, &y) in labels.iter().enumerate() {
        one_hot.data_mut()[i * a + y - 1] = 1.0;
    }
    let one_hot = tape.constant(one_hot);
    let picked = tape.mul(one_hot, log_probs)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / b as f64)
}

pub fn mean_loss_batch(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    form: MeanLossForm,
) -> Result<Var> {
    let (b, a) = dims(tape, probs)?;
    check_labels(labels, b, a)?;
    let means = row_means(tape, probs)?;
    let targets = labels.iter().map(|&y| y as f64).collect();
    let targets = tape.constant(Tensor::matrix(b, 1, targets)?);
    let diff = tape.sub(means, targets)?;
    match form {
        MeanLossForm::Squared => {
            let sq = tape.sq_norm(diff)?;
            tape.scale(sq, 0.5 / b as f64)
        }
        MeanLossForm::Absolute => {
            let abs = tape.abs(diff)?;
            tape.mean(abs)
        }
    }
}

pub fn variance_loss_batch(tape: &mut Tape, probs: Var) -> Result<Var> {
    let (b, a) = dims(tape, probs)?;
    let means = row_means(tape, probs)?;
    let ones = tape.constant(Tensor::ones(&[1, a]));
    let spread = tape.matmul(means, ones)?;
    let grid = (0..b).flat_map(|_| (1..=a).map(|j| j as f64)).collect();
    let grid = tape.constant(Tensor::matrix(b, a, grid)?);
    let centered = tape.sub(grid, spread)?;
    let sq = tape.mul(centered, centered)?;
    let weighted = tape.mul(probs, sq)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, 1.0 / b as f64)
}

/// Row-wise cosine similarity of two `B×D` matrices as a `B×1` column.
/// Norms are floored at [`NORM_FLOOR`] so dead feature rows do not produce NaN.
pub fn cosine_similarity_rows(tape: &mut Tape, f_a: Var, f_p: Var) -> Result<Var> {
    let prod = tape.mul(f_a, f_p)?;
    let dots = row_sums(tape, prod)?;
    let norm = |tape: &mut Tape, f: Var| -> Result<Var> {
        let sq = tape.mul(f, f)?;
        let sums = row_sums(tape, sq)?;
        let n = tape.sqrt(sums)?;
        tape.clamp_min(n, NORM_FLOOR)
    };
    let na = norm(tape, f_a)?;
    let np = norm(tape, f_p)?;
    let denom = tape.mul(na, np)?;
    tape.div(dots, denom)
}

/// Mean `1 − cos` over rows.
pub fn cosine_loss_batch(tape: &mut Tape, f_a: Var, f_p: Var) -> Result<Var> {
    let neg = neg_cosine_loss_batch(tape, f_a, f_p)?;
    tape.add_scalar(neg, 1.0)
}

/// Mean `−cos` over rows.
pub fn neg_cosine_loss_batch(tape: &mut Tape, f_a: Var, f_p: Var) -> Result<Var> {
    let cos = cosine_similarity_rows(tape, f_a, f_p)?;
    let m = tape.mean(cos)?;
    tape.scale(m, -1.0)
}

/// Mean hinge `max(‖s_a − s_p‖² − ‖s_a − s_n‖² + α, 0)` over rows.
pub fn triplet_margin_loss_batch(
    tape: &mut Tape,
    s_a: Var,
    s_p: Var,
    s_n: Var,
    alpha: f64,
) -> Result<Var> {
    let dp = tape.sub(s_a, s_p)?;
    let dp = tape.mul(dp, dp)?;
    let dp = row_sums(tape, dp)?;
    let dn = tape.sub(s_a, s_n)?;
    let dn = tape.mul(dn, dn)?;
    let dn = row_sums(tape, dn)?;
    let gap = tape.sub(dp, dn)?;
    let gap = tape.add_scalar(gap, alpha)?;
    let hinge = tape.max0(gap)?;
    tape.mean(hinge)
}

/// Mean scaled KL divergence over rows.
pub fn kld_loss_batch(tape: &mut Tape, s_a: Var, s_p: Var) -> Result<Var> {
    let (b, a) = dims(tape, s_a)?;
    let ca = tape.clamp_min(s_a, PROB_FLOOR)?;
    let cp = tape.clamp_min(s_p, PROB_FLOOR)?;
    let la = tape.ln(ca)?;
    let lp = tape.ln(cp)?;
    let diff = tape.sub(lp, la)?;
    let terms = tape.mul(s_p, diff)?;
    let total = tape.sum(terms)?;
    tape.scale(total, 1.0 / (a * b) as f64)
}

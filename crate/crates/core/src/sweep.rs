//! Loss-weight sweeps and loss-combination ablations.
//!
//! Every cell retrains from the base configuration's seeds, so cells differ
//! only in their loss settings.

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::PairLoss;
use crate::protocol::{cross_validate, EvalReport, Protocol};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub label: String,
    pub lambda_c: f64,
    pub lambda_t: f64,
    pub pair_loss: PairLoss,
}

impl SweepCell {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            lambda_c: self.lambda_c,
            lambda_t: self.lambda_t,
            pair_loss: self.pair_loss,
            ..base.clone()
        }
    }
}

fn pair_name(p: PairLoss) -> &'static str {
    match p {
        PairLoss::Cosine => "Cosine",
        PairLoss::NegCosine => "NegCosine",
        PairLoss::Kld => "KLD",
    }
}

/// Name of the loss combination a `(λ_c, λ_t, pair)` setting trains.
pub fn loss_set_label(lambda_c: f64, lambda_t: f64, pair: PairLoss) -> String {
    let mut label = String::from("MV");
    if lambda_c > 0.0 {
        label.push('+');
        label.push_str(pair_name(pair));
    }
    if lambda_t > 0.0 {
        label.push_str("+Triplet");
    }
    label
}

/// Cross product of `λ_c` and `λ_t` values, ordered by `λ_c` then `λ_t`.
pub fn grid_cells(lambda_c: &[f64], lambda_t: &[f64], pair: PairLoss) -> Result<Vec<SweepCell>> {
    if lambda_c.is_empty() || lambda_t.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if let Some(bad) = lambda_c
        .iter()
        .chain(lambda_t)
        .find(|v| !v.is_finite() || **v < 0.0)
    {
        return Err(Error::Config(format!(
            "grid values must be finite and >= 0, got {bad}"
        )));
    }
    let sorted = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let (cs, ts) = (sorted(lambda_c), sorted(lambda_t));
    Ok(cs
        .iter()
        .flat_map(|&c| {
            ts.iter().map(move |&t| SweepCell {
                label: loss_set_label(c, t, pair),
                lambda_c: c,
                lambda_t: t,
                pair_loss: pair,
            })
        })
        .collect())
}

/// The six loss combinations: MV, MV+KLD, MV+Cosine, MV+Triplet,
/// MV+KLD+Triplet, MV+Cosine+Triplet.
pub fn loss_set_cells(lambda_c: f64, lambda_t: f64) -> Result<Vec<SweepCell>> {
    if !(lambda_c > 0.0 && lambda_t > 0.0) {
        return Err(Error::Config(
            "loss-set ablation needs positive lambda_c and lambda_t".into(),
        ));
    }
    let rows = [
        (0.0, 0.0, PairLoss::Cosine),
        (lambda_c, 0.0, PairLoss::Kld),
        (lambda_c, 0.0, PairLoss::Cosine),
        (0.0, lambda_t, PairLoss::Cosine),
        (lambda_c, lambda_t, PairLoss::Kld),
        (lambda_c, lambda_t, PairLoss::Cosine),
    ];
    Ok(rows
        .into_iter()
        .map(|(c, t, p)| SweepCell {
            label: loss_set_label(c, t, p),
            lambda_c: c,
            lambda_t: t,
            pair_loss: p,
        })
        .collect())
}

/// Grid file contents: `lambda_c = [...]`, `lambda_t = [...]`, and optionally
/// `loss_sets = true` for the six-row ablation at the first `λ_c`/`λ_t` values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub lambda_c: Vec<f64>,
    pub lambda_t: Vec<f64>,
    pub loss_sets: bool,
    pub pair_loss: Option<PairLoss>,
}

impl SweepGrid {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("grid: {e}")))
    }

    pub fn cells(&self, base: &TrainConfig) -> Result<Vec<SweepCell>> {
        if self.loss_sets {
            let c = self.lambda_c.first().copied().unwrap_or(base.lambda_c);
            let t = self.lambda_t.first().copied().unwrap_or(base.lambda_t);
            loss_set_cells(c, t)
        } else {
            grid_cells(
                &self.lambda_c,
                &self.lambda_t,
                self.pair_loss.unwrap_or(base.pair_loss),
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub lambda_c: f64,
    pub lambda_t: f64,
    pub pair_loss: PairLoss,
    pub mean_mae: f64,
    pub mu_vf: Option<f64>,
    pub mu_vs: Option<f64>,
    pub fold_maes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub protocol: Protocol,
    pub k: usize,
    pub split_seed: u64,
    pub base: TrainConfig,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// One JSON record per row.
    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
            .collect()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("label,lambda_c,lambda_t,pair_loss,mean_mae,mu_vf,mu_vs\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.label,
                r.lambda_c,
                r.lambda_t,
                pair_name(r.pair_loss),
                r.mean_mae,
                opt(r.mu_vf),
                opt(r.mu_vs)
            ));
        }
        out
    }
}

pub fn row_from_report(cell: &SweepCell, report: &EvalReport) -> SweepRow {
    SweepRow {
        label: cell.label.clone(),
        lambda_c: cell.lambda_c,
        lambda_t: cell.lambda_t,
        pair_loss: cell.pair_loss,
        mean_mae: report.mean_mae,
        mu_vf: report.mu_vf,
        mu_vs: report.mu_vs,
        fold_maes: report.folds.iter().map(|f| f.mae).collect(),
    }
}

/// Trains and evaluates every cell under `protocol` with shared seeds.
pub fn sweep(
    ds: &LabeledDataset,
    base: &TrainConfig,
    cells: &[SweepCell],
    protocol: Protocol,
    k: usize,
    split_seed: u64,
    jobs: usize,
) -> Result<SweepReport> {
    if cells.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let rows = cells
        .iter()
        .map(|cell| {
            let report = cross_validate(ds, &cell.apply(base), protocol, k, split_seed, jobs)?;
            Ok(row_from_report(cell, &report))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        protocol,
        k,
        split_seed,
        base: base.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_cardinality_and_order() {
        let cells = grid_cells(&[10.0, 0.0, 1.0], &[1.0, 0.0], PairLoss::Cosine).unwrap();
        assert_eq!(cells.len(), 6);
        let keys: Vec<(f64, f64)> = cells.iter().map(|c| (c.lambda_c, c.lambda_t)).collect();
        assert_eq!(
            keys,
            vec![
                (0.0, 0.0),
                (0.0, 1.0),
                (1.0, 0.0),
                (1.0, 1.0),
                (10.0, 0.0),
                (10.0, 1.0)
            ]
        );
        assert_eq!(cells[0].label, "MV");
        assert_eq!(cells[5].label, "MV+Cosine+Triplet");
        assert!(grid_cells(&[], &[0.0], PairLoss::Cosine).is_err());
        assert!(grid_cells(&[-1.0], &[0.0], PairLoss::Cosine).is_err());
    }

    #[test]
    fn loss_set_rows() {
        let labels: Vec<String> = loss_set_cells(10.0, 1.0)
            .unwrap()
            .into_iter()
            .map(|c| c.label)
            .collect();
        assert_eq!(
            labels,
            vec![
                "MV",
                "MV+KLD",
                "MV+Cosine",
                "MV+Triplet",
                "MV+KLD+Triplet",
                "MV+Cosine+Triplet"
            ]
        );
        assert!(loss_set_cells(0.0, 1.0).is_err());
    }

    #[test]
    fn grid_file_parsing() {
        let g = SweepGrid::parse("lambda_c = [0, 2.5]\nlambda_t = [0]\n").unwrap();
        assert_eq!(g.cells(&TrainConfig::default()).unwrap().len(), 2);
        let g = SweepGrid::parse("loss_sets = true\n").unwrap();
        assert_eq!(g.cells(&TrainConfig::default()).unwrap().len(), 6);
        assert!(SweepGrid::parse("lambda_x = [1]").is_err());
        let empty = SweepGrid::parse("").unwrap();
        assert!(empty.cells(&TrainConfig::default()).is_err());
    }
}

//! Rationale-recovery scoring against planted ground truth, attention
//! heatmap export, and the paired regularization-effect experiment.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Dataset, Graph};
use crate::error::{FigError, Result};
use crate::param::Binder;
use crate::tensor::Tape;
use crate::trainer::{batch_loss, evaluate, predict_graph, train, Model, TrainConfig, Variant};

/// Mean agreement between the selected node indices and each graph's planted
/// rationale, next to the chance level a uniformly random selection of the
/// same size would score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub precision_at_k: f64,
    pub recall: f64,
    pub jaccard: f64,
    /// Expected precision of a random size-K selection: |truth| / n per
    /// graph, averaged.
    pub random_precision: f64,
    pub n_graphs: usize,
}

fn overlap_scores(selected: &[usize], truth: &BTreeSet<usize>) -> (f64, f64, f64) {
    let overlap = selected.iter().filter(|v| truth.contains(v)).count();
    let union = selected.len() + truth.len() - overlap;
    (
        overlap as f64 / selected.len() as f64,
        overlap as f64 / truth.len() as f64,
        overlap as f64 / union as f64,
    )
}

/// Scores the node-level selections against each graph's planted rationale.
pub fn rationale_recovery(model: &Model, dataset: &Dataset) -> Result<RecoveryReport> {
    if model.config.variant != Variant::FigN {
        return Err(FigError::Unsupported(
            "rationale recovery scores node selections; the virtual-node variant selects virtual rows, not nodes".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(FigError::Argument("cannot score recovery on an empty dataset".into()));
    }
    let (mut precision, mut recall, mut jaccard, mut random) = (0.0, 0.0, 0.0, 0.0);
    for (i, g) in dataset.graphs.iter().enumerate() {
        let truth = g.rationale.as_ref().ok_or_else(|| {
            FigError::Argument(format!("graph {i} has no planted rationale to score against"))
        })?;
        if truth.is_empty() {
            return Err(FigError::Argument(format!("graph {i} has an empty planted rationale")));
        }
        let pred = predict_graph(model, g)?;
        let selected = pred.idx_ra.expect("node-level predictions carry selected indices");
        let truth_set: BTreeSet<usize> = truth.iter().copied().collect();
        let (p, r, j) = overlap_scores(&selected, &truth_set);
        precision += p;
        recall += r;
        jaccard += j;
        random += truth_set.len() as f64 / g.n as f64;
    }
    let m = dataset.len() as f64;
    Ok(RecoveryReport {
        precision_at_k: precision / m,
        recall: recall / m,
        jaccard: jaccard / m,
        random_precision: random / m,
        n_graphs: dataset.len(),
    })
}

/// Metadata written next to the heatmap CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSidecar {
    /// Rationale-block indicator over the `t` intervened rows.
    pub s: Vec<f64>,
    #[serde(rename = "K")]
    pub k: usize,
    pub cut_value: f64,
    /// `cut_value / t`: boundary-crossing attention mass per row.
    pub off_block_mass: f64,
}

/// Writes one graph's attention matrix as a `t × t` CSV (12 significant
/// digits, no header) plus a JSON sidecar at the same path with the
/// extension replaced by `json`.
pub fn export_attention(model: &Model, graph: &Graph, csv_path: &Path) -> Result<AttentionSidecar> {
    let pred = predict_graph(model, graph)?;
    let mut csv = String::new();
    for row in 0..pred.t {
        for col in 0..pred.t {
            if col > 0 {
                csv.push(',');
            }
            let _ = write!(csv, "{:.11e}", pred.p_values[row * pred.t + col]);
        }
        csv.push('\n');
    }
    let sidecar = AttentionSidecar {
        s: pred.s,
        k: pred.k,
        cut_value: pred.cut_value,
        off_block_mass: pred.cut_value / pred.t as f64,
    };
    fs::write(csv_path, csv).map_err(|e| FigError::io(csv_path.display().to_string(), e))?;
    let sidecar_path = csv_path.with_extension("json");
    let text = serde_json::to_string(&sidecar).expect("plain numeric fields serialize") + "\n";
    fs::write(&sidecar_path, text).map_err(|e| FigError::io(sidecar_path.display().to_string(), e))?;
    Ok(sidecar)
}

/// One arm of one seed's paired run.
#[derive(Debug, Clone, PartialEq)]
pub struct RegEffectRow {
    pub seed: u64,
    pub beta_hat: f64,
    /// Mean `cut_value / t` over the test set.
    pub off_block_mass: f64,
    /// Test accuracy (classification) or RMSE (regression).
    pub test_metric: f64,
}

/// Matched-pairs comparison of training with and without the cut penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct RegEffectTable {
    pub rows: Vec<RegEffectRow>,
}

impl RegEffectTable {
    /// CSV rendering, header line first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,beta_hat,off_block_mass,test_metric\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.seed, r.beta_hat, r.off_block_mass, r.test_metric);
        }
        out
    }

    /// Mean off-block mass over the penalized (`beta_hat > 0`) or
    /// unpenalized arm.
    pub fn mean_off_block_mass(&self, regularized: bool) -> f64 {
        let arm: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| (r.beta_hat > 0.0) == regularized)
            .map(|r| r.off_block_mass)
            .collect();
        arm.iter().sum::<f64>() / arm.len() as f64
    }

    /// Mean test metric over one arm, same selection rule as
    /// [`RegEffectTable::mean_off_block_mass`].
    pub fn mean_test_metric(&self, regularized: bool) -> f64 {
        let arm: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| (r.beta_hat > 0.0) == regularized)
            .map(|r| r.test_metric)
            .collect();
        arm.iter().sum::<f64>() / arm.len() as f64
    }
}

/// Mean environment-swapped utility loss over a dataset, batched exactly as
/// training batches it (deterministic partner assignment, shuffle seed 0).
///
/// This is the observable signature of rationale quality: a selection that
/// kept the label-carrying nodes predicts through a foreign environment and
/// scores low here, while a selection that let them be swapped away is stuck
/// near chance no matter how good its unswapped accuracy looks. Picking the
/// best of a few restarts by this number needs no planted ground truth.
pub fn mean_swapped_utility(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(FigError::Argument("cannot average swapped utility over an empty dataset".into()));
    }
    let mut sum = 0.0;
    for batch in make_batches(dataset, model.config.batch_size, 0)? {
        let mut tape = Tape::new();
        let bound = {
            let mut binder = Binder::new(&mut tape);
            model.bind(&mut binder)
        };
        let fwd = batch_loss(&mut tape, &bound, &model.config, dataset, &batch, None)?;
        sum += fwd.report.l_util_swapped * batch.indices.len() as f64;
    }
    Ok(sum / dataset.len() as f64)
}

/// Mean per-row boundary-crossing attention mass over a dataset.
pub fn mean_off_block_mass(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(FigError::Argument("cannot average off-block mass over an empty dataset".into()));
    }
    let mut sum = 0.0;
    for g in &dataset.graphs {
        let pred = predict_graph(model, g)?;
        sum += pred.cut_value / pred.t as f64;
    }
    Ok(sum / dataset.len() as f64)
}

/// Trains the `beta_hat = 0` and `beta_hat = config.beta_hat` arms once per
/// seed and scores both on the test set. Pairing arms by seed makes the
/// comparison matched: both arms of a pair start from the same
/// initialization and see the same batch order.
pub fn reg_effect_experiment(
    config: &TrainConfig,
    seeds: &[u64],
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
) -> Result<RegEffectTable> {
    if seeds.len() < 3 {
        return Err(FigError::Argument(format!(
            "a paired comparison needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    if config.beta_hat <= 0.0 {
        return Err(FigError::Argument(
            "the regularized arm needs beta_hat > 0 in the base config".into(),
        ));
    }
    let mut rows = Vec::with_capacity(2 * seeds.len());
    for &seed in seeds {
        for beta_hat in [0.0, config.beta_hat] {
            let arm = TrainConfig { seed, beta_hat, ..config.clone() };
            let outcome = train(&arm, train_set, val_set)?;
            rows.push(RegEffectRow {
                seed,
                beta_hat,
                off_block_mass: mean_off_block_mass(&outcome.model, test_set)?,
                test_metric: evaluate(&outcome.model, test_set)?,
            });
        }
    }
    Ok(RegEffectTable { rows })
}

/// Writes the experiment table as CSV.
pub fn write_reg_effect_csv(table: &RegEffectTable, path: &Path) -> Result<()> {
    fs::write(path, table.to_csv()).map_err(|e| FigError::io(path.display().to_string(), e))
}

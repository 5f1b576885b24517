//! Losses and the prediction head.
//!
//! The utility loss runs the intervention pipeline end to end: intervene on
//! `H_ra ‖ H_env`, read the rows out into one graph embedding, predict, and
//! score against the label. The cut regularizer `sᵀP(1−s) + (1−s)ᵀPs` meters
//! the attention mass crossing the rationale/environment boundary; the total
//! objective combines one own-environment term, one swapped-environment term
//! weighted by `alpha`, and both cut values weighted by
//! `beta = 2·beta_hat / (u(u−1))` where `u` is the graph's node count
//! (node-level) or the virtual-node count.

use serde::{Deserialize, Serialize};

use rand_chacha::ChaCha8Rng;

use crate::data::Label;
use crate::error::{FigError, Result};
use crate::intervener::{intervene, AttentionRecord, IntervenerBound};
use crate::param::{linear, Binder, Param, ParamSet};
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutKind {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    BinaryClassification,
    Regression,
}

impl Task {
    /// Output width of the prediction head.
    pub fn output_width(self) -> usize {
        match self {
            Task::BinaryClassification => 2,
            Task::Regression => 1,
        }
    }
}

/// Which intervened rows feed the readout: all of them (the default), or only
/// the rationale block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutScope {
    All,
    RationaleOnly,
}

// ─── prediction head ───

/// 3-layer MLP `d → d → d → c` with ReLU between layers; raw outputs, no
/// activation at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    pub w3: Param,
    pub b3: Param,
}

impl PredictorParams {
    pub fn new(d: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        PredictorParams {
            w1: Param::glorot(d, d, rng),
            b1: Param::zeros(&[d]),
            w2: Param::glorot(d, d, rng),
            b2: Param::zeros(&[d]),
            w3: Param::glorot(d, c, rng),
            b3: Param::zeros(&[c]),
        }
    }

    pub fn output_width(&self) -> usize {
        self.w3.shape[1]
    }

    pub fn bind(&self, b: &mut Binder) -> PredictorBound {
        PredictorBound {
            w1: b.bind(&self.w1),
            b1: b.bind(&self.b1),
            w2: b.bind(&self.w2),
            b2: b.bind(&self.b2),
            w3: b.bind(&self.w3),
            b3: b.bind(&self.b3),
        }
    }
}

impl ParamSet for PredictorParams {
    fn visit(&self, f: &mut dyn FnMut(String, &Param)) {
        f("predictor.w1".into(), &self.w1);
        f("predictor.b1".into(), &self.b1);
        f("predictor.w2".into(), &self.w2);
        f("predictor.b2".into(), &self.b2);
        f("predictor.w3".into(), &self.w3);
        f("predictor.b3".into(), &self.b3);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        f("predictor.w1".into(), &mut self.w1);
        f("predictor.b1".into(), &mut self.b1);
        f("predictor.w2".into(), &mut self.w2);
        f("predictor.b2".into(), &mut self.b2);
        f("predictor.w3".into(), &mut self.w3);
        f("predictor.b3".into(), &mut self.b3);
    }
}

pub struct PredictorBound {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub w3: TensorId,
    pub b3: TensorId,
}

/// Collapses the `t × d` intervened rows to one length-`d` graph embedding.
pub fn readout(tape: &mut Tape, h: TensorId, kind: ReadoutKind) -> Result<TensorId> {
    match kind {
        ReadoutKind::Mean => tape.mean_rows(h),
        ReadoutKind::Sum => tape.sum_rows(h),
    }
}

/// Raw logits (classification) or raw value (regression) for one graph
/// embedding of length `d`.
pub fn predict(tape: &mut Tape, h: TensorId, params: &PredictorBound) -> Result<TensorId> {
    let d = tape.shape(h).iter().product::<usize>();
    let row = tape.reshape(h, vec![1, d])?;
    let z1 = linear(tape, row, params.w1, params.b1)?;
    let a1 = tape.relu(z1);
    let z2 = linear(tape, a1, params.w2, params.b2)?;
    let a2 = tape.relu(z2);
    let z3 = linear(tape, a2, params.w3, params.b3)?;
    let c = tape.shape(z3)[1];
    tape.reshape(z3, vec![c])
}

// ─── task losses ───

/// Log-sum-exp of a `[1, c]` logit row, stabilized by the row max (read back
/// as a constant; the max cancels in the exact expression, so treating it as
/// constant leaves the gradient untouched).
fn log_sum_exp(tape: &mut Tape, row: TensorId) -> Result<TensorId> {
    let m = tape.data(row).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_const(row, -m);
    let e = tape.exp(shifted);
    let total = tape.sum_all(e)?;
    let ln = tape.log(total);
    Ok(tape.add_const(ln, m))
}

/// Cross-entropy `lse(z) − z[label]` over a `[1, c]` logit row.
fn cross_entropy(tape: &mut Tape, row: TensorId, label: usize) -> Result<TensorId> {
    let c = tape.shape(row)[1];
    if label >= c {
        return Err(FigError::Argument(format!("label {label} out of range for {c} classes")));
    }
    let lse = log_sum_exp(tape, row)?;
    let picked = tape.slice_cols(row, label, label + 1)?;
    let z_y = tape.reshape(picked, vec![])?;
    tape.sub(lse, z_y)
}

/// Task loss: softmax cross-entropy for classification (a single logit is
/// treated as the logistic case via the 2-logit row `[0, z]`), squared error
/// for regression. Scalar output.
pub fn task_loss(tape: &mut Tape, pred: TensorId, y: &Label, task: Task) -> Result<TensorId> {
    let c = tape.shape(pred).iter().product::<usize>();
    match (task, y) {
        (Task::Regression, Label::Value(v)) => {
            if c != 1 {
                return Err(FigError::Shape {
                    op: "task_loss",
                    detail: format!("regression expects one output, got {c}"),
                });
            }
            let diff = tape.add_const(pred, -v);
            let sq = tape.mul(diff, diff)?;
            tape.reshape(sq, vec![])
        }
        (Task::BinaryClassification, Label::Class(label)) => {
            let row = if c == 1 {
                let one = tape.reshape(pred, vec![1, 1])?;
                let zero = tape.constant(vec![0.0], vec![1, 1])?;
                let stacked = tape.concat_rows(zero, one)?;
                tape.transpose(stacked)?
            } else {
                tape.reshape(pred, vec![1, c])?
            };
            cross_entropy(tape, row, *label)
        }
        (Task::Regression, Label::Class(_)) => Err(FigError::Argument(
            "regression task scored against a class label".into(),
        )),
        (Task::BinaryClassification, Label::Value(_)) => Err(FigError::Argument(
            "classification task scored against a numeric label".into(),
        )),
    }
}

// ─── cut regularizer ───

/// 0/1 indicator with exactly `k` leading ones.
pub fn indicator_vector(k: usize, t: usize) -> Vec<f64> {
    assert!(k <= t, "indicator_vector: K = {k} exceeds t = {t}");
    (0..t).map(|i| if i < k { 1.0 } else { 0.0 }).collect()
}

/// `sᵀP(1−s) + (1−s)ᵀPs`: total attention mass crossing the boundary that
/// `s` marks. Stays on tape so its gradient reaches P.
pub fn cut_regularizer(tape: &mut Tape, p: TensorId, s: &[f64]) -> Result<TensorId> {
    let shape = tape.shape(p).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(FigError::Shape {
            op: "cut_regularizer",
            detail: format!("P must be square, got {shape:?}"),
        });
    }
    let t = shape[0];
    if s.len() != t {
        return Err(FigError::Shape {
            op: "cut_regularizer",
            detail: format!("indicator length {} vs t = {t}", s.len()),
        });
    }
    let s_col = tape.constant(s.to_vec(), vec![t, 1])?;
    let co_col = tape.constant(s.iter().map(|&x| 1.0 - x).collect(), vec![t, 1])?;
    let s_row = tape.transpose(s_col)?;
    let co_row = tape.transpose(co_col)?;
    let sp = tape.matmul(s_row, p)?;
    let left = tape.matmul(sp, co_col)?;
    let cp = tape.matmul(co_row, p)?;
    let right = tape.matmul(cp, s_col)?;
    let both = tape.add(left, right)?;
    tape.reshape(both, vec![])
}

// ─── composed losses ───

/// One graph's encoded and partitioned state, ready for intervention.
#[derive(Debug)]
pub struct VariantSplit {
    /// `K × d` rationale rows.
    pub h_ra: TensorId,
    /// `(t−K) × d` environment rows.
    pub h_env: TensorId,
    /// β's denominator base: node count for the node-level variant, virtual
    /// node count otherwise.
    pub units: usize,
}

/// Everything the loss needs besides the split rows.
pub struct LossCtx<'a> {
    pub intervener: &'a IntervenerBound,
    pub predictor: &'a PredictorBound,
    pub readout: ReadoutKind,
    pub scope: ReadoutScope,
    pub task: Task,
}

/// `predict(readout(intervene(H_ra ‖ H_env)))`: the prediction that both the
/// utility loss and test-time evaluation are built on, plus the attention
/// record.
pub fn intervened_prediction(
    tape: &mut Tape,
    ctx: &LossCtx,
    h_ra: TensorId,
    h_env: TensorId,
) -> Result<(TensorId, AttentionRecord)> {
    let (h_inter, record) = intervene(tape, h_ra, h_env, ctx.intervener)?;
    let scoped = match ctx.scope {
        ReadoutScope::All => h_inter,
        ReadoutScope::RationaleOnly => tape.slice_rows(h_inter, 0, record.k)?,
    };
    let embedding = readout(tape, scoped, ctx.readout)?;
    let pred = predict(tape, embedding, ctx.predictor)?;
    Ok((pred, record))
}

/// Task loss of [`intervened_prediction`] against `y`, plus the attention
/// record for regularization reuse.
pub fn utility_loss(
    tape: &mut Tape,
    ctx: &LossCtx,
    h_ra: TensorId,
    h_env: TensorId,
    y: &Label,
) -> Result<(TensorId, AttentionRecord)> {
    let (pred, record) = intervened_prediction(tape, ctx, h_ra, h_env)?;
    let loss = task_loss(tape, pred, y, ctx.task)?;
    Ok((loss, record))
}

/// `beta = 2·beta_hat / (u(u−1))`.
pub fn beta_weight(beta_hat: f64, units: usize) -> Result<f64> {
    if units < 2 {
        return Err(FigError::Argument(format!(
            "beta normalization needs at least 2 units, got {units}"
        )));
    }
    Ok(2.0 * beta_hat / (units * (units - 1)) as f64)
}

/// The five scalars of one total-loss evaluation.
/// `total = l_util_own + alpha·l_util_swapped + beta·(l_reg_own + l_reg_swapped)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_util_own: f64,
    pub l_util_swapped: f64,
    pub l_reg_own: f64,
    pub l_reg_swapped: f64,
    pub total: f64,
}

/// Total loss for one graph given its partner's environment rows. Returns the
/// scalar tensor (for backward), the report, and both attention records (own
/// first).
pub fn total_loss(
    tape: &mut Tape,
    ctx: &LossCtx,
    own: &VariantSplit,
    partner_env: TensorId,
    y: &Label,
    alpha: f64,
    beta_hat: f64,
) -> Result<(TensorId, LossReport, [AttentionRecord; 2])> {
    let (l_own, rec_own) = utility_loss(tape, ctx, own.h_ra, own.h_env, y)?;
    let (l_swapped, rec_swapped) = utility_loss(tape, ctx, own.h_ra, partner_env, y)?;
    let beta = beta_weight(beta_hat, own.units)?;
    let scaled_swapped = tape.scale(l_swapped, alpha);
    let util = tape.add(l_own, scaled_swapped)?;
    let reg_sum = tape.add(rec_own.cut, rec_swapped.cut)?;
    let scaled_reg = tape.scale(reg_sum, beta);
    let total = tape.add(util, scaled_reg)?;
    let report = LossReport {
        l_util_own: tape.data(l_own)[0],
        l_util_swapped: tape.data(l_swapped)[0],
        l_reg_own: rec_own.cut_value,
        l_reg_swapped: rec_swapped.cut_value,
        total: tape.data(total)[0],
    };
    Ok((total, report, [rec_own, rec_swapped]))
}

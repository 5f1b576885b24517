//! Adversarial training: the encoder/augmenter/predictor side descends the
//! total loss while the intervener ascends it.
//!
//! Every step binds all parameters onto a fresh tape, evaluates the mean
//! total loss of one batch (own-environment and partner-swapped passes plus
//! the attention cut penalty), runs one backward sweep, and applies both
//! signed updates from that single gradient evaluation. The epoch loop
//! shuffles batches per epoch, validates after each one, decays the learning
//! rate by 4x whenever the validation metric stalls for `patience` epochs,
//! and returns the best-validation parameters.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmenter::{
    partition_scores, split_node_level_traced, split_virtual, virtual_node_embed, AugmenterNBound,
    AugmenterNParams, AugmenterVnBound, AugmenterVnParams, SelectionTrace,
};
use crate::data::{make_batches, Batch, Dataset, Graph};
use crate::encoder::{encode, EncoderBound, EncoderParams};
use crate::error::{FigError, Result};
use crate::intervener::IntervenerParams;
use crate::metrics::{accuracy, regression_metrics};
use crate::objective::{
    intervened_prediction, total_loss, LossCtx, LossReport, PredictorParams, ReadoutKind,
    ReadoutScope, Task, VariantSplit,
};
use crate::param::{Binder, Param, ParamSet};
use crate::tensor::{Tape, TensorId};

/// Which granularity the augmenter splits at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FigN,
    FigVn,
}

impl Variant {
    /// The snake_case spelling configs and logs use.
    pub fn name(self) -> &'static str {
        match self {
            Variant::FigN => "fig_n",
            Variant::FigVn => "fig_vn",
        }
    }
}

/// Everything a training run is parameterized by. JSON configs use these
/// field names verbatim; omitted fields take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Rationale fraction: K = round(k_hat · units), clamped to keep both
    /// blocks nonempty.
    pub k_hat: f64,
    /// Virtual-node count (the virtual-node variant only).
    pub r: usize,
    /// Weight of the environment-swapped utility term.
    pub alpha: f64,
    /// Unnormalized regularizer weight; the per-graph weight is
    /// 2·beta_hat / (units·(units−1)).
    pub beta_hat: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Non-improving validation epochs before the learning rate decays by 4x.
    pub patience: usize,
    pub seed: u64,
    pub readout: ReadoutKind,
    pub task: Task,
    /// Embedding width.
    pub d: usize,
    pub encoder_layers: usize,
    /// Restrict the readout to the K rationale rows instead of all rows.
    pub readout_rationale_only: bool,
    /// Alternate descent-only and ascent-only batches instead of updating
    /// both sides from one gradient evaluation.
    pub alternating: bool,
    /// Pre-normalize both intervener sublayer inputs.
    pub layer_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::FigN,
            k_hat: 0.75,
            r: 8,
            alpha: 1.0,
            beta_hat: 1.0,
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            readout: ReadoutKind::Sum,
            task: Task::BinaryClassification,
            d: 64,
            encoder_layers: 3,
            readout_rationale_only: false,
            alternating: false,
            layer_norm: false,
        }
    }
}

impl TrainConfig {
    /// Defaults at the full benchmark width (d = 300).
    pub fn full_scale() -> Self {
        TrainConfig {
            d: 300,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(FigError::Config(msg));
        if !(self.k_hat > 0.0 && self.k_hat < 1.0) {
            return fail(format!("k_hat must lie strictly inside (0, 1), got {}", self.k_hat));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return fail(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if !(self.beta_hat.is_finite() && self.beta_hat >= 0.0) {
            return fail(format!("beta_hat must be nonnegative, got {}", self.beta_hat));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.patience == 0 {
            return fail("patience must be positive".into());
        }
        if self.d == 0 {
            return fail("d must be positive".into());
        }
        if self.variant == Variant::FigVn && self.r < 2 {
            return fail(format!("the virtual-node variant needs r >= 2, got {}", self.r));
        }
        Ok(())
    }

    /// Readout coverage implied by `readout_rationale_only`.
    pub fn scope(&self) -> ReadoutScope {
        if self.readout_rationale_only {
            ReadoutScope::RationaleOnly
        } else {
            ReadoutScope::All
        }
    }
}

/// `K = round(k_hat · units)` clamped to `[1, units−1]`, so the rationale and
/// the environment are both nonempty.
pub fn rationale_size(k_hat: f64, units: usize) -> Result<usize> {
    if units < 2 {
        return Err(FigError::Argument(format!(
            "splitting needs at least 2 units, got {units}"
        )));
    }
    let k = (k_hat * units as f64).round() as usize;
    Ok(k.clamp(1, units - 1))
}

// ─── model ───

#[derive(Debug, Clone, PartialEq)]
pub enum AugmenterParams {
    NodeLevel(AugmenterNParams),
    VirtualNode(AugmenterVnParams),
}

impl ParamSet for AugmenterParams {
    fn visit(&self, f: &mut dyn FnMut(String, &Param)) {
        match self {
            AugmenterParams::NodeLevel(p) => p.visit(f),
            AugmenterParams::VirtualNode(p) => p.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        match self {
            AugmenterParams::NodeLevel(p) => p.visit_mut(f),
            AugmenterParams::VirtualNode(p) => p.visit_mut(f),
        }
    }
}

pub enum AugmenterBound {
    NodeLevel(AugmenterNBound),
    VirtualNode(AugmenterVnBound),
}

/// All four components of one trainable model. The intervener is the
/// ascending side of the min-max game; everything else descends.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub encoder: EncoderParams,
    pub augmenter: AugmenterParams,
    pub predictor: PredictorParams,
    pub intervener: IntervenerParams,
}

/// Tape-bound tensor ids for every [`Model`] parameter.
pub struct ModelBound {
    pub encoder: EncoderBound,
    pub augmenter: AugmenterBound,
    pub predictor: crate::objective::PredictorBound,
    pub intervener: crate::intervener::IntervenerBound,
}

impl Model {
    /// Fresh Glorot/zero initialization. `n_max` caps the graph size the
    /// virtual-node assignment table can take; the node-level variant ignores
    /// it.
    pub fn new(
        config: TrainConfig,
        d_x: usize,
        d_e: Option<usize>,
        n_max: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if config.variant == Variant::FigVn && n_max == 0 {
            return Err(FigError::Argument(
                "the virtual-node assignment table needs n_max >= 1".into(),
            ));
        }
        Ok(Model {
            encoder: EncoderParams::new(d_x, d_e, config.d, config.encoder_layers, rng),
            augmenter: match config.variant {
                Variant::FigN => AugmenterParams::NodeLevel(AugmenterNParams::new(config.d, rng)),
                Variant::FigVn => {
                    AugmenterParams::VirtualNode(AugmenterVnParams::new(config.r, n_max, rng))
                }
            },
            predictor: PredictorParams::new(config.d, config.task.output_width(), rng),
            intervener: IntervenerParams::new(config.d, config.layer_norm, rng),
            config,
        })
    }

    /// Binds every parameter in visit order.
    pub fn bind(&self, b: &mut Binder) -> ModelBound {
        ModelBound {
            encoder: self.encoder.bind(b),
            augmenter: match &self.augmenter {
                AugmenterParams::NodeLevel(p) => AugmenterBound::NodeLevel(p.bind(b)),
                AugmenterParams::VirtualNode(p) => AugmenterBound::VirtualNode(p.bind(b)),
            },
            predictor: self.predictor.bind(b),
            intervener: self.intervener.bind(b),
        }
    }

    pub fn d_x(&self) -> usize {
        self.encoder.input_w.shape[0]
    }

    pub fn d_e(&self) -> Option<usize> {
        self.encoder.edge_w.as_ref().map(|w| w.shape[0])
    }

    /// Assignment-table capacity; `None` for the node-level variant.
    pub fn n_max(&self) -> Option<usize> {
        match &self.augmenter {
            AugmenterParams::NodeLevel(_) => None,
            AugmenterParams::VirtualNode(p) => Some(p.n_max),
        }
    }
}

impl ParamSet for Model {
    fn visit(&self, f: &mut dyn FnMut(String, &Param)) {
        self.encoder.visit(f);
        self.augmenter.visit(f);
        self.predictor.visit(f);
        self.intervener.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        self.encoder.visit_mut(f);
        self.augmenter.visit_mut(f);
        self.predictor.visit_mut(f);
        self.intervener.visit_mut(f);
    }
}

/// The intervener ascends the loss; every other parameter descends.
fn ascends(name: &str) -> bool {
    name.starts_with("intervener.")
}

// ─── per-graph forward ───

/// One graph, encoded and split, ready for the loss.
pub struct PreparedGraph {
    pub split: VariantSplit,
    /// Selected node indices (node-level variant only).
    pub idx_ra: Option<Vec<usize>>,
    /// Selection rounds recorded during this pass; empty for the virtual-node
    /// variant, whose split is already smooth.
    pub trace: SelectionTrace,
}

/// Encodes `graph` and splits it per the configured variant. `frozen` replays
/// a recorded selection trace instead of selecting live (see
/// [`SelectionTrace`]).
pub fn prepare_graph(
    tape: &mut Tape,
    bound: &ModelBound,
    config: &TrainConfig,
    graph: &Graph,
    frozen: Option<&SelectionTrace>,
) -> Result<PreparedGraph> {
    let h = encode(tape, graph, &bound.encoder)?;
    match &bound.augmenter {
        AugmenterBound::NodeLevel(aug) => {
            let m = partition_scores(tape, h, aug)?;
            let k = rationale_size(config.k_hat, graph.n)?;
            let (part, trace) = split_node_level_traced(tape, h, m, k, frozen)?;
            Ok(PreparedGraph {
                split: VariantSplit {
                    h_ra: part.h_ra,
                    h_env: part.h_env,
                    units: graph.n,
                },
                idx_ra: Some(part.idx_ra),
                trace,
            })
        }
        AugmenterBound::VirtualNode(aug) => {
            let h_vn = virtual_node_embed(tape, h, aug)?;
            let k = rationale_size(config.k_hat, aug.r)?;
            let (h_ra, h_env) = split_virtual(tape, h_vn, k)?;
            Ok(PreparedGraph {
                split: VariantSplit {
                    h_ra,
                    h_env,
                    units: aug.r,
                },
                idx_ra: None,
                trace: SelectionTrace::default(),
            })
        }
    }
}

fn loss_ctx<'a>(bound: &'a ModelBound, config: &TrainConfig) -> LossCtx<'a> {
    LossCtx {
        intervener: &bound.intervener,
        predictor: &bound.predictor,
        readout: config.readout,
        scope: config.scope(),
        task: config.task,
    }
}

/// One batch's mean total loss, still on the tape.
pub struct BatchForward {
    /// Scalar mean of the per-graph totals; backward through this.
    pub loss: TensorId,
    /// Field-wise mean of `per_graph`.
    pub report: LossReport,
    pub per_graph: Vec<LossReport>,
    /// Selection traces by batch position, for frozen-replay gradient checks.
    pub traces: Vec<SelectionTrace>,
}

/// Builds the mean total loss of `batch` on `tape`: every graph is encoded
/// and split first, then each contributes its own pass and a pass with its
/// partner's environment rows. `frozen` replays recorded selection traces by
/// batch position.
pub fn batch_loss(
    tape: &mut Tape,
    bound: &ModelBound,
    config: &TrainConfig,
    dataset: &Dataset,
    batch: &Batch,
    frozen: Option<&[SelectionTrace]>,
) -> Result<BatchForward> {
    let b = batch.indices.len();
    if b == 0 {
        return Err(FigError::Argument("batch is empty".into()));
    }
    if batch.partner.len() != b || batch.partner.iter().any(|&p| p >= b) {
        return Err(FigError::Argument(format!(
            "partner list {:?} does not map {b} batch positions onto themselves",
            batch.partner
        )));
    }
    if let Some(f) = frozen {
        if f.len() != b {
            return Err(FigError::Argument(format!(
                "{} selection traces for {b} graphs",
                f.len()
            )));
        }
    }

    let mut prepared = Vec::with_capacity(b);
    for (j, &gi) in batch.indices.iter().enumerate() {
        let graph = dataset.graphs.get(gi).ok_or_else(|| {
            FigError::Argument(format!("batch index {gi} outside dataset of {}", dataset.len()))
        })?;
        let p = prepare_graph(tape, bound, config, graph, frozen.map(|f| &f[j]))?;
        prepared.push((p, &graph.y));
    }

    let ctx = loss_ctx(bound, config);
    let mut sum: Option<TensorId> = None;
    let mut per_graph = Vec::with_capacity(b);
    for (j, (p, y)) in prepared.iter().enumerate() {
        let partner_env = prepared[batch.partner[j]].0.split.h_env;
        let (t, report, _) = total_loss(tape, &ctx, &p.split, partner_env, y, config.alpha, config.beta_hat)?;
        sum = Some(match sum {
            None => t,
            Some(s) => tape.add(s, t)?,
        });
        per_graph.push(report);
    }
    let loss = tape.scale(sum.expect("batch is nonempty"), 1.0 / b as f64);

    let inv = 1.0 / b as f64;
    let mean = |f: fn(&LossReport) -> f64| per_graph.iter().map(f).sum::<f64>() * inv;
    let report = LossReport {
        l_util_own: mean(|r| r.l_util_own),
        l_util_swapped: mean(|r| r.l_util_swapped),
        l_reg_own: mean(|r| r.l_reg_own),
        l_reg_swapped: mean(|r| r.l_reg_swapped),
        total: tape.value(loss),
    };
    Ok(BatchForward {
        loss,
        report,
        per_graph,
        traces: prepared.into_iter().map(|(p, _)| p.trace).collect(),
    })
}

// ─── updates ───

/// Which parameter group one step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdatePhase {
    /// Descend the prediction side and ascend the intervener from the same
    /// gradient evaluation.
    Simultaneous,
    /// Update only the descending side (encoder, augmenter, predictor).
    PredictionSide,
    /// Update only the ascending side (intervener).
    IntervenerSide,
}

fn apply_step(model: &mut Model, tape: &Tape, ids: &[TensorId], lr: f64, phase: UpdatePhase) -> Result<()> {
    let mut cursor = 0;
    let mut failure: Option<FigError> = None;
    model.visit_mut(&mut |name, p| {
        let id = ids[cursor];
        cursor += 1;
        if failure.is_some() {
            return;
        }
        let up = ascends(&name);
        let active = match phase {
            UpdatePhase::Simultaneous => true,
            UpdatePhase::PredictionSide => !up,
            UpdatePhase::IntervenerSide => up,
        };
        if !active {
            return;
        }
        let g = tape.grad(id).expect("backward filled every parameter leaf");
        for (v, &gi) in p.data.iter_mut().zip(g) {
            let delta = lr * gi;
            *v = if up { *v + delta } else { *v - delta };
        }
        if p.data.iter().any(|v| !v.is_finite()) {
            failure = Some(FigError::NonFinite {
                context: format!("parameter {name} after update"),
            });
        }
    });
    debug_assert_eq!(cursor, ids.len(), "visit order drifted from bind order");
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Mean and per-graph losses of the step that was just applied.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub mean: LossReport,
    pub per_graph: Vec<LossReport>,
}

/// One batch step at an explicit learning rate and phase.
pub fn minmax_step_phased(
    model: &mut Model,
    dataset: &Dataset,
    batch: &Batch,
    lr: f64,
    phase: UpdatePhase,
) -> Result<StepReport> {
    let mut tape = Tape::new();
    let (bound, ids) = {
        let mut binder = Binder::new(&mut tape);
        let bound = model.bind(&mut binder);
        (bound, binder.into_ids())
    };
    let fwd = batch_loss(&mut tape, &bound, &model.config, dataset, batch, None)?;
    if !fwd.report.total.is_finite() {
        return Err(FigError::NonFinite {
            context: format!("batch loss over graphs {:?}", batch.indices),
        });
    }
    tape.backward(fwd.loss)?;
    apply_step(model, &tape, &ids, lr, phase)?;
    Ok(StepReport {
        mean: fwd.report,
        per_graph: fwd.per_graph,
    })
}

/// One simultaneous min-max step at the configured learning rate:
/// θ ← θ − lr·∇θ and φ ← φ + lr·∇φ from a single gradient evaluation.
pub fn minmax_step(model: &mut Model, dataset: &Dataset, batch: &Batch) -> Result<StepReport> {
    let lr = model.config.lr;
    minmax_step_phased(model, dataset, batch, lr, UpdatePhase::Simultaneous)
}

/// Moves every parameter a uniform step away from its current value.
///
/// A freshly initialized model is a bad probe point for finite differences:
/// zero biases leave some relu pre-activations exactly on the kink (a node
/// whose units all die emits an exact zero row, which later zero-bias layers
/// keep at exactly zero), where the loss is one-sided and no step size
/// recovers. Gradient checks jitter the model first so the probe lands at a
/// generic, twice-differentiable point; training needs no such nudge.
pub fn jitter_params(model: &mut Model, scale: f64, rng: &mut ChaCha8Rng) {
    model.visit_mut(&mut |_, p| {
        for v in &mut p.data {
            *v += rng.gen_range(-scale..scale);
        }
    });
}

/// Central-difference check of the full batch loss over every parameter at
/// once. The selection is recorded on a live pass and replayed frozen, so
/// the differentiated function is smooth across the probe; returns the
/// largest relative error between analytic and numeric gradients.
pub fn full_loss_grad_check(model: &Model, dataset: &Dataset, batch: &Batch, h: f64) -> Result<f64> {
    let traces = {
        let mut tape = Tape::new();
        let bound = {
            let mut binder = Binder::new(&mut tape);
            model.bind(&mut binder)
        };
        batch_loss(&mut tape, &bound, &model.config, dataset, batch, None)?.traces
    };
    crate::tensor::grad_check(
        |tape, leaf| {
            let bound = {
                let mut binder = Binder::from_flat(tape, leaf)?;
                model.bind(&mut binder)
            };
            batch_loss(tape, &bound, &model.config, dataset, batch, Some(&traces)).map(|f| f.loss)
        },
        &model.flat_data(),
        &[model.param_count()],
        h,
    )
}

/// Central-difference check with a per-coordinate step ladder.
///
/// A single step cannot certify every parameter of a composed loss: the
/// difference quotient carries rounding noise of about `ulp(loss) / 2h`,
/// which drowns coordinates whose gradient is tiny unless `h` is large,
/// while coordinates sitting on steep curvature or near a relu kink need
/// `h` small. Each coordinate therefore keeps its best relative error over
/// `steps`, stopping early once it drops under `tol`; a wrong adjoint is
/// wrong at every step and still surfaces. Returns the largest surviving
/// per-coordinate error. The selection is recorded once and replayed frozen
/// at every probe, exactly as in [`full_loss_grad_check`].
pub fn full_loss_grad_check_refined(
    model: &Model,
    dataset: &Dataset,
    batch: &Batch,
    steps: &[f64],
    tol: f64,
) -> Result<f64> {
    if steps.is_empty() || steps.iter().any(|&h| h <= 0.0) {
        return Err(FigError::Argument(format!(
            "step ladder {steps:?} must be non-empty and positive"
        )));
    }
    let flat = model.flat_data();
    let (analytic, traces) = {
        let mut tape = Tape::new();
        let leaf = tape.leaf(flat.clone(), vec![1, flat.len()])?;
        let bound = {
            let mut binder = Binder::from_flat(&mut tape, leaf)?;
            model.bind(&mut binder)
        };
        let fwd = batch_loss(&mut tape, &bound, &model.config, dataset, batch, None)?;
        tape.backward(fwd.loss)?;
        let grad = tape
            .grad(leaf)
            .ok_or_else(|| FigError::Argument("parameter leaf got no gradient".into()))?
            .to_vec();
        (grad, fwd.traces)
    };
    let loss_at = |probe: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(probe.to_vec(), vec![1, probe.len()])?;
        let bound = {
            let mut binder = Binder::from_flat(&mut tape, leaf)?;
            model.bind(&mut binder)
        };
        let fwd = batch_loss(&mut tape, &bound, &model.config, dataset, batch, Some(&traces))?;
        Ok(tape.value(fwd.loss))
    };
    let mut worst = 0.0f64;
    let mut probe = flat.clone();
    for i in 0..flat.len() {
        let mut best = f64::INFINITY;
        for &h in steps {
            probe[i] = flat[i] + h;
            let fp = loss_at(&probe)?;
            probe[i] = flat[i] - h;
            let fm = loss_at(&probe)?;
            probe[i] = flat[i];
            let numeric = (fp - fm) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / (numeric.abs() + 1e-8);
            best = best.min(rel);
            if best < tol {
                break;
            }
        }
        worst = worst.max(best);
    }
    Ok(worst)
}

// ─── evaluation ───

/// Test-time output of one graph: the raw prediction through the graph's own
/// environment (the same pipeline the own-utility loss trains) plus the
/// attention snapshot.
#[derive(Debug, Clone)]
pub struct GraphPrediction {
    /// Logits (classification) or the raw value (regression).
    pub output: Vec<f64>,
    /// Selected node indices in rank order (node-level variant only).
    pub idx_ra: Option<Vec<usize>>,
    /// Row-major `t × t` attention matrix.
    pub p_values: Vec<f64>,
    pub t: usize,
    pub k: usize,
    /// Rationale-block indicator over the `t` intervened rows.
    pub s: Vec<f64>,
    pub cut_value: f64,
}

impl GraphPrediction {
    /// Argmax class, ties to the lowest index; a single logit reads as class
    /// 1 iff it exceeds zero.
    pub fn class(&self) -> usize {
        class_of(&self.output)
    }
}

/// See [`GraphPrediction::class`].
pub fn class_of(output: &[f64]) -> usize {
    if output.len() == 1 {
        return (output[0] > 0.0) as usize;
    }
    let mut best = 0;
    for j in 1..output.len() {
        if output[j] > output[best] {
            best = j;
        }
    }
    best
}

pub fn predict_graph(model: &Model, graph: &Graph) -> Result<GraphPrediction> {
    let mut tape = Tape::new();
    let bound = {
        let mut binder = Binder::new(&mut tape);
        model.bind(&mut binder)
    };
    let p = prepare_graph(&mut tape, &bound, &model.config, graph, None)?;
    let ctx = loss_ctx(&bound, &model.config);
    let (pred, record) = intervened_prediction(&mut tape, &ctx, p.split.h_ra, p.split.h_env)?;
    Ok(GraphPrediction {
        output: tape.data(pred).to_vec(),
        idx_ra: p.idx_ra,
        p_values: record.p_values,
        t: record.t,
        k: record.k,
        s: record.s,
        cut_value: record.cut_value,
    })
}

fn metric_over(task: Task, dataset: &Dataset, mut output: impl FnMut(&Graph) -> Result<Vec<f64>>) -> Result<f64> {
    if dataset.is_empty() {
        return Err(FigError::Argument("cannot evaluate on an empty dataset".into()));
    }
    match task {
        Task::BinaryClassification => {
            let mut predicted = Vec::with_capacity(dataset.len());
            let mut truth = Vec::with_capacity(dataset.len());
            for g in &dataset.graphs {
                let class = g.y.as_class().ok_or_else(|| {
                    FigError::Argument("classification evaluation needs class labels".into())
                })?;
                predicted.push(class_of(&output(g)?));
                truth.push(class);
            }
            accuracy(&predicted, &truth)
        }
        Task::Regression => {
            let mut preds = Vec::with_capacity(dataset.len());
            let mut targets = Vec::with_capacity(dataset.len());
            for g in &dataset.graphs {
                let target = g.y.as_value().ok_or_else(|| {
                    FigError::Argument("regression evaluation needs value labels".into())
                })?;
                preds.push(output(g)?[0]);
                targets.push(target);
            }
            let (rmse, _) = regression_metrics(&preds, &targets)?;
            Ok(rmse)
        }
    }
}

/// Accuracy (classification) or RMSE (regression) over `dataset`, through the
/// test-time prediction path.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<f64> {
    metric_over(model.config.task, dataset, |g| Ok(predict_graph(model, g)?.output))
}

fn improves(task: Task, new: f64, best: f64) -> bool {
    match task {
        Task::BinaryClassification => new > best,
        Task::Regression => new < best,
    }
}

// ─── epoch loop ───

/// One epoch's training mean, validation metric, and the learning rate the
/// epoch ran at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
    pub val_metric: f64,
}

/// A finished run: the best-validation model and the per-epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub log: Vec<EpochLog>,
    /// Epoch whose validation beat all earlier ones; `None` when no epoch
    /// improved on the initialization.
    pub best_epoch: Option<usize>,
    pub best_val: f64,
}

fn at_epoch(epoch: usize, e: FigError) -> FigError {
    match e {
        FigError::NonFinite { context } => FigError::NonFinite {
            context: format!("epoch {epoch}: {context}"),
        },
        other => other,
    }
}

fn check_sets(train_set: &Dataset, val_set: &Dataset) -> Result<()> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(FigError::Argument(
            "training and validation sets must both be nonempty".into(),
        ));
    }
    if val_set.d_x != train_set.d_x || val_set.d_e != train_set.d_e {
        return Err(FigError::Argument(format!(
            "validation feature dims ({}, {:?}) differ from training ({}, {:?})",
            val_set.d_x, val_set.d_e, train_set.d_x, train_set.d_e
        )));
    }
    Ok(())
}

fn mean_report(per_graph: &[LossReport]) -> LossReport {
    let inv = 1.0 / per_graph.len() as f64;
    let mean = |f: fn(&LossReport) -> f64| per_graph.iter().map(f).sum::<f64>() * inv;
    LossReport {
        l_util_own: mean(|r| r.l_util_own),
        l_util_swapped: mean(|r| r.l_util_swapped),
        l_reg_own: mean(|r| r.l_reg_own),
        l_reg_swapped: mean(|r| r.l_reg_swapped),
        total: mean(|r| r.total),
    }
}

/// Trains a fresh model. Deterministic in `config.seed`: the same config and
/// datasets reproduce the log and the returned parameters bit for bit.
pub fn train(config: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutcome<Model>> {
    config.validate()?;
    check_sets(train_set, val_set)?;
    if config.variant == Variant::FigN {
        if let Some(i) = train_set.graphs.iter().chain(&val_set.graphs).position(|g| g.n < 2) {
            return Err(FigError::Validation {
                graph: i,
                rule: "node-level splitting needs at least 2 nodes".into(),
            });
        }
    }
    let seen_max = train_set
        .graphs
        .iter()
        .chain(&val_set.graphs)
        .map(|g| g.n)
        .max()
        .unwrap_or(0);
    let n_max = train_set.n_max().max(seen_max);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::new(config.clone(), train_set.d_x, train_set.d_e, n_max, &mut rng)?;

    let mut lr = config.lr;
    let mut best = model.clone();
    let mut best_val = evaluate(&model, val_set)?;
    let mut best_epoch = None;
    let mut stall = 0;
    let mut log = Vec::with_capacity(config.max_epochs);

    for epoch in 0..config.max_epochs {
        let batches = make_batches(train_set, config.batch_size, rng.gen())?;
        let mut epoch_reports = Vec::with_capacity(train_set.len());
        for (bi, batch) in batches.iter().enumerate() {
            let phase = match (config.alternating, bi % 2) {
                (false, _) => UpdatePhase::Simultaneous,
                (true, 0) => UpdatePhase::PredictionSide,
                (true, _) => UpdatePhase::IntervenerSide,
            };
            let step = minmax_step_phased(&mut model, train_set, batch, lr, phase)
                .map_err(|e| at_epoch(epoch, e))?;
            epoch_reports.extend(step.per_graph);
        }
        let val_metric = evaluate(&model, val_set).map_err(|e| at_epoch(epoch, e))?;
        if !val_metric.is_finite() {
            return Err(FigError::NonFinite {
                context: format!("epoch {epoch}: validation metric"),
            });
        }
        log.push(EpochLog {
            epoch,
            lr,
            report: mean_report(&epoch_reports),
            val_metric,
        });
        if improves(config.task, val_metric, best_val) {
            best_val = val_metric;
            best = model.clone();
            best_epoch = Some(epoch);
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.patience {
                lr *= 0.25;
                stall = 0;
            }
        }
    }

    Ok(TrainOutcome {
        model: best,
        log,
        best_epoch,
        best_val,
    })
}

// ─── baseline models ───

/// Encoder + readout + predictor with no splitting and no adversary; the
/// reference the rationalized models are compared against.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    pub config: TrainConfig,
    pub encoder: EncoderParams,
    pub predictor: PredictorParams,
}

impl BaselineModel {
    pub fn new(config: TrainConfig, d_x: usize, d_e: Option<usize>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        Ok(BaselineModel {
            encoder: EncoderParams::new(d_x, d_e, config.d, config.encoder_layers, rng),
            predictor: PredictorParams::new(config.d, config.task.output_width(), rng),
            config,
        })
    }
}

impl ParamSet for BaselineModel {
    fn visit(&self, f: &mut dyn FnMut(String, &Param)) {
        self.encoder.visit(f);
        self.predictor.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        self.encoder.visit_mut(f);
        self.predictor.visit_mut(f);
    }
}

/// Raw predictor output of `predict(readout(encode(graph)))`.
pub fn predict_baseline(model: &BaselineModel, graph: &Graph) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (enc, pred) = {
        let mut binder = Binder::new(&mut tape);
        (model.encoder.bind(&mut binder), model.predictor.bind(&mut binder))
    };
    let h = encode(&mut tape, graph, &enc)?;
    let embedding = crate::objective::readout(&mut tape, h, model.config.readout)?;
    let out = crate::objective::predict(&mut tape, embedding, &pred)?;
    Ok(tape.data(out).to_vec())
}

/// Accuracy or RMSE of the baseline over `dataset`.
pub fn evaluate_baseline(model: &BaselineModel, dataset: &Dataset) -> Result<f64> {
    metric_over(model.config.task, dataset, |g| predict_baseline(model, g))
}

fn baseline_step(model: &mut BaselineModel, dataset: &Dataset, batch: &Batch, lr: f64) -> Result<StepReport> {
    let b = batch.indices.len();
    if b == 0 {
        return Err(FigError::Argument("batch is empty".into()));
    }
    let mut tape = Tape::new();
    let (enc, pred, ids) = {
        let mut binder = Binder::new(&mut tape);
        let enc = model.encoder.bind(&mut binder);
        let pred = model.predictor.bind(&mut binder);
        (enc, pred, binder.into_ids())
    };

    let mut sum: Option<TensorId> = None;
    let mut per_graph = Vec::with_capacity(b);
    for &gi in &batch.indices {
        let graph = dataset.graphs.get(gi).ok_or_else(|| {
            FigError::Argument(format!("batch index {gi} outside dataset of {}", dataset.len()))
        })?;
        let h = encode(&mut tape, graph, &enc)?;
        let embedding = crate::objective::readout(&mut tape, h, model.config.readout)?;
        let out = crate::objective::predict(&mut tape, embedding, &pred)?;
        let l = crate::objective::task_loss(&mut tape, out, &graph.y, model.config.task)?;
        let v = tape.value(l);
        per_graph.push(LossReport {
            l_util_own: v,
            l_util_swapped: 0.0,
            l_reg_own: 0.0,
            l_reg_swapped: 0.0,
            total: v,
        });
        sum = Some(match sum {
            None => l,
            Some(s) => tape.add(s, l)?,
        });
    }
    let loss = tape.scale(sum.expect("batch is nonempty"), 1.0 / b as f64);
    if !tape.value(loss).is_finite() {
        return Err(FigError::NonFinite {
            context: format!("batch loss over graphs {:?}", batch.indices),
        });
    }
    tape.backward(loss)?;

    let mut cursor = 0;
    let mut failure: Option<FigError> = None;
    model.visit_mut(&mut |name, p| {
        let id = ids[cursor];
        cursor += 1;
        if failure.is_some() {
            return;
        }
        let g = tape.grad(id).expect("backward filled every parameter leaf");
        for (v, &gi) in p.data.iter_mut().zip(g) {
            *v -= lr * gi;
        }
        if p.data.iter().any(|v| !v.is_finite()) {
            failure = Some(FigError::NonFinite {
                context: format!("parameter {name} after update"),
            });
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let mean = mean_report(&per_graph);
    Ok(StepReport { mean, per_graph })
}

/// Plain gradient-descent training of [`BaselineModel`] on the task loss,
/// with the same schedule, logging, and determinism as [`train`].
pub fn train_baseline(
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<TrainOutcome<BaselineModel>> {
    config.validate()?;
    check_sets(train_set, val_set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = BaselineModel::new(config.clone(), train_set.d_x, train_set.d_e, &mut rng)?;

    let mut lr = config.lr;
    let mut best = model.clone();
    let mut best_val = evaluate_baseline(&model, val_set)?;
    let mut best_epoch = None;
    let mut stall = 0;
    let mut log = Vec::with_capacity(config.max_epochs);

    for epoch in 0..config.max_epochs {
        let batches = make_batches(train_set, config.batch_size, rng.gen())?;
        let mut epoch_reports = Vec::with_capacity(train_set.len());
        for batch in &batches {
            let step = baseline_step(&mut model, train_set, batch, lr).map_err(|e| at_epoch(epoch, e))?;
            epoch_reports.extend(step.per_graph);
        }
        let val_metric = evaluate_baseline(&model, val_set).map_err(|e| at_epoch(epoch, e))?;
        if !val_metric.is_finite() {
            return Err(FigError::NonFinite {
                context: format!("epoch {epoch}: validation metric"),
            });
        }
        log.push(EpochLog {
            epoch,
            lr,
            report: mean_report(&epoch_reports),
            val_metric,
        });
        if improves(config.task, val_metric, best_val) {
            best_val = val_metric;
            best = model.clone();
            best_epoch = Some(epoch);
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.patience {
                lr *= 0.25;
                stall = 0;
            }
        }
    }

    Ok(TrainOutcome {
        model: best,
        log,
        best_epoch,
        best_val,
    })
}

//! Experiment orchestration: unsupervised embedding training, classifier
//! training, student training against a frozen source model, and the
//! old-model/new-model update pairing with flip-rate evaluation.
//!
//! One run is fully determined by (config, dataset, seed): model init draws
//! from the seed, every epoch reshuffles with a seed-derived stream, and all
//! numeric kernels are order-stable. Two invocations produce byte-identical
//! epoch logs and parameter vectors.

use crate::datasets::Dataset;
use crate::linalg::DataMatrix;
use crate::losses::{
    self, cna_topk_loss, cross_entropy, joint_objective, kd_loss, lfa_loss, mvu_inductive_loss,
    CnaConfig, KdConfig, LfaConfig, LossBundle, MvuConfig,
};
use crate::metrics::{self, EvalReport};
use crate::model::{
    self, backward, forward, mlp_init, Activation, GradientSet, MlpModel,
};
use crate::neighbors::{self, topk, Metric, NeighborSet};
use crate::optim::{self, adam_step, lr_at, sgd_step, AdamState, ScheduleKind, ScheduleSpec, SgdState};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::time::Instant;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// XOR'd into the config seed to decouple the shuffle stream from model
/// initialization.
const SHUFFLE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config field {field}: {msg}")]
    ConfigInvalid { field: String, msg: String },
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("feature dims differ: source {source_dim} vs target {target_dim} (this loss needs them equal)")]
    FeatureDimMismatch { source_dim: usize, target_dim: usize },
    #[error("dataset {name} has no labels")]
    MissingLabels { name: String },
    #[error(transparent)]
    Model(#[from] model::Error),
    #[error(transparent)]
    Loss(#[from] losses::Error),
    #[error(transparent)]
    Optim(#[from] optim::Error),
    #[error(transparent)]
    Neighbors(#[from] neighbors::Error),
    #[error(transparent)]
    Metrics(#[from] metrics::Error),
}

/// Which experiment family a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Embed,
    Distill,
    Update,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Embed => "embed",
            TaskKind::Distill => "distill",
            TaskKind::Update => "update",
        }
    }
}

/// The objective trained by a run. `CeOnly` is plain cross-entropy; the
/// others add (or constitute) the named auxiliary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Cna,
    Mvu,
    CeOnly,
    Kd,
    Lfa,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Cna => "cna",
            LossKind::Mvu => "mvu",
            LossKind::CeOnly => "ce_only",
            LossKind::Kd => "kd",
            LossKind::Lfa => "lfa",
        }
    }

    fn needs_pair_batches(self) -> bool {
        matches!(self, LossKind::Cna | LossKind::Mvu | LossKind::Kd | LossKind::Lfa)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd { momentum: f64, weight_decay: f64 },
}

/// Everything a run needs; see the CLI config format for the file-level
/// mirror of these fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub loss_kind: LossKind,
    /// Weight of the auxiliary loss when combined with cross-entropy.
    pub lambda: f64,
    pub cna: CnaConfig,
    pub mvu: MvuConfig,
    pub kd: KdConfig,
    pub lfa: LfaConfig,
    /// Dims of the frozen source model, when the task trains one first.
    pub source_dims: Vec<usize>,
    /// Dims of the model this run trains.
    pub target_dims: Vec<usize>,
    pub activation: Activation,
    pub optimizer: OptimizerKind,
    pub schedule: ScheduleKind,
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Seed-sweep width: run r uses `seed + r`.
    pub runs: usize,
}

impl ExperimentConfig {
    /// A starting point with every hyperparameter at its documented default;
    /// callers override what their task needs.
    pub fn new(task: TaskKind, loss_kind: LossKind) -> Self {
        Self {
            task,
            loss_kind,
            lambda: 1.0,
            cna: CnaConfig::default(),
            mvu: MvuConfig::default(),
            kd: KdConfig::default(),
            lfa: LfaConfig::default(),
            source_dims: vec![],
            target_dims: vec![],
            activation: Activation::Tanh,
            optimizer: OptimizerKind::Adam,
            schedule: ScheduleKind::Constant,
            base_lr: 1e-3,
            batch_size: 256,
            epochs: 100,
            seed: 0,
            runs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| {
            Err(Error::ConfigInvalid {
                field: field.to_string(),
                msg,
            })
        };
        match (self.task, self.loss_kind) {
            (TaskKind::Embed, LossKind::Cna | LossKind::Mvu) => {}
            (TaskKind::Embed, other) => {
                return bad(
                    "loss.kind",
                    format!("embed task supports cna or mvu, got {}", other.as_str()),
                )
            }
            (TaskKind::Distill | TaskKind::Update, LossKind::Mvu) => {
                return bad("loss.kind", "mvu is an embedding objective".into())
            }
            _ => {}
        }
        if self.target_dims.len() < 2 || self.target_dims.iter().any(|&d| d == 0) {
            return bad(
                "model.target_dims",
                format!("need at least two positive dims, got {:?}", self.target_dims),
            );
        }
        if self.task != TaskKind::Embed
            && (self.source_dims.len() < 2 || self.source_dims.iter().any(|&d| d == 0))
        {
            return bad(
                "model.source_dims",
                format!("need at least two positive dims, got {:?}", self.source_dims),
            );
        }
        if self.lambda < 0.0 {
            return bad("loss.lambda", format!("must be >= 0, got {}", self.lambda));
        }
        if self.batch_size == 0 {
            return bad("optimizer.batch_size", "must be >= 1".into());
        }
        if self.loss_kind.needs_pair_batches() && self.batch_size < 2 {
            return bad(
                "optimizer.batch_size",
                format!(
                    "{} needs batches of at least 2, got {}",
                    self.loss_kind.as_str(),
                    self.batch_size
                ),
            );
        }
        if self.cna.tau <= 0.0 {
            return bad("loss.cna.tau", format!("must be > 0, got {}", self.cna.tau));
        }
        if self.cna.k == 0 {
            return bad("loss.cna.k", "must be >= 1".into());
        }
        if self.kd.tau <= 0.0 {
            return bad("loss.kd.tau", format!("must be > 0, got {}", self.kd.tau));
        }
        if self.lfa.xi <= 0.0 {
            return bad("loss.lfa.xi", format!("must be > 0, got {}", self.lfa.xi));
        }
        if self.mvu.gamma < 0.0 {
            return bad(
                "loss.mvu.gamma",
                format!("must be >= 0, got {}", self.mvu.gamma),
            );
        }
        if self.mvu.k == 0 {
            return bad("loss.mvu.k", "must be >= 1".into());
        }
        if self.epochs > 0 && self.base_lr <= 0.0 {
            return bad("schedule.base_lr", format!("must be > 0, got {}", self.base_lr));
        }
        if let OptimizerKind::Sgd { momentum, weight_decay } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return bad("optimizer.momentum", format!("must be in [0, 1), got {momentum}"));
            }
            if weight_decay < 0.0 {
                return bad(
                    "optimizer.weight_decay",
                    format!("must be >= 0, got {weight_decay}"),
                );
            }
        }
        if self.runs == 0 {
            return bad("task.runs", "must be >= 1".into());
        }
        Ok(())
    }

    fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.schedule.clone(),
            base_lr: self.base_lr,
            total_epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }

    /// Hyperparameters of the active loss, for report rows: (lambda, tau,
    /// k, gamma, xi, tau_kd). Inactive knobs stay `None`.
    pub fn report_hyperparams(
        &self,
    ) -> (
        Option<f64>,
        Option<f64>,
        Option<usize>,
        Option<f64>,
        Option<f64>,
        Option<f64>,
    ) {
        let lambda = if self.task == TaskKind::Embed || self.loss_kind == LossKind::CeOnly {
            None
        } else {
            Some(self.lambda)
        };
        match self.loss_kind {
            LossKind::Cna => (lambda, Some(self.cna.tau), Some(self.cna.k), None, None, None),
            LossKind::Mvu => (lambda, None, Some(self.mvu.k), Some(self.mvu.gamma), None, None),
            LossKind::CeOnly => (lambda, None, None, None, None, None),
            LossKind::Kd => (lambda, None, None, None, None, Some(self.kd.tau)),
            LossKind::Lfa => (lambda, None, None, None, Some(self.lfa.xi), None),
        }
    }
}

/// One epoch's logged quantities; loss components are sample-weighted means
/// over the epoch's batches.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_aux: f64,
    pub lr: f64,
}

/// Everything one training run produced besides the model itself.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub epochs: Vec<EpochLog>,
    /// Filled by the pipelines that evaluate (update pairs, CLI tasks).
    pub report: Option<EvalReport>,
    /// Feature rows that were exactly zero under normalization.
    pub zero_norm_rows: usize,
    /// Neighbor-mining selections that hit a ranking tie.
    pub tie_events: usize,
    /// Wall-clock seconds; informational only and excluded from all
    /// serialized output so artifacts stay byte-reproducible.
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// The deterministic log surface: one `epoch,loss_total,loss_ce,
    /// loss_aux,lr` line per epoch after a header.
    pub fn log_text(&self) -> String {
        let mut out = String::from("epoch,loss_total,loss_ce,loss_aux,lr\n");
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{}",
                e.epoch, e.loss_total, e.loss_ce, e.loss_aux, e.lr
            )
            .expect("string write");
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss_total)
    }
}

/// What one batch evaluation hands back to the training loop.
struct StepEval {
    grads: GradientSet,
    loss_total: f64,
    loss_ce: f64,
    loss_aux: f64,
    zero_norm_rows: usize,
    tie_events: usize,
}

fn shuffled_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

enum OptimState {
    Adam(AdamState),
    Sgd { state: SgdState, momentum: f64, weight_decay: f64 },
}

/// The shared epoch/batch/step loop. `eval_batch` computes the loss and
/// parameter gradients for one batch; everything else — shuffling, batch
/// slicing, tail dropping, optimizer stepping, logging — is identical across
/// tasks, which is what makes the λ=0 reduction exact.
fn train_loop(
    model: &mut MlpModel,
    data: &DataMatrix,
    labels: Option<&[usize]>,
    cfg: &ExperimentConfig,
    mut eval_batch: impl FnMut(&MlpModel, &DataMatrix, Option<&[usize]>) -> Result<StepEval>,
) -> Result<RunRecord> {
    let started = Instant::now();
    let schedule = cfg.schedule_spec();
    let mut params = model.flatten_params();
    let mut opt = match cfg.optimizer {
        OptimizerKind::Adam => OptimState::Adam(AdamState::new(params.len())),
        OptimizerKind::Sgd { momentum, weight_decay } => OptimState::Sgd {
            state: SgdState::new(params.len()),
            momentum,
            weight_decay,
        },
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut record = RunRecord {
        epochs: Vec::with_capacity(cfg.epochs),
        report: None,
        zero_norm_rows: 0,
        tie_events: 0,
        wall_clock_secs: 0.0,
    };
    let n = data.rows();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(&schedule, epoch)?;
        let order = shuffled_indices(&mut shuffle_rng, n);
        let mut sum_total = 0.0;
        let mut sum_ce = 0.0;
        let mut sum_aux = 0.0;
        let mut samples = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let rows = data.select_rows(chunk);
            let batch_labels: Option<Vec<usize>> =
                labels.map(|l| chunk.iter().map(|&i| l[i]).collect());
            let eval = eval_batch(model, &rows, batch_labels.as_deref())?;
            if !eval.loss_total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let grads = eval.grads.flatten();
            let (next_params, next_opt) = match opt {
                OptimState::Adam(state) => {
                    let (p, s) = adam_step(&params, &grads, &state, lr)?;
                    (p, OptimState::Adam(s))
                }
                OptimState::Sgd { state, momentum, weight_decay } => {
                    let (p, s) = sgd_step(&params, &grads, &state, lr, momentum, weight_decay)?;
                    (p, OptimState::Sgd { state: s, momentum, weight_decay })
                }
            };
            params = next_params;
            opt = next_opt;
            model.set_flat_params(&params)?;
            let w = chunk.len() as f64;
            sum_total += eval.loss_total * w;
            sum_ce += eval.loss_ce * w;
            sum_aux += eval.loss_aux * w;
            samples += chunk.len();
            record.zero_norm_rows += eval.zero_norm_rows;
            record.tie_events += eval.tie_events;
        }
        let denom = samples.max(1) as f64;
        record.epochs.push(EpochLog {
            epoch,
            loss_total: sum_total / denom,
            loss_ce: sum_ce / denom,
            loss_aux: sum_aux / denom,
            lr,
        });
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(record)
}

fn embedding_step(
    cfg: &ExperimentConfig,
    model: &MlpModel,
    batch: &DataMatrix,
) -> Result<StepEval> {
    let (bundle, trace, ties) = match cfg.loss_kind {
        LossKind::Cna => {
            let trace = forward(model, batch, true)?;
            let nbrs = topk(batch, cfg.cna.k, Metric::Cosine)?;
            let bundle = cna_topk_loss(trace.consumed_features(), &nbrs, cfg.cna.tau)?;
            let ties = nbrs.tie_count();
            (bundle, trace, ties)
        }
        LossKind::Mvu => {
            let trace = forward(model, batch, false)?;
            let nbrs = topk(batch, cfg.mvu.k, Metric::Euclidean)?;
            let bundle = mvu_inductive_loss(trace.features(), batch, &nbrs, cfg.mvu.gamma)?;
            let ties = nbrs.tie_count();
            (bundle, trace, ties)
        }
        other => {
            return Err(Error::ConfigInvalid {
                field: "loss.kind".into(),
                msg: format!("embed task cannot train {}", other.as_str()),
            })
        }
    };
    let grads = backward(model, &trace, bundle.grad_features.as_ref(), None)?;
    Ok(StepEval {
        grads,
        loss_total: bundle.value,
        loss_ce: 0.0,
        loss_aux: bundle.value,
        zero_norm_rows: trace.zero_rows().len(),
        tie_events: ties,
    })
}

/// Train an unsupervised projector: raw inputs are the frozen source
/// features, and the model learns coordinates whose in-batch neighborhood
/// structure matches them — contrastively (cosine-mined neighbors) or by
/// distance preservation (euclidean-mined neighbors).
pub fn train_embedding(cfg: &ExperimentConfig, data: &Dataset) -> Result<(MlpModel, RunRecord)> {
    cfg.validate()?;
    let mut model = mlp_init(&cfg.target_dims, cfg.activation, None, cfg.seed)?;
    let record = train_loop(&mut model, &data.data, None, cfg, |m, batch, _| {
        embedding_step(cfg, m, batch)
    })?;
    Ok((model, record))
}

fn classifier_step(
    model: &MlpModel,
    batch: &DataMatrix,
    labels: &[usize],
) -> Result<StepEval> {
    let trace = forward(model, batch, false)?;
    let logits = trace.logits().ok_or(Error::Model(model::Error::MissingHead))?;
    let ce = cross_entropy(logits, labels)?;
    let grads = backward(model, &trace, None, ce.grad_logits.as_ref())?;
    Ok(StepEval {
        grads,
        loss_total: ce.value,
        loss_ce: ce.value,
        loss_aux: 0.0,
        zero_norm_rows: 0,
        tie_events: 0,
    })
}

fn require_labels<'a>(data: &'a Dataset) -> Result<(&'a [usize], usize)> {
    let labels = data.labels().ok_or_else(|| Error::MissingLabels {
        name: data.name.clone(),
    })?;
    let classes = data.num_classes().unwrap_or(0).max(2);
    Ok((labels, classes))
}

/// Plain cross-entropy training of a model with a classifier head. This is
/// how teachers and old reference models come to exist.
pub fn train_classifier(cfg: &ExperimentConfig, data: &Dataset) -> Result<(MlpModel, RunRecord)> {
    cfg.validate()?;
    let (labels, classes) = require_labels(data)?;
    let mut model = mlp_init(&cfg.target_dims, cfg.activation, Some(classes), cfg.seed)?;
    let record = train_loop(&mut model, &data.data, Some(labels), cfg, |m, batch, lb| {
        classifier_step(m, batch, lb.expect("labels threaded through"))
    })?;
    Ok((model, record))
}

fn student_step(
    cfg: &ExperimentConfig,
    source: &MlpModel,
    model: &MlpModel,
    batch: &DataMatrix,
    labels: &[usize],
) -> Result<StepEval> {
    let use_aux = cfg.lambda > 0.0 && cfg.loss_kind != LossKind::CeOnly;
    if !use_aux {
        return classifier_step(model, batch, labels);
    }
    let normalize_student = cfg.loss_kind == LossKind::Cna;
    let trace = forward(model, batch, normalize_student)?;
    let logits = trace.logits().ok_or(Error::Model(model::Error::MissingHead))?;
    let ce = cross_entropy(logits, labels)?;

    let source_trace = forward(source, batch, false)?;
    let (aux, ties): (LossBundle, usize) = match cfg.loss_kind {
        LossKind::Cna => {
            let nbrs: NeighborSet = topk(source_trace.features(), cfg.cna.k, Metric::Cosine)?;
            let bundle = cna_topk_loss(trace.consumed_features(), &nbrs, cfg.cna.tau)?;
            (bundle, nbrs.tie_count())
        }
        LossKind::Kd => {
            let source_logits = source_trace
                .logits()
                .ok_or(Error::Model(model::Error::MissingHead))?;
            (kd_loss(logits, source_logits, cfg.kd.tau)?, 0)
        }
        LossKind::Lfa => {
            let s = source_trace.features();
            let t = trace.features();
            if s.cols() != t.cols() {
                return Err(Error::FeatureDimMismatch {
                    source_dim: s.cols(),
                    target_dim: t.cols(),
                });
            }
            (lfa_loss(t, s, cfg.lfa.xi)?, 0)
        }
        _ => unreachable!("filtered above"),
    };
    let joint = joint_objective(&ce, &aux, cfg.lambda)?;
    let grads = backward(
        model,
        &trace,
        joint.grad_features.as_ref(),
        joint.grad_logits.as_ref(),
    )?;
    Ok(StepEval {
        grads,
        loss_total: joint.value,
        loss_ce: ce.value,
        loss_aux: aux.value,
        zero_norm_rows: trace.zero_rows().len(),
        tie_events: ties,
    })
}

/// Train a student against a frozen source model: cross-entropy plus
/// `λ ×` the configured auxiliary. With `λ = 0` (or `ce_only`) the source
/// model is never consulted and the run is bit-identical to
/// [`train_classifier`].
pub fn train_student(
    cfg: &ExperimentConfig,
    data: &Dataset,
    source: &MlpModel,
) -> Result<(MlpModel, RunRecord)> {
    cfg.validate()?;
    let (labels, classes) = require_labels(data)?;
    let mut model = mlp_init(&cfg.target_dims, cfg.activation, Some(classes), cfg.seed)?;
    let record = train_loop(&mut model, &data.data, Some(labels), cfg, |m, batch, lb| {
        student_step(cfg, source, m, batch, lb.expect("labels threaded through"))
    })?;
    Ok((model, record))
}

/// Argmax predictions of a model with a head over a whole dataset.
pub fn model_predictions(model: &MlpModel, data: &DataMatrix) -> Result<Vec<usize>> {
    let trace = forward(model, data, false)?;
    let logits = trace.logits().ok_or(Error::Model(model::Error::MissingHead))?;
    Ok(metrics::predictions(logits))
}

/// Train the replacement model for `old_model` on `train`, then measure the
/// update on `test`: new-model accuracy, and the negative flip rate against
/// the old model's predictions.
pub fn run_update_pair(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    old_model: &MlpModel,
) -> Result<(MlpModel, EvalReport, RunRecord)> {
    let (new_model, mut record) = train_student(cfg, train, old_model)?;
    let (test_labels, _) = require_labels(test)?;
    let old_preds = model_predictions(old_model, &test.data)?;
    let new_preds = model_predictions(&new_model, &test.data)?;
    let nfr = metrics::nfr(&new_preds, &old_preds, test_labels)?;
    let hits = new_preds
        .iter()
        .zip(test_labels)
        .filter(|(p, l)| p == l)
        .count();
    let top1 = hits as f64 / test_labels.len() as f64;
    let (lambda, tau, k, gamma, xi, tau_kd) = cfg.report_hyperparams();
    let report = EvalReport {
        method: cfg.loss_kind.as_str().to_string(),
        task: cfg.task.as_str().to_string(),
        dataset: train.name.clone(),
        seed: cfg.seed,
        local_error: None,
        knn_acc: None,
        top1: Some(top1),
        nfr: Some(nfr),
        lambda,
        tau,
        k,
        gamma,
        xi,
        tau_kd,
        batch_size: cfg.batch_size,
        base_lr: cfg.base_lr,
        epochs: cfg.epochs,
    };
    record.report = Some(report.clone());
    Ok((new_model, report, record))
}

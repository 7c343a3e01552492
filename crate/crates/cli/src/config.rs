//! The experiment file format: `key = value` lines under `[section]`
//! headers, `#` for comments. Sections are `task`, `dataset`, `model`,
//! `optimizer`, `schedule`, `loss`, and `output`. Unknown sections and keys
//! are errors, so a stale or misspelled setting can never silently stop
//! applying; a parsed config is a complete record of the run.

use cna_core::losses::{CnaConfig, KdConfig, LfaConfig, MvuConfig};
use cna_core::model::Activation;
use cna_core::optim::ScheduleKind;
use cna_core::trainer::{self, ExperimentConfig, LossKind, OptimizerKind, TaskKind};
use std::collections::BTreeMap;
use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

const SECTION_NAMES: [&str; 7] = [
    "task",
    "dataset",
    "model",
    "optimizer",
    "schedule",
    "loss",
    "output",
];

#[derive(Debug, Error)]
pub enum Error {
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("config line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("config line {line}: unknown key '{key}' in [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("config line {line}: duplicate key '{key}' in [{section}]")]
    DuplicateKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("config field {field}: {msg}")]
    Invalid { field: String, msg: String },
}

fn invalid(field: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Invalid {
        field: field.into(),
        msg: msg.into(),
    }
}

/// Surface a core config error under its field path; other core errors keep
/// their own message.
pub fn from_trainer(err: trainer::Error) -> Error {
    match err {
        trainer::Error::ConfigInvalid { field, msg } => Error::Invalid { field, msg },
        other => Error::Invalid {
            field: "config".into(),
            msg: other.to_string(),
        },
    }
}

/// One `[section]`'s raw entries, consumed key by key; whatever is left at
/// the end is unknown.
struct Section {
    name: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl Section {
    fn empty(name: &str) -> Self {
        Self {
            name: name.to_string(),
            entries: BTreeMap::new(),
        }
    }

    fn field(&self, key: &str) -> String {
        format!("{}.{}", self.name, key)
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    fn take_string(&mut self, key: &str) -> Option<String> {
        self.take_raw(key)
    }

    fn take_path(&mut self, key: &str) -> Option<PathBuf> {
        self.take_raw(key).map(PathBuf::from)
    }

    fn take_parsed<T: std::str::FromStr>(&mut self, key: &str, what: &str) -> Result<Option<T>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                invalid(self.field(key), format!("expected {what}, got '{v}'"))
            }),
        }
    }

    fn take_usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.take_parsed(key, "a non-negative integer")
    }

    fn take_u64(&mut self, key: &str) -> Result<Option<u64>> {
        self.take_parsed(key, "a non-negative integer")
    }

    fn take_f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.take_parsed(key, "a number")
    }

    fn take_dims(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some(v) => {
                let dims: Vec<usize> = v
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| {
                        invalid(
                            self.field(key),
                            format!("expected comma-separated integers, got '{v}'"),
                        )
                    })?;
                if dims.is_empty() {
                    return Err(invalid(self.field(key), "needs at least one entry"));
                }
                Ok(Some(dims))
            }
        }
    }

    fn require(&mut self, key: &str) -> Result<String> {
        self.take_raw(key)
            .ok_or_else(|| invalid(self.field(key), "required"))
    }

    /// Every key must have been taken by now; the first leftover (lowest
    /// line) is reported as unknown.
    fn finish(self) -> Result<()> {
        if let Some((key, (line, _))) = self.entries.into_iter().min_by_key(|(_, (line, _))| *line)
        {
            return Err(Error::UnknownKey {
                line,
                section: self.name,
                key,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CliTask {
    Embed,
    Distill,
    Update,
    Transductive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransductiveMethod {
    Lle,
    Isomap,
}

impl TransductiveMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            TransductiveMethod::Lle => "lle",
            TransductiveMethod::Isomap => "isomap",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskSection {
    pub kind: CliTask,
    pub runs: usize,
    pub seed: u64,
    /// Neighbor count of the evaluation k-NN classifier.
    pub eval_knn: usize,
    pub method: Option<TransductiveMethod>,
    /// Transductive neighbor count.
    pub k: usize,
    /// Transductive embedding dimension.
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetSection {
    pub name: String,
    pub n: usize,
    pub noise: f64,
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub train_count: Option<usize>,
    pub test_count: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct ModelSection {
    pub target_dims: Option<Vec<usize>>,
    pub source_dims: Option<Vec<usize>>,
    pub activation: Activation,
    /// Extra hidden layers of feature width stacked before the feature
    /// output (0 leaves the architecture as written).
    pub mlp_heads: usize,
    pub source_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone)]
pub struct LossSection {
    pub kind: Option<LossKind>,
    pub lambda: f64,
    pub cna: CnaConfig,
    pub mvu: MvuConfig,
    pub kd: KdConfig,
    pub lfa: LfaConfig,
}

#[derive(Debug, Clone)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct CliConfig {
    pub task: TaskSection,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub schedule: ScheduleSection,
    pub loss: LossSection,
    pub output: OutputSection,
}

fn split_sections(text: &str) -> Result<BTreeMap<String, Section>> {
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if let Some(body) = t.strip_prefix('[') {
            let name = body
                .strip_suffix(']')
                .ok_or_else(|| Error::Syntax {
                    line,
                    msg: "unterminated section header".into(),
                })?
                .trim()
                .to_string();
            if !SECTION_NAMES.contains(&name.as_str()) {
                return Err(Error::UnknownSection { line, name });
            }
            if sections.contains_key(&name) {
                return Err(Error::Syntax {
                    line,
                    msg: format!("section [{name}] appears twice"),
                });
            }
            sections.insert(name.clone(), Section::empty(&name));
            current = Some(name);
            continue;
        }
        let (key, value) = t.split_once('=').ok_or_else(|| Error::Syntax {
            line,
            msg: format!("expected 'key = value', got '{t}'"),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let section_name = current.clone().ok_or_else(|| Error::Syntax {
            line,
            msg: "key appears before any [section] header".into(),
        })?;
        let section = sections.get_mut(&section_name).expect("current section exists");
        if section.entries.insert(key.clone(), (line, value)).is_some() {
            return Err(Error::DuplicateKey {
                line,
                section: section_name,
                key,
            });
        }
    }
    Ok(sections)
}

fn parse_task(mut s: Section) -> Result<TaskSection> {
    let kind_raw = s.require("kind")?;
    let kind = match kind_raw.as_str() {
        "embed" => CliTask::Embed,
        "distill" => CliTask::Distill,
        "update" => CliTask::Update,
        "transductive" => CliTask::Transductive,
        other => {
            return Err(invalid(
                "task.kind",
                format!("expected embed, distill, update, or transductive, got '{other}'"),
            ))
        }
    };
    let runs = s.take_usize("runs")?.unwrap_or(1);
    let seed = s.take_u64("seed")?.unwrap_or(0);
    let eval_knn = s.take_usize("eval_knn")?.unwrap_or(5);
    if eval_knn == 0 {
        return Err(invalid("task.eval_knn", "must be >= 1"));
    }
    let (method, k, dim) = if kind == CliTask::Transductive {
        let method = match s.require("method")?.as_str() {
            "lle" => TransductiveMethod::Lle,
            "isomap" => TransductiveMethod::Isomap,
            other => {
                return Err(invalid(
                    "task.method",
                    format!("expected lle or isomap, got '{other}'"),
                ))
            }
        };
        let k = s.take_usize("k")?.unwrap_or(10);
        let dim = s.take_usize("dim")?.unwrap_or(2);
        if k == 0 {
            return Err(invalid("task.k", "must be >= 1"));
        }
        if dim == 0 {
            return Err(invalid("task.dim", "must be >= 1"));
        }
        (Some(method), k, dim)
    } else {
        (None, 0, 0)
    };
    s.finish()?;
    Ok(TaskSection {
        kind,
        runs,
        seed,
        eval_knn,
        method,
        k,
        dim,
    })
}

/// Dataset names accept `-` as an alias for `_`.
pub fn normalize_dataset_name(name: &str) -> String {
    name.to_ascii_lowercase().replace('-', "_")
}

fn parse_dataset(mut s: Section) -> Result<DatasetSection> {
    let name = normalize_dataset_name(&s.require("name")?);
    let n = s.take_usize("n")?;
    let noise = s.take_f64("noise")?;
    let seed = s.take_u64("seed")?;
    let classes = s.take_usize("classes")?;
    let dim = s.take_usize("dim")?;
    let spread = s.take_f64("spread")?;
    let path = s.take_path("path");
    let test_path = s.take_path("test_path");
    let images = s.take_path("images");
    let labels = s.take_path("labels");
    let train_count = s.take_usize("train_count")?;
    let test_count = s.take_usize("test_count")?;
    s.finish()?;

    let reject = |set: bool, key: &str| -> Result<()> {
        if set {
            Err(invalid(
                format!("dataset.{key}"),
                format!("not a setting of dataset '{name}'"),
            ))
        } else {
            Ok(())
        }
    };
    match name.as_str() {
        "s_curve" | "swiss_roll" => {
            reject(classes.is_some(), "classes")?;
            reject(dim.is_some(), "dim")?;
            reject(spread.is_some(), "spread")?;
            reject(path.is_some(), "path")?;
            reject(test_path.is_some(), "test_path")?;
            reject(images.is_some(), "images")?;
            reject(labels.is_some(), "labels")?;
        }
        "sphere" => {
            reject(noise.is_some(), "noise")?;
            reject(classes.is_some(), "classes")?;
            reject(dim.is_some(), "dim")?;
            reject(spread.is_some(), "spread")?;
            reject(path.is_some(), "path")?;
            reject(test_path.is_some(), "test_path")?;
            reject(images.is_some(), "images")?;
            reject(labels.is_some(), "labels")?;
        }
        "blobs" => {
            reject(noise.is_some(), "noise")?;
            reject(path.is_some(), "path")?;
            reject(test_path.is_some(), "test_path")?;
            reject(images.is_some(), "images")?;
            reject(labels.is_some(), "labels")?;
        }
        "csv" => {
            reject(n.is_some(), "n")?;
            reject(noise.is_some(), "noise")?;
            reject(classes.is_some(), "classes")?;
            reject(dim.is_some(), "dim")?;
            reject(spread.is_some(), "spread")?;
            reject(images.is_some(), "images")?;
            reject(labels.is_some(), "labels")?;
            if path.is_none() {
                return Err(invalid("dataset.path", "required for dataset 'csv'"));
            }
            if test_path.is_some() && (train_count.is_some() || test_count.is_some()) {
                return Err(invalid(
                    "dataset.test_path",
                    "give either a test file or split counts, not both",
                ));
            }
        }
        "mnist" => {
            reject(n.is_some(), "n")?;
            reject(noise.is_some(), "noise")?;
            reject(classes.is_some(), "classes")?;
            reject(dim.is_some(), "dim")?;
            reject(spread.is_some(), "spread")?;
            reject(path.is_some(), "path")?;
            reject(test_path.is_some(), "test_path")?;
            if images.is_none() {
                return Err(invalid("dataset.images", "required for dataset 'mnist'"));
            }
            if labels.is_none() {
                return Err(invalid("dataset.labels", "required for dataset 'mnist'"));
            }
        }
        other => {
            return Err(invalid(
                "dataset.name",
                format!(
                    "unknown dataset '{other}' (expected s_curve, swiss_roll, sphere, blobs, csv, or mnist)"
                ),
            ))
        }
    }
    if train_count.is_some() != test_count.is_some() {
        return Err(invalid(
            "dataset.train_count",
            "train_count and test_count must be set together",
        ));
    }
    Ok(DatasetSection {
        name,
        n: n.unwrap_or(2000),
        noise: noise.unwrap_or(0.0),
        seed: seed.unwrap_or(0),
        classes: classes.unwrap_or(10),
        dim: dim.unwrap_or(20),
        spread: spread.unwrap_or(1.0),
        path,
        test_path,
        images,
        labels,
        train_count,
        test_count,
    })
}

fn parse_model(mut s: Section) -> Result<ModelSection> {
    let target_dims = s.take_dims("target_dims")?;
    let source_dims = s.take_dims("source_dims")?;
    let activation = match s.take_string("activation") {
        None => Activation::Tanh,
        Some(v) => match v.as_str() {
            "tanh" => Activation::Tanh,
            "relu" => Activation::ReLU,
            other => {
                return Err(invalid(
                    "model.activation",
                    format!("expected tanh or relu, got '{other}'"),
                ))
            }
        },
    };
    let mlp_heads = s.take_usize("mlp_heads")?.unwrap_or(0);
    let source_checkpoint = s.take_path("source_checkpoint");
    s.finish()?;
    if source_checkpoint.is_some() && source_dims.is_some() {
        return Err(invalid(
            "model.source_dims",
            "remove when source_checkpoint is set; dims come from the checkpoint",
        ));
    }
    Ok(ModelSection {
        target_dims,
        source_dims,
        activation,
        mlp_heads,
        source_checkpoint,
    })
}

fn parse_optimizer(mut s: Section) -> Result<OptimizerSection> {
    let kind_raw = s.take_string("kind").unwrap_or_else(|| "adam".into());
    let momentum = s.take_f64("momentum")?;
    let weight_decay = s.take_f64("weight_decay")?;
    let batch_size = s.take_usize("batch_size")?.unwrap_or(256);
    s.finish()?;
    let kind = match kind_raw.as_str() {
        "adam" => {
            if momentum.is_some() {
                return Err(invalid(
                    "optimizer.momentum",
                    "only a setting of the sgd optimizer",
                ));
            }
            if weight_decay.is_some() {
                return Err(invalid(
                    "optimizer.weight_decay",
                    "only a setting of the sgd optimizer",
                ));
            }
            OptimizerKind::Adam
        }
        "sgd" => OptimizerKind::Sgd {
            momentum: momentum.unwrap_or(0.9),
            weight_decay: weight_decay.unwrap_or(0.0),
        },
        other => {
            return Err(invalid(
                "optimizer.kind",
                format!("expected adam or sgd, got '{other}'"),
            ))
        }
    };
    Ok(OptimizerSection { kind, batch_size })
}

fn parse_schedule(mut s: Section) -> Result<ScheduleSection> {
    let kind_raw = s.take_string("kind").unwrap_or_else(|| "constant".into());
    let gamma = s.take_f64("gamma")?;
    let milestones = s.take_dims("milestones")?;
    let base_lr = s.take_f64("base_lr")?.unwrap_or(1e-3);
    let epochs = s.take_usize("epochs")?.unwrap_or(100);
    s.finish()?;
    let kind = match kind_raw.as_str() {
        "constant" | "cosine" => {
            if gamma.is_some() {
                return Err(invalid("schedule.gamma", "only a setting of the step schedule"));
            }
            if milestones.is_some() {
                return Err(invalid(
                    "schedule.milestones",
                    "only a setting of the step schedule",
                ));
            }
            if kind_raw == "constant" {
                ScheduleKind::Constant
            } else {
                ScheduleKind::Cosine
            }
        }
        "step" => ScheduleKind::Step {
            gamma: gamma.unwrap_or(0.1),
            milestones: milestones
                .ok_or_else(|| invalid("schedule.milestones", "required for the step schedule"))?,
        },
        other => {
            return Err(invalid(
                "schedule.kind",
                format!("expected constant, cosine, or step, got '{other}'"),
            ))
        }
    };
    Ok(ScheduleSection {
        kind,
        base_lr,
        epochs,
    })
}

fn parse_loss(mut s: Section) -> Result<LossSection> {
    let kind = match s.take_string("kind") {
        None => None,
        Some(v) => Some(match v.as_str() {
            "cna" => LossKind::Cna,
            "mvu" => LossKind::Mvu,
            "ce_only" => LossKind::CeOnly,
            "kd" => LossKind::Kd,
            "lfa" => LossKind::Lfa,
            other => {
                return Err(invalid(
                    "loss.kind",
                    format!("expected cna, mvu, ce_only, kd, or lfa, got '{other}'"),
                ))
            }
        }),
    };
    let mut out = LossSection {
        kind,
        lambda: 1.0,
        cna: CnaConfig::default(),
        mvu: MvuConfig::default(),
        kd: KdConfig::default(),
        lfa: LfaConfig::default(),
    };
    match kind {
        Some(LossKind::Cna) => {
            if let Some(v) = s.take_f64("cna.tau")? {
                out.cna.tau = v;
            }
            if let Some(v) = s.take_usize("cna.k")? {
                out.cna.k = v;
            }
            if let Some(v) = s.take_f64("cna.lambda")? {
                out.lambda = v;
            }
        }
        Some(LossKind::Mvu) => {
            if let Some(v) = s.take_f64("mvu.gamma")? {
                out.mvu.gamma = v;
            }
            if let Some(v) = s.take_usize("mvu.k")? {
                out.mvu.k = v;
            }
        }
        Some(LossKind::Kd) => {
            if let Some(v) = s.take_f64("kd.tau")? {
                out.kd.tau = v;
            }
            if let Some(v) = s.take_f64("kd.lambda")? {
                out.lambda = v;
            }
        }
        Some(LossKind::Lfa) => {
            if let Some(v) = s.take_f64("lfa.xi")? {
                out.lfa.xi = v;
            }
            if let Some(v) = s.take_f64("lfa.lambda")? {
                out.lambda = v;
            }
        }
        Some(LossKind::CeOnly) | None => {}
    }
    s.finish()?;
    Ok(out)
}

fn parse_output(mut s: Section) -> Result<OutputSection> {
    let dir = s.take_path("dir");
    s.finish()?;
    Ok(OutputSection { dir })
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<CliConfig> {
        let mut sections = split_sections(text)?;
        let mut grab =
            |name: &str| sections.remove(name).unwrap_or_else(|| Section::empty(name));
        let task = parse_task(grab("task"))?;
        let dataset = parse_dataset(grab("dataset"))?;
        let model = parse_model(grab("model"))?;
        let optimizer = parse_optimizer(grab("optimizer"))?;
        let schedule = parse_schedule(grab("schedule"))?;
        let loss = parse_loss(grab("loss"))?;
        let output = parse_output(grab("output"))?;
        Ok(CliConfig {
            task,
            dataset,
            model,
            optimizer,
            schedule,
            loss,
            output,
        })
    }

    /// The field path λ is reported under, e.g. `loss.cna.lambda`.
    fn lambda_field(&self, kind: LossKind) -> String {
        format!("loss.{}.lambda", kind.as_str())
    }

    /// Assemble the core experiment config for a trainer task. Source-model
    /// dims stay empty when a checkpoint supplies the source; the caller
    /// fills them in from the loaded model before validating.
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let task = match self.task.kind {
            CliTask::Embed => TaskKind::Embed,
            CliTask::Distill => TaskKind::Distill,
            CliTask::Update => TaskKind::Update,
            CliTask::Transductive => {
                return Err(invalid(
                    "task.kind",
                    "transductive runs do not use a trainer config",
                ))
            }
        };
        let loss_kind = self
            .loss
            .kind
            .ok_or_else(|| invalid("loss.kind", "required"))?;
        let mut target_dims = self
            .model
            .target_dims
            .clone()
            .ok_or_else(|| invalid("model.target_dims", "required"))?;
        if self.model.mlp_heads > 0 {
            let feature_width = *target_dims.last().expect("dims are non-empty");
            target_dims.extend(std::iter::repeat(feature_width).take(self.model.mlp_heads));
        }
        if self.loss.lambda < 0.0 {
            return Err(invalid(
                self.lambda_field(loss_kind),
                format!("must be >= 0, got {}", self.loss.lambda),
            ));
        }
        let mut cfg = ExperimentConfig::new(task, loss_kind);
        cfg.lambda = self.loss.lambda;
        cfg.cna = self.loss.cna.clone();
        cfg.mvu = self.loss.mvu.clone();
        cfg.kd = self.loss.kd.clone();
        cfg.lfa = self.loss.lfa.clone();
        cfg.source_dims = self.model.source_dims.clone().unwrap_or_default();
        cfg.target_dims = target_dims;
        cfg.activation = self.model.activation;
        cfg.optimizer = self.optimizer.kind;
        cfg.schedule = self.schedule.kind.clone();
        cfg.base_lr = self.schedule.base_lr;
        cfg.batch_size = self.optimizer.batch_size;
        cfg.epochs = self.schedule.epochs;
        cfg.seed = self.task.seed;
        cfg.runs = self.task.runs;
        Ok(cfg)
    }
}

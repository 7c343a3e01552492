//! Command implementations. Every command writes its artifacts, re-reads
//! them through the same parsers that consume them, and only then reports
//! success — a zero exit code means the outputs on disk are usable.

use crate::config::{self, CliConfig, CliTask, DatasetSection, TransductiveMethod};
use crate::plot::{self, ColorSource};
use anyhow::Context;
use cna_core::datasets::{
    gen_blobs, gen_s_curve, gen_sphere, gen_swiss_roll, load_csv, load_idx, save_csv, Dataset,
    SplitSpec,
};
use cna_core::metrics::{self, EvalReport};
use cna_core::model::{forward, load_checkpoint, save_checkpoint, MlpModel};
use cna_core::trainer::{
    model_predictions, run_update_pair, train_classifier, train_embedding, train_student,
    ExperimentConfig, LossKind, RunRecord, TaskKind,
};
use cna_core::transductive::{isomap_embed, lle_embed, out_of_sample};
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown dataset '{0}' (expected s_curve, swiss_roll, sphere, or blobs)")]
    UnknownDataset(String),
    #[error("artifact {path} failed verification: {msg}")]
    ArtifactCheck { path: PathBuf, msg: String },
}

/// Generate a synthetic dataset and write it as CSV.
pub fn cmd_generate(
    name: &str,
    n: usize,
    noise: f64,
    classes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    let canonical = config::normalize_dataset_name(name);
    let dataset = match canonical.as_str() {
        "s_curve" => gen_s_curve(n, noise, seed),
        "swiss_roll" => gen_swiss_roll(n, noise, seed),
        "sphere" => gen_sphere(n, seed),
        "blobs" => gen_blobs(n, classes, dim, spread, seed),
        _ => return Err(Error::UnknownDataset(name.to_string()).into()),
    };
    save_csv(&dataset, out).with_context(|| format!("writing {}", out.display()))?;
    let back = load_csv(out).map_err(|e| Error::ArtifactCheck {
        path: out.to_path_buf(),
        msg: e.to_string(),
    })?;
    if back.rows() != n {
        return Err(Error::ArtifactCheck {
            path: out.to_path_buf(),
            msg: format!("expected {n} rows, re-read {}", back.rows()),
        }
        .into());
    }
    println!("wrote {} ({} rows, {} columns)", out.display(), back.rows(), back.cols());
    Ok(())
}

/// Training data plus the optional held-out split.
struct LoadedData {
    train: Dataset,
    test: Option<Dataset>,
}

fn split_if_requested(ds: &DatasetSection, full: Dataset) -> anyhow::Result<LoadedData> {
    match (ds.train_count, ds.test_count) {
        (Some(train_count), Some(test_count)) => {
            let spec = SplitSpec {
                train_count,
                test_count,
                seed: ds.seed,
            };
            let (train, test) = cna_core::datasets::split_subsample(&full, spec)
                .context("splitting the dataset")?;
            Ok(LoadedData {
                train,
                test: Some(test),
            })
        }
        _ => Ok(LoadedData {
            train: full,
            test: None,
        }),
    }
}

fn build_dataset(ds: &DatasetSection) -> anyhow::Result<LoadedData> {
    match ds.name.as_str() {
        "s_curve" => split_if_requested(ds, gen_s_curve(ds.n, ds.noise, ds.seed)),
        "swiss_roll" => split_if_requested(ds, gen_swiss_roll(ds.n, ds.noise, ds.seed)),
        "sphere" => split_if_requested(ds, gen_sphere(ds.n, ds.seed)),
        "blobs" => split_if_requested(ds, gen_blobs(ds.n, ds.classes, ds.dim, ds.spread, ds.seed)),
        "csv" => {
            let path = ds.path.as_ref().expect("validated at parse");
            let full = load_csv(path).with_context(|| format!("loading {}", path.display()))?;
            if let Some(test_path) = &ds.test_path {
                let test = load_csv(test_path)
                    .with_context(|| format!("loading {}", test_path.display()))?;
                Ok(LoadedData {
                    train: full,
                    test: Some(test),
                })
            } else {
                split_if_requested(ds, full)
            }
        }
        "mnist" => {
            let images = ds.images.as_ref().expect("validated at parse");
            let labels = ds.labels.as_ref().expect("validated at parse");
            let full = load_idx(images, labels)
                .with_context(|| format!("loading {}", images.display()))?;
            split_if_requested(ds, full)
        }
        other => Err(Error::UnknownDataset(other.to_string()).into()),
    }
}

/// Everything a run leaves behind, before any file is written.
pub struct ExecOutcome {
    pub reports: Vec<EvalReport>,
    /// `(seed, log text)` per run, in seed order.
    pub logs: Vec<(u64, String)>,
    /// The first run's trained model, when the task trains one.
    pub model: Option<MlpModel>,
    /// The first run's full-dataset embedding, for embed-family tasks.
    pub embedding: Option<Dataset>,
}

struct SingleRun {
    report: EvalReport,
    record: RunRecord,
    model: Option<MlpModel>,
    embedding: Option<Dataset>,
}

fn embedding_artifact(train: &Dataset, coords: cna_core::linalg::DataMatrix) -> anyhow::Result<Dataset> {
    let mut coords = coords;
    coords
        .set_labels(train.labels().map(|l| l.to_vec()))
        .context("carrying labels onto the embedding")?;
    Dataset::new(
        coords,
        train.colors.clone(),
        format!("{}_embedding", train.name),
    )
    .context("assembling the embedding dataset")
}

fn run_embed_once(
    exp: &ExperimentConfig,
    data: &LoadedData,
    eval_knn: usize,
    want_artifacts: bool,
) -> anyhow::Result<SingleRun> {
    let (model, record) = train_embedding(exp, &data.train)?;
    let train_emb = forward(&model, &data.train.data, false)?.features().clone();
    let local_error = match data.train.labels() {
        Some(labels) => Some(metrics::local_error(&train_emb, labels)?),
        None => None,
    };
    let knn_acc = match (&data.test, data.train.labels()) {
        (Some(test), Some(train_labels)) => match test.labels() {
            Some(test_labels) => {
                let test_emb = forward(&model, &test.data, false)?.features().clone();
                Some(metrics::knn_accuracy(
                    &train_emb,
                    train_labels,
                    &test_emb,
                    test_labels,
                    eval_knn,
                )?)
            }
            None => None,
        },
        _ => None,
    };
    let (lambda, tau, k, gamma, xi, tau_kd) = exp.report_hyperparams();
    let report = EvalReport {
        method: exp.loss_kind.as_str().to_string(),
        task: exp.task.as_str().to_string(),
        dataset: data.train.name.clone(),
        seed: exp.seed,
        local_error,
        knn_acc,
        top1: None,
        nfr: None,
        lambda,
        tau,
        k,
        gamma,
        xi,
        tau_kd,
        batch_size: exp.batch_size,
        base_lr: exp.base_lr,
        epochs: exp.epochs,
    };
    let embedding = if want_artifacts {
        Some(embedding_artifact(&data.train, train_emb)?)
    } else {
        None
    };
    Ok(SingleRun {
        report,
        record,
        model: want_artifacts.then_some(model),
        embedding,
    })
}

/// The frozen source model for distill/update runs: loaded from a
/// checkpoint, or trained fresh with plain cross-entropy on the source dims
/// under this run's seed.
fn source_model(
    exp: &ExperimentConfig,
    train: &Dataset,
    loaded: Option<&MlpModel>,
) -> anyhow::Result<MlpModel> {
    if let Some(m) = loaded {
        return Ok(m.clone());
    }
    let mut teacher_cfg = exp.clone();
    teacher_cfg.loss_kind = LossKind::CeOnly;
    teacher_cfg.target_dims = exp.source_dims.clone();
    let (teacher, _) = train_classifier(&teacher_cfg, train)?;
    Ok(teacher)
}

fn run_supervised_once(
    exp: &ExperimentConfig,
    data: &LoadedData,
    loaded_source: Option<&MlpModel>,
    want_artifacts: bool,
) -> anyhow::Result<SingleRun> {
    let test = data.test.as_ref().with_context(|| {
        format!(
            "the {} task needs a test split (set dataset.train_count/test_count or test_path)",
            exp.task.as_str()
        )
    })?;
    let test_labels = test
        .labels()
        .context("the test split has no labels")?;
    let source = source_model(exp, &data.train, loaded_source)?;
    if exp.task == TaskKind::Update {
        let (new_model, report, record) = run_update_pair(exp, &data.train, test, &source)?;
        return Ok(SingleRun {
            report,
            record,
            model: want_artifacts.then_some(new_model),
            embedding: None,
        });
    }
    let (student, record) = train_student(exp, &data.train, &source)?;
    let preds = model_predictions(&student, &test.data)?;
    let hits = preds.iter().zip(test_labels).filter(|(p, l)| p == l).count();
    let top1 = hits as f64 / test_labels.len() as f64;
    let (lambda, tau, k, gamma, xi, tau_kd) = exp.report_hyperparams();
    let report = EvalReport {
        method: exp.loss_kind.as_str().to_string(),
        task: exp.task.as_str().to_string(),
        dataset: data.train.name.clone(),
        seed: exp.seed,
        local_error: None,
        knn_acc: None,
        top1: Some(top1),
        nfr: None,
        lambda,
        tau,
        k,
        gamma,
        xi,
        tau_kd,
        batch_size: exp.batch_size,
        base_lr: exp.base_lr,
        epochs: exp.epochs,
    };
    Ok(SingleRun {
        report,
        record,
        model: want_artifacts.then_some(student),
        embedding: None,
    })
}

fn run_transductive(cfg: &CliConfig, data: &LoadedData) -> anyhow::Result<ExecOutcome> {
    if cfg.task.runs != 1 {
        return Err(config::Error::Invalid {
            field: "task.runs".into(),
            msg: "transductive methods are deterministic; use runs = 1".into(),
        }
        .into());
    }
    let method = cfg.task.method.expect("validated at parse");
    let k = cfg.task.k;
    let embedding = match method {
        TransductiveMethod::Lle => lle_embed(&data.train.data, k, cfg.task.dim)?,
        TransductiveMethod::Isomap => isomap_embed(&data.train.data, k, cfg.task.dim)?,
    };
    let local_error = match data.train.labels() {
        Some(labels) => Some(metrics::local_error(&embedding.coords, labels)?),
        None => None,
    };
    let knn_acc = match (&data.test, data.train.labels()) {
        (Some(test), Some(train_labels)) => match test.labels() {
            Some(test_labels) => {
                let test_emb = out_of_sample(&data.train.data, &embedding.coords, &test.data, k)?;
                Some(metrics::knn_accuracy(
                    &embedding.coords,
                    train_labels,
                    &test_emb,
                    test_labels,
                    cfg.task.eval_knn,
                )?)
            }
            None => None,
        },
        _ => None,
    };
    let report = EvalReport {
        method: method.as_str().to_string(),
        task: "transductive".to_string(),
        dataset: data.train.name.clone(),
        seed: cfg.dataset.seed,
        local_error,
        knn_acc,
        top1: None,
        nfr: None,
        lambda: None,
        tau: None,
        k: Some(k),
        gamma: None,
        xi: None,
        tau_kd: None,
        batch_size: 0,
        base_lr: 0.0,
        epochs: 0,
    };
    let artifact = embedding_artifact(&data.train, embedding.coords)?;
    Ok(ExecOutcome {
        reports: vec![report],
        logs: vec![],
        model: None,
        embedding: Some(artifact),
    })
}

/// Execute a parsed config: all runs of the configured task, nothing
/// written to disk yet.
pub fn execute(cfg: &CliConfig) -> anyhow::Result<ExecOutcome> {
    let data = build_dataset(&cfg.dataset)?;
    if cfg.task.kind == CliTask::Transductive {
        return run_transductive(cfg, &data);
    }
    let mut exp = cfg.experiment()?;
    let loaded_source = match &cfg.model.source_checkpoint {
        Some(path) => {
            let m = load_checkpoint(path)
                .with_context(|| format!("loading {}", path.display()))?;
            exp.source_dims = m.layer_dims().to_vec();
            Some(m)
        }
        None => None,
    };
    exp.validate().map_err(config::from_trainer)?;
    let runs: Vec<SingleRun> = (0..exp.runs)
        .into_par_iter()
        .map(|r| {
            let mut run_cfg = exp.clone();
            run_cfg.seed = exp.seed + r as u64;
            let want_artifacts = r == 0;
            match exp.task {
                TaskKind::Embed => {
                    run_embed_once(&run_cfg, &data, cfg.task.eval_knn, want_artifacts)
                }
                TaskKind::Distill | TaskKind::Update => {
                    run_supervised_once(&run_cfg, &data, loaded_source.as_ref(), want_artifacts)
                }
            }
        })
        .collect::<anyhow::Result<_>>()?;

    let mut outcome = ExecOutcome {
        reports: Vec::with_capacity(runs.len()),
        logs: Vec::with_capacity(runs.len()),
        model: None,
        embedding: None,
    };
    for run in runs {
        outcome.logs.push((run.report.seed, run.record.log_text()));
        outcome.reports.push(run.report);
        if outcome.model.is_none() {
            outcome.model = run.model;
        }
        if outcome.embedding.is_none() {
            outcome.embedding = run.embedding;
        }
    }
    Ok(outcome)
}

fn check_log_text(text: &str) -> Result<(), String> {
    const HEADER: &str = "epoch,loss_total,loss_ce,loss_aux,lr";
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line == HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(format!("log line {}: expected 5 fields", i + 1));
        }
        fields[0]
            .parse::<usize>()
            .map_err(|_| format!("log line {}: bad epoch '{}'", i + 1, fields[0]))?;
        for f in &fields[1..] {
            f.parse::<f64>()
                .map_err(|_| format!("log line {}: bad number '{f}'", i + 1))?;
        }
    }
    Ok(())
}

fn verify<T>(path: &Path, parse: impl FnOnce(&str) -> Result<T, String>) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("re-reading {}", path.display()))?;
    parse(&text).map_err(|msg| {
        Error::ArtifactCheck {
            path: path.to_path_buf(),
            msg,
        }
        .into()
    })
}

fn write_outcome(cfg: &CliConfig, outcome: &ExecOutcome) -> anyhow::Result<()> {
    let dir = cfg
        .output
        .dir
        .as_ref()
        .ok_or_else(|| config::Error::Invalid {
            field: "output.dir".into(),
            msg: "required".into(),
        })?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    let report_path = dir.join("report.csv");
    let csv = metrics::reports_to_csv(&outcome.reports)?;
    std::fs::write(&report_path, &csv)
        .with_context(|| format!("writing {}", report_path.display()))?;
    let rows = verify(&report_path, |text| {
        metrics::reports_from_csv(text)
            .map_err(|e| e.to_string())
            .and_then(|rows| {
                if rows.len() == outcome.reports.len() {
                    Ok(rows)
                } else {
                    Err(format!(
                        "expected {} rows, re-read {}",
                        outcome.reports.len(),
                        rows.len()
                    ))
                }
            })
    })?;
    println!("wrote {} ({} rows)", report_path.display(), rows.len());

    if !outcome.logs.is_empty() {
        let log_path = dir.join("run.log");
        let mut text = String::new();
        for (seed, log) in &outcome.logs {
            text.push_str(&format!("# run seed={seed}\n"));
            text.push_str(log);
        }
        std::fs::write(&log_path, &text)
            .with_context(|| format!("writing {}", log_path.display()))?;
        verify(&log_path, |t| check_log_text(t))?;
        println!("wrote {}", log_path.display());
    }

    if let Some(model) = &outcome.model {
        let model_path = dir.join("model.json");
        save_checkpoint(model, &model_path)
            .with_context(|| format!("writing {}", model_path.display()))?;
        let back = load_checkpoint(&model_path).map_err(|e| Error::ArtifactCheck {
            path: model_path.clone(),
            msg: e.to_string(),
        })?;
        if back.layer_dims() != model.layer_dims() {
            return Err(Error::ArtifactCheck {
                path: model_path,
                msg: "re-read model has different dims".into(),
            }
            .into());
        }
        println!("wrote {}", model_path.display());
    }

    if let Some(embedding) = &outcome.embedding {
        let emb_path = dir.join("embedding.csv");
        save_csv(embedding, &emb_path)
            .with_context(|| format!("writing {}", emb_path.display()))?;
        let back = load_csv(&emb_path).map_err(|e| Error::ArtifactCheck {
            path: emb_path.clone(),
            msg: e.to_string(),
        })?;
        if back.rows() != embedding.rows() {
            return Err(Error::ArtifactCheck {
                path: emb_path,
                msg: format!(
                    "expected {} rows, re-read {}",
                    embedding.rows(),
                    back.rows()
                ),
            }
            .into());
        }
        println!("wrote {}", emb_path.display());
    }
    Ok(())
}

/// Run one experiment config and write report, log, checkpoint, and (for
/// embed-family tasks) the embedding CSV into `output.dir`.
pub fn cmd_run(config_path: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let cfg = CliConfig::parse(&text)?;
    let outcome = execute(&cfg)?;
    write_outcome(&cfg, &outcome)
}

/// Render an embedding CSV as an SVG scatter.
pub fn cmd_plot(embedding: &Path, color_column: &str, out: &Path) -> anyhow::Result<()> {
    let source: ColorSource = color_column.parse::<ColorSource>()?;
    let ds = load_csv(embedding)
        .with_context(|| format!("loading {}", embedding.display()))?;
    let svg = plot::render_scatter(&ds, source)?;
    std::fs::write(out, &svg).with_context(|| format!("writing {}", out.display()))?;
    let back = std::fs::read_to_string(out)
        .with_context(|| format!("re-reading {}", out.display()))?;
    let circles = back.matches("<circle").count();
    if !back.starts_with("<svg") || circles != ds.rows() {
        return Err(Error::ArtifactCheck {
            path: out.to_path_buf(),
            msg: format!("expected an SVG with {} circles, found {circles}", ds.rows()),
        }
        .into());
    }
    println!("wrote {} ({circles} points)", out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    BatchSize,
    Tau,
    K,
    MlpHeads,
}

impl std::str::FromStr for SweepAxis {
    type Err = config::Error;

    fn from_str(s: &str) -> Result<Self, config::Error> {
        match s {
            "batch_size" => Ok(SweepAxis::BatchSize),
            "tau" => Ok(SweepAxis::Tau),
            "k" => Ok(SweepAxis::K),
            "mlp_heads" => Ok(SweepAxis::MlpHeads),
            other => Err(config::Error::Invalid {
                field: "sweep.axis".into(),
                msg: format!("expected batch_size, tau, k, or mlp_heads, got '{other}'"),
            }),
        }
    }
}

fn apply_axis(cfg: &mut CliConfig, axis: SweepAxis, raw: &str) -> Result<(), config::Error> {
    let bad = |msg: String| config::Error::Invalid {
        field: "sweep.values".into(),
        msg,
    };
    let as_usize =
        |raw: &str| raw.parse::<usize>().map_err(|_| bad(format!("expected an integer, got '{raw}'")));
    match axis {
        SweepAxis::BatchSize => {
            if cfg.task.kind == CliTask::Transductive {
                return Err(config::Error::Invalid {
                    field: "sweep.axis".into(),
                    msg: "batch_size does not apply to transductive runs".into(),
                });
            }
            cfg.optimizer.batch_size = as_usize(raw)?;
        }
        SweepAxis::Tau => {
            let v = raw
                .parse::<f64>()
                .map_err(|_| bad(format!("expected a number, got '{raw}'")))?;
            match cfg.loss.kind {
                Some(LossKind::Cna) => cfg.loss.cna.tau = v,
                Some(LossKind::Kd) => cfg.loss.kd.tau = v,
                _ => {
                    return Err(config::Error::Invalid {
                        field: "sweep.axis".into(),
                        msg: "tau applies to cna or kd losses".into(),
                    })
                }
            }
        }
        SweepAxis::K => match (cfg.task.kind, cfg.loss.kind) {
            (CliTask::Transductive, _) => cfg.task.k = as_usize(raw)?,
            (_, Some(LossKind::Cna)) => cfg.loss.cna.k = as_usize(raw)?,
            (_, Some(LossKind::Mvu)) => cfg.loss.mvu.k = as_usize(raw)?,
            _ => {
                return Err(config::Error::Invalid {
                    field: "sweep.axis".into(),
                    msg: "k applies to cna, mvu, or transductive runs".into(),
                })
            }
        },
        SweepAxis::MlpHeads => {
            if cfg.task.kind == CliTask::Transductive {
                return Err(config::Error::Invalid {
                    field: "sweep.axis".into(),
                    msg: "mlp_heads does not apply to transductive runs".into(),
                });
            }
            cfg.model.mlp_heads = as_usize(raw)?;
        }
    }
    Ok(())
}

/// Re-run a config across one axis, one report row per value (times
/// configured runs), aggregated into a single CSV.
pub fn cmd_sweep(
    config_path: &Path,
    axis_raw: &str,
    values_raw: &str,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let base = CliConfig::parse(&text)?;
    let axis: SweepAxis = axis_raw.parse()?;
    let values: Vec<&str> = values_raw
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(config::Error::Invalid {
            field: "sweep.values".into(),
            msg: "at least one value required".into(),
        }
        .into());
    }
    let points: Vec<CliConfig> = values
        .iter()
        .map(|raw| {
            let mut point = base.clone();
            apply_axis(&mut point, axis, raw)?;
            Ok(point)
        })
        .collect::<Result<_, config::Error>>()?;

    let results: Vec<Vec<EvalReport>> = points
        .par_iter()
        .map(|point| execute(point).map(|o| o.reports))
        .collect::<anyhow::Result<_>>()?;
    let rows: Vec<EvalReport> = results.into_iter().flatten().collect();

    let out_path: PathBuf = match out {
        Some(p) => p.to_path_buf(),
        None => base
            .output
            .dir
            .as_ref()
            .ok_or_else(|| config::Error::Invalid {
                field: "output.dir".into(),
                msg: "required when --out is not given".into(),
            })?
            .join("sweep.csv"),
    };
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    let csv = metrics::reports_to_csv(&rows)?;
    std::fs::write(&out_path, &csv)
        .with_context(|| format!("writing {}", out_path.display()))?;
    let back = verify(&out_path, |t| {
        metrics::reports_from_csv(t).map_err(|e| e.to_string())
    })?;
    if back.len() != rows.len() {
        return Err(Error::ArtifactCheck {
            path: out_path,
            msg: format!("expected {} rows, re-read {}", rows.len(), back.len()),
        }
        .into());
    }
    println!("wrote {} ({} rows)", out_path.display(), back.len());
    Ok(())
}

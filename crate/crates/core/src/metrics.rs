//! Evaluation metrics and the tabular report row they feed.
//!
//! Tie-breaking is pinned down everywhere so reported numbers are exactly
//! reproducible: nearest-neighbor ties go to the lowest index, vote ties go
//! to the larger summed inverse distance and then the lowest label, argmax
//! ties go to the lowest class.

use crate::linalg::DataMatrix;
use crate::neighbors::{self, topk, Metric};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("k = {k} exceeds the {rows} reference rows")]
    KTooLarge { k: usize, rows: usize },
    #[error("report line {line}: {msg}")]
    CsvParse { line: usize, msg: String },
    #[error("field {field} must not contain commas or newlines: {value:?}")]
    BadFieldText { field: &'static str, value: String },
    #[error(transparent)]
    Neighbors(#[from] neighbors::Error),
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax class per logit row.
pub fn predictions(logits: &DataMatrix) -> Vec<usize> {
    (0..logits.rows()).map(|i| argmax_row(logits.row(i))).collect()
}

/// Fraction of rows whose argmax class equals the label.
pub fn accuracy(logits: &DataMatrix, labels: &[usize]) -> Result<f64> {
    let n = logits.rows();
    if n == 0 {
        return Err(Error::TooFewRows { needed: 1, got: 0 });
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected: n,
            got: labels.len(),
        });
    }
    let hits = predictions(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / n as f64)
}

/// Fraction of rows whose nearest other row (Euclidean, ties to the lowest
/// index) carries a different label. Small values mean same-class points
/// stayed neighbors.
pub fn local_error(embedded: &DataMatrix, labels: &[usize]) -> Result<f64> {
    let n = embedded.rows();
    if n < 2 {
        return Err(Error::TooFewRows { needed: 2, got: n });
    }
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected: n,
            got: labels.len(),
        });
    }
    let nearest = topk(embedded, 1, Metric::Euclidean)?;
    let wrong = (0..n)
        .filter(|&i| labels[nearest.neighbors(i)[0]] != labels[i])
        .count();
    Ok(wrong as f64 / n as f64)
}

/// Label each query row by a k-nearest-neighbor vote over the reference
/// rows: majority first, then larger summed inverse distance (a coincident
/// reference counts as infinitely near), then the lowest label.
pub fn knn_classify(
    reference: &DataMatrix,
    reference_labels: &[usize],
    queries: &DataMatrix,
    k: usize,
) -> Result<Vec<usize>> {
    let n = reference.rows();
    if reference_labels.len() != n {
        return Err(Error::LengthMismatch {
            what: "reference_labels",
            expected: n,
            got: reference_labels.len(),
        });
    }
    if k == 0 || k > n {
        return Err(Error::KTooLarge { k, rows: n });
    }
    if queries.cols() != reference.cols() {
        return Err(Error::LengthMismatch {
            what: "query columns",
            expected: reference.cols(),
            got: queries.cols(),
        });
    }
    let mut out = Vec::with_capacity(queries.rows());
    for q in 0..queries.rows() {
        let row = queries.row(q);
        let mut scored: Vec<(f64, usize)> = (0..n)
            .map(|j| {
                let mut sq = 0.0;
                for (a, b) in row.iter().zip(reference.row(j)) {
                    let d = a - b;
                    sq += d * d;
                }
                (sq, j)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for &(sq, j) in &scored[..k] {
            let dist = sq.sqrt();
            let inv = if dist == 0.0 { f64::INFINITY } else { 1.0 / dist };
            let e = votes.entry(reference_labels[j]).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += inv;
        }
        let mut winner = None;
        for (&label, &(count, inv)) in &votes {
            let better = match winner {
                None => true,
                Some((_, best_count, best_inv)) => {
                    count > best_count || (count == best_count && inv > best_inv)
                }
            };
            if better {
                winner = Some((label, count, inv));
            }
        }
        out.push(winner.expect("k >= 1 casts at least one vote").0);
    }
    Ok(out)
}

/// Accuracy of [`knn_classify`] against query labels.
pub fn knn_accuracy(
    reference: &DataMatrix,
    reference_labels: &[usize],
    queries: &DataMatrix,
    query_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if query_labels.len() != queries.rows() {
        return Err(Error::LengthMismatch {
            what: "query_labels",
            expected: queries.rows(),
            got: query_labels.len(),
        });
    }
    if queries.rows() == 0 {
        return Err(Error::TooFewRows { needed: 1, got: 0 });
    }
    let preds = knn_classify(reference, reference_labels, queries, k)?;
    let hits = preds.iter().zip(query_labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / queries.rows() as f64)
}

fn check_flip_inputs(
    new_preds: &[usize],
    old_preds: &[usize],
    labels: &[usize],
) -> Result<usize> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::TooFewRows { needed: 1, got: 0 });
    }
    if new_preds.len() != n {
        return Err(Error::LengthMismatch {
            what: "new_preds",
            expected: n,
            got: new_preds.len(),
        });
    }
    if old_preds.len() != n {
        return Err(Error::LengthMismatch {
            what: "old_preds",
            expected: n,
            got: old_preds.len(),
        });
    }
    Ok(n)
}

/// Negative flip rate: fraction of samples the old model got right and the
/// new model gets wrong — the regressions an update introduces.
pub fn nfr(new_preds: &[usize], old_preds: &[usize], labels: &[usize]) -> Result<f64> {
    let n = check_flip_inputs(new_preds, old_preds, labels)?;
    let flips = (0..n)
        .filter(|&i| old_preds[i] == labels[i] && new_preds[i] != labels[i])
        .count();
    Ok(flips as f64 / n as f64)
}

/// Positive flip rate: fraction the old model got wrong and the new model
/// gets right.
pub fn pfr(new_preds: &[usize], old_preds: &[usize], labels: &[usize]) -> Result<f64> {
    let n = check_flip_inputs(new_preds, old_preds, labels)?;
    let flips = (0..n)
        .filter(|&i| old_preds[i] != labels[i] && new_preds[i] == labels[i])
        .count();
    Ok(flips as f64 / n as f64)
}

/// One result row: what ran, on what data, and every number it produced.
/// Metrics a task does not compute stay `None` and serialize as empty cells.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub task: String,
    pub dataset: String,
    pub seed: u64,
    pub local_error: Option<f64>,
    pub knn_acc: Option<f64>,
    pub top1: Option<f64>,
    pub nfr: Option<f64>,
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
    pub k: Option<usize>,
    pub gamma: Option<f64>,
    pub xi: Option<f64>,
    pub tau_kd: Option<f64>,
    pub batch_size: usize,
    pub base_lr: f64,
    pub epochs: usize,
}

pub const REPORT_HEADER: &str =
    "method,task,dataset,seed,local_error,knn_acc,top1,nfr,lambda,tau,k,gamma,xi,tau_kd,batch_size,base_lr,epochs";

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn opt_usize(v: Option<usize>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn check_text(field: &'static str, value: &str) -> Result<()> {
    if value.contains(',') || value.contains('\n') || value.is_empty() {
        return Err(Error::BadFieldText {
            field,
            value: value.to_string(),
        });
    }
    Ok(())
}

impl EvalReport {
    pub fn to_csv_row(&self) -> Result<String> {
        check_text("method", &self.method)?;
        check_text("task", &self.task)?;
        check_text("dataset", &self.dataset)?;
        Ok(format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.task,
            self.dataset,
            self.seed,
            opt_f64(self.local_error),
            opt_f64(self.knn_acc),
            opt_f64(self.top1),
            opt_f64(self.nfr),
            opt_f64(self.lambda),
            opt_f64(self.tau),
            opt_usize(self.k),
            opt_f64(self.gamma),
            opt_f64(self.xi),
            opt_f64(self.tau_kd),
            self.batch_size,
            self.base_lr,
            self.epochs,
        ))
    }
}

/// Serialize reports under [`REPORT_HEADER`]; with more than one row a
/// `# summary` comment with per-metric mean ± population std is appended.
pub fn reports_to_csv(reports: &[EvalReport]) -> Result<String> {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.to_csv_row()?);
        out.push('\n');
    }
    if let Some(line) = summary_comment(reports) {
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Mean ± population std across runs for each metric present anywhere, as a
/// `#`-prefixed comment; `None` when there is at most one run.
pub fn summary_comment(reports: &[EvalReport]) -> Option<String> {
    if reports.len() < 2 {
        return None;
    }
    let mut line = format!("# summary runs={}", reports.len());
    let fields: [(&str, fn(&EvalReport) -> Option<f64>); 4] = [
        ("local_error", |r| r.local_error),
        ("knn_acc", |r| r.knn_acc),
        ("top1", |r| r.top1),
        ("nfr", |r| r.nfr),
    ];
    for (name, get) in fields {
        let vals: Vec<f64> = reports.iter().filter_map(get).collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        write!(line, " {name}={mean:.6}±{:.6}", var.sqrt()).expect("string write");
    }
    Some(line)
}

fn parse_opt_f64(field: &str, line: usize, name: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse::<f64>().map(Some).map_err(|e| Error::CsvParse {
        line,
        msg: format!("bad {name} value {field:?}: {e}"),
    })
}

fn parse_opt_usize(field: &str, line: usize, name: &str) -> Result<Option<usize>> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse::<usize>().map(Some).map_err(|e| Error::CsvParse {
        line,
        msg: format!("bad {name} value {field:?}: {e}"),
    })
}

/// Parse a report file written by [`reports_to_csv`]. Comment lines
/// (`#`-prefixed) and blank lines are skipped; the header is mandatory.
pub fn reports_from_csv(text: &str) -> Result<Vec<EvalReport>> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((i, line)) => {
                let t = line.trim();
                if t.is_empty() || t.starts_with('#') {
                    continue;
                }
                break (i + 1, t);
            }
            None => {
                return Err(Error::CsvParse {
                    line: 0,
                    msg: "empty report file".into(),
                })
            }
        }
    };
    if header.1 != REPORT_HEADER {
        return Err(Error::CsvParse {
            line: header.0,
            msg: format!("unexpected header {:?}", header.1),
        });
    }
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line_no = i + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split(',').collect();
        if fields.len() != 17 {
            return Err(Error::CsvParse {
                line: line_no,
                msg: format!("expected 17 fields, got {}", fields.len()),
            });
        }
        let require = |field: &str, name: &str| -> Result<f64> {
            field.parse::<f64>().map_err(|e| Error::CsvParse {
                line: line_no,
                msg: format!("bad {name} value {field:?}: {e}"),
            })
        };
        out.push(EvalReport {
            method: fields[0].to_string(),
            task: fields[1].to_string(),
            dataset: fields[2].to_string(),
            seed: fields[3].parse().map_err(|e| Error::CsvParse {
                line: line_no,
                msg: format!("bad seed value {:?}: {e}", fields[3]),
            })?,
            local_error: parse_opt_f64(fields[4], line_no, "local_error")?,
            knn_acc: parse_opt_f64(fields[5], line_no, "knn_acc")?,
            top1: parse_opt_f64(fields[6], line_no, "top1")?,
            nfr: parse_opt_f64(fields[7], line_no, "nfr")?,
            lambda: parse_opt_f64(fields[8], line_no, "lambda")?,
            tau: parse_opt_f64(fields[9], line_no, "tau")?,
            k: parse_opt_usize(fields[10], line_no, "k")?,
            gamma: parse_opt_f64(fields[11], line_no, "gamma")?,
            xi: parse_opt_f64(fields[12], line_no, "xi")?,
            tau_kd: parse_opt_f64(fields[13], line_no, "tau_kd")?,
            batch_size: fields[14].parse().map_err(|e| Error::CsvParse {
                line: line_no,
                msg: format!("bad batch_size value {:?}: {e}", fields[14]),
            })?,
            base_lr: require(fields[15], "base_lr")?,
            epochs: fields[16].parse().map_err(|e| Error::CsvParse {
                line: line_no,
                msg: format!("bad epochs value {:?}: {e}", fields[16]),
            })?,
        });
    }
    Ok(out)
}

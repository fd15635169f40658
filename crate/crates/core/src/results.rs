//! Experiment tracking. Each run lives in its own directory:
//!
//! ```text
//! <root>/<run_id>/config.json      written at creation
//! <root>/<run_id>/epochs.jsonl     one EpochLog per line, appended
//! <root>/<run_id>/predictions.csv  written by finalize
//! <root>/<run_id>/metrics.json     written last by finalize; marks the run final
//! ```
//!
//! `predictions.csv` has the columns `row`, `score_<label>...`,
//! `decided_<label>...`, `target_<label>...` (labels in schema order). Bits
//! are `0`/`1`; target cells are empty for rows without a target. Floats are
//! written in the shortest form that parses back to the same `f64`.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{LabelSchema, LabelVector, TaskMode};
use crate::error::{Error, Result};
use crate::fusion::Prediction;
use crate::metrics::MetricsReport;

pub const RUN_FORMAT_VERSION: &str = concat!("labelfusion-run/1 (labelfusion ", env!("CARGO_PKG_VERSION"), ")");

const CONFIG_FILE: &str = "config.json";
const EPOCHS_FILE: &str = "epochs.jsonl";
const PREDICTIONS_FILE: &str = "predictions.csv";
const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub row: usize,
    pub scores: Vec<f64>,
    pub decided: LabelVector,
    pub target: Option<LabelVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub format_version: String,
    pub created_at: DateTime<Utc>,
    /// What produced the run, e.g. `fit` or `evaluate`.
    pub kind: String,
    pub labels: LabelSchema,
    pub mode: TaskMode,
    pub dataset_fingerprint: String,
    pub config: Value,
    pub epochs: Vec<EpochLog>,
    pub predictions: Vec<PredictionRow>,
    pub metrics: Option<MetricsReport>,
    pub finalized: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    format_version: String,
    run_id: String,
    created_at: DateTime<Utc>,
    kind: String,
    labels: LabelSchema,
    mode: TaskMode,
    dataset_fingerprint: String,
    config: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricsFile {
    run_id: String,
    metrics: MetricsReport,
}

/// An open run. Without a directory it only accumulates in memory.
#[derive(Debug)]
pub struct RunHandle {
    dir: Option<PathBuf>,
    record: RunRecord,
}

/// Creates, loads and compares runs under one root directory.
#[derive(Debug, Clone)]
pub struct ResultsManager {
    root: PathBuf,
}

impl ResultsManager {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Allocates a fresh run directory and writes its config snapshot.
    pub fn create_run<C: Serialize>(
        &self,
        kind: &str,
        labels: &LabelSchema,
        mode: TaskMode,
        config: &C,
        fingerprint: &str,
    ) -> Result<RunHandle> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let mut handle = RunHandle::in_memory(kind, labels, mode, config, fingerprint)?;
        let dir = loop {
            let dir = self.root.join(&handle.record.run_id);
            match fs::create_dir(&dir) {
                Ok(()) => break dir,
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    handle.record.run_id = new_run_id(handle.record.created_at);
                }
                Err(e) => return Err(Error::io(&dir, e)),
            }
        };
        let r = &handle.record;
        let snapshot = ConfigFile {
            format_version: r.format_version.clone(),
            run_id: r.run_id.clone(),
            created_at: r.created_at,
            kind: r.kind.clone(),
            labels: r.labels.clone(),
            mode: r.mode,
            dataset_fingerprint: r.dataset_fingerprint.clone(),
            config: r.config.clone(),
        };
        write_json(&dir.join(CONFIG_FILE), &snapshot)?;
        let epochs = dir.join(EPOCHS_FILE);
        fs::write(&epochs, "").map_err(|e| Error::io(&epochs, e))?;
        handle.dir = Some(dir);
        Ok(handle)
    }

    pub fn load(&self, run_id: &str) -> Result<RunRecord> {
        let dir = self.root.join(run_id);
        if run_id.is_empty() || run_id.contains(['/', '\\']) || !dir.join(CONFIG_FILE).is_file() {
            return Err(Error::Data(format!(
                "unknown run id `{run_id}` under {}",
                self.root.display()
            )));
        }
        let snapshot: ConfigFile = read_json(&dir.join(CONFIG_FILE))?;

        let epochs_path = dir.join(EPOCHS_FILE);
        let epochs_text = fs::read_to_string(&epochs_path).map_err(|e| Error::io(&epochs_path, e))?;
        let epochs = epochs_text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", epochs_path.display()))))
            .collect::<Result<Vec<EpochLog>>>()?;

        let metrics_path = dir.join(METRICS_FILE);
        let (metrics, finalized) = if metrics_path.is_file() {
            let m: MetricsFile = read_json(&metrics_path)?;
            (Some(m.metrics), true)
        } else {
            (None, false)
        };
        let predictions_path = dir.join(PREDICTIONS_FILE);
        let predictions = if predictions_path.is_file() {
            read_predictions(&predictions_path, &snapshot.labels)?
        } else {
            Vec::new()
        };

        Ok(RunRecord {
            run_id: snapshot.run_id,
            format_version: snapshot.format_version,
            created_at: snapshot.created_at,
            kind: snapshot.kind,
            labels: snapshot.labels,
            mode: snapshot.mode,
            dataset_fingerprint: snapshot.dataset_fingerprint,
            config: snapshot.config,
            epochs,
            predictions,
            metrics,
            finalized,
        })
    }

    /// One row per run id (in the order given) with the key config fields
    /// and headline metrics. Every run must exist and be finalized.
    pub fn compare<S: AsRef<str>>(&self, run_ids: &[S]) -> Result<Comparison> {
        let mut columns: Vec<String> = vec!["run_id".into(), "kind".into(), "mode".into(), "labels".into()];
        columns.extend(KEY_FIELDS.iter().map(|(name, _)| name.to_string()));
        columns.extend(["accuracy".into(), "macro_f1".into()]);

        let mut rows = Vec::with_capacity(run_ids.len());
        for id in run_ids {
            let id = id.as_ref();
            let record = self.load(id)?;
            let Some(metrics) = record.metrics.as_ref().filter(|_| record.finalized) else {
                return Err(Error::State(format!("run `{id}` is not finalized")));
            };
            let mut row = vec![
                record.run_id.clone(),
                record.kind.clone(),
                record.mode.to_string(),
                record.labels.labels().join(","),
            ];
            for (name, pointer) in KEY_FIELDS {
                row.push(if *name == "providers" {
                    providers_cell(&record.config)
                } else {
                    record.config.pointer(pointer).map(cell).unwrap_or_else(|| "-".into())
                });
            }
            row.push(format!("{:.4}", metrics.accuracy));
            row.push(format!("{:.4}", metrics.f1));
            rows.push(row);
        }
        Ok(Comparison { columns, rows })
    }
}

/// Config columns shown by `compare`, as JSON pointers into the snapshot.
/// The seed is deliberately absent: runs that differ only in seed compare
/// equal except for their ids and metrics.
const KEY_FIELDS: &[(&str, &str)] = &[
    ("providers", "/llm_providers"),
    ("encoder", "/encoder/kind"),
    ("dim", "/encoder/dim"),
    ("lr_small", "/encoder/lr_small"),
    ("hidden_sizes", "/fusion/hidden_sizes"),
    ("lr_high", "/fusion/lr_high"),
    ("epochs", "/fusion/epochs"),
    ("train_batch_size", "/fusion/train_batch_size"),
    ("validation_fraction", "/validation_fraction"),
];

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

fn providers_cell(config: &Value) -> String {
    match config.pointer("/llm_providers").and_then(Value::as_array) {
        Some(list) if !list.is_empty() => list
            .iter()
            .map(|p| {
                format!(
                    "{}:{}",
                    p.get("provider_id").map(cell).unwrap_or_default(),
                    p.get("model_name").map(cell).unwrap_or_default()
                )
            })
            .collect::<Vec<_>>()
            .join("+"),
        _ => "-".into(),
    }
}

/// Result of comparing runs; `Display` renders an aligned text table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|c| {
                self.rows
                    .iter()
                    .map(|r| r[c].chars().count())
                    .chain([self.columns[c].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        for line in std::iter::once(&self.columns).chain(&self.rows) {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
            writeln!(f, "{}", cells.join("  ").trim_end())?;
        }
        Ok(())
    }
}

fn new_run_id(now: DateTime<Utc>) -> String {
    let suffix: u32 = rand::rng().random();
    format!("{}-{:08x}", now.format("%Y%m%dT%H%M%S%.3fZ"), suffix)
}

impl RunHandle {
    /// A run that is never written to disk.
    pub fn in_memory<C: Serialize>(
        kind: &str,
        labels: &LabelSchema,
        mode: TaskMode,
        config: &C,
        fingerprint: &str,
    ) -> Result<Self> {
        let config =
            serde_json::to_value(config).map_err(|e| Error::InvalidArgument(format!("config snapshot: {e}")))?;
        let created_at = Utc::now();
        Ok(Self {
            dir: None,
            record: RunRecord {
                run_id: new_run_id(created_at),
                format_version: RUN_FORMAT_VERSION.to_string(),
                created_at,
                kind: kind.to_string(),
                labels: labels.clone(),
                mode,
                dataset_fingerprint: fingerprint.to_string(),
                config,
                epochs: Vec::new(),
                predictions: Vec::new(),
                metrics: None,
                finalized: false,
            },
        })
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn run_id(&self) -> &str {
        &self.record.run_id
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn ensure_open(&self) -> Result<()> {
        if self.record.finalized {
            Err(Error::State(format!(
                "run `{}` is already finalized",
                self.record.run_id
            )))
        } else {
            Ok(())
        }
    }

    pub fn log_epoch(&mut self, entry: EpochLog) -> Result<()> {
        self.ensure_open()?;
        if let Some(dir) = &self.dir {
            let path = dir.join(EPOCHS_FILE);
            let line = serde_json::to_string(&entry).expect("epoch log serializes");
            OpenOptions::new()
                .append(true)
                .open(&path)
                .and_then(|mut f| writeln!(f, "{line}"))
                .map_err(|e| Error::io(&path, e))?;
        }
        self.record.epochs.push(entry);
        Ok(())
    }

    /// Buffers predictions; they are written by `finalize`.
    pub fn store_predictions(&mut self, rows: Vec<PredictionRow>) -> Result<()> {
        self.ensure_open()?;
        let k = self.record.labels.len();
        for r in &rows {
            if r.scores.len() != k || r.decided.len() != k || r.target.as_ref().is_some_and(|t| t.len() != k) {
                return Err(Error::InvalidArgument(format!(
                    "prediction row {} does not have {k} labels",
                    r.row
                )));
            }
        }
        self.record.predictions = rows;
        Ok(())
    }

    /// Writes predictions and metrics and freezes the run.
    pub fn finalize(&mut self, metrics: MetricsReport) -> Result<RunRecord> {
        self.ensure_open()?;
        if let Some(dir) = &self.dir {
            write_predictions(
                &dir.join(PREDICTIONS_FILE),
                &self.record.labels,
                &self.record.predictions,
            )?;
            let file = MetricsFile {
                run_id: self.record.run_id.clone(),
                metrics: metrics.clone(),
            };
            write_json(&dir.join(METRICS_FILE), &file)?;
        }
        self.record.metrics = Some(metrics);
        self.record.finalized = true;
        Ok(self.record.clone())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn bit(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Header for a predictions file: `row`, then scores, decided and target
/// columns per label.
pub fn predictions_header(labels: &LabelSchema) -> Vec<String> {
    let mut header = vec!["row".to_string()];
    for prefix in ["score_", "decided_", "target_"] {
        header.extend(labels.labels().iter().map(|l| format!("{prefix}{l}")));
    }
    header
}

fn write_predictions(path: &Path, labels: &LabelSchema, rows: &[PredictionRow]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(predictions_header(labels)).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.row.to_string()];
        rec.extend(r.scores.iter().map(|s| s.to_string()));
        rec.extend(r.decided.bits().iter().map(|&b| bit(b).to_string()));
        match &r.target {
            Some(t) => rec.extend(t.bits().iter().map(|&b| bit(b).to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), labels.len())),
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes predictions for raw texts as CSV with the columns `row`, `text`,
/// `score_<label>...`, `decided_<label>...`. The header is written even when
/// there are no rows.
pub fn write_prediction_csv<W: io::Write, S: AsRef<str>>(
    out: W,
    labels: &LabelSchema,
    texts: &[S],
    preds: &[Prediction],
) -> Result<()> {
    if texts.len() != preds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} texts but {} predictions",
            texts.len(),
            preds.len()
        )));
    }
    let csv_err = |e: csv::Error| Error::Data(format!("writing predictions: {e}"));
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["row".to_string(), "text".to_string()];
    for prefix in ["score_", "decided_"] {
        header.extend(labels.labels().iter().map(|l| format!("{prefix}{l}")));
    }
    w.write_record(&header).map_err(csv_err)?;
    for (i, (text, p)) in texts.iter().zip(preds).enumerate() {
        let mut rec = vec![i.to_string(), text.as_ref().to_string()];
        rec.extend(p.scores.values().iter().map(|s| s.to_string()));
        rec.extend(p.decided.bits().iter().map(|&b| bit(b).to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("writing predictions: {e}")))
}

fn read_predictions(path: &Path, labels: &LabelSchema) -> Result<Vec<PredictionRow>> {
    let bad = |detail: String| Error::Data(format!("{}: {detail}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header != predictions_header(labels) {
        return Err(bad("unexpected predictions header".into()));
    }
    let k = labels.len();
    let parse_bits = |cells: &[&str]| -> Result<Option<LabelVector>> {
        if cells.iter().all(|c| c.is_empty()) {
            return Ok(None);
        }
        cells
            .iter()
            .map(|c| match *c {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(bad(format!("bad label bit {other:?}"))),
            })
            .collect::<Result<Vec<bool>>>()
            .map(|b| Some(LabelVector::new(b)))
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let cells: Vec<&str> = rec.iter().collect();
        let row = cells[0]
            .parse()
            .map_err(|_| bad(format!("bad row index {:?}", cells[0])))?;
        let scores = cells[1..=k]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| bad(format!("bad score {c:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let decided =
            parse_bits(&cells[1 + k..1 + 2 * k])?.ok_or_else(|| bad(format!("row {row}: missing decided labels")))?;
        let target = parse_bits(&cells[1 + 2 * k..1 + 3 * k])?;
        rows.push(PredictionRow {
            row,
            scores,
            decided,
            target,
        });
    }
    Ok(rows)
}

//! End-to-end fit / predict / evaluate, plus the encoder-only and LLM-only
//! baselines.
//!
//! LLM scores for the training set are fetched once, before the first epoch,
//! and reused. Each mini-batch then takes one joint step from one loss: the
//! fusion head moves at `fusion.lr_high` and the hashed encoder projection at
//! `encoder.lr_small`. The LLM scores themselves receive no gradient.
//!
//! Model files are pretty-printed JSON with the top-level fields `format`
//! (`"labelfusion-model"`), `format_version`, `config` (the full
//! [`AutoFusionConfig`]), `dataset_fingerprint` (of the training set),
//! `encoder_params` (hashed encoders only; see [`EncoderParams`]) and
//! `fusion_params` (a list of layers, each `{inputs, outputs, weights,
//! bias}` with `weights` row-major `outputs x inputs`). They hold no
//! timestamps, so equal training runs produce byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{ScoreCache, StalePolicy};
use crate::dataset::{dataset_fingerprint, validate_dataset, Dataset, LabelSchema, LabelVector, ScoreVector, TaskMode};
use crate::encoder::{
    encoder_gradient_step, load_precomputed_embeddings, project, Embedding, Encoder, EncoderConfig, EncoderParams,
    ProjectionGrad,
};
use crate::error::{Error, Result};
use crate::fusion::{
    assemble_input, backward, decide, decide_scores, forward, fusion_step, multiclass_loss_grad, multilabel_loss_grad,
    FusionConfig, FusionParams, Prediction,
};
use crate::llm::{build_scorer, score_batch, CallCounter, LlmScore, ProviderConfig};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::results::{EpochLog, PredictionRow, ResultsManager, RunHandle, RunRecord};

pub const MODEL_FORMAT: &str = "labelfusion-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// ChaCha stream for the train/validation split and epoch shuffles.
const SHUFFLE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    Hashed(EncoderConfig),
    /// Precomputed embeddings (`text<TAB>v1..vD` lines); never trained.
    Frozen {
        path: PathBuf,
    },
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::Hashed(EncoderConfig::default())
    }
}

fn default_validation_fraction() -> f64 {
    0.1
}

fn default_ml_batch_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoFusionConfig {
    pub label_columns: Vec<String>,
    pub multi_label: bool,
    /// Score providers in fusion-input order.
    pub llm_providers: Vec<ProviderConfig>,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub cache_policy: StalePolicy,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Texts encoded per call at prediction time.
    #[serde(default = "default_ml_batch_size")]
    pub ml_batch_size: usize,
}

impl AutoFusionConfig {
    pub fn new(label_columns: &[&str], multi_label: bool, llm_providers: Vec<ProviderConfig>) -> Self {
        Self {
            label_columns: label_columns.iter().map(|s| s.to_string()).collect(),
            multi_label,
            llm_providers,
            encoder: EncoderSpec::default(),
            fusion: FusionConfig::default(),
            cache_dir: None,
            cache_policy: StalePolicy::Strict,
            validation_fraction: default_validation_fraction(),
            ml_batch_size: default_ml_batch_size(),
        }
    }

    pub fn schema(&self) -> Result<LabelSchema> {
        LabelSchema::new(self.label_columns.iter().cloned())
    }

    pub fn mode(&self) -> TaskMode {
        TaskMode::from_multi_label(self.multi_label)
    }

    /// Full check for training: everything in `check_shapes` plus at least
    /// one provider.
    pub fn validate(&self) -> Result<LabelSchema> {
        if self.llm_providers.is_empty() {
            return Err(Error::Config("llm_providers must list at least one provider".into()));
        }
        self.check_shapes()
    }

    fn check_shapes(&self) -> Result<LabelSchema> {
        let schema = self.schema()?;
        for p in &self.llm_providers {
            p.validate()?;
        }
        match &self.encoder {
            EncoderSpec::Hashed(enc) => {
                enc.validate()?;
                if self.fusion.lr_high <= enc.lr_small {
                    log::warn!(
                        "fusion.lr_high ({}) is not above encoder.lr_small ({}); the head is expected to adapt faster than the encoder",
                        self.fusion.lr_high,
                        enc.lr_small
                    );
                }
            }
            EncoderSpec::Frozen { path } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::Config("encoder.path must be non-empty".into()));
                }
            }
        }
        self.fusion.validate(&schema)?;
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.ml_batch_size == 0 {
            return Err(Error::Config("ml_batch_size must be >= 1".into()));
        }
        Ok(schema)
    }

    /// Opens `cache_dir` (if set) for the dataset with `fingerprint`.
    pub fn open_cache(&self, fingerprint: &str) -> Result<Option<ScoreCache>> {
        self.cache_dir
            .as_ref()
            .map(|dir| ScoreCache::open(dir, fingerprint, self.cache_policy))
            .transpose()
    }
}

/// Shared services for a pipeline call.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    /// Counts every provider call.
    pub counter: CallCounter,
    /// Where run records are persisted; `None` keeps them in memory.
    pub runs: Option<ResultsManager>,
}

impl RunContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_runs(root: impl Into<PathBuf>) -> Self {
        Self {
            counter: CallCounter::new(),
            runs: Some(ResultsManager::new(root)),
        }
    }

    fn open_run<C: Serialize>(
        &self,
        kind: &str,
        schema: &LabelSchema,
        mode: TaskMode,
        config: &C,
        fp: &str,
    ) -> Result<RunHandle> {
        match &self.runs {
            Some(mgr) => mgr.create_run(kind, schema, mode, config, fp),
            None => RunHandle::in_memory(kind, schema, mode, config, fp),
        }
    }
}

/// A trained model: configuration, encoder state and fusion head.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    config: AutoFusionConfig,
    schema: LabelSchema,
    encoder: Encoder,
    params: FusionParams,
    dataset_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    format_version: u32,
    config: AutoFusionConfig,
    dataset_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    encoder_params: Option<EncoderParams>,
    fusion_params: FusionParams,
}

impl FusionModel {
    pub fn config(&self) -> &AutoFusionConfig {
        &self.config
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn mode(&self) -> TaskMode {
        self.config.mode()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn params(&self) -> &FusionParams {
        &self.params
    }

    pub fn providers(&self) -> &[ProviderConfig] {
        &self.config.llm_providers
    }

    /// Fingerprint of the training set; the model's cache is keyed to it.
    pub fn dataset_fingerprint(&self) -> &str {
        &self.dataset_fingerprint
    }

    /// The score cache this model was trained with, if any.
    pub fn open_cache(&self) -> Result<Option<ScoreCache>> {
        if self.config.llm_providers.is_empty() {
            return Ok(None);
        }
        self.config.open_cache(&self.dataset_fingerprint)
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            format_version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            dataset_fingerprint: self.dataset_fingerprint.clone(),
            encoder_params: match &self.encoder {
                Encoder::Hashed { params, .. } => Some(params.clone()),
                Encoder::Frozen(_) => None,
            },
            fusion_params: self.params.clone(),
        };
        let mut text = serde_json::to_string_pretty(&file).expect("model serializes");
        text.push('\n');
        text
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::ModelFormat(detail) => Error::ModelFormat(format!("{}: {detail}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::ModelFormat(e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(Error::ModelFormat(format!(
                "expected format `{MODEL_FORMAT}`, found `{}`",
                file.format
            )));
        }
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        let schema = file
            .config
            .check_shapes()
            .map_err(|e| Error::ModelFormat(e.to_string()))?;
        let encoder = match (&file.config.encoder, file.encoder_params) {
            (EncoderSpec::Hashed(cfg), Some(params)) => {
                if params.buckets() != cfg.buckets || params.dim() != cfg.dim {
                    return Err(Error::ModelFormat(
                        "encoder_params shape does not match encoder config".into(),
                    ));
                }
                Encoder::Hashed {
                    config: cfg.clone(),
                    params,
                }
            }
            (EncoderSpec::Hashed(_), None) => {
                return Err(Error::ModelFormat("hashed encoder without encoder_params".into()));
            }
            (EncoderSpec::Frozen { .. }, Some(_)) => {
                return Err(Error::ModelFormat(
                    "frozen encoder must not carry encoder_params".into(),
                ));
            }
            (EncoderSpec::Frozen { path }, None) => Encoder::Frozen(load_precomputed_embeddings(path)?),
        };
        file.fusion_params
            .check()
            .map_err(|e| Error::ModelFormat(e.to_string()))?;
        let k = schema.len();
        let expected_in = encoder.dim() + file.config.llm_providers.len() * k;
        if file.fusion_params.input_width() != expected_in || file.fusion_params.output_width() != k {
            return Err(Error::ModelFormat(format!(
                "fusion network is {}->{} but the config implies {expected_in}->{k}",
                file.fusion_params.input_width(),
                file.fusion_params.output_width()
            )));
        }
        Ok(Self {
            config: file.config,
            schema,
            encoder,
            params: file.fusion_params,
            dataset_fingerprint: file.dataset_fingerprint,
        })
    }
}

/// Output of a training run.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub model: FusionModel,
    pub record: RunRecord,
}

/// Output of an evaluation run.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
    pub record: RunRecord,
}

/// Trains a fusion model on `ds`, which must carry a target on every row.
pub fn fit(ds: &Dataset, cfg: &AutoFusionConfig, ctx: &RunContext) -> Result<Fitted> {
    cfg.validate()?;
    train(ds, cfg, ctx, "fit")
}

/// Encoder-only baseline: the same encoder and training loop with no
/// provider scores and a linear head.
pub fn fit_encoder_only(ds: &Dataset, cfg: &AutoFusionConfig, ctx: &RunContext) -> Result<Fitted> {
    cfg.check_shapes()?;
    let mut cfg = cfg.clone();
    cfg.llm_providers.clear();
    cfg.fusion.hidden_sizes.clear();
    cfg.cache_dir = None;
    train(ds, &cfg, ctx, "fit_encoder_only")
}

/// LLM-only baseline: the decision rule applied directly to provider scores
/// (averaged when there are several providers).
pub fn predict_llm_only<S: AsRef<str> + Sync>(
    texts: &[S],
    cfg: &AutoFusionConfig,
    cache: Option<&ScoreCache>,
    ctx: &RunContext,
) -> Result<Vec<Prediction>> {
    let schema = cfg.validate()?;
    let mode = cfg.mode();
    let thresholds = cfg.fusion.thresholds(&schema);
    let scores = fetch_scores(&cfg.llm_providers, texts, &schema, mode, cache, &ctx.counter)?;
    Ok(scores
        .into_iter()
        .map(|per_provider| {
            let p = per_provider.len() as f64;
            let mut mean = vec![0.0; schema.len()];
            for s in &per_provider {
                for (m, v) in mean.iter_mut().zip(&s.scores) {
                    *m += v / p;
                }
            }
            let decided = decide_scores(&mean, mode, &thresholds);
            Prediction {
                scores: ScoreVector::new(mean).expect("provider scores are finite"),
                decided,
            }
        })
        .collect())
}

/// Metrics of the LLM-only baseline on a labeled dataset.
pub fn evaluate_llm_only(
    ds: &Dataset,
    cfg: &AutoFusionConfig,
    cache: Option<&ScoreCache>,
    ctx: &RunContext,
) -> Result<MetricsReport> {
    let targets = require_targets(ds)?;
    let preds = predict_llm_only(&ds.texts(), cfg, cache, ctx)?;
    let decided: Vec<LabelVector> = preds.into_iter().map(|p| p.decided).collect();
    compute_metrics(&decided, &targets, ds.mode())
}

/// Predictions in input order. LLM scores come from `cache` when present.
pub fn predict<S: AsRef<str> + Sync>(
    model: &FusionModel,
    texts: &[S],
    cache: Option<&ScoreCache>,
    ctx: &RunContext,
) -> Result<Vec<Prediction>> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let schema = &model.schema;
    let mode = model.mode();
    let scores = fetch_scores(&model.config.llm_providers, texts, schema, mode, cache, &ctx.counter)?;
    let embeddings = model.encoder.encode_batch(texts, model.config.ml_batch_size)?;
    let thresholds = model.config.fusion.thresholds(schema);
    embeddings
        .iter()
        .zip(&scores)
        .map(|(emb, s)| {
            let input = assemble_input(emb, s, schema.len())?;
            let (logits, _) = forward(&input, &model.params)?;
            Ok(decide(logits.values(), mode, &thresholds))
        })
        .collect()
}

/// Predicts `ds`, scores the predictions against its targets and records an
/// `evaluate` run.
pub fn evaluate(model: &FusionModel, ds: &Dataset, cache: Option<&ScoreCache>, ctx: &RunContext) -> Result<Evaluation> {
    if ds.schema() != model.schema() || ds.mode() != model.mode() {
        return Err(Error::Data(
            "evaluation dataset labels or mode differ from the model's".into(),
        ));
    }
    let targets = require_targets(ds)?;
    let predictions = predict(model, &ds.texts(), cache, ctx)?;
    let decided: Vec<LabelVector> = predictions.iter().map(|p| p.decided.clone()).collect();
    let report = compute_metrics(&decided, &targets, ds.mode())?;

    let mut run = ctx.open_run(
        "evaluate",
        model.schema(),
        model.mode(),
        &model.config,
        &dataset_fingerprint(ds),
    )?;
    run.store_predictions(prediction_rows(0..ds.len(), &predictions, ds))?;
    let record = run.finalize(report.clone())?;
    Ok(Evaluation {
        report,
        predictions,
        record,
    })
}

/// Mean training loss of `model` over a labeled dataset.
pub fn mean_loss(model: &FusionModel, ds: &Dataset, cache: Option<&ScoreCache>, ctx: &RunContext) -> Result<f64> {
    let targets = require_targets(ds)?;
    let texts = ds.texts();
    let scores = fetch_scores(
        &model.config.llm_providers,
        &texts,
        &model.schema,
        model.mode(),
        cache,
        &ctx.counter,
    )?;
    let embeddings = model.encoder.encode_batch(&texts, model.config.ml_batch_size)?;
    let mut total = 0.0;
    for ((emb, s), t) in embeddings.iter().zip(&scores).zip(&targets) {
        let input = assemble_input(emb, s, model.schema.len())?;
        let (logits, _) = forward(&input, &model.params)?;
        total += loss_and_grad(model.mode(), logits.values(), t)?.0;
    }
    Ok(total / ds.len() as f64)
}

fn require_targets(ds: &Dataset) -> Result<Vec<LabelVector>> {
    if ds.is_empty() {
        return Err(Error::InvalidDataset(vec!["dataset has no rows".into()]));
    }
    let missing: Vec<String> = ds
        .rows()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.target.is_none())
        .map(|(i, _)| format!("row {i}: missing target"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::InvalidDataset(missing));
    }
    let violations = validate_dataset(ds);
    if !violations.is_empty() {
        return Err(Error::InvalidDataset(
            violations.iter().map(|v| v.to_string()).collect(),
        ));
    }
    Ok(ds
        .rows()
        .iter()
        .map(|r| r.target.clone().expect("checked above"))
        .collect())
}

/// Per text, one score vector per provider (provider order).
fn fetch_scores<S: AsRef<str> + Sync>(
    providers: &[ProviderConfig],
    texts: &[S],
    schema: &LabelSchema,
    mode: TaskMode,
    cache: Option<&ScoreCache>,
    counter: &CallCounter,
) -> Result<Vec<Vec<LlmScore>>> {
    let mut per_text: Vec<Vec<LlmScore>> = vec![Vec::with_capacity(providers.len()); texts.len()];
    for pcfg in providers {
        let scorer = build_scorer(pcfg, counter.clone())?;
        let scores = score_batch(scorer.as_ref(), texts, schema, mode, cache)?;
        let unparsed = scores.iter().filter(|s| !s.parse_ok).count();
        if unparsed > 0 {
            log::warn!(
                "{}/{}: {unparsed} of {} replies had no usable scores; uniform scores used",
                pcfg.provider_id.as_str(),
                pcfg.model_name,
                texts.len()
            );
        }
        for (slot, s) in per_text.iter_mut().zip(scores) {
            slot.push(s);
        }
    }
    Ok(per_text)
}

fn loss_and_grad(mode: TaskMode, logits: &[f64], target: &LabelVector) -> Result<(f64, Vec<f64>)> {
    match mode {
        TaskMode::MultiClass => {
            let idx = target
                .single()
                .ok_or_else(|| Error::InvalidArgument("multi-class target must have one active label".into()))?;
            multiclass_loss_grad(logits, idx)
        }
        TaskMode::MultiLabel => multilabel_loss_grad(logits, target),
    }
}

fn prediction_rows(rows: impl IntoIterator<Item = usize>, preds: &[Prediction], ds: &Dataset) -> Vec<PredictionRow> {
    rows.into_iter()
        .zip(preds)
        .map(|(row, p)| PredictionRow {
            row,
            scores: p.scores.values().to_vec(),
            decided: p.decided.clone(),
            target: ds.rows()[row].target.clone(),
        })
        .collect()
}

fn train(ds: &Dataset, cfg: &AutoFusionConfig, ctx: &RunContext, kind: &str) -> Result<Fitted> {
    let schema = cfg.schema()?;
    let mode = cfg.mode();
    if ds.schema() != &schema || ds.mode() != mode {
        return Err(Error::Config(format!(
            "dataset has labels {:?} ({}) but the config expects {:?} ({mode})",
            ds.schema().labels(),
            ds.mode(),
            schema.labels()
        )));
    }
    let targets = require_targets(ds)?;
    let fingerprint = dataset_fingerprint(ds);
    let k = schema.len();
    let n = ds.len();
    let texts = ds.texts();
    let fcfg = &cfg.fusion;

    let cache = if cfg.llm_providers.is_empty() {
        None
    } else {
        cfg.open_cache(&fingerprint)?
    };
    let scores = fetch_scores(&cfg.llm_providers, &texts, &schema, mode, cache.as_ref(), &ctx.counter)?;

    let mut encoder = match &cfg.encoder {
        EncoderSpec::Hashed(enc) => Encoder::hashed(enc.clone(), fcfg.seed)?,
        EncoderSpec::Frozen { path } => Encoder::Frozen(load_precomputed_embeddings(path)?),
    };
    let dim = encoder.dim();
    // Hashed: features are fixed, embeddings move with the projection.
    // Frozen: embeddings are fixed.
    let features: Vec<Option<Vec<(usize, f64)>>> = texts.iter().map(|t| encoder.features(t)).collect();
    let frozen: Vec<Embedding> = if encoder.is_trainable() {
        Vec::new()
    } else {
        encoder.encode_batch(&texts, cfg.ml_batch_size)?
    };
    let lr_small = match &cfg.encoder {
        EncoderSpec::Hashed(enc) => enc.lr_small,
        EncoderSpec::Frozen { .. } => 0.0,
    };

    let mut params = FusionParams::init(dim + cfg.llm_providers.len() * k, &fcfg.hidden_sizes, k, fcfg.seed);
    let thresholds = fcfg.thresholds(&schema);

    let mut rng = ChaCha8Rng::seed_from_u64(fcfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = (n as f64 * cfg.validation_fraction).floor() as usize;
    let mut val_idx = order[..n_val].to_vec();
    val_idx.sort_unstable();
    let mut train_idx = order[n_val..].to_vec();

    let mut run = ctx.open_run(kind, &schema, mode, cfg, &fingerprint)?;
    log::info!(
        "training on {} rows ({} held out), {} epochs, input width {}",
        train_idx.len(),
        val_idx.len(),
        fcfg.epochs,
        params.input_width()
    );

    let embed = |i: usize, encoder: &Encoder| -> Embedding {
        match (encoder, &features[i]) {
            (Encoder::Hashed { params, .. }, Some(f)) => project(f, params),
            _ => frozen[i].clone(),
        }
    };
    let predict_rows = |rows: &[usize], encoder: &Encoder, params: &FusionParams| -> Result<Vec<Prediction>> {
        rows.iter()
            .map(|&i| {
                let input = assemble_input(&embed(i, encoder), &scores[i], k)?;
                let (logits, _) = forward(&input, params)?;
                Ok(decide(logits.values(), mode, &thresholds))
            })
            .collect()
    };
    let metrics_on = |rows: &[usize], preds: &[Prediction]| -> Result<MetricsReport> {
        let decided: Vec<LabelVector> = preds.iter().map(|p| p.decided.clone()).collect();
        let t: Vec<LabelVector> = rows.iter().map(|&i| targets[i].clone()).collect();
        compute_metrics(&decided, &t, mode)
    };

    for epoch in 1..=fcfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut total_loss = 0.0;
        for batch in train_idx.chunks(fcfg.train_batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grads = crate::fusion::GradientBundle::zeros_like(&params, dim);
            let mut enc_grads = match &encoder {
                Encoder::Hashed { params, .. } => Some(ProjectionGrad::zeros(params.buckets(), params.dim())),
                Encoder::Frozen(_) => None,
            };
            for &i in batch {
                let input = assemble_input(&embed(i, &encoder), &scores[i], k)?;
                let (logits, trace) = forward(&input, &params)?;
                let (loss, d_logits) = loss_and_grad(mode, logits.values(), &targets[i])?;
                total_loss += loss;
                let g = backward(&trace, &params, &d_logits)?;
                grads.add_scaled(&g, scale);
                if let (Some(eg), Some(f)) = (enc_grads.as_mut(), &features[i]) {
                    eg.accumulate(f, &g.d_embedding, scale);
                }
            }
            fusion_step(&mut params, &grads, fcfg.lr_high)?;
            if let (Encoder::Hashed { params: enc_params, .. }, Some(eg)) = (&mut encoder, &enc_grads) {
                encoder_gradient_step(enc_params, eg, lr_small)?;
            }
        }
        let train_loss = total_loss / train_idx.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::State(format!(
                "training diverged at epoch {epoch} (loss {train_loss})"
            )));
        }
        let validation = if val_idx.is_empty() {
            None
        } else {
            Some(metrics_on(&val_idx, &predict_rows(&val_idx, &encoder, &params)?)?)
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.6}{}",
            validation
                .as_ref()
                .map(|m| format!(", validation accuracy {:.4}", m.accuracy))
                .unwrap_or_default()
        );
        run.log_epoch(EpochLog {
            epoch,
            train_loss,
            validation,
        })?;
    }

    // The record's predictions and metrics cover the validation rows, or
    // the training rows when nothing was held out.
    let mut report_rows = if val_idx.is_empty() {
        train_idx.clone()
    } else {
        val_idx.clone()
    };
    report_rows.sort_unstable();
    let preds = predict_rows(&report_rows, &encoder, &params)?;
    let metrics = metrics_on(&report_rows, &preds)?;
    run.store_predictions(prediction_rows(report_rows.iter().copied(), &preds, ds))?;
    let record = run.finalize(metrics)?;

    Ok(Fitted {
        model: FusionModel {
            config: cfg.clone(),
            schema,
            encoder,
            params,
            dataset_fingerprint: fingerprint,
        },
        record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TextExample;
    use crate::llm::ProviderKind;

    fn toy(dir: &Path) -> (Dataset, AutoFusionConfig) {
        let rows = [
            ("great product, love it", 0),
            ("awful, broke in a day", 1),
            ("fantastic value", 0),
            ("terrible support", 1),
            ("love the design", 0),
            ("worst purchase ever", 1),
        ];
        let table: String = rows
            .iter()
            .map(|(t, c)| format!("{t}\t{}\t{}\n", (*c == 0) as u8, (*c == 1) as u8))
            .collect();
        let table_path = dir.join("mock.tsv");
        fs::write(&table_path, table).unwrap();
        let schema = LabelSchema::new(["pos", "neg"]).unwrap();
        let ds = Dataset::new(
            schema,
            TaskMode::MultiClass,
            rows.iter()
                .map(|(t, c)| TextExample::labeled(*t, LabelVector::one_hot(2, *c)))
                .collect(),
        );
        let mut cfg = AutoFusionConfig::new(&["pos", "neg"], false, vec![ProviderConfig::mock(&table_path)]);
        cfg.encoder = EncoderSpec::Hashed(EncoderConfig {
            dim: 8,
            buckets: 256,
            ..EncoderConfig::default()
        });
        cfg.fusion.hidden_sizes = vec![8];
        cfg.fusion.epochs = 30;
        cfg.fusion.train_batch_size = 2;
        cfg.fusion.lr_high = 0.2;
        cfg.validation_fraction = 0.0;
        (ds, cfg)
    }

    #[test]
    fn fit_learns_the_toy_set() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, cfg) = toy(dir.path());
        let fitted = fit(&ds, &cfg, &RunContext::new()).unwrap();
        assert_eq!(fitted.record.epochs.len(), 30);
        assert!(fitted.record.epochs[29].train_loss < fitted.record.epochs[0].train_loss);
        let eval = evaluate(&fitted.model, &ds, None, &RunContext::new()).unwrap();
        assert_eq!(eval.report.accuracy, 1.0);
    }

    #[test]
    fn model_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, cfg) = toy(dir.path());
        let model = fit(&ds, &cfg, &RunContext::new()).unwrap().model;
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = FusionModel::load(&path).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(loaded.to_json(), model.to_json());
        let ctx = RunContext::new();
        assert_eq!(
            predict(&loaded, &ds.texts(), None, &ctx).unwrap(),
            predict(&model, &ds.texts(), None, &ctx).unwrap()
        );
    }

    #[test]
    fn corrupt_model_is_a_format_error() {
        assert!(matches!(
            FusionModel::from_json("{\"format\": 1"),
            Err(Error::ModelFormat(_))
        ));
        assert!(matches!(FusionModel::from_json("{}"), Err(Error::ModelFormat(_))));
    }

    #[test]
    fn empty_dataset_is_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, cfg) = toy(dir.path());
        let empty = Dataset::new(ds.schema().clone(), ds.mode(), vec![]);
        assert!(matches!(
            fit(&empty, &cfg, &RunContext::new()),
            Err(Error::InvalidDataset(_))
        ));
    }

    #[test]
    fn unlabeled_rows_cannot_be_trained_or_evaluated() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, cfg) = toy(dir.path());
        let mut rows = ds.rows().to_vec();
        rows.push(TextExample::unlabeled("no label"));
        let ds2 = Dataset::new(ds.schema().clone(), ds.mode(), rows);
        assert!(matches!(
            fit(&ds2, &cfg, &RunContext::new()),
            Err(Error::InvalidDataset(_))
        ));
    }

    #[test]
    fn predict_empty_and_cached() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, mut cfg) = toy(dir.path());
        cfg.cache_dir = Some(dir.path().join("cache"));
        let ctx = RunContext::new();
        let model = fit(&ds, &cfg, &ctx).unwrap().model;
        assert_eq!(ctx.counter.get(), ds.len());
        assert!(predict::<&str>(&model, &[], None, &ctx).unwrap().is_empty());
        let cache = model.open_cache().unwrap();
        predict(&model, &ds.texts(), cache.as_ref(), &ctx).unwrap();
        assert_eq!(ctx.counter.get(), ds.len());
    }

    #[test]
    fn baselines_run() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, cfg) = toy(dir.path());
        let ctx = RunContext::new();
        let enc = fit_encoder_only(&ds, &cfg, &ctx).unwrap();
        assert!(enc.model.providers().is_empty());
        assert_eq!(enc.model.params().layers().len(), 1);
        assert_eq!(ctx.counter.get(), 0);
        let llm = evaluate_llm_only(&ds, &cfg, None, &ctx).unwrap();
        assert_eq!(llm.accuracy, 1.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AutoFusionConfig::new(&["a", "b"], false, vec![ProviderConfig::new(ProviderKind::Mock)]);
        assert!(cfg.validate().is_ok());
        cfg.validation_fraction = 1.0;
        assert!(cfg.validate().is_err());
        let cfg = AutoFusionConfig::new(&["a", "b"], false, vec![]);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = AutoFusionConfig::new(&["a", "a"], false, vec![ProviderConfig::new(ProviderKind::Mock)]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_shape() {
        let mut cfg = AutoFusionConfig::new(&["a", "b"], true, vec![ProviderConfig::new(ProviderKind::Mock)]);
        cfg.encoder = EncoderSpec::Frozen { path: "emb.tsv".into() };
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(v["encoder"]["kind"], "frozen");
        let back: AutoFusionConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);

        let v = serde_json::json!({
            "label_columns": ["a", "b"], "multi_label": false, "llm_providers": [],
            "encoder": {"kind": "hashed", "dim": 16}
        });
        let cfg: AutoFusionConfig = serde_json::from_value(v).unwrap();
        assert_eq!(
            cfg.encoder,
            EncoderSpec::Hashed(EncoderConfig {
                dim: 16,
                ..EncoderConfig::default()
            })
        );
        let bad = serde_json::json!({
            "label_columns": ["a", "b"], "multi_label": false, "llm_providers": [],
            "encoder": {"kind": "hashed", "dimm": 16}
        });
        assert!(serde_json::from_value::<AutoFusionConfig>(bad).is_err());
    }
}

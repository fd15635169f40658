//! Learned fusion of LLM per-class scores with a trainable text encoder.
//!
//! A [`FusionModel`] concatenates an encoder embedding with the score
//! vectors of one or more LLM providers and feeds them to a small MLP. The
//! head and the encoder are trained jointly from one loss with separate
//! learning rates. Both multi-class (softmax) and multi-label (sigmoid)
//! tasks are supported.
//!
//! ```no_run
//! use labelfusion::{fit, predict, AutoFusionConfig, Dataset, ProviderConfig, RunContext};
//! # fn main() -> labelfusion::Result<()> {
//! # let ds: Dataset = unimplemented!();
//! let cfg = AutoFusionConfig::new(&["positive", "negative", "neutral"], false, vec![ProviderConfig::mock("scores.tsv")]);
//! let ctx = RunContext::new();
//! let fitted = fit(&ds, &cfg, &ctx)?;
//! let preds = predict(&fitted.model, &["This is amazing!"], None, &ctx)?;
//! # Ok(()) }
//! ```

pub mod cache;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod results;
pub mod synthetic;

pub use cache::{CacheEntry, CacheKey, ScoreCache, StalePolicy};
pub use dataset::{
    dataset_fingerprint, read_csv, read_csv_texts, validate_dataset, Dataset, LabelSchema, LabelVector, ScoreVector,
    TaskMode, TextExample, Violation,
};
pub use encoder::{Embedding, Encoder, EncoderConfig, EncoderParams, FrozenEncoder};
pub use error::{Error, ErrorCategory, Result};
pub use fusion::{FusionConfig, FusionParams, Logits, Prediction};
pub use llm::{CallCounter, LlmScore, ProviderConfig, ProviderKind, Scorer};
pub use metrics::{compute_metrics, AccuracyKind, LabelMetrics, MetricsReport};
pub use pipeline::{
    evaluate, evaluate_llm_only, fit, fit_encoder_only, mean_loss, predict, predict_llm_only, AutoFusionConfig,
    EncoderSpec, Evaluation, Fitted, FusionModel, RunContext,
};
pub use results::{write_prediction_csv, Comparison, EpochLog, PredictionRow, ResultsManager, RunHandle, RunRecord};

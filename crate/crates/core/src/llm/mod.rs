//! Per-class scores from chat LLMs: prompt construction, reply parsing,
//! HTTP providers with retries, a table-driven mock, and batched scoring.

mod chat;
mod mock;
mod parse;
mod prompt;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheEntry, CacheKey, ScoreCache};
use crate::dataset::{LabelSchema, TaskMode};
use crate::error::{Error, Result};

pub use chat::{ChatScorer, ChatTransport, HttpReply, UreqTransport};
pub use mock::{load_mock_table, MockScorer};
pub use parse::parse_scores;
pub use prompt::{build_prompt, template_digest, PROMPT_TEMPLATE_VERSION, TEXT_CLOSE, TEXT_OPEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProviderKind {
    #[serde(rename = "openai-compatible", alias = "openai")]
    OpenAi,
    #[serde(rename = "gemini-compatible", alias = "gemini")]
    Gemini,
    #[serde(rename = "deepseek-compatible", alias = "deepseek")]
    DeepSeek,
    #[serde(rename = "mock")]
    Mock,
}

impl ProviderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProviderKind::OpenAi => "openai-compatible",
            ProviderKind::Gemini => "gemini-compatible",
            ProviderKind::DeepSeek => "deepseek-compatible",
            ProviderKind::Mock => "mock",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "openai" | "openai-compatible" => Ok(ProviderKind::OpenAi),
            "gemini" | "gemini-compatible" => Ok(ProviderKind::Gemini),
            "deepseek" | "deepseek-compatible" => Ok(ProviderKind::DeepSeek),
            "mock" => Ok(ProviderKind::Mock),
            other => Err(Error::Config(format!(
                "unknown llm provider `{other}` (expected openai, gemini, deepseek or mock)"
            ))),
        }
    }

    fn defaults(self) -> (&'static str, &'static str, &'static str) {
        // (model, endpoint, api key variable); all speak chat-completions.
        match self {
            ProviderKind::OpenAi => (
                "gpt-4o-mini",
                "https://api.openai.com/v1/chat/completions",
                "OPENAI_API_KEY",
            ),
            ProviderKind::Gemini => (
                "gemini-2.0-flash",
                "https://generativelanguage.googleapis.com/v1beta/openai/chat/completions",
                "GEMINI_API_KEY",
            ),
            ProviderKind::DeepSeek => (
                "deepseek-chat",
                "https://api.deepseek.com/chat/completions",
                "DEEPSEEK_API_KEY",
            ),
            ProviderKind::Mock => ("mock", "", ""),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub provider_id: ProviderKind,
    pub model_name: String,
    pub endpoint_url: String,
    /// Name of the environment variable holding the API key. Keys themselves
    /// are never stored in configs or model files.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub llm_batch_size: usize,
    pub timeout_ms: u64,
    /// Lookup table for the mock provider (`text<TAB>K scores` per line).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_table: Option<PathBuf>,
}

impl ProviderConfig {
    pub fn new(kind: ProviderKind) -> Self {
        let (model, endpoint, key_env) = kind.defaults();
        Self {
            provider_id: kind,
            model_name: model.into(),
            endpoint_url: endpoint.into(),
            api_key_env: key_env.into(),
            temperature: 0.0,
            max_retries: 3,
            backoff_base_ms: 500,
            llm_batch_size: 8,
            timeout_ms: 30_000,
            mock_table: None,
        }
    }

    pub fn mock(table: impl Into<PathBuf>) -> Self {
        Self {
            mock_table: Some(table.into()),
            ..Self::new(ProviderKind::Mock)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.llm_batch_size == 0 {
            return Err(Error::Config("llm_batch_size must be >= 1".into()));
        }
        if self.model_name.is_empty() {
            return Err(Error::Config("model_name must be non-empty".into()));
        }
        if self.provider_id != ProviderKind::Mock {
            if self.endpoint_url.is_empty() {
                return Err(Error::Config(format!(
                    "{} needs an endpoint_url",
                    self.provider_id.as_str()
                )));
            }
            if self.api_key_env.is_empty() {
                return Err(Error::Config(format!(
                    "{} needs api_key_env",
                    self.provider_id.as_str()
                )));
            }
        }
        Ok(())
    }
}

/// One provider's scores for one text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmScore {
    pub scores: Vec<f64>,
    pub parse_ok: bool,
    /// First 256 characters of the raw reply.
    pub raw_excerpt: String,
}

impl LlmScore {
    pub fn fallback(k: usize, raw_excerpt: String) -> Self {
        Self {
            scores: vec![1.0 / k as f64; k],
            parse_ok: false,
            raw_excerpt,
        }
    }
}

impl AsRef<[f64]> for LlmScore {
    fn as_ref(&self) -> &[f64] {
        &self.scores
    }
}

/// Shared count of provider calls, for observing cache effectiveness.
#[derive(Debug, Clone, Default)]
pub struct CallCounter(Arc<AtomicUsize>);

impl CallCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }

    pub(crate) fn incr(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }
}

pub trait Scorer: Send + Sync {
    fn provider_id(&self) -> &str;
    fn model_name(&self) -> &str;
    /// Maximum concurrent in-flight requests.
    fn batch_size(&self) -> usize;
    fn score(&self, text: &str, schema: &LabelSchema, mode: TaskMode) -> Result<LlmScore>;
}

/// Builds the scorer a provider config describes. Every provider call made
/// through it is counted on `counter`.
pub fn build_scorer(pcfg: &ProviderConfig, counter: CallCounter) -> Result<Box<dyn Scorer>> {
    pcfg.validate()?;
    match pcfg.provider_id {
        ProviderKind::Mock => {
            let path = pcfg
                .mock_table
                .as_ref()
                .ok_or_else(|| Error::Config("the mock provider needs a mock_table file".into()))?;
            let table = load_mock_table(path)?;
            Ok(Box::new(MockScorer::new(pcfg.clone(), table, counter)))
        }
        _ => {
            let transport = UreqTransport::new(std::time::Duration::from_millis(pcfg.timeout_ms));
            Ok(Box::new(ChatScorer::new(pcfg.clone(), transport, counter)))
        }
    }
}

pub fn score_text(text: &str, schema: &LabelSchema, mode: TaskMode, pcfg: &ProviderConfig) -> Result<LlmScore> {
    build_scorer(pcfg, CallCounter::new())?.score(text, schema, mode)
}

/// Scores every text, cache first. Misses go to the provider at most
/// `scorer.batch_size()` at a time; fresh results are written back to the
/// cache. Output order matches input order.
///
/// Any failure fails the whole batch with the failing row indices. Cache
/// write failures are logged and otherwise ignored.
pub fn score_batch<S: AsRef<str> + Sync>(
    scorer: &dyn Scorer,
    texts: &[S],
    schema: &LabelSchema,
    mode: TaskMode,
    cache: Option<&ScoreCache>,
) -> Result<Vec<LlmScore>> {
    let mut out: Vec<Option<LlmScore>> = vec![None; texts.len()];
    let digest = template_digest(schema, mode);
    let keys: Vec<Option<CacheKey>> = texts
        .iter()
        .map(|t| cache.map(|_| CacheKey::for_text(scorer.provider_id(), scorer.model_name(), &digest, t.as_ref())))
        .collect();

    if let Some(cache) = cache {
        for (slot, key) in out.iter_mut().zip(&keys) {
            let key = key.as_ref().expect("keys exist when a cache is given");
            if let Some(entry) = cache.get(key) {
                if entry.scores.len() == schema.len() {
                    *slot = Some(LlmScore {
                        scores: entry.scores,
                        parse_ok: entry.parse_ok,
                        raw_excerpt: String::new(),
                    });
                }
            }
        }
    }

    let misses: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
    let mut failures: Vec<(usize, Error)> = Vec::new();
    for chunk in misses.chunks(scorer.batch_size().max(1)) {
        let results: Vec<(usize, Result<LlmScore>)> = if chunk.len() == 1 {
            vec![(chunk[0], scorer.score(texts[chunk[0]].as_ref(), schema, mode))]
        } else {
            thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&i| (i, s.spawn(move || scorer.score(texts[i].as_ref(), schema, mode))))
                    .collect();
                handles
                    .into_iter()
                    .map(|(i, h)| {
                        (
                            i,
                            h.join()
                                .unwrap_or_else(|_| Err(Error::State("scoring thread panicked".into()))),
                        )
                    })
                    .collect()
            })
        };
        for (i, result) in results {
            match result {
                Ok(score) => {
                    if let (Some(cache), Some(key)) = (cache, &keys[i]) {
                        let entry =
                            CacheEntry::new(key.clone(), score.scores.clone(), score.parse_ok, cache.fingerprint());
                        if let Err(e) = cache.put(&entry) {
                            log::warn!("continuing without caching row {i}: {e}");
                        }
                    }
                    out[i] = Some(score);
                }
                Err(e) => failures.push((i, e)),
            }
        }
    }

    if !failures.is_empty() {
        failures.sort_by_key(|(i, _)| *i);
        if let Some(pos) = failures.iter().position(|(_, e)| matches!(e, Error::Config(_))) {
            return Err(failures.swap_remove(pos).1);
        }
        let failed = failures.iter().map(|(i, _)| *i).collect();
        let first = failures.swap_remove(0).1;
        return Err(Error::BatchFailed {
            provider: scorer.provider_id().to_string(),
            failed,
            first: Box::new(first),
        });
    }
    Ok(out.into_iter().map(|s| s.expect("every row scored")).collect())
}

use std::time::Duration;

use serde_json::{json, Value};

use super::{build_prompt, parse_scores, CallCounter, LlmScore, ProviderConfig, Scorer};
use crate::dataset::{LabelSchema, TaskMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// Minimal HTTP surface the chat scorer needs. `Err` means the request never
/// produced a status (connect failure, timeout, ...).
pub trait ChatTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer_token: &str, body: &str) -> std::result::Result<HttpReply, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl ChatTransport for UreqTransport {
    fn post_json(&self, url: &str, bearer_token: &str, body: &str) -> std::result::Result<HttpReply, String> {
        let response = self
            .agent
            .post(url)
            .header("Authorization", &format!("Bearer {bearer_token}"))
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let body = response.into_body().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

/// Scores through an OpenAI-style chat-completions endpoint.
///
/// Transport errors and non-2xx statuses are retried up to `max_retries`
/// times; after failed attempt `a` (0-based) it waits
/// `backoff_base_ms * 2^a` milliseconds.
pub struct ChatScorer<T> {
    cfg: ProviderConfig,
    transport: T,
    counter: CallCounter,
    sleep: fn(Duration),
}

impl<T: ChatTransport> ChatScorer<T> {
    pub fn new(cfg: ProviderConfig, transport: T, counter: CallCounter) -> Self {
        Self {
            cfg,
            transport,
            counter,
            sleep: std::thread::sleep,
        }
    }

    /// Replaces the backoff sleep (tests use a no-op or recorder).
    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn backoff(&self, failed_attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(failed_attempt).unwrap_or(u64::MAX);
        Duration::from_millis(self.cfg.backoff_base_ms.saturating_mul(factor))
    }

    fn request_body(&self, prompt: &str) -> String {
        json!({
            "model": self.cfg.model_name,
            "temperature": self.cfg.temperature,
            "messages": [{ "role": "user", "content": prompt }],
        })
        .to_string()
    }
}

/// The assistant message content of a chat-completions reply, or the raw
/// body when it is not shaped like one.
fn reply_content(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| {
            v.pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .map(str::to_string)
        })
        .unwrap_or_else(|| body.to_string())
}

impl<T: ChatTransport> Scorer for ChatScorer<T> {
    fn provider_id(&self) -> &str {
        self.cfg.provider_id.as_str()
    }

    fn model_name(&self) -> &str {
        &self.cfg.model_name
    }

    fn batch_size(&self) -> usize {
        self.cfg.llm_batch_size
    }

    fn score(&self, text: &str, schema: &LabelSchema, mode: TaskMode) -> Result<LlmScore> {
        let key = std::env::var(&self.cfg.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| {
                Error::Config(format!(
                    "environment variable {} (API key for {}) is not set",
                    self.cfg.api_key_env,
                    self.cfg.provider_id.as_str()
                ))
            })?;
        let body = self.request_body(&build_prompt(text, schema, mode));

        let attempts = self.cfg.max_retries + 1;
        let mut last_status = None;
        let mut detail = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                (self.sleep)(self.backoff(attempt - 1));
            }
            self.counter.incr();
            match self.transport.post_json(&self.cfg.endpoint_url, &key, &body) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return Ok(parse_scores(&reply_content(&reply.body), schema));
                }
                Ok(reply) => {
                    log::debug!(
                        "{}: status {} on attempt {}",
                        self.provider_id(),
                        reply.status,
                        attempt + 1
                    );
                    last_status = Some(reply.status);
                    detail = reply.body.chars().take(200).collect();
                }
                Err(e) => {
                    log::debug!(
                        "{}: transport error on attempt {}: {e}",
                        self.provider_id(),
                        attempt + 1
                    );
                    detail = e;
                }
            }
        }
        Err(Error::ProviderUnavailable {
            provider: self.provider_id().to_string(),
            attempts,
            last_status,
            detail,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ProviderKind;
    use std::sync::Mutex;

    struct Scripted {
        replies: Mutex<Vec<std::result::Result<HttpReply, String>>>,
        bodies: Mutex<Vec<String>>,
    }

    impl Scripted {
        fn new(mut replies: Vec<std::result::Result<HttpReply, String>>) -> Self {
            replies.reverse();
            Self {
                replies: Mutex::new(replies),
                bodies: Mutex::new(Vec::new()),
            }
        }
    }

    impl ChatTransport for Scripted {
        fn post_json(&self, _: &str, token: &str, body: &str) -> std::result::Result<HttpReply, String> {
            assert_eq!(token, "sk-test");
            self.bodies.lock().unwrap().push(body.to_string());
            self.replies.lock().unwrap().pop().expect("script exhausted")
        }
    }

    fn status(code: u16, body: &str) -> std::result::Result<HttpReply, String> {
        Ok(HttpReply {
            status: code,
            body: body.into(),
        })
    }

    fn completion(content: &str) -> String {
        json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string()
    }

    fn cfg(env: &str, max_retries: u32) -> ProviderConfig {
        let mut cfg = ProviderConfig::new(ProviderKind::DeepSeek);
        cfg.api_key_env = env.into();
        cfg.max_retries = max_retries;
        cfg.backoff_base_ms = 0;
        cfg
    }

    fn schema() -> LabelSchema {
        LabelSchema::new(["good", "bad"]).unwrap()
    }

    #[test]
    fn retries_until_success() {
        std::env::set_var("LF_TEST_KEY_RETRY", "sk-test");
        let transport = Scripted::new(vec![
            status(500, "oops"),
            status(500, "oops"),
            status(200, &completion(r#"{"good": 0.8, "bad": 0.2}"#)),
        ]);
        let counter = CallCounter::new();
        let scorer = ChatScorer::new(cfg("LF_TEST_KEY_RETRY", 3), transport, counter.clone());
        let s = scorer.score("nice", &schema(), TaskMode::MultiClass).unwrap();
        assert_eq!(s.scores, vec![0.8, 0.2]);
        assert!(s.parse_ok);
        assert_eq!(counter.get(), 3);

        let body: Value = serde_json::from_str(&scorer.transport.bodies.lock().unwrap()[0]).unwrap();
        assert_eq!(body["model"], "deepseek-chat");
        assert_eq!(body["temperature"], 0.0);
        assert!(body["messages"][0]["content"]
            .as_str()
            .unwrap()
            .contains("<<<TEXT\nnice\nTEXT>>>"));
    }

    #[test]
    fn no_retries_means_one_attempt() {
        std::env::set_var("LF_TEST_KEY_ONCE", "sk-test");
        let transport = Scripted::new(vec![status(503, "busy")]);
        let scorer = ChatScorer::new(cfg("LF_TEST_KEY_ONCE", 0), transport, CallCounter::new());
        match scorer.score("x", &schema(), TaskMode::MultiClass).unwrap_err() {
            Error::ProviderUnavailable {
                attempts, last_status, ..
            } => {
                assert_eq!(attempts, 1);
                assert_eq!(last_status, Some(503));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn transport_errors_are_retried() {
        std::env::set_var("LF_TEST_KEY_TRANSPORT", "sk-test");
        let transport = Scripted::new(vec![
            Err("connection reset".into()),
            status(200, &completion(r#"{"bad": 1}"#)),
        ]);
        let scorer = ChatScorer::new(cfg("LF_TEST_KEY_TRANSPORT", 1), transport, CallCounter::new());
        let s = scorer.score("x", &schema(), TaskMode::MultiClass).unwrap();
        assert_eq!(s.scores, vec![0.0, 1.0]);
    }

    #[test]
    fn missing_key_fails_before_any_call() {
        let transport = Scripted::new(vec![]);
        let counter = CallCounter::new();
        let scorer = ChatScorer::new(cfg("LF_TEST_KEY_DEFINITELY_UNSET", 3), transport, counter.clone());
        let err = scorer.score("x", &schema(), TaskMode::MultiClass).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("LF_TEST_KEY_DEFINITELY_UNSET"));
        assert_eq!(counter.get(), 0);
    }

    #[test]
    fn backoff_doubles() {
        let mut c = cfg("X", 3);
        c.backoff_base_ms = 500;
        let scorer = ChatScorer::new(c, Scripted::new(vec![]), CallCounter::new());
        assert_eq!(scorer.backoff(0), Duration::from_millis(500));
        assert_eq!(scorer.backoff(1), Duration::from_millis(1000));
        assert_eq!(scorer.backoff(2), Duration::from_millis(2000));
    }

    static SLEPT: Mutex<Vec<Duration>> = Mutex::new(Vec::new());

    fn record_sleep(d: Duration) {
        SLEPT.lock().unwrap().push(d);
    }

    #[test]
    fn sleeps_follow_the_backoff_schedule() {
        std::env::set_var("LF_TEST_KEY_SLEEP", "sk-test");
        let mut c = cfg("LF_TEST_KEY_SLEEP", 2);
        c.backoff_base_ms = 10;
        let transport = Scripted::new(vec![status(429, ""), status(429, ""), status(429, "")]);
        let scorer = ChatScorer::new(c, transport, CallCounter::new()).with_sleep(record_sleep);
        assert!(scorer.score("x", &schema(), TaskMode::MultiClass).is_err());
        assert_eq!(
            *SLEPT.lock().unwrap(),
            vec![Duration::from_millis(10), Duration::from_millis(20)]
        );
    }

    #[test]
    fn non_completion_body_is_parsed_raw() {
        assert_eq!(reply_content("plain {\"a\":1}"), "plain {\"a\":1}");
        assert_eq!(reply_content(&completion("hello")), "hello");
    }
}

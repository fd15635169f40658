use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde_json::{Map, Number, Value};

use super::{parse_scores, CallCounter, LlmScore, ProviderConfig, Scorer};
use crate::dataset::{LabelSchema, TaskMode};
use crate::error::{Error, Result};

/// Offline provider backed by a text -> scores table.
///
/// A known text is answered with a JSON object of its scores; any other text
/// gets a reply with no scores in it, which parses to the uniform fallback.
/// Both go through the same parser as real replies.
pub struct MockScorer {
    cfg: ProviderConfig,
    table: HashMap<String, Vec<f64>>,
    counter: CallCounter,
}

const NO_ANSWER: &str = "I am not able to classify this text.";

impl MockScorer {
    pub fn new(cfg: ProviderConfig, table: HashMap<String, Vec<f64>>, counter: CallCounter) -> Self {
        Self { cfg, table, counter }
    }

    fn reply(&self, text: &str, schema: &LabelSchema) -> Result<String> {
        let Some(scores) = self.table.get(text) else {
            return Ok(NO_ANSWER.to_string());
        };
        if scores.len() != schema.len() {
            return Err(Error::InvalidArgument(format!(
                "mock table has {} scores for {text:?}, schema has {} labels",
                scores.len(),
                schema.len()
            )));
        }
        let mut map = Map::new();
        for (label, &s) in schema.labels().iter().zip(scores) {
            let n = Number::from_f64(s)
                .ok_or_else(|| Error::InvalidArgument(format!("mock score {s} for {text:?} is not finite")))?;
            map.insert(label.clone(), Value::Number(n));
        }
        Ok(Value::Object(map).to_string())
    }
}

impl Scorer for MockScorer {
    fn provider_id(&self) -> &str {
        self.cfg.provider_id.as_str()
    }

    fn model_name(&self) -> &str {
        &self.cfg.model_name
    }

    fn batch_size(&self) -> usize {
        self.cfg.llm_batch_size
    }

    fn score(&self, text: &str, schema: &LabelSchema, _mode: TaskMode) -> Result<LlmScore> {
        self.counter.incr();
        Ok(parse_scores(&self.reply(text, schema)?, schema))
    }
}

/// Reads `text<TAB>s1<TAB>...<TAB>sK` lines. Blank lines are skipped and the
/// last line wins for duplicate texts.
pub fn load_mock_table(path: &Path) -> Result<HashMap<String, Vec<f64>>> {
    let content = fs::read_to_string(path).map_err(|e| Error::Config(format!("mock table {}: {e}", path.display())))?;
    let mut table = HashMap::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let text = fields.next().unwrap_or_default().to_string();
        let scores = fields
            .map(|f| f.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| {
                Error::Config(format!(
                    "mock table {} line {}: expected text followed by numeric scores",
                    path.display(),
                    i + 1
                ))
            })?;
        table.insert(text, scores);
    }
    Ok(table)
}

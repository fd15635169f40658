use serde_json::Value;

use super::LlmScore;
use crate::dataset::LabelSchema;

/// Extracts scores from a model reply.
///
/// Scans for the first JSON object in the reply that names at least one
/// label (exact match) and gives every named label a number. Numbers are
/// clamped into `[0, 1]`; labels the object leaves out score 0. A reply with
/// no such object falls back to uniform `1/K` with `parse_ok = false`.
pub fn parse_scores(response: &str, schema: &LabelSchema) -> LlmScore {
    let excerpt = excerpt(response);
    for (start, _) in response.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&response[start..]).into_iter::<Value>();
        let Some(Ok(Value::Object(map))) = stream.next() else {
            continue;
        };
        let mut scores = vec![0.0; schema.len()];
        let mut matched = 0;
        let mut well_formed = true;
        for (i, label) in schema.labels().iter().enumerate() {
            let Some(value) = map.get(label) else {
                continue;
            };
            match as_number(value) {
                Some(v) => {
                    scores[i] = v.clamp(0.0, 1.0);
                    matched += 1;
                }
                None => {
                    well_formed = false;
                    break;
                }
            }
        }
        if well_formed && matched > 0 {
            return LlmScore {
                scores,
                parse_ok: true,
                raw_excerpt: excerpt,
            };
        }
    }
    LlmScore::fallback(schema.len(), excerpt)
}

fn as_number(value: &Value) -> Option<f64> {
    let v = match value {
        Value::Number(n) => n.as_f64()?,
        Value::String(s) => s.trim().parse::<f64>().ok()?,
        _ => return None,
    };
    v.is_finite().then_some(v)
}

fn excerpt(response: &str) -> String {
    response.chars().take(256).collect()
}

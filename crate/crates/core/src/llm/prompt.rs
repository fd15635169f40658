use sha2::{Digest, Sha256};

use crate::dataset::{LabelSchema, TaskMode};

/// Bump whenever the wording below changes; it is part of every cache key.
pub const PROMPT_TEMPLATE_VERSION: &str = "labelfusion-score-prompt/1";

pub const TEXT_OPEN: &str = "<<<TEXT";
pub const TEXT_CLOSE: &str = "TEXT>>>";

/// Scoring prompt for one text. Labels are listed verbatim in schema order
/// and the reply is requested as a single flat JSON object.
pub fn build_prompt(text: &str, schema: &LabelSchema, mode: TaskMode) -> String {
    let mut p = String::with_capacity(512 + text.len());
    p.push_str("You are a text classifier. Score how well the text below fits each label.\n\n");
    p.push_str("Labels:\n");
    for label in schema.labels() {
        p.push_str("- ");
        p.push_str(label);
        p.push('\n');
    }
    p.push('\n');
    match mode {
        TaskMode::MultiClass => p.push_str(
            "Exactly one label applies. Give the single best label the highest score \
             and keep the others low.\n",
        ),
        TaskMode::MultiLabel => p.push_str(
            "The labels are independent: any number of them, including none, may apply. \
             Score each label on its own.\n",
        ),
    }
    p.push_str(
        "\nReply with only a JSON object that maps every label name above to a number \
         between 0 and 1, and nothing else. Example shape: {",
    );
    for (i, label) in schema.labels().iter().enumerate() {
        if i > 0 {
            p.push_str(", ");
        }
        p.push_str(&serde_json::Value::String(label.clone()).to_string());
        p.push_str(": 0.0");
    }
    p.push_str("}\n\n");
    p.push_str(TEXT_OPEN);
    p.push('\n');
    p.push_str(text);
    p.push('\n');
    p.push_str(TEXT_CLOSE);
    p.push('\n');
    p
}

/// Digest of everything besides the text that determines the prompt.
pub fn template_digest(schema: &LabelSchema, mode: TaskMode) -> String {
    let mut h = Sha256::new();
    for part in std::iter::once(PROMPT_TEMPLATE_VERSION)
        .chain(std::iter::once(if mode.is_multi_label() {
            "multi_label"
        } else {
            "multi_class"
        }))
        .chain(schema.labels().iter().map(String::as_str))
    {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> LabelSchema {
        LabelSchema::new(["positive", "negative", "neutral"]).unwrap()
    }

    #[test]
    fn prompt_lists_labels_and_embeds_text() {
        let p = build_prompt("hi", &schema(), TaskMode::MultiClass);
        for label in schema().labels() {
            assert!(p.contains(&format!("- {label}\n")));
        }
        assert!(p.contains("<<<TEXT\nhi\nTEXT>>>"));
        assert!(p.contains("Exactly one label applies"));
        assert_eq!(p, build_prompt("hi", &schema(), TaskMode::MultiClass));
    }

    #[test]
    fn multilabel_prompt_says_labels_are_independent() {
        let p = build_prompt("hi", &schema(), TaskMode::MultiLabel);
        assert!(p.contains("independent"));
        assert!(!p.contains("Exactly one label applies"));
    }

    #[test]
    fn brace_labels_are_listed_verbatim() {
        let s = LabelSchema::new(["{a}", "b\"c"]).unwrap();
        let p = build_prompt("x", &s, TaskMode::MultiLabel);
        assert!(p.contains("- {a}\n"));
        assert!(p.contains("- b\"c\n"));
    }

    #[test]
    fn template_digest_tracks_schema_and_mode() {
        let a = template_digest(&schema(), TaskMode::MultiClass);
        assert_eq!(a, template_digest(&schema(), TaskMode::MultiClass));
        assert_ne!(a, template_digest(&schema(), TaskMode::MultiLabel));
        let other = LabelSchema::new(["positive", "negative"]).unwrap();
        assert_ne!(a, template_digest(&other, TaskMode::MultiClass));
    }
}

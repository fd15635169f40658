//! Label schemas, examples, datasets and dataset fingerprinting.
//!
//! Every vector in the crate is positional: index `i` always refers to
//! `schema.labels()[i]`, and that binding is fixed when the schema is built.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The ordered label universe of a task. Always holds at least two unique,
/// non-empty names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSchema {
    labels: Vec<String>,
}

impl LabelSchema {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::Config(format!(
                "a label schema needs at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if label.is_empty() {
                return Err(Error::Config("label names must be non-empty".into()));
            }
            if !seen.insert(label.as_str()) {
                return Err(Error::Config(format!("duplicate label name `{label}`")));
            }
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Number of classes.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }
}

impl TryFrom<Vec<String>> for LabelSchema {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        LabelSchema::new(labels)
    }
}

impl From<LabelSchema> for Vec<String> {
    fn from(schema: LabelSchema) -> Self {
        schema.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Exactly one label per input; softmax with categorical cross-entropy.
    MultiClass,
    /// Any subset of labels per input; independent sigmoids with binary
    /// cross-entropy.
    MultiLabel,
}

impl TaskMode {
    pub fn from_multi_label(multi_label: bool) -> Self {
        if multi_label {
            TaskMode::MultiLabel
        } else {
            TaskMode::MultiClass
        }
    }

    pub fn is_multi_label(self) -> bool {
        self == TaskMode::MultiLabel
    }
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskMode::MultiClass => "multi_class",
            TaskMode::MultiLabel => "multi_label",
        })
    }
}

/// Binary membership vector over the schema's labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector(Vec<bool>);

impl LabelVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut bits = vec![false; k];
        bits[index] = true;
        Self(bits)
    }

    pub fn empty(k: usize) -> Self {
        Self(vec![false; k])
    }

    pub fn from_indices(k: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = vec![false; k];
        for i in indices {
            bits[i] = true;
        }
        Self(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// Index of the single active bit, if there is exactly one.
    pub fn single(&self) -> Option<usize> {
        let mut active = self.active();
        match (active.next(), active.next()) {
            (Some(i), None) => Some(i),
            _ => None,
        }
    }

    /// Bits as 0.0/1.0, the form the losses consume.
    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// K finite per-class values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "score vector contains non-finite value {v}"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextExample {
    pub text: String,
    pub target: Option<LabelVector>,
}

impl TextExample {
    pub fn labeled(text: impl Into<String>, target: LabelVector) -> Self {
        Self {
            text: text.into(),
            target: Some(target),
        }
    }

    pub fn unlabeled(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: LabelSchema,
    mode: TaskMode,
    rows: Vec<TextExample>,
}

impl Dataset {
    pub fn new(schema: LabelSchema, mode: TaskMode, rows: Vec<TextExample>) -> Self {
        Self { schema, mode, rows }
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn mode(&self) -> TaskMode {
        self.mode
    }

    pub fn rows(&self) -> &[TextExample] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r.text.as_str()).collect()
    }

    pub fn into_rows(self) -> Vec<TextExample> {
        self.rows
    }
}

/// A row that breaks its mode's target rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub row: usize,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {}: {}", self.row, self.rule)
    }
}

/// Reports every row whose target breaks the dataset's mode rule. Rows
/// without targets are not violations here; training checks for them.
pub fn validate_dataset(ds: &Dataset) -> Vec<Violation> {
    let k = ds.schema.len();
    let mut out = Vec::new();
    for (row, example) in ds.rows.iter().enumerate() {
        let Some(target) = &example.target else {
            continue;
        };
        if target.len() != k {
            out.push(Violation {
                row,
                rule: format!("target has {} entries but the schema has {k} labels", target.len()),
            });
            continue;
        }
        if ds.mode == TaskMode::MultiClass && target.active_count() != 1 {
            out.push(Violation {
                row,
                rule: "multi-class target must have exactly one active label".into(),
            });
        }
    }
    out
}

const FINGERPRINT_DOMAIN: &[u8] = b"labelfusion/dataset-fingerprint/v1";
const TARGET_ABSENT: u8 = 0x00;
const TARGET_PRESENT: u8 = 0x01;

/// SHA-256 over the canonical byte form of the dataset, as 64 lowercase hex
/// characters.
///
/// Canonical form, all integers little-endian `u64`, every string written as
/// its byte length followed by its UTF-8 bytes:
///
/// 1. the domain tag `labelfusion/dataset-fingerprint/v1`
/// 2. the label count, then each label name in schema order
/// 3. one mode byte: `0x00` multi-class, `0x01` multi-label
/// 4. the row count, then per row in order: the text, then either `0x00`
///    (no target) or `0x01`, the target length, and one `0x00`/`0x01` byte
///    per label
pub fn dataset_fingerprint(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    put_bytes(&mut h, FINGERPRINT_DOMAIN);
    put_len(&mut h, ds.schema.len());
    for label in ds.schema.labels() {
        put_bytes(&mut h, label.as_bytes());
    }
    h.update([match ds.mode {
        TaskMode::MultiClass => 0x00,
        TaskMode::MultiLabel => 0x01,
    }]);
    put_len(&mut h, ds.rows.len());
    for row in &ds.rows {
        put_bytes(&mut h, row.text.as_bytes());
        match &row.target {
            None => h.update([TARGET_ABSENT]),
            Some(t) => {
                h.update([TARGET_PRESENT]);
                put_len(&mut h, t.len());
                h.update(t.bits().iter().map(|&b| b as u8).collect::<Vec<_>>());
            }
        }
    }
    hex::encode(h.finalize())
}

fn put_len(h: &mut Sha256, n: usize) {
    h.update((n as u64).to_le_bytes());
}

fn put_bytes(h: &mut Sha256, bytes: &[u8]) {
    put_len(h, bytes.len());
    h.update(bytes);
}

/// Reads a labeled CSV: one text column plus one `0`/`1` column per label.
pub fn read_csv(path: &Path, text_column: &str, schema: &LabelSchema, mode: TaskMode) -> Result<Dataset> {
    let mut reader = open_csv(path)?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    let text_idx = column_index(&headers, text_column, path)?;
    let label_idx = schema
        .labels()
        .iter()
        .map(|l| column_index(&headers, l, path))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let text = record.get(text_idx).unwrap_or_default().to_string();
        let bits = label_idx
            .iter()
            .zip(schema.labels())
            .map(|(&idx, name)| {
                parse_bit(record.get(idx).unwrap_or_default()).ok_or_else(|| {
                    Error::Data(format!(
                        "{}: data row {}: column `{name}` must be 0 or 1, got {:?}",
                        path.display(),
                        i + 1,
                        record.get(idx).unwrap_or_default()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(TextExample::labeled(text, LabelVector::new(bits)));
    }
    Ok(Dataset::new(schema.clone(), mode, rows))
}

/// Reads only the text column of a CSV.
pub fn read_csv_texts(path: &Path, text_column: &str) -> Result<Vec<String>> {
    let mut reader = open_csv(path)?;
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(Error::Data(format!("{}: {e}", path.display()))),
    };
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let text_idx = column_index(&headers, text_column, path)?;
    reader
        .records()
        .map(|r| {
            r.map(|rec| rec.get(text_idx).unwrap_or_default().to_string())
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new().flexible(false).from_reader(file))
}

fn column_index(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Data(format!("{}: missing column `{name}`", path.display())))
}

fn parse_bit(cell: &str) -> Option<bool> {
    match cell.trim() {
        "1" => Some(true),
        "0" => Some(false),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema3() -> LabelSchema {
        LabelSchema::new(["positive", "negative", "neutral"]).unwrap()
    }

    fn toy(mode: TaskMode, targets: &[[bool; 3]]) -> Dataset {
        let rows = targets
            .iter()
            .enumerate()
            .map(|(i, t)| TextExample::labeled(format!("text {i}"), LabelVector::new(t.to_vec())))
            .collect();
        Dataset::new(schema3(), mode, rows)
    }

    #[test]
    fn schema_rejects_bad_label_sets() {
        assert!(LabelSchema::new(["only"]).is_err());
        assert!(LabelSchema::new(["a", "a"]).is_err());
        assert!(LabelSchema::new(["a", ""]).is_err());
        let s = LabelSchema::new(["a", "b"]).unwrap();
        assert_eq!(s.index_of("b"), Some(1));
    }

    #[test]
    fn one_hot_multiclass_rows_are_valid() {
        let ds = toy(
            TaskMode::MultiClass,
            &[[true, false, false], [false, true, false], [false, false, true]],
        );
        assert!(validate_dataset(&ds).is_empty());
    }

    #[test]
    fn multiclass_row_with_two_labels_is_reported() {
        let ds = toy(TaskMode::MultiClass, &[[true, true, false]]);
        let v = validate_dataset(&ds);
        assert_eq!(v.len(), 1);
        assert_eq!(
            v[0].to_string(),
            "row 0: multi-class target must have exactly one active label"
        );
    }

    #[test]
    fn multilabel_allows_empty_targets() {
        let ds = toy(TaskMode::MultiLabel, &[[false, false, false]]);
        assert!(validate_dataset(&ds).is_empty());
    }

    #[test]
    fn wrong_length_target_is_reported_not_raised() {
        let rows = vec![TextExample::labeled("x", LabelVector::new(vec![true]))];
        let ds = Dataset::new(schema3(), TaskMode::MultiLabel, rows);
        let v = validate_dataset(&ds);
        assert_eq!(v.len(), 1);
        assert!(v[0].rule.contains("1 entries"));
    }

    #[test]
    fn fingerprint_is_deterministic_and_content_sensitive() {
        let ds = toy(TaskMode::MultiClass, &[[true, false, false], [false, true, false]]);
        let fp = dataset_fingerprint(&ds);
        assert_eq!(fp.len(), 64);
        assert!(fp.chars().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(fp, dataset_fingerprint(&ds));

        let mut rows = ds.rows().to_vec();
        rows[1].text.push('!');
        let edited = Dataset::new(schema3(), TaskMode::MultiClass, rows);
        assert_ne!(fp, dataset_fingerprint(&edited));

        let mut rows = ds.rows().to_vec();
        rows.swap(0, 1);
        let swapped = Dataset::new(schema3(), TaskMode::MultiClass, rows);
        assert_ne!(fp, dataset_fingerprint(&swapped));
    }

    #[test]
    fn fingerprint_distinguishes_missing_targets_and_mode() {
        let labeled = toy(TaskMode::MultiLabel, &[[false, false, false]]);
        let unlabeled = Dataset::new(schema3(), TaskMode::MultiLabel, vec![TextExample::unlabeled("text 0")]);
        assert_ne!(dataset_fingerprint(&labeled), dataset_fingerprint(&unlabeled));

        let mc = Dataset::new(schema3(), TaskMode::MultiClass, labeled.rows().to_vec());
        assert_ne!(dataset_fingerprint(&labeled), dataset_fingerprint(&mc));
    }

    #[test]
    fn fingerprint_is_framed_against_field_boundary_shifts() {
        // "ab" + "c" vs "a" + "bc" must not collide.
        let a = Dataset::new(
            schema3(),
            TaskMode::MultiLabel,
            vec![TextExample::unlabeled("ab"), TextExample::unlabeled("c")],
        );
        let b = Dataset::new(
            schema3(),
            TaskMode::MultiLabel,
            vec![TextExample::unlabeled("a"), TextExample::unlabeled("bc")],
        );
        assert_ne!(dataset_fingerprint(&a), dataset_fingerprint(&b));
    }

    #[test]
    fn fingerprint_matches_frozen_value() {
        // Frozen so that any change to the canonical byte form is noticed.
        let ds = Dataset::new(
            LabelSchema::new(["a", "b"]).unwrap(),
            TaskMode::MultiClass,
            vec![TextExample::labeled("hi", LabelVector::one_hot(2, 1))],
        );
        let mut bytes = Vec::new();
        let push_str = |bytes: &mut Vec<u8>, s: &[u8]| {
            bytes.extend((s.len() as u64).to_le_bytes());
            bytes.extend(s);
        };
        push_str(&mut bytes, b"labelfusion/dataset-fingerprint/v1");
        bytes.extend(2u64.to_le_bytes());
        push_str(&mut bytes, b"a");
        push_str(&mut bytes, b"b");
        bytes.push(0);
        bytes.extend(1u64.to_le_bytes());
        push_str(&mut bytes, b"hi");
        bytes.push(1);
        bytes.extend(2u64.to_le_bytes());
        bytes.extend([0u8, 1u8]);
        assert_eq!(dataset_fingerprint(&ds), hex::encode(Sha256::digest(&bytes)));
    }

    #[test]
    fn csv_round_trip_and_missing_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        std::fs::write(
            &path,
            "text,positive,negative,neutral\ngreat,1,0,0\n\"meh, ok\",0,0,1\n",
        )
        .unwrap();
        let ds = read_csv(&path, "text", &schema3(), TaskMode::MultiClass).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.rows()[1].text, "meh, ok");
        assert_eq!(ds.rows()[1].target.as_ref().unwrap().single(), Some(2));

        let schema = LabelSchema::new(["positive", "mixed"]).unwrap();
        let err = read_csv(&path, "text", &schema, TaskMode::MultiClass).unwrap_err();
        assert!(err.to_string().contains("`mixed`"));
    }
}

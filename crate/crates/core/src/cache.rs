//! On-disk store of LLM scores, guarded by a dataset fingerprint.
//!
//! Layout under the cache root:
//!
//! ```text
//! manifest.json            {"format_version": 1, "dataset_fingerprint": "<64 hex>"}
//! <xx>/<name>.json         one entry per key
//! ```
//!
//! `<name>` is the SHA-256 (hex) of the key string and `<xx>` its first two
//! hex characters, giving 256 shard directories. The key string joins four
//! lowercase-hex parts with dots: hex(UTF-8 provider id), hex(UTF-8 model
//! name), the prompt template digest, and SHA-256 of the text.
//!
//! Entry files are JSON objects with the fields `format_version`, `key`
//! (`provider_id`, `model_name`, `prompt_template_digest`, `text_digest`),
//! `scores`, `parse_ok`, `created_at` (RFC 3339, UTC) and
//! `dataset_fingerprint`. Writes go to a temporary file in the shard
//! directory which is then renamed over the entry.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CACHE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StalePolicy {
    /// A fingerprint mismatch refuses to open the cache.
    #[default]
    Strict,
    /// A fingerprint mismatch opens the cache, but entries recorded for
    /// another fingerprint read as misses until overwritten.
    Warn,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheKey {
    pub provider_id: String,
    pub model_name: String,
    pub prompt_template_digest: String,
    pub text_digest: String,
}

impl CacheKey {
    pub fn new(
        provider_id: impl Into<String>,
        model_name: impl Into<String>,
        prompt_template_digest: impl Into<String>,
        text_digest: impl Into<String>,
    ) -> Result<Self> {
        let key = Self {
            provider_id: provider_id.into(),
            model_name: model_name.into(),
            prompt_template_digest: prompt_template_digest.into(),
            text_digest: text_digest.into(),
        };
        if key.provider_id.is_empty()
            || key.model_name.is_empty()
            || key.prompt_template_digest.is_empty()
            || key.text_digest.is_empty()
        {
            return Err(Error::InvalidArgument("cache key parts must be non-empty".into()));
        }
        Ok(key)
    }

    /// Key for `text`, hashing the text itself.
    pub fn for_text(provider_id: &str, model_name: &str, template_digest: &str, text: &str) -> Self {
        Self {
            provider_id: provider_id.to_string(),
            model_name: model_name.to_string(),
            prompt_template_digest: template_digest.to_string(),
            text_digest: hex::encode(Sha256::digest(text.as_bytes())),
        }
    }

    pub fn key_string(&self) -> String {
        format!(
            "{}.{}.{}.{}",
            hex::encode(&self.provider_id),
            hex::encode(&self.model_name),
            self.prompt_template_digest,
            self.text_digest
        )
    }

    pub fn file_name(&self) -> String {
        hex::encode(Sha256::digest(self.key_string().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub scores: Vec<f64>,
    pub parse_ok: bool,
    pub created_at: DateTime<Utc>,
    pub dataset_fingerprint: String,
}

impl CacheEntry {
    pub fn new(key: CacheKey, scores: Vec<f64>, parse_ok: bool, dataset_fingerprint: &str) -> Self {
        Self {
            key,
            scores,
            parse_ok,
            created_at: Utc::now(),
            dataset_fingerprint: dataset_fingerprint.to_string(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryFile {
    format_version: u32,
    #[serde(flatten)]
    entry: CacheEntry,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    dataset_fingerprint: String,
}

/// An open cache directory. Reads and writes to distinct keys are safe from
/// many threads.
#[derive(Debug)]
pub struct ScoreCache {
    root: PathBuf,
    fingerprint: String,
    policy: StalePolicy,
    manifest_matches: bool,
    corrupt_reads: AtomicUsize,
}

impl ScoreCache {
    /// Opens (creating if needed) the cache at `root` for a dataset with
    /// fingerprint `expected`. A fresh directory adopts `expected`.
    pub fn open(root: impl AsRef<Path>, expected: &str, policy: StalePolicy) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let manifest_path = root.join(MANIFEST_FILE);

        let manifest_matches = match fs::read_to_string(&manifest_path) {
            Ok(text) => {
                let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::CorruptCache {
                    path: manifest_path.clone(),
                    detail: e.to_string(),
                })?;
                if manifest.format_version != CACHE_FORMAT_VERSION {
                    return Err(Error::CorruptCache {
                        path: manifest_path,
                        detail: format!("unsupported format version {}", manifest.format_version),
                    });
                }
                if manifest.dataset_fingerprint == expected {
                    true
                } else if policy == StalePolicy::Strict {
                    return Err(Error::StaleCache {
                        path: root,
                        expected: expected.to_string(),
                        found: manifest.dataset_fingerprint,
                    });
                } else {
                    log::warn!(
                        "cache {} was built for dataset {}, current dataset is {expected}; stale entries will be refetched",
                        root.display(),
                        manifest.dataset_fingerprint
                    );
                    false
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                let manifest = Manifest {
                    format_version: CACHE_FORMAT_VERSION,
                    dataset_fingerprint: expected.to_string(),
                };
                let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
                write_atomic(&root, &manifest_path, text.as_bytes()).map_err(|e| Error::io(&manifest_path, e))?;
                true
            }
            Err(e) => return Err(Error::io(&manifest_path, e)),
        };

        Ok(Self {
            root,
            fingerprint: expected.to_string(),
            policy,
            manifest_matches,
            corrupt_reads: AtomicUsize::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn policy(&self) -> StalePolicy {
        self.policy
    }

    /// False when opened in warn mode over a cache built for another dataset.
    pub fn manifest_matches(&self) -> bool {
        self.manifest_matches
    }

    /// Reads that found an unreadable entry file (each also logged).
    pub fn corrupt_reads(&self) -> usize {
        self.corrupt_reads.load(Ordering::Relaxed)
    }

    pub fn entry_path(&self, key: &CacheKey) -> PathBuf {
        let name = key.file_name();
        self.root.join(&name[..2]).join(format!("{name}.json"))
    }

    /// The stored entry, if present, readable, and recorded for this cache's
    /// dataset fingerprint.
    pub fn get(&self, key: &CacheKey) -> Option<CacheEntry> {
        let path = self.entry_path(key);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return None,
            Err(e) => {
                self.note_corrupt(&path, &e.to_string());
                return None;
            }
        };
        let file: EntryFile = match serde_json::from_str(&text) {
            Ok(f) => f,
            Err(e) => {
                self.note_corrupt(&path, &e.to_string());
                return None;
            }
        };
        if file.format_version != CACHE_FORMAT_VERSION {
            self.note_corrupt(&path, &format!("unsupported format version {}", file.format_version));
            return None;
        }
        let entry = file.entry;
        if entry.key != *key {
            return None;
        }
        if !scores_valid(&entry.scores) {
            self.note_corrupt(&path, "scores outside [0, 1]");
            return None;
        }
        if entry.dataset_fingerprint != self.fingerprint {
            return None;
        }
        Some(entry)
    }

    /// Writes `entry` durably, replacing any previous entry for its key.
    pub fn put(&self, entry: &CacheEntry) -> Result<()> {
        if !scores_valid(&entry.scores) {
            return Err(Error::InvalidArgument(format!(
                "cache scores must be finite and within [0, 1], got {:?}",
                entry.scores
            )));
        }
        let path = self.entry_path(&entry.key);
        let shard = path.parent().expect("entry path has a shard directory");
        let file = EntryFile {
            format_version: CACHE_FORMAT_VERSION,
            entry: entry.clone(),
        };
        let text = serde_json::to_string_pretty(&file).expect("entry serializes");
        fs::create_dir_all(shard)
            .and_then(|_| write_atomic(shard, &path, text.as_bytes()))
            .map_err(|source| Error::CacheWrite { path, source })
    }

    fn note_corrupt(&self, path: &Path, detail: &str) {
        self.corrupt_reads.fetch_add(1, Ordering::Relaxed);
        log::warn!("ignoring unreadable cache entry {}: {detail}", path.display());
    }
}

fn scores_valid(scores: &[f64]) -> bool {
    !scores.is_empty() && scores.iter().all(|s| s.is_finite() && (0.0..=1.0).contains(s))
}

fn write_atomic(dir: &Path, dest: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(dest).map_err(|e| e.error)?;
    Ok(())
}

//! YAML run configuration.
//!
//! The file is parsed into a YAML tree first so `--set a.b=value` overrides
//! can be applied before the typed parse. Every table rejects unknown keys.
//! Relative paths are resolved against the directory holding the config.

use std::fs;
use std::path::{Path, PathBuf};

use labelfusion::{
    AutoFusionConfig, EncoderSpec, Error, FusionConfig, ProviderConfig, ProviderKind, Result, StalePolicy,
};
use serde::Deserialize;
use serde_yaml::{Mapping, Value};

fn default_text_column() -> String {
    "text".into()
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub train_csv: Option<PathBuf>,
    pub eval_csv: Option<PathBuf>,
    pub runs_dir: Option<PathBuf>,
    pub model_out: Option<PathBuf>,
}

/// Settings shared by every provider unless a provider table overrides them.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LlmSettings {
    temperature: Option<f64>,
    max_retries: Option<u32>,
    backoff_base_ms: Option<u64>,
    llm_batch_size: Option<usize>,
    timeout_ms: Option<u64>,
    mock_table: Option<PathBuf>,
}

/// One entry of `llm_provider` written as a table.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProviderTable {
    provider: String,
    model_name: Option<String>,
    endpoint_url: Option<String>,
    api_key_env: Option<String>,
    temperature: Option<f64>,
    max_retries: Option<u32>,
    backoff_base_ms: Option<u64>,
    llm_batch_size: Option<usize>,
    timeout_ms: Option<u64>,
    mock_table: Option<PathBuf>,
}

impl ProviderTable {
    fn named(provider: String) -> Self {
        Self {
            provider,
            model_name: None,
            endpoint_url: None,
            api_key_env: None,
            temperature: None,
            max_retries: None,
            backoff_base_ms: None,
            llm_batch_size: None,
            timeout_ms: None,
            mock_table: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    llm_provider: Value,
    model_name: Option<String>,
    model_names: Option<Vec<String>>,
    label_columns: Vec<String>,
    #[serde(default)]
    multi_label: bool,
    #[serde(default = "default_text_column")]
    text_column: String,
    cache_dir: Option<PathBuf>,
    #[serde(default)]
    cache_policy: StalePolicy,
    #[serde(default)]
    llm: LlmSettings,
    encoder: Option<Value>,
    #[serde(default)]
    fusion: FusionConfig,
    seed: Option<u64>,
    validation_fraction: Option<f64>,
    ml_batch_size: Option<usize>,
    #[serde(default)]
    paths: Paths,
}

/// A parsed config with paths resolved.
#[derive(Debug, Clone)]
pub struct CliConfig {
    pub text_column: String,
    pub paths: Paths,
    pub fusion: AutoFusionConfig,
}

fn config_err(path: &Path, detail: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {detail}", path.display()))
}

/// Reads `path`, applies `overrides` (`key.path=value`) and `seed`.
pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<CliConfig> {
    let text = fs::read_to_string(path).map_err(|e| config_err(path, e))?;
    let mut tree: Value = serde_yaml::from_str(&text).map_err(|e| config_err(path, e))?;
    if !tree.is_mapping() {
        return Err(config_err(path, "expected a YAML mapping at the top level"));
    }
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let raw: RawConfig = serde_yaml::from_value(tree).map_err(|e| config_err(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    build(raw, base, seed).map_err(|e| match e {
        Error::Config(msg) => config_err(path, msg),
        other => other,
    })
}

/// Sets a dotted key in `tree`, creating intermediate tables. The value is
/// parsed as YAML, so `fusion.hidden_sizes=[8, 8]` yields a list.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set `{assignment}`: expected key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.trim().is_empty()) {
        return Err(Error::Config(format!("--set `{assignment}`: empty key segment")));
    }
    let value = serde_yaml::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = tree;
    for (i, part) in parents.iter().enumerate() {
        let map = node
            .as_mapping_mut()
            .ok_or_else(|| Error::Config(format!("--set `{key}`: `{}` is not a table", parts[..i].join("."))))?;
        node = map
            .entry(Value::String(part.to_string()))
            .or_insert_with(|| Value::Mapping(Mapping::new()));
    }
    let map = node
        .as_mapping_mut()
        .ok_or_else(|| Error::Config(format!("--set `{key}`: `{}` is not a table", parents.join("."))))?;
    map.insert(Value::String(last.to_string()), value);
    Ok(())
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() || base.as_os_str().is_empty() {
        p
    } else {
        base.join(p)
    }
}

fn provider_tables(v: Value) -> Result<Vec<ProviderTable>> {
    let entry = |i: usize, v: Value| -> Result<ProviderTable> {
        match v {
            Value::String(s) => Ok(ProviderTable::named(s)),
            Value::Mapping(_) => {
                serde_yaml::from_value(v).map_err(|e| Error::Config(format!("llm_provider[{i}]: {e}")))
            }
            _ => Err(Error::Config(format!(
                "llm_provider[{i}]: expected a provider name or table"
            ))),
        }
    };
    match v {
        Value::Sequence(items) => items.into_iter().enumerate().map(|(i, v)| entry(i, v)).collect(),
        Value::String(_) | Value::Mapping(_) => Ok(vec![entry(0, v)?]),
        _ => Err(Error::Config(
            "llm_provider: expected a name, a table, or a list of them".into(),
        )),
    }
}

fn build(raw: RawConfig, base: &Path, seed: Option<u64>) -> Result<CliConfig> {
    let tables = provider_tables(raw.llm_provider)?;
    let names: Vec<Option<String>> = match (raw.model_name, raw.model_names) {
        (Some(_), Some(_)) => return Err(Error::Config("set either model_name or model_names, not both".into())),
        (Some(name), None) if tables.len() == 1 => vec![Some(name)],
        (Some(_), None) => {
            return Err(Error::Config(format!(
                "model_name names one model but llm_provider lists {}; use model_names",
                tables.len()
            )))
        }
        (None, Some(list)) if list.len() == tables.len() => list.into_iter().map(Some).collect(),
        (None, Some(list)) => {
            return Err(Error::Config(format!(
                "model_names has {} entries but llm_provider lists {}",
                list.len(),
                tables.len()
            )))
        }
        (None, None) => vec![None; tables.len()],
    };

    let shared = raw.llm;
    let mut providers = Vec::with_capacity(tables.len());
    for (t, name) in tables.into_iter().zip(names) {
        let mut p = ProviderConfig::new(ProviderKind::parse(&t.provider)?);
        if let Some(v) = t.model_name.or(name) {
            p.model_name = v;
        }
        if let Some(v) = t.endpoint_url {
            p.endpoint_url = v;
        }
        if let Some(v) = t.api_key_env {
            p.api_key_env = v;
        }
        if let Some(v) = t.temperature.or(shared.temperature) {
            p.temperature = v;
        }
        if let Some(v) = t.max_retries.or(shared.max_retries) {
            p.max_retries = v;
        }
        if let Some(v) = t.backoff_base_ms.or(shared.backoff_base_ms) {
            p.backoff_base_ms = v;
        }
        if let Some(v) = t.llm_batch_size.or(shared.llm_batch_size) {
            p.llm_batch_size = v;
        }
        if let Some(v) = t.timeout_ms.or(shared.timeout_ms) {
            p.timeout_ms = v;
        }
        p.mock_table = t
            .mock_table
            .or_else(|| shared.mock_table.clone())
            .map(|m| resolve(base, m));
        providers.push(p);
    }

    let encoder = match raw.encoder {
        None => EncoderSpec::default(),
        Some(mut v) => {
            if let Value::Mapping(map) = &mut v {
                let kind = Value::String("kind".into());
                if !map.contains_key(&kind) {
                    map.insert(kind, Value::String("hashed".into()));
                }
            }
            match serde_yaml::from_value(v).map_err(|e| Error::Config(format!("encoder: {e}")))? {
                EncoderSpec::Frozen { path } => EncoderSpec::Frozen {
                    path: resolve(base, path),
                },
                hashed => hashed,
            }
        }
    };

    let labels: Vec<&str> = raw.label_columns.iter().map(String::as_str).collect();
    let mut fusion = AutoFusionConfig::new(&labels, raw.multi_label, providers);
    fusion.encoder = encoder;
    fusion.fusion = raw.fusion;
    if let Some(s) = seed.or(raw.seed) {
        fusion.fusion.seed = s;
    }
    fusion.cache_dir = raw.cache_dir.map(|p| resolve(base, p));
    fusion.cache_policy = raw.cache_policy;
    if let Some(v) = raw.validation_fraction {
        fusion.validation_fraction = v;
    }
    if let Some(v) = raw.ml_batch_size {
        fusion.ml_batch_size = v;
    }

    let p = raw.paths;
    let paths = Paths {
        train_csv: p.train_csv.map(|x| resolve(base, x)),
        eval_csv: p.eval_csv.map(|x| resolve(base, x)),
        runs_dir: Some(resolve(base, p.runs_dir.unwrap_or_else(|| PathBuf::from("runs")))),
        model_out: p.model_out.map(|x| resolve(base, x)),
    };
    Ok(CliConfig {
        text_column: raw.text_column,
        paths,
        fusion,
    })
}

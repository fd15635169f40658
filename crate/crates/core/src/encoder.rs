//! The text encoder: a trainable hashed character n-gram projection, or a
//! frozen lookup of precomputed embeddings.
//!
//! The hashed encoder lowercases the text (Unicode lowercase, nothing else),
//! takes every character n-gram of the configured sizes, hashes each n-gram's
//! UTF-8 bytes with XXH64 (seed 0) and reduces modulo `buckets`. Counts are
//! L1-normalized and multiplied by a `buckets x dim` projection matrix.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use twox_hash::XxHash64;

use crate::error::{Error, Result};

pub const FEATURE_HASH_SEED: u64 = 0;

/// Projection entries start uniform in `[-INIT_RANGE, INIT_RANGE]`, which
/// gives each entry unit variance.
pub const INIT_RANGE: f64 = 1.732_050_807_568_877_2;

/// ChaCha stream used for projection initialization.
const PROJECTION_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub ngram_sizes: Vec<usize>,
    pub buckets: usize,
    pub lr_small: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            ngram_sizes: vec![3, 4],
            buckets: 1 << 15,
            lr_small: 1e-3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("encoder.dim must be at least 1".into()));
        }
        if self.buckets < self.dim {
            return Err(Error::Config(format!(
                "encoder.buckets ({}) must be >= encoder.dim ({})",
                self.buckets, self.dim
            )));
        }
        if !(self.lr_small > 0.0 && self.lr_small.is_finite()) {
            return Err(Error::Config(format!(
                "encoder.lr_small must be > 0, got {}",
                self.lr_small
            )));
        }
        if self.ngram_sizes.is_empty() || self.ngram_sizes.contains(&0) {
            return Err(Error::Config(
                "encoder.ngram_sizes must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Bucket index to n-gram count.
pub type FeatureMap = BTreeMap<usize, u32>;

pub fn featurize(text: &str, cfg: &EncoderConfig) -> FeatureMap {
    let lowered = text.to_lowercase();
    // Byte offset of every char boundary, including the end.
    let bounds: Vec<usize> = lowered
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(lowered.len()))
        .collect();
    let chars = bounds.len() - 1;

    let mut features = FeatureMap::new();
    for &n in &cfg.ngram_sizes {
        if n == 0 || n > chars {
            continue;
        }
        for start in 0..=chars - n {
            let gram = &lowered.as_bytes()[bounds[start]..bounds[start + n]];
            let bucket = (XxHash64::oneshot(FEATURE_HASH_SEED, gram) % cfg.buckets as u64) as usize;
            *features.entry(bucket).or_insert(0) += 1;
        }
    }
    features
}

/// Feature counts divided by their total, in bucket order.
pub fn normalized_features(text: &str, cfg: &EncoderConfig) -> Vec<(usize, f64)> {
    let features = featurize(text, cfg);
    let total: u32 = features.values().sum();
    if total == 0 {
        return Vec::new();
    }
    let total = f64::from(total);
    features.into_iter().map(|(b, c)| (b, f64::from(c) / total)).collect()
}

/// The trainable `buckets x dim` projection, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    buckets: usize,
    dim: usize,
    projection: Vec<f64>,
    /// Seed the projection was initialized from, if any. Lets the model file
    /// store only the rows training has changed.
    init_seed: Option<u64>,
}

impl EncoderParams {
    /// Seeded uniform initialization.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        Self {
            buckets: cfg.buckets,
            dim: cfg.dim,
            projection: initial_projection(cfg.buckets, cfg.dim, seed),
            init_seed: Some(seed),
        }
    }

    pub fn from_dense(cfg: &EncoderConfig, projection: Vec<f64>) -> Result<Self> {
        if projection.len() != cfg.buckets * cfg.dim {
            return Err(Error::InvalidArgument(format!(
                "projection has {} entries, expected {} x {}",
                projection.len(),
                cfg.buckets,
                cfg.dim
            )));
        }
        if projection.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("projection contains non-finite entries".into()));
        }
        Ok(Self {
            buckets: cfg.buckets,
            dim: cfg.dim,
            projection,
            init_seed: None,
        })
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, bucket: usize) -> &[f64] {
        &self.projection[bucket * self.dim..(bucket + 1) * self.dim]
    }

    pub fn get(&self, bucket: usize, j: usize) -> f64 {
        self.projection[bucket * self.dim + j]
    }

    pub fn set(&mut self, bucket: usize, j: usize, value: f64) {
        self.projection[bucket * self.dim + j] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.projection
    }

    fn matches(&self, cfg: &EncoderConfig) -> bool {
        self.buckets == cfg.buckets && self.dim == cfg.dim
    }
}

fn initial_projection(buckets: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(PROJECTION_STREAM);
    (0..buckets * dim)
        .map(|_| rng.random_range(-INIT_RANGE..=INIT_RANGE))
        .collect()
}

/// On-disk form: rows that differ from the seeded initialization (all rows
/// when there is no seed).
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsRepr {
    buckets: usize,
    dim: usize,
    init_seed: Option<u64>,
    rows: Vec<(usize, Vec<f64>)>,
}

impl Serialize for EncoderParams {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let base = self
            .init_seed
            .map(|seed| initial_projection(self.buckets, self.dim, seed));
        let rows = (0..self.buckets)
            .filter(|&b| match &base {
                Some(base) => {
                    let r = b * self.dim..(b + 1) * self.dim;
                    base[r.clone()]
                        .iter()
                        .zip(&self.projection[r])
                        .any(|(x, y)| x.to_bits() != y.to_bits())
                }
                None => true,
            })
            .map(|b| (b, self.row(b).to_vec()))
            .collect();
        ParamsRepr {
            buckets: self.buckets,
            dim: self.dim,
            init_seed: self.init_seed,
            rows,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EncoderParams {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = ParamsRepr::deserialize(d)?;
        if repr.dim == 0 || repr.buckets == 0 {
            return Err(D::Error::custom("encoder params need positive buckets and dim"));
        }
        let mut projection = match repr.init_seed {
            Some(seed) => initial_projection(repr.buckets, repr.dim, seed),
            None => vec![0.0; repr.buckets * repr.dim],
        };
        let mut seen = vec![false; repr.buckets];
        for (b, row) in repr.rows {
            if b >= repr.buckets || row.len() != repr.dim {
                return Err(D::Error::custom(format!("bad projection row {b}")));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(D::Error::custom(format!("non-finite value in projection row {b}")));
            }
            seen[b] = true;
            projection[b * repr.dim..(b + 1) * repr.dim].copy_from_slice(&row);
        }
        if repr.init_seed.is_none() && seen.iter().any(|s| !s) {
            return Err(D::Error::custom("unseeded projection must list every row"));
        }
        Ok(Self {
            buckets: repr.buckets,
            dim: repr.dim,
            projection,
            init_seed: repr.init_seed,
        })
    }
}

/// Embedding of already-normalized features.
pub fn project(features: &[(usize, f64)], params: &EncoderParams) -> Embedding {
    let mut out = vec![0.0; params.dim];
    for &(bucket, weight) in features {
        for (o, p) in out.iter_mut().zip(params.row(bucket)) {
            *o += weight * p;
        }
    }
    Embedding(out)
}

pub fn encode(text: &str, params: &EncoderParams, cfg: &EncoderConfig) -> Embedding {
    debug_assert!(params.matches(cfg));
    project(&normalized_features(text, cfg), params)
}

/// Encodes `texts` in chunks of `ml_batch_size`. Chunking changes only how
/// work is grouped, never the values.
pub fn encode_batch<S: AsRef<str>>(
    texts: &[S],
    params: &EncoderParams,
    cfg: &EncoderConfig,
    ml_batch_size: usize,
) -> Result<Vec<Embedding>> {
    if ml_batch_size == 0 {
        return Err(Error::InvalidArgument("ml_batch_size must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(ml_batch_size) {
        let features: Vec<_> = chunk.iter().map(|t| normalized_features(t.as_ref(), cfg)).collect();
        out.extend(features.iter().map(|f| project(f, params)));
    }
    Ok(out)
}

/// Gradient w.r.t. the projection. Logically `buckets x dim`; only rows
/// touched by some feature are stored, the rest are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGrad {
    buckets: usize,
    dim: usize,
    rows: BTreeMap<usize, Vec<f64>>,
}

impl ProjectionGrad {
    pub fn zeros(buckets: usize, dim: usize) -> Self {
        Self {
            buckets,
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn from_dense(buckets: usize, dim: usize, values: &[f64]) -> Result<Self> {
        if values.len() != buckets * dim {
            return Err(Error::InvalidArgument(format!(
                "dense gradient has {} entries, expected {buckets} x {dim}",
                values.len()
            )));
        }
        let rows = values
            .chunks(dim)
            .enumerate()
            .filter(|(_, r)| r.iter().any(|&v| v != 0.0))
            .map(|(b, r)| (b, r.to_vec()))
            .collect();
        Ok(Self { buckets, dim, rows })
    }

    /// Adds `scale * x ⊗ d_embedding` for normalized features `x`.
    pub fn accumulate(&mut self, features: &[(usize, f64)], d_embedding: &[f64], scale: f64) {
        debug_assert_eq!(d_embedding.len(), self.dim);
        for &(bucket, weight) in features {
            let row = self.rows.entry(bucket).or_insert_with(|| vec![0.0; self.dim]);
            let w = scale * weight;
            for (r, g) in row.iter_mut().zip(d_embedding) {
                *r += w * g;
            }
        }
    }

    pub fn get(&self, bucket: usize, j: usize) -> f64 {
        self.rows.get(&bucket).map_or(0.0, |r| r[j])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.buckets, self.dim)
    }
}

/// Plain gradient descent on the projection: `P <- P - lr * grad`.
pub fn encoder_gradient_step(params: &mut EncoderParams, grads: &ProjectionGrad, lr_small: f64) -> Result<()> {
    if grads.shape() != (params.buckets, params.dim) {
        return Err(Error::InvalidArgument(format!(
            "gradient shape {:?} does not match projection {}x{}",
            grads.shape(),
            params.buckets,
            params.dim
        )));
    }
    for (&bucket, row) in &grads.rows {
        let dim = params.dim;
        for (p, g) in params.projection[bucket * dim..(bucket + 1) * dim].iter_mut().zip(row) {
            *p -= lr_small * g;
        }
    }
    Ok(())
}

/// Lookup encoder over precomputed embeddings. Never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    path: PathBuf,
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl FrozenEncoder {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn encode(&self, text: &str) -> Result<Embedding> {
        self.table
            .get(text)
            .map(|v| Embedding(v.clone()))
            .ok_or_else(|| Error::UnknownText(text.to_string()))
    }
}

/// Loads a tab-separated embedding file: `text<TAB>v1<TAB>...<TAB>vD` per
/// line. Blank lines are skipped; for duplicate texts the last line wins.
pub fn load_precomputed_embeddings(path: impl AsRef<Path>) -> Result<FrozenEncoder> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table = HashMap::new();
    let mut dim = None;
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let text = fields.next().unwrap_or_default();
        let values = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::EmbeddingFile {
                        path: path.to_path_buf(),
                        line: line_no,
                        detail: format!("not a finite number: {f:?}"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(Error::EmbeddingFile {
                path: path.to_path_buf(),
                line: line_no,
                detail: "expected text followed by at least one value".into(),
            });
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::EmbeddingFile {
                    path: path.to_path_buf(),
                    line: line_no,
                    detail: format!("row has {} values but earlier rows have {d}", values.len()),
                })
            }
            Some(_) => {}
        }
        table.insert(text.to_string(), values);
    }
    let dim = dim.ok_or_else(|| Error::EmbeddingFile {
        path: path.to_path_buf(),
        line: 0,
        detail: "file contains no embeddings".into(),
    })?;
    Ok(FrozenEncoder {
        path: path.to_path_buf(),
        dim,
        table,
    })
}

/// The encoder half of a fusion model.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Hashed {
        config: EncoderConfig,
        params: EncoderParams,
    },
    Frozen(FrozenEncoder),
}

impl Encoder {
    pub fn hashed(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::init(&config, seed);
        Ok(Encoder::Hashed { config, params })
    }

    pub fn dim(&self) -> usize {
        match self {
            Encoder::Hashed { config, .. } => config.dim,
            Encoder::Frozen(f) => f.dim(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Encoder::Hashed { .. })
    }

    /// Normalized features for trainable encoders, `None` for frozen ones.
    pub fn features(&self, text: &str) -> Option<Vec<(usize, f64)>> {
        match self {
            Encoder::Hashed { config, .. } => Some(normalized_features(text, config)),
            Encoder::Frozen(_) => None,
        }
    }

    pub fn encode(&self, text: &str) -> Result<Embedding> {
        match self {
            Encoder::Hashed { config, params } => Ok(encode(text, params, config)),
            Encoder::Frozen(f) => f.encode(text),
        }
    }

    pub fn encode_batch<S: AsRef<str>>(&self, texts: &[S], ml_batch_size: usize) -> Result<Vec<Embedding>> {
        match self {
            Encoder::Hashed { config, params } => encode_batch(texts, params, config, ml_batch_size),
            Encoder::Frozen(f) => {
                if ml_batch_size == 0 {
                    return Err(Error::InvalidArgument("ml_batch_size must be >= 1".into()));
                }
                texts.iter().map(|t| f.encode(t.as_ref())).collect()
            }
        }
    }
}

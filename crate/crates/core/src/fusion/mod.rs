//! The fusion head: a small rectifier MLP over `[embedding ; scores_1 ; ... ;
//! scores_P]` with hand-written forward and reverse passes.

mod decide;
mod loss;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabelSchema;
use crate::encoder::Embedding;
use crate::error::{Error, Result};

pub use decide::{argmax, decide, decide_scores, Prediction};
pub use loss::{
    log_sum_exp, loss_multiclass, loss_multilabel, multiclass_loss_grad, multilabel_loss_grad, sigmoid, softmax,
    softplus,
};

/// ChaCha stream used for weight initialization.
const INIT_STREAM: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub lr_high: f64,
    pub epochs: usize,
    pub train_batch_size: usize,
    pub seed: u64,
    /// Multi-label decision threshold applied to every class...
    pub threshold: f64,
    /// ...unless overridden here by label name.
    pub class_thresholds: BTreeMap<String, f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![128],
            activation: Activation::Relu,
            lr_high: 1e-2,
            epochs: 10,
            train_batch_size: 32,
            seed: 42,
            threshold: 0.5,
            class_thresholds: BTreeMap::new(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, schema: &LabelSchema) -> Result<()> {
        if !(self.lr_high > 0.0 && self.lr_high.is_finite()) {
            return Err(Error::Config(format!(
                "fusion.lr_high must be > 0, got {}",
                self.lr_high
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("fusion.epochs must be >= 1".into()));
        }
        if self.train_batch_size == 0 {
            return Err(Error::Config("fusion.train_batch_size must be >= 1".into()));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::Config("fusion.hidden_sizes entries must be >= 1".into()));
        }
        check_threshold("fusion.threshold", self.threshold)?;
        for (label, &t) in &self.class_thresholds {
            if schema.index_of(label).is_none() {
                return Err(Error::Config(format!(
                    "fusion.class_thresholds names unknown label `{label}`"
                )));
            }
            check_threshold(&format!("fusion.class_thresholds.{label}"), t)?;
        }
        Ok(())
    }

    /// One threshold per class, in schema order.
    pub fn thresholds(&self, schema: &LabelSchema) -> Vec<f64> {
        schema
            .labels()
            .iter()
            .map(|l| self.class_thresholds.get(l).copied().unwrap_or(self.threshold))
            .collect()
    }
}

fn check_threshold(name: &str, t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in (0, 1), got {t}")))
    }
}

/// One affine layer, weights stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    fn is_consistent(&self) -> bool {
        self.weights.len() == self.inputs * self.outputs && self.bias.len() == self.outputs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FusionParams {
    layers: Vec<Dense>,
}

impl FusionParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(input_width: usize, hidden_sizes: &[usize], outputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let widths: Vec<usize> = std::iter::once(input_width)
            .chain(hidden_sizes.iter().copied())
            .chain(std::iter::once(outputs))
            .collect();
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut layer = Dense::zeros(fan_in, fan_out);
                for v in &mut layer.weights {
                    *v = rng.random_range(-limit..=limit);
                }
                layer
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let params = Self { layers };
        params.check()?;
        Ok(params)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    /// Checks that shapes chain and every entry is finite.
    pub fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("fusion network has no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if !layer.is_consistent() || layer.inputs == 0 || layer.outputs == 0 {
                return Err(Error::InvalidArgument(format!("layer {i} has inconsistent shape")));
            }
            if i > 0 && self.layers[i - 1].outputs != layer.inputs {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    layer.inputs,
                    i - 1,
                    self.layers[i - 1].outputs
                )));
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("layer {i} has non-finite entries")));
            }
        }
        Ok(())
    }
}

/// The concatenated network input. The first `embed_dim` entries are the
/// embedding, the rest are provider scores in provider order.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedInput {
    values: Vec<f64>,
    embed_dim: usize,
}

impl FusedInput {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }
}

/// `[embedding ; provider_0 scores ; provider_1 scores ; ...]`, scores used
/// as-is.
pub fn assemble_input<S: AsRef<[f64]>>(embedding: &Embedding, provider_scores: &[S], k: usize) -> Result<FusedInput> {
    let mut values = Vec::with_capacity(embedding.dim() + provider_scores.len() * k);
    values.extend_from_slice(embedding.values());
    for (p, scores) in provider_scores.iter().enumerate() {
        let scores = scores.as_ref();
        if scores.len() != k {
            return Err(Error::InvalidArgument(format!(
                "provider {p} returned {} scores, expected {k}",
                scores.len()
            )));
        }
        values.extend_from_slice(scores);
    }
    Ok(FusedInput {
        values,
        embed_dim: embedding.dim(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub Vec<f64>);

impl Logits {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Activations kept from a forward pass: the input followed by each hidden
/// layer's rectified output.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    activations: Vec<Vec<f64>>,
    embed_dim: usize,
}

pub fn forward(input: &FusedInput, params: &FusionParams) -> Result<(Logits, ForwardTrace)> {
    if input.values.len() != params.input_width() {
        return Err(Error::InvalidArgument(format!(
            "input width {} does not match network input width {}",
            input.values.len(),
            params.input_width()
        )));
    }
    let last = params.layers.len() - 1;
    let mut activations = Vec::with_capacity(params.layers.len());
    activations.push(input.values.clone());
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = layer.apply(activations.last().expect("non-empty"));
        if i == last {
            return Ok((
                Logits(z),
                ForwardTrace {
                    activations,
                    embed_dim: input.embed_dim,
                },
            ));
        }
        for v in &mut z {
            *v = v.max(0.0);
        }
        activations.push(z);
    }
    unreachable!("network has at least one layer")
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients for every layer plus the gradient at the embedding slice of the
/// input. The score slice is dropped: scores are not trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LayerGrad>,
    pub d_embedding: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros_like(params: &FusionParams, embed_dim: usize) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            d_embedding: vec![0.0; embed_dim],
        }
    }

    /// `self += scale * other` over the parameter gradients.
    pub fn add_scaled(&mut self, other: &GradientBundle, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }
}

/// Reverse pass from `d_logits` (the loss gradient at the logits).
pub fn backward(trace: &ForwardTrace, params: &FusionParams, d_logits: &[f64]) -> Result<GradientBundle> {
    if trace.activations.len() != params.layers.len() || trace.activations[0].len() != params.input_width() {
        return Err(Error::State("forward trace does not belong to these parameters".into()));
    }
    if d_logits.len() != params.output_width() {
        return Err(Error::InvalidArgument(format!(
            "{} logit gradients for {} outputs",
            d_logits.len(),
            params.output_width()
        )));
    }

    let mut grads: Vec<LayerGrad> = Vec::with_capacity(params.layers.len());
    let mut delta = d_logits.to_vec();
    for (i, layer) in params.layers.iter().enumerate().rev() {
        let input = &trace.activations[i];
        let mut d_weights = vec![0.0; layer.weights.len()];
        for (row, &d) in d_weights.chunks_exact_mut(layer.inputs).zip(&delta) {
            for (g, &x) in row.iter_mut().zip(input) {
                *g = d * x;
            }
        }
        let mut d_input = vec![0.0; layer.inputs];
        for (row, &d) in layer.weights.chunks_exact(layer.inputs).zip(&delta) {
            for (g, &w) in d_input.iter_mut().zip(row) {
                *g += d * w;
            }
        }
        grads.push(LayerGrad {
            weights: d_weights,
            bias: delta,
        });
        if i > 0 {
            // Rectifier: pass gradient only where the unit was active.
            for (g, &a) in d_input.iter_mut().zip(input) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
        } else {
            d_input.truncate(trace.embed_dim);
        }
        delta = d_input;
    }
    grads.reverse();
    Ok(GradientBundle {
        layers: grads,
        d_embedding: delta,
    })
}

/// Plain gradient descent over every fusion parameter.
pub fn fusion_step(params: &mut FusionParams, grads: &GradientBundle, lr_high: f64) -> Result<()> {
    let shapes_match = grads.layers.len() == params.layers.len()
        && params
            .layers
            .iter()
            .zip(&grads.layers)
            .all(|(l, g)| l.weights.len() == g.weights.len() && l.bias.len() == g.bias.len());
    if !shapes_match {
        return Err(Error::InvalidArgument(
            "gradient shapes do not match fusion parameters".into(),
        ));
    }
    for (layer, g) in params.layers.iter_mut().zip(&grads.layers) {
        for (w, d) in layer.weights.iter_mut().zip(&g.weights) {
            *w -= lr_high * d;
        }
        for (b, d) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= lr_high * d;
        }
    }
    Ok(())
}

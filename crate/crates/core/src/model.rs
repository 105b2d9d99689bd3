//! Heterogeneous toy models: tanh MLP feature extractors with a linear
//! classifier head, explicit backward pass and plain SGD.
//!
//! Every client model emits `feature_dim`-dimensional embeddings so that
//! prototypes can be exchanged, but depth and widths vary per architecture,
//! so parameters can never be averaged across clients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, tag};
use crate::tensor::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 1,
            Activation::Identity => 0,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Shape of one feature extractor: tanh hidden layers followed by a linear
/// projection to `feature_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub hidden_widths: Vec<usize>,
    pub feature_dim: usize,
}

impl ArchitectureSpec {
    pub fn new(hidden_widths: Vec<usize>, feature_dim: usize) -> Result<Self> {
        let spec = Self { hidden_widths, feature_dim };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::contract(
                "ArchitectureSpec",
                format!("widths must be positive: {:?} -> {}", self.hidden_widths, self.feature_dim),
            ));
        }
        Ok(())
    }

    /// Extractor plus classifier parameter count.
    pub fn parameter_count(&self, input_dim: usize, num_classes: usize) -> usize {
        let mut fan_in = input_dim;
        let mut total = 0;
        for &w in self.hidden_widths.iter().chain(core::iter::once(&self.feature_dim)) {
            total += fan_in * w + w;
            fan_in = w;
        }
        total + self.feature_dim * num_classes + num_classes
    }
}

/// The default four-architecture heterogeneous set: hidden widths `[]`,
/// `[16]`, `[32, 16]` and `[64, 32, 16]`.
pub fn htfe4(feature_dim: usize) -> Vec<ArchitectureSpec> {
    [vec![], vec![16], vec![32, 16], vec![64, 32, 16]]
        .into_iter()
        .map(|hidden_widths| ArchitectureSpec { hidden_widths, feature_dim })
        .collect()
}

/// Fully connected layer, `y = act(x Wᵀ + b)` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: FeatureMatrix,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    fn init(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut crate::rng::SimRng) -> Self {
        let s = 1.0 / libm::sqrt(fan_in as f64);
        let weights = FeatureMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-s..s));
        let biases = (0..fan_out).map(|_| rng.random_range(-s..s)).collect();
        Self { weights, biases, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    fn forward(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        let mut y = x.matmul_transpose(&self.weights)?;
        for i in 0..y.rows() {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.biases) {
                *v += b;
                if self.activation == Activation::Tanh {
                    *v = libm::tanh(*v);
                }
            }
        }
        Ok(y)
    }

    fn parameter_count(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.biases.len()
    }
}

/// Gradient of one [`DenseLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: FeatureMatrix,
    pub biases: Vec<f64>,
}

/// Gradients for every parameter of a [`ClientModel`], same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub extractor: Vec<LayerGrad>,
    pub classifier: LayerGrad,
}

impl ModelGradients {
    /// Flattened in [`ClientModel::params_flat`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.extractor.iter().chain(core::iter::once(&self.classifier)) {
            out.extend_from_slice(g.weights.as_slice());
            out.extend_from_slice(&g.biases);
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Activations saved by [`ClientModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `layer_inputs[k]` is the input to extractor layer `k`; the last entry is
    /// the embedding matrix fed to the classifier.
    layer_inputs: Vec<FeatureMatrix>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub embeddings: FeatureMatrix,
    pub logits: FeatureMatrix,
    pub cache: ForwardCache,
}

/// Feature extractor plus linear classifier owned by one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientModel {
    pub extractor: Vec<DenseLayer>,
    pub classifier: DenseLayer,
    pub architecture_id: usize,
}

/// Builds a model with every parameter drawn from `U(−s, s)`,
/// `s = 1/√fan_in`.
pub fn build_model(
    spec: &ArchitectureSpec,
    input_dim: usize,
    num_classes: usize,
    seed: u64,
) -> Result<ClientModel> {
    spec.validate()?;
    if input_dim == 0 || num_classes == 0 {
        return Err(Error::contract(
            "build_model",
            format!("input_dim {input_dim} and num_classes {num_classes} must be positive"),
        ));
    }
    let mut rng = rng_from(seed, &[tag::MODEL_INIT]);
    let mut extractor = Vec::with_capacity(spec.hidden_widths.len() + 1);
    let mut fan_in = input_dim;
    for &w in &spec.hidden_widths {
        extractor.push(DenseLayer::init(fan_in, w, Activation::Tanh, &mut rng));
        fan_in = w;
    }
    extractor.push(DenseLayer::init(fan_in, spec.feature_dim, Activation::Identity, &mut rng));
    let classifier = DenseLayer::init(spec.feature_dim, num_classes, Activation::Identity, &mut rng);
    Ok(ClientModel { extractor, classifier, architecture_id: 0 })
}

impl ClientModel {
    pub fn input_dim(&self) -> usize {
        self.extractor[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().map(DenseLayer::parameter_count).sum()
    }

    /// Extractor layers followed by the classifier.
    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.extractor.iter().chain(core::iter::once(&self.classifier))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut DenseLayer> {
        self.extractor.iter_mut().chain(core::iter::once(&mut self.classifier))
    }

    /// `(input_dim, output_dim)` of every layer, classifier last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers().map(|l| (l.input_dim(), l.output_dim())).collect()
    }

    pub fn embed(&self, batch: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for layer in &self.extractor {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    fn check_input(&self, batch: &FeatureMatrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(Error::contract(
                "forward",
                format!("batch has {} features, model expects {}", batch.cols(), self.input_dim()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &FeatureMatrix) -> Result<ForwardOutput> {
        self.check_input(batch)?;
        let mut layer_inputs = Vec::with_capacity(self.extractor.len() + 1);
        let mut x = batch.clone();
        for layer in &self.extractor {
            let y = layer.forward(&x)?;
            layer_inputs.push(x);
            x = y;
        }
        let logits = self.classifier.forward(&x)?;
        layer_inputs.push(x.clone());
        Ok(ForwardOutput { embeddings: x, logits, cache: ForwardCache { layer_inputs } })
    }

    /// Predicted class per row (ties broken toward the lower class id).
    pub fn predict(&self, batch: &FeatureMatrix) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?.logits;
        Ok(logits
            .iter_rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Gradients of a loss whose partial derivatives are `grad_logits` with
    /// respect to the logits plus `grad_embeddings` with respect to the
    /// embeddings directly.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: &FeatureMatrix,
        grad_embeddings: Option<&FeatureMatrix>,
    ) -> Result<ModelGradients> {
        let embeddings = cache.layer_inputs.last().expect("cache holds the embeddings");
        let n = embeddings.rows();
        if grad_logits.shape() != (n, self.num_classes()) {
            return Err(Error::contract(
                "backward",
                format!("logit gradient {:?}, expected ({n}, {})", grad_logits.shape(), self.num_classes()),
            ));
        }
        if let Some(g) = grad_embeddings {
            if g.shape() != embeddings.shape() {
                return Err(Error::contract(
                    "backward",
                    format!("embedding gradient {:?}, expected {:?}", g.shape(), embeddings.shape()),
                ));
            }
        }

        let classifier = LayerGrad {
            weights: grad_logits.transpose_matmul(embeddings)?,
            biases: column_sums(grad_logits),
        };
        let mut upstream = grad_logits.matmul(&self.classifier.weights)?;
        if let Some(g) = grad_embeddings {
            upstream = upstream.add(g)?;
        }

        let mut extractor = Vec::with_capacity(self.extractor.len());
        for (k, layer) in self.extractor.iter().enumerate().rev() {
            let input = &cache.layer_inputs[k];
            if layer.activation == Activation::Tanh {
                // The layer output is the next layer's input: tanh' = 1 − y².
                let output = &cache.layer_inputs[k + 1];
                for (g, y) in upstream.as_mut_slice().iter_mut().zip(output.as_slice()) {
                    *g *= 1.0 - y * y;
                }
            }
            extractor.push(LayerGrad {
                weights: upstream.transpose_matmul(input)?,
                biases: column_sums(&upstream),
            });
            if k > 0 {
                upstream = upstream.matmul(&layer.weights)?;
            }
        }
        extractor.reverse();
        Ok(ModelGradients { extractor, classifier })
    }

    /// Plain SGD step `θ ← θ − lr·∇θ`. Rejects non-finite gradients before
    /// touching any parameter.
    pub fn apply_gradients(&mut self, grads: &ModelGradients, learning_rate: f64) -> Result<()> {
        if grads.extractor.len() != self.extractor.len() {
            return Err(Error::contract("apply_gradients", "gradient layout does not match model"));
        }
        if !grads.is_finite() {
            return Err(Error::numeric("apply_gradients", "non-finite gradient"));
        }
        let all = grads.extractor.iter().chain(core::iter::once(&grads.classifier));
        for (layer, g) in self.layers_mut().zip(all) {
            if layer.weights.shape() != g.weights.shape() {
                return Err(Error::contract("apply_gradients", "gradient layout does not match model"));
            }
            for (w, gw) in layer.weights.as_mut_slice().iter_mut().zip(g.weights.as_slice()) {
                *w -= learning_rate * gw;
            }
            for (b, gb) in layer.biases.iter_mut().zip(&g.biases) {
                *b -= learning_rate * gb;
            }
        }
        if !self.params_finite() {
            return Err(Error::numeric("apply_gradients", "parameters became non-finite"));
        }
        Ok(())
    }

    /// [`backward`](Self::backward) followed by an SGD step.
    pub fn backward_and_step(
        &mut self,
        cache: &ForwardCache,
        grad_logits: &FeatureMatrix,
        grad_embeddings: Option<&FeatureMatrix>,
        learning_rate: f64,
    ) -> Result<()> {
        let grads = self.backward(cache, grad_logits, grad_embeddings)?;
        self.apply_gradients(&grads, learning_rate)
    }

    fn params_finite(&self) -> bool {
        self.layers().all(|l| l.weights.is_finite() && l.biases.iter().all(|b| b.is_finite()))
    }

    /// All parameters, layer by layer (weights row-major, then biases),
    /// classifier last.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in self.layers() {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::contract(
                "set_params_flat",
                format!("{} values for {} parameters", values.len(), self.parameter_count()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("set_params_flat", "non-finite parameter"));
        }
        let mut rest = values;
        for l in self.layers_mut() {
            let (w, tail) = rest.split_at(l.weights.as_slice().len());
            l.weights.as_mut_slice().copy_from_slice(w);
            let (b, tail) = tail.split_at(l.biases.len());
            l.biases.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    /// Binary checkpoint: `b"FSAFCKPT"`, then little-endian `u32` architecture
    /// id and layer count, then per layer (classifier last) `u32` input dim,
    /// `u32` output dim, `u8` activation (0 identity, 1 tanh), the row-major
    /// `out × in` weights and the biases as `f64`.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.parameter_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.architecture_id as u32).to_le_bytes());
        out.extend_from_slice(&((self.extractor.len() + 1) as u32).to_le_bytes());
        for l in self.layers() {
            out.extend_from_slice(&(l.input_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(l.output_dim() as u32).to_le_bytes());
            out.push(l.activation.code());
            for v in l.weights.as_slice().iter().chain(&l.biases) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::contract("from_le_bytes", "bad checkpoint magic"));
        }
        let architecture_id = r.u32()? as usize;
        let count = r.u32()? as usize;
        if count < 2 {
            return Err(Error::contract("from_le_bytes", format!("{count} layers")));
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let input = r.u32()? as usize;
            let output = r.u32()? as usize;
            let activation = Activation::from_code(r.take(1)?[0])
                .ok_or_else(|| Error::contract("from_le_bytes", "unknown activation code"))?;
            let weights = (0..input * output).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let biases = (0..output).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            layers.push(DenseLayer { weights: FeatureMatrix::new(output, input, weights)?, biases, activation });
        }
        if r.pos != bytes.len() {
            return Err(Error::contract("from_le_bytes", "trailing bytes"));
        }
        let classifier = layers.pop().expect("count >= 2");
        Ok(ClientModel { extractor: layers, classifier, architecture_id })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FSAFCKPT";

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::contract("from_le_bytes", "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn column_sums(m: &FeatureMatrix) -> Vec<f64> {
    let mut sums = vec![0.0; m.cols()];
    for r in m.iter_rows() {
        sums.iter_mut().zip(r).for_each(|(s, v)| *s += v);
    }
    sums
}

/// Mean softmax cross-entropy and its gradient `(softmax − onehot)/n`.
pub fn loss_supervised(logits: &FeatureMatrix, labels: &[usize]) -> Result<(f64, FeatureMatrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::contract(
            "loss_supervised",
            format!("{} labels for {} rows", labels.len(), logits.rows()),
        ));
    }
    let c = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::contract("loss_supervised", format!("label {bad} out of range for {c} classes")));
    }
    let n = logits.rows() as f64;
    let mut grad = FeatureMatrix::zeros(logits.rows(), c);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
        let lse = max + libm::log(sum);
        total += lse - row[y];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = libm::exp(row[j] - lse);
            *g = (p - if j == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((total / n, grad))
}

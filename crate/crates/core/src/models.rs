//! Classifier definitions, initialization, forward passes and the model file
//! format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, GradientBundle, NamedTensor, NodeId};
use crate::error::{Result, UqError};
use crate::tensor::Tensor;

/// Version tag written into every model file.
pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    SmallCnn,
}

/// One stage of a sequential classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    MaxPool2d,
    Flatten,
}

impl LayerSpec {
    fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelConfig {
    /// Dense ReLU network; `widths[0]` is the input size and the last width
    /// is the number of classes.
    pub fn mlp(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(UqError::Config(
                "an MLP needs at least input and output widths".into(),
            ));
        }
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            if i > 0 {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Dense {
                inputs: pair[0],
                outputs: pair[1],
                bias: true,
            });
        }
        let config = ModelConfig {
            architecture: Architecture::Mlp,
            input_shape: vec![widths[0]],
            num_classes: *widths.last().unwrap(),
            layers,
        };
        config.validate()?;
        Ok(config)
    }

    /// Conv-ReLU-Conv-ReLU-MaxPool-Dense-ReLU-Dense.
    pub fn small_cnn(
        input_shape: [usize; 3],
        filters: usize,
        kernel: usize,
        hidden: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let [c, h, w] = input_shape;
        if kernel == 0 || 2 * (kernel - 1) >= h.min(w) {
            return Err(UqError::Config(format!(
                "kernel {kernel} too large for {h}×{w} input"
            )));
        }
        let (oh, ow) = ((h - 2 * (kernel - 1)) / 2, (w - 2 * (kernel - 1)) / 2);
        let config = ModelConfig {
            architecture: Architecture::SmallCnn,
            input_shape: input_shape.to_vec(),
            num_classes,
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: c,
                    out_channels: filters,
                    kernel,
                },
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    in_channels: filters,
                    out_channels: filters,
                    kernel,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: filters * oh * ow,
                    outputs: hidden,
                    bias: true,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: hidden,
                    outputs: num_classes,
                    bias: true,
                },
            ],
        };
        config.validate()?;
        Ok(config)
    }

    /// Propagates shapes through the layer list and checks the output width.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(UqError::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(UqError::Config(format!(
                "invalid input shape {:?}",
                self.input_shape
            )));
        }
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (layer, shape.as_slice()) {
                (LayerSpec::Dense { inputs, outputs, .. }, &[d]) if d == *inputs && *outputs > 0 => {
                    vec![*outputs]
                }
                (
                    LayerSpec::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                    },
                    &[c, h, w],
                ) if c == *in_channels && *kernel >= 1 && *kernel <= h && *kernel <= w => {
                    vec![*out_channels, h - kernel + 1, w - kernel + 1]
                }
                (LayerSpec::MaxPool2d, &[c, h, w]) if h >= 2 && w >= 2 => vec![c, h / 2, w / 2],
                (LayerSpec::Flatten, s) => vec![s.iter().product()],
                (LayerSpec::Relu, s) => s.to_vec(),
                (layer, s) => {
                    return Err(UqError::Config(format!(
                        "layer {i} ({layer:?}) cannot accept input of shape {s:?}"
                    )))
                }
            };
        }
        if shape != [self.num_classes] {
            return Err(UqError::Config(format!(
                "network output shape {shape:?} does not match {} classes",
                self.num_classes
            )));
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Dense { .. })) {
            return Err(UqError::Config("the final layer must be dense".into()));
        }
        Ok(())
    }

    /// `(name, layer_index, shape, fan_in)` for every parameter tensor in
    /// forward order. Only conv and dense layers are counted.
    fn parameter_layout(&self) -> Vec<(String, usize, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut l = 0;
        for layer in &self.layers {
            match *layer {
                LayerSpec::Dense {
                    inputs,
                    outputs,
                    bias,
                } => {
                    l += 1;
                    out.push((format!("dense{l}.weight"), l, vec![inputs, outputs], inputs));
                    if bias {
                        out.push((format!("dense{l}.bias"), l, vec![outputs], inputs));
                    }
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    l += 1;
                    let fan_in = in_channels * kernel * kernel;
                    out.push((
                        format!("conv{l}.weight"),
                        l,
                        vec![out_channels, in_channels, kernel, kernel],
                        fan_in,
                    ));
                    out.push((format!("conv{l}.bias"), l, vec![out_channels], fan_in));
                }
                _ => {}
            }
        }
        out
    }

    pub fn layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_parameterized()).count()
    }
}

/// Ordered, named, layer-indexed parameter tensors of a classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    entries: Vec<NamedTensor>,
}

impl ParameterSet {
    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.entries
    }

    pub fn num_parameters(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn layer_count(&self) -> usize {
        self.entries.last().map_or(0, |e| e.layer_index)
    }

    /// Adds `alpha * delta` entry by entry.
    pub fn add_scaled(&mut self, delta: &GradientBundle, alpha: f64) -> Result<()> {
        if delta.entries().len() != self.entries.len() {
            return Err(UqError::Shape("parameter/gradient layout mismatch".into()));
        }
        for (p, d) in self.entries.iter_mut().zip(delta.entries()) {
            p.value.add_scaled(&d.value, alpha)?;
        }
        Ok(())
    }

    /// A gradient-shaped bundle of zeros.
    pub fn zeros_bundle(&self) -> GradientBundle {
        GradientBundle::new(
            self.entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    layer_index: e.layer_index,
                    value: Tensor::zeros(e.value.shape()),
                })
                .collect(),
        )
        .expect("parameter layout is gap-free")
    }
}

/// Probability vector over `C` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(UqError::Domain("a probability vector needs at least 2 classes".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(UqError::Domain(format!("invalid probabilities {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(UqError::Domain(format!("probabilities sum to {total}")));
        }
        Ok(ProbVector(probs))
    }

    pub(crate) fn from_log_probs(log_probs: &[f64]) -> Self {
        ProbVector(log_probs.iter().map(|v| v.exp()).collect())
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        let mut row = logits.to_vec();
        crate::autodiff::log_softmax_in_place(&mut row);
        ProbVector::from_log_probs(&row)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most probable class; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// The graph for one batched forward pass, with handles to every parameter
/// leaf, the input leaf, the logits and the per-row log-probabilities.
pub struct ForwardRecord {
    pub graph: Graph,
    pub params: Vec<NodeId>,
    pub input: NodeId,
    pub logits: NodeId,
    pub log_probs: NodeId,
}

impl ForwardRecord {
    /// Collects the gradients of a scalar node with respect to the
    /// parameters into a bundle laid out like `params`.
    pub fn parameter_gradients(&self, seed: NodeId, params: &ParameterSet) -> Result<GradientBundle> {
        let mut grads = self.graph.backward(seed)?;
        let entries = params
            .entries()
            .iter()
            .zip(&self.params)
            .map(|(e, id)| NamedTensor {
                name: e.name.clone(),
                layer_index: e.layer_index,
                value: grads.take(*id).expect("parameter leaf"),
            })
            .collect();
        GradientBundle::new(entries)
    }

    /// Row `i` of the log-probabilities as a probability vector.
    pub fn probs(&self, row: usize) -> ProbVector {
        let lp = self.graph.value(self.log_probs);
        let c = *lp.shape().last().unwrap();
        ProbVector::from_log_probs(&lp.data()[row * c..(row + 1) * c])
    }

    pub fn rows(&self) -> usize {
        let lp = self.graph.value(self.log_probs);
        lp.len() / lp.shape().last().unwrap()
    }
}

/// A classifier: architecture plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParameterSet,
}

impl Model {
    pub fn new(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != params.entries.len() {
            return Err(UqError::Shape(format!(
                "config expects {} parameter tensors, got {}",
                layout.len(),
                params.entries.len()
            )));
        }
        for ((name, l, shape, _), e) in layout.iter().zip(&params.entries) {
            if *name != e.name || *l != e.layer_index || shape.as_slice() != e.value.shape() {
                return Err(UqError::Shape(format!(
                    "parameter {} (layer {}, shape {:?}) does not match expected {name} (layer {l}, shape {shape:?})",
                    e.name,
                    e.layer_index,
                    e.value.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    /// He-normal weights with standard deviation `sqrt(2 / fan_in)`, zero
    /// biases. Deterministic for a given seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = config
            .parameter_layout()
            .into_iter()
            .map(|(name, layer_index, shape, fan_in)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                };
                NamedTensor {
                    name,
                    layer_index,
                    value: Tensor::from_parts(shape, data),
                }
            })
            .collect();
        Model::new(config, ParameterSet { entries })
    }

    /// The two-class linear-softmax model with weights `(w1, w2)` on a scalar
    /// input and no bias; with input `1` its logits are `(w1, w2)`.
    pub fn linear_softmax_reference(w1: f64, w2: f64) -> Self {
        let config = ModelConfig {
            architecture: Architecture::Mlp,
            input_shape: vec![1],
            num_classes: 2,
            layers: vec![LayerSpec::Dense {
                inputs: 1,
                outputs: 2,
                bias: false,
            }],
        };
        let params = ParameterSet {
            entries: vec![NamedTensor {
                name: "dense1.weight".into(),
                layer_index: 1,
                value: Tensor::from_parts(vec![1, 2], vec![w1, w2]),
            }],
        };
        Model::new(config, params).expect("reference model is well formed")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Same architecture, different parameters.
    pub fn with_params(&self, params: ParameterSet) -> Result<Model> {
        Model::new(self.config.clone(), params)
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.config.input_shape.as_slice() {
            return Err(UqError::Shape(format!(
                "input shape {:?} does not match model input {:?}",
                x.shape(),
                self.config.input_shape
            )));
        }
        Ok(())
    }

    /// Builds the batched forward graph for `inputs`. When `final_mask` is
    /// given, it multiplies the activations entering the final dense layer.
    pub fn record(&self, inputs: &[Tensor], final_mask: Option<Tensor>) -> Result<ForwardRecord> {
        for x in inputs {
            self.check_input(x)?;
        }
        let batch = Tensor::stack(inputs)?;
        let n = inputs.len();
        let mut graph = Graph::new();
        let params = self
            .params
            .entries
            .iter()
            .map(|e| graph.leaf(e.value.clone()))
            .collect::<Result<Vec<_>>>()?;
        let input = graph.leaf(batch)?;
        let mut h = input;
        let mut next_param = 0;
        let last = self.config.layers.len() - 1;
        let mut final_mask = final_mask;
        for (i, layer) in self.config.layers.iter().enumerate() {
            h = match *layer {
                LayerSpec::Dense { bias, .. } => {
                    if i == last {
                        if let Some(mask) = final_mask.take() {
                            h = graph.mask_mul(h, mask)?;
                        }
                    }
                    let w = params[next_param];
                    next_param += 1;
                    let mut out = graph.matmul(h, w)?;
                    if bias {
                        out = graph.add_bias(out, params[next_param])?;
                        next_param += 1;
                    }
                    out
                }
                LayerSpec::Conv2d { .. } => {
                    let (k, b) = (params[next_param], params[next_param + 1]);
                    next_param += 2;
                    graph.conv2d(h, k, b)?
                }
                LayerSpec::Relu => graph.relu(h)?,
                LayerSpec::MaxPool2d => graph.maxpool2d(h)?,
                LayerSpec::Flatten => {
                    let width = graph.value(h).len() / n;
                    graph.reshape(h, vec![n, width])?
                }
            };
        }
        let logits = h;
        let log_probs = graph.log_softmax(logits)?;
        Ok(ForwardRecord {
            graph,
            params,
            input,
            logits,
            log_probs,
        })
    }

    /// Width of the activations entering the final dense layer.
    pub fn final_layer_inputs(&self) -> usize {
        match self.config.layers.last() {
            Some(LayerSpec::Dense { inputs, .. }) => *inputs,
            _ => unreachable!("validated config ends in a dense layer"),
        }
    }

    /// Logits for a single input together with the replayable record.
    pub fn forward_logits(&self, x: &Tensor) -> Result<(Tensor, ForwardRecord)> {
        let record = self.record(std::slice::from_ref(x), None)?;
        let logits = record.graph.value(record.logits).row(0);
        Ok((logits, record))
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<ProbVector> {
        let record = self.record(std::slice::from_ref(x), None)?;
        Ok(record.probs(0))
    }

    pub fn predict_proba_batch(&self, xs: &[Tensor]) -> Result<Vec<ProbVector>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let record = self.record(xs, None)?;
        Ok((0..xs.len()).map(|i| record.probs(i)).collect())
    }

    /// Attaches an inverted-dropout layer in front of the final dense layer.
    pub fn insert_dropout(&self, rate: f64) -> Result<DropoutModel<'_>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(UqError::Domain(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(DropoutModel { model: self, rate })
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelFile {
            version: MODEL_FILE_VERSION,
            config: self.config.clone(),
            layers: self
                .params
                .entries
                .iter()
                .map(|e| LayerRecord {
                    name: e.name.clone(),
                    layer_index: e.layer_index,
                    shape: e.value.shape().to_vec(),
                    data: e.value.data().to_vec(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&doc)
            .map_err(|e| UqError::format("document", e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelFile =
            serde_json::from_str(text).map_err(|e| UqError::format("document", e.to_string()))?;
        if doc.version != MODEL_FILE_VERSION {
            return Err(UqError::format(
                "version",
                format!("unsupported version {} (expected {MODEL_FILE_VERSION})", doc.version),
            ));
        }
        doc.config
            .validate()
            .map_err(|e| UqError::format("config", e.to_string()))?;
        let layout = doc.config.parameter_layout();
        if layout.len() != doc.layers.len() {
            return Err(UqError::format(
                "layers",
                format!("expected {} entries, found {}", layout.len(), doc.layers.len()),
            ));
        }
        let mut entries = Vec::with_capacity(layout.len());
        for (i, ((name, l, shape, _), rec)) in layout.into_iter().zip(doc.layers).enumerate() {
            if rec.name != name {
                return Err(UqError::format(
                    format!("layers[{i}].name"),
                    format!("expected {name}, found {}", rec.name),
                ));
            }
            if rec.layer_index != l {
                return Err(UqError::format(
                    format!("layers[{i}].layer_index"),
                    format!("expected {l}, found {}", rec.layer_index),
                ));
            }
            if rec.shape != shape {
                return Err(UqError::format(
                    format!("layers[{i}].shape"),
                    format!("expected {shape:?}, found {:?}", rec.shape),
                ));
            }
            let value = Tensor::new(rec.shape, rec.data)
                .map_err(|e| UqError::format(format!("layers[{i}].data"), e.to_string()))?;
            if !value.is_finite() {
                return Err(UqError::format(format!("layers[{i}].data"), "non-finite value"));
            }
            entries.push(NamedTensor {
                name: rec.name,
                layer_index: rec.layer_index,
                value,
            });
        }
        Model::new(doc.config, ParameterSet { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| UqError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| UqError::io(path, e))?;
        Model::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    config: ModelConfig,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    name: String,
    layer_index: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// A model with an inverted-dropout layer before its final dense layer.
#[derive(Clone, Copy, Debug)]
pub struct DropoutModel<'a> {
    model: &'a Model,
    rate: f64,
}

impl DropoutModel<'_> {
    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// Draws a keep-mask for `rows` inputs, scaled by `1 / (1 - rate)`.
    pub fn draw_mask<R: Rng>(&self, rows: usize, rng: &mut R) -> Tensor {
        let width = self.model.final_layer_inputs();
        let keep = 1.0 - self.rate;
        let data = (0..rows * width)
            .map(|_| {
                if self.rate == 0.0 || rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::from_parts(vec![rows, width], data)
    }

    /// One stochastic forward pass per input with fresh masks from `rng`.
    pub fn forward<R: Rng>(&self, inputs: &[Tensor], rng: &mut R) -> Result<ForwardRecord> {
        let mask = self.draw_mask(inputs.len(), rng);
        self.model.record(inputs, Some(mask))
    }

    pub fn predict_proba<R: Rng>(&self, x: &Tensor, rng: &mut R) -> Result<ProbVector> {
        Ok(self.forward(std::slice::from_ref(x), rng)?.probs(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_parameter_count() {
        let m = Model::init(ModelConfig::mlp(&[2, 64, 64, 3]).unwrap(), 0).unwrap();
        assert_eq!(m.params().num_parameters(), 2 * 64 + 64 + 64 * 64 + 64 + 64 * 3 + 3);
        assert_eq!(m.params().num_parameters(), 4547);
        assert_eq!(m.params().layer_count(), 3);
    }

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig::mlp(&[4, 8, 3]).unwrap();
        assert_eq!(Model::init(c.clone(), 9).unwrap(), Model::init(c.clone(), 9).unwrap());
        assert_ne!(Model::init(c.clone(), 9).unwrap(), Model::init(c, 10).unwrap());
    }

    #[test]
    fn config_rejects_bad_shapes() {
        assert!(ModelConfig::mlp(&[2, 1]).is_err());
        let mut c = ModelConfig::mlp(&[2, 4, 3]).unwrap();
        c.num_classes = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn small_cnn_layer_indices() {
        let c = ModelConfig::small_cnn([1, 12, 12], 4, 3, 16, 10).unwrap();
        let m = Model::init(c, 1).unwrap();
        let idx: Vec<usize> = m.params().entries().iter().map(|e| e.layer_index).collect();
        assert_eq!(idx, vec![1, 1, 2, 2, 3, 3, 4, 4]);
        let p = m.predict_proba(&Tensor::full(&[1, 12, 12], 0.5)).unwrap();
        assert_eq!(p.len(), 10);
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let c = ModelConfig::mlp(&[3, 5, 4]).unwrap();
        let mut m = Model::init(c, 2).unwrap();
        for e in m.params_mut().entries_mut() {
            e.value = Tensor::zeros(e.value.shape());
        }
        let (logits, _) = m.forward_logits(&Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let p = m.predict_proba(&Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        assert!(p.probs().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn reference_model_logits_and_probabilities() {
        let m = Model::linear_softmax_reference(0.7, -1.1);
        let (logits, _) = m.forward_logits(&Tensor::vector(vec![1.0])).unwrap();
        assert_eq!(logits.data(), &[0.7, -1.1]);
        let m = Model::linear_softmax_reference(4f64.ln(), 0.0);
        let p = m.predict_proba(&Tensor::vector(vec![1.0])).unwrap();
        assert!((p.probs()[0] - 0.8).abs() < 1e-15 && (p.probs()[1] - 0.2).abs() < 1e-15);
        let eq = Model::linear_softmax_reference(3.0, 3.0);
        let p = eq.predict_proba(&Tensor::vector(vec![1.0])).unwrap();
        assert!(p.probs().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn input_shape_mismatch_is_an_error() {
        let m = Model::init(ModelConfig::mlp(&[2, 3, 2]).unwrap(), 0).unwrap();
        assert!(matches!(
            m.predict_proba(&Tensor::vector(vec![1.0, 2.0, 3.0])),
            Err(UqError::Shape(_))
        ));
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let m = Model::init(ModelConfig::mlp(&[2, 16, 16, 3]).unwrap(), 4).unwrap();
        let x = Tensor::vector(vec![0.3, -0.8]);
        let d = m.insert_dropout(0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(d.predict_proba(&x, &mut rng).unwrap(), m.predict_proba(&x).unwrap());
        assert!(m.insert_dropout(1.0).is_err());
        assert!(m.insert_dropout(-0.1).is_err());
    }

    #[test]
    fn dropout_same_seed_same_output() {
        let m = Model::init(ModelConfig::mlp(&[2, 16, 3]).unwrap(), 4).unwrap();
        let x = Tensor::vector(vec![0.3, -0.8]);
        let d = m.insert_dropout(0.4).unwrap();
        let a = d.predict_proba(&x, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = d.predict_proba(&x, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = Model::init(ModelConfig::small_cnn([1, 8, 8], 2, 3, 5, 3).unwrap(), 11).unwrap();
        let back = Model::from_json(&m.to_json().unwrap()).unwrap();
        for (a, b) in m.params().entries().iter().zip(back.params().entries()) {
            let bits_a: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn truncated_and_mismatched_files_fail() {
        let m = Model::init(ModelConfig::mlp(&[2, 3, 2]).unwrap(), 0).unwrap();
        let json = m.to_json().unwrap();
        let truncated = &json[..json.len() / 2];
        assert!(matches!(Model::from_json(truncated), Err(UqError::Format { .. })));

        let bumped = json.replacen("\"version\": 1", "\"version\": 2", 1);
        match Model::from_json(&bumped) {
            Err(UqError::Format { field, .. }) => assert_eq!(field, "version"),
            other => panic!("expected version error, got {other:?}"),
        }

        let reshaped = json.replacen("\"shape\": [\n        2,\n        3\n      ]", "\"shape\": [\n        3,\n        2\n      ]", 1);
        assert_ne!(reshaped, json);
        match Model::from_json(&reshaped) {
            Err(UqError::Format { field, .. }) => assert_eq!(field, "layers[0].shape"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }
}

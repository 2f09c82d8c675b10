//! A small dense classifier with manual forward/backward passes.
//!
//! This stands in for a pre-trained transformer: an embedding-role linear
//! layer, relu hidden layers, a pre-classification layer and a
//! classification head, each a plain dense layer with bias. Training state
//! is value-semantic; forward/backward never mutate the model.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{domain, stream};
use rand::seq::SliceRandom;
use rand::Rng;

/// Functional role of a layer inside the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum LayerRole {
    Embedding,
    Hidden,
    PreClassification,
    Classification,
}

impl LayerRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerRole::Embedding => "embedding",
            LayerRole::Hidden => "hidden",
            LayerRole::PreClassification => "pre_classification",
            LayerRole::Classification => "classification",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// One dense layer: `y = act(W x + b)` with `W` of shape out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub role: LayerRole,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

/// Shape description used to build fresh models.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub embedding_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub pre_classification_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 20,
            embedding_dim: 20,
            hidden_dims: vec![30, 30],
            pre_classification_dim: 30,
            num_classes: 20,
        }
    }
}

/// Ordered stack of dense layers forming the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<DenseLayer>,
    input_dim: usize,
    num_classes: usize,
}

impl ModelParams {
    /// Validates layer composition: consecutive dims must chain from
    /// `input_dim`, the classification layer must emit `num_classes`, and
    /// there must be exactly one pre-classification and one classification
    /// layer.
    pub fn new(layers: Vec<DenseLayer>, input_dim: usize, num_classes: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("model needs at least one layer".to_string()));
        }
        let mut prev = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_dim() != prev {
                return Err(Error::shape(format!(
                    "layer {i} expects input {} but gets {prev}",
                    layer.in_dim()
                )));
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::shape(format!(
                    "layer {i} bias length {} != rows {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            prev = layer.out_dim();
        }
        let pre = layers
            .iter()
            .filter(|l| l.role == LayerRole::PreClassification)
            .count();
        let cls = layers
            .iter()
            .filter(|l| l.role == LayerRole::Classification)
            .count();
        if pre != 1 || cls != 1 {
            return Err(Error::shape(format!(
                "model needs exactly one pre-classification and one classification layer (got {pre} and {cls})"
            )));
        }
        let last = layers.last().unwrap();
        if last.role != LayerRole::Classification || last.out_dim() != num_classes {
            return Err(Error::shape(format!(
                "final layer must be the classification head with {num_classes} outputs"
            )));
        }
        Ok(ModelParams {
            layers,
            input_dim,
            num_classes,
        })
    }

    /// Fresh model from a shape config with seeded Glorot-uniform weights
    /// (`+-sqrt(6 / (fan_in + fan_out))`) and zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, &[domain::PRETRAIN, 0]);
        let mut dims = vec![(config.input_dim, config.embedding_dim, LayerRole::Embedding, Activation::None)];
        let mut prev = config.embedding_dim;
        for &h in &config.hidden_dims {
            dims.push((prev, h, LayerRole::Hidden, Activation::Relu));
            prev = h;
        }
        dims.push((
            prev,
            config.pre_classification_dim,
            LayerRole::PreClassification,
            Activation::Relu,
        ));
        dims.push((
            config.pre_classification_dim,
            config.num_classes,
            LayerRole::Classification,
            Activation::None,
        ));

        let layers = dims
            .into_iter()
            .map(|(fan_in, fan_out, role, activation)| {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    Matrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-bound..bound));
                DenseLayer {
                    weight,
                    bias: vec![0.0; fan_out],
                    role,
                    activation,
                }
            })
            .collect();
        ModelParams::new(layers, config.input_dim, config.num_classes)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> &DenseLayer {
        &self.layers[idx]
    }

    pub fn layer_mut(&mut self, idx: usize) -> &mut DenseLayer {
        &mut self.layers[idx]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Indices of layers with the given role.
    pub fn layers_with_role(&self, role: LayerRole) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.role == role)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Per-layer activations cached by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// inputs[i] is the batch fed into layer i; inputs0 is the raw batch.
    pub inputs: Vec<Matrix>,
    /// Pre-activation outputs per layer.
    pub pre_activations: Vec<Matrix>,
    /// Final logits (post last layer).
    pub logits: Matrix,
}

/// Forward pass over a batch (samples x input_dim), returning logits
/// (samples x num_classes) and cached activations.
pub fn forward(model: &ModelParams, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if batch.cols() != model.input_dim {
        return Err(Error::shape(format!(
            "batch has {} features, model expects {}",
            batch.cols(),
            model.input_dim
        )));
    }
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut pre_activations = Vec::with_capacity(model.layers.len());
    let mut x = batch.clone();
    for layer in &model.layers {
        inputs.push(x.clone());
        let z = layer_affine(layer, &x)?;
        pre_activations.push(z.clone());
        x = apply_activation(&z, layer.activation);
    }
    let logits = x;
    Ok((
        logits.clone(),
        ForwardCache {
            inputs,
            pre_activations,
            logits,
        },
    ))
}

/// `z = x . W^T + b` broadcast over batch rows.
pub(crate) fn layer_affine(layer: &DenseLayer, x: &Matrix) -> Result<Matrix> {
    let mut z = x.matmul(&layer.weight.transpose())?;
    for i in 0..z.rows() {
        for j in 0..z.cols() {
            let v = z.get(i, j) + layer.bias[j];
            z.set(i, j, v);
        }
    }
    Ok(z)
}

pub(crate) fn apply_activation(z: &Matrix, act: Activation) -> Matrix {
    match act {
        Activation::None => z.clone(),
        Activation::Relu => Matrix::from_fn(z.rows(), z.cols(), |i, j| z.get(i, j).max(0.0)),
    }
}

pub(crate) fn activation_grad_mask(z: &Matrix, act: Activation) -> Option<Matrix> {
    match act {
        Activation::None => None,
        Activation::Relu => Some(Matrix::from_fn(z.rows(), z.cols(), |i, j| {
            if z.get(i, j) > 0.0 {
                1.0
            } else {
                0.0
            }
        })),
    }
}

/// Mean cross-entropy of softmax(logits) against integer labels, plus the
/// gradient with respect to logits (already divided by the batch size).
pub(crate) fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let n = logits.rows();
    let c = logits.cols();
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} out of range 0..{c}")));
    }
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss -= (exps[labels[i]] / sum).ln();
        for j in 0..c {
            let p = exps[j] / sum;
            let target = if j == labels[i] { 1.0 } else { 0.0 };
            grad.set(i, j, (p - target) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}

/// Backward pass from a [`ForwardCache`]: mean cross-entropy loss and
/// gradients for every weight and bias, shape-congruent with the model.
pub fn backward(model: &ModelParams, cache: &ForwardCache, labels: &[usize]) -> Result<(f64, ParamDelta)> {
    let (loss, dlogits) = softmax_cross_entropy(&cache.logits, labels)?;
    let mut weight_grads = vec![Matrix::zeros(0, 0); model.layers.len()];
    let mut bias_grads = vec![Vec::new(); model.layers.len()];
    let mut dz = dlogits;
    for idx in (0..model.layers.len()).rev() {
        let layer = &model.layers[idx];
        // Last layer has no activation; hidden layers gate dz through relu'.
        if let Some(mask) = activation_grad_mask(&cache.pre_activations[idx], layer.activation) {
            dz = hadamard(&dz, &mask);
        }
        weight_grads[idx] = dz.transpose().matmul(&cache.inputs[idx])?;
        bias_grads[idx] = column_sums(&dz);
        if idx > 0 {
            dz = dz.matmul(&layer.weight)?;
        }
    }
    Ok((
        loss,
        ParamDelta {
            weights: weight_grads,
            biases: bias_grads,
        },
    ))
}

pub(crate) fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * b.get(i, j))
}

pub(crate) fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += m.get(i, j);
        }
    }
    out
}

/// Per-layer parameter differences (or gradients), shape-congruent with a
/// source model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDelta {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamDelta {
    pub fn zeros_like(model: &ModelParams) -> ParamDelta {
        ParamDelta {
            weights: model
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn congruent_with(&self, model: &ModelParams) -> bool {
        self.weights.len() == model.layers.len()
            && self
                .weights
                .iter()
                .zip(&model.layers)
                .all(|(w, l)| w.same_shape(&l.weight))
            && self
                .biases
                .iter()
                .zip(&model.layers)
                .all(|(b, l)| b.len() == l.bias.len())
    }

    pub fn scale(&self, c: f64) -> ParamDelta {
        ParamDelta {
            weights: self.weights.iter().map(|w| w.scale(c)).collect(),
            biases: self
                .biases
                .iter()
                .map(|b| b.iter().map(|&v| v * c).collect())
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &ParamDelta, c: f64) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(Error::shape("delta layer counts differ".to_string()));
        }
        for (w, ow) in self.weights.iter_mut().zip(&other.weights) {
            if !w.same_shape(ow) {
                return Err(Error::shape("delta weight shapes differ".to_string()));
            }
            for (a, &b) in w.data_mut().iter_mut().zip(ow.data()) {
                *a += c * b;
            }
        }
        for (b, ob) in self.biases.iter_mut().zip(&other.biases) {
            for (a, &v) in b.iter_mut().zip(ob) {
                *a += c * v;
            }
        }
        Ok(())
    }
}

/// Elementwise `current - origin`.
pub fn delta(current: &ModelParams, origin: &ModelParams) -> Result<ParamDelta> {
    if current.layers.len() != origin.layers.len() {
        return Err(Error::shape("models have different layer counts".to_string()));
    }
    let mut weights = Vec::with_capacity(current.layers.len());
    let mut biases = Vec::with_capacity(current.layers.len());
    for (cur, org) in current.layers.iter().zip(&origin.layers) {
        weights.push(cur.weight.sub(&org.weight)?);
        if cur.bias.len() != org.bias.len() {
            return Err(Error::shape("bias lengths differ".to_string()));
        }
        biases.push(cur.bias.iter().zip(&org.bias).map(|(a, b)| a - b).collect());
    }
    Ok(ParamDelta { weights, biases })
}

/// `model + scale * d`, leaving entries with a zero contribution
/// bit-identical to the input.
pub fn apply(model: &ModelParams, d: &ParamDelta, scale: f64) -> Result<ModelParams> {
    if !d.congruent_with(model) {
        return Err(Error::shape("delta not congruent with model".to_string()));
    }
    let mut out = model.clone();
    for (idx, layer) in out.layers.iter_mut().enumerate() {
        let dw = &d.weights[idx];
        for (w, &g) in layer.weight.data_mut().iter_mut().zip(dw.data()) {
            let step = scale * g;
            if step != 0.0 {
                *w += step;
            }
        }
        for (b, &g) in layer.bias.iter_mut().zip(&d.biases[idx]) {
            let step = scale * g;
            if step != 0.0 {
                *b += step;
            }
        }
    }
    Ok(out)
}

/// Fraction of samples whose argmax logit matches the label (ties resolve to
/// the lowest class id).
pub fn accuracy(model: &ModelParams, ds: &Dataset, indices: Option<&[usize]>) -> Result<f64> {
    let idx: Vec<usize> = match indices {
        Some(list) => list.to_vec(),
        None => (0..ds.len()).collect(),
    };
    if idx.is_empty() {
        return Err(Error::Data("accuracy over empty index set".to_string()));
    }
    let batch = ds.features_for(&idx);
    let (logits, _) = forward(model, &batch)?;
    let mut correct = 0usize;
    for (row, &i) in idx.iter().enumerate() {
        if argmax(logits.row(row)) == ds.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Centralized seeded SGD producing the frozen starting point for all
/// federated experiments. `epochs = 0` returns the seeded init verbatim.
pub fn pretrain(
    config: &ModelConfig,
    source: &Dataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ModelParams> {
    if source.num_classes != config.num_classes {
        return Err(Error::Data(format!(
            "source task has {} classes, model expects {}",
            source.num_classes, config.num_classes
        )));
    }
    let mut model = ModelParams::init(config, seed)?;
    let mut rng = stream(seed, &[domain::PRETRAIN, 1]);
    let batch_size = 32;
    let mut order: Vec<usize> = (0..source.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let batch = source.features_for(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| source.labels[i]).collect();
            let (_, cache) = forward(&model, &batch)?;
            let (_, grads) = backward(&model, &cache, &labels)?;
            model = apply(&model, &grads, -lr)?;
        }
    }
    Ok(model)
}

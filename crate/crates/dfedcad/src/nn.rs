//! Dense matrices, a small feed-forward classifier with exact manual
//! gradients, and the masked momentum update every client runs.
//!
//! A layer stores its weight matrix with shape (out_dim, in_dim) and maps an
//! input row `x` to `tanh(W x + b)` on hidden layers and to raw logits on the
//! final layer. The prune mask multiplies weights elementwise before every
//! forward and backward pass, so masked weights contribute nothing and
//! receive zero gradient; `apply_update` pins them back to exactly zero.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Row-major dense matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Flat row-major view of all entries.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Hidden-layer nonlinearity. The output layer always produces raw logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed in terms of the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// One dense layer: weight (out_dim × in_dim) plus bias (out_dim).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// An ordered stack of dense layers; the unit of training, compression and
/// alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

impl ModelParams {
    /// Build a model, checking that consecutive layer dimensions compose and
    /// every bias matches its layer's output dimension.
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("model must have at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} does not match out_dim {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if i + 1 < layers.len() && layers[i + 1].in_dim() != layer.out_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} out_dim {} does not compose with layer {} in_dim {}",
                    layer.out_dim(),
                    i + 1,
                    layers[i + 1].in_dim()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    /// Random initialization with per-layer scale `scale / sqrt(in_dim)`.
    ///
    /// `dims` lists [input, hidden..., classes]; a two-entry list yields a
    /// single linear layer (multiclass logistic regression).
    pub fn init<R: Rng>(dims: &[usize], activation: Activation, scale: f64, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("bad layer dims {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            let std = scale / (in_dim as f64).sqrt();
            let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
            let weight = Matrix::from_fn(out_dim, in_dim, |_, _| normal.sample(rng));
            layers.push(Layer { weight, bias: vec![0.0; out_dim] });
        }
        ModelParams::new(layers, activation)
    }

    /// Layer dimension chain [input, hidden..., classes].
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].in_dim()];
        d.extend(self.layers.iter().map(|l| l.out_dim()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Output dimension of the final layer = number of classes.
    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len()).sum()
    }

    fn congruent(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.in_dim() == b.in_dim() && a.out_dim() == b.out_dim())
    }

    /// Cheap fingerprint of all parameters, used to detect stale caches.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for layer in &self.layers {
            for &v in layer.weight.data().iter().chain(layer.bias.iter()) {
                h = h.rotate_left(5) ^ v.to_bits();
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        }
        h
    }
}

/// Elementwise mean of shape-congruent models; the reference model for the
/// momentum term.
pub fn mean_models(models: &[&ModelParams]) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::Shape("mean of zero models".into()))?;
    for m in &models[1..] {
        if !first.congruent(m) {
            return Err(Error::Protocol("received models disagree on architecture".into()));
        }
    }
    let scale = 1.0 / models.len() as f64;
    let mut out = (*first).clone();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        for (i, w) in layer.weight.data_mut().iter_mut().enumerate() {
            *w = models.iter().map(|m| m.layers[l].weight.data()[i]).sum::<f64>() * scale;
        }
        for (i, b) in layer.bias.iter_mut().enumerate() {
            *b = models.iter().map(|m| m.layers[l].bias[i]).sum::<f64>() * scale;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Gradient and mask
// ---------------------------------------------------------------------------

/// Parameter gradient, shape-congruent with its model.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradient {
    pub fn zeros_like(model: &ModelParams) -> Self {
        Self {
            weights: model
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    /// Add `coeff * extra` into the weight gradient of layer `l`.
    /// `extra` is the flattened row-major layer gradient.
    pub fn add_weight_grad(&mut self, l: usize, extra: &[f64], coeff: f64) {
        debug_assert_eq!(self.weights[l].data().len(), extra.len());
        for (g, &e) in self.weights[l].data_mut().iter_mut().zip(extra) {
            *g += coeff * e;
        }
    }
}

/// Per-layer boolean vector with one flag per weight scalar; biases are never
/// masked. `false` means pruned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    layers: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn all_true(model: &ModelParams) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| vec![true; l.weight.data().len()])
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<Vec<bool>>) -> Self {
        Self { layers }
    }

    pub fn layer(&self, l: usize) -> &[bool] {
        &self.layers[l]
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Unmasked weight count per layer.
    pub fn nnz_per_layer(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.iter().filter(|&&b| b).count())
            .collect()
    }

    pub fn total_nnz(&self) -> usize {
        self.nnz_per_layer().iter().sum()
    }

    fn congruent(&self, model: &ModelParams) -> bool {
        self.layers.len() == model.layers.len()
            && self
                .layers
                .iter()
                .zip(&model.layers)
                .all(|(m, l)| m.len() == l.weight.data().len())
    }
}

// ---------------------------------------------------------------------------
// Forward / backward / update / evaluate
// ---------------------------------------------------------------------------

/// Activations recorded by `forward_loss`, sufficient for `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// activations[0] is the input batch; activations[l+1] the output of
    /// layer l (post-tanh on hidden layers, raw logits on the last).
    activations: Vec<Matrix>,
    /// Softmax probabilities, batch × classes.
    probs: Matrix,
    params_checksum: u64,
}

fn check_batch(model: &ModelParams, mask: &PruneMask, features: &Matrix, labels: &[u16]) -> Result<()> {
    if features.rows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if features.cols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "feature dim {} does not match model input dim {}",
            features.cols(),
            model.input_dim()
        )));
    }
    if labels.len() != features.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} samples",
            labels.len(),
            features.rows()
        )));
    }
    let classes = model.classes();
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= classes) {
        return Err(Error::Shape(format!("label {bad} out of range for {classes} classes")));
    }
    if !mask.congruent(model) {
        return Err(Error::Shape("mask shape does not match model".into()));
    }
    Ok(())
}

/// Forward pass of the masked model over one batch; returns the raw output of
/// every layer so callers can finish with a loss or an argmax.
fn forward_activations(model: &ModelParams, mask: &PruneMask, features: &Matrix) -> Result<Vec<Matrix>> {
    let batch = features.rows();
    let mut acts: Vec<Matrix> = Vec::with_capacity(model.layers.len() + 1);
    acts.push(features.clone());
    let last = model.layers.len() - 1;
    for (l, layer) in model.layers.iter().enumerate() {
        let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
        let w = layer.weight.data();
        let m = mask.layer(l);
        let prev = &acts[l];
        let mut next = Matrix::zeros(batch, out_dim);
        for s in 0..batch {
            let x = prev.row(s);
            for o in 0..out_dim {
                let row = &w[o * in_dim..(o + 1) * in_dim];
                let mrow = &m[o * in_dim..(o + 1) * in_dim];
                let mut z = layer.bias[o];
                for i in 0..in_dim {
                    if mrow[i] {
                        z += row[i] * x[i];
                    }
                }
                let v = if l == last { z } else { model.activation.apply(z) };
                next.set(s, o, v);
            }
        }
        if !next.is_finite() {
            return Err(Error::Numeric(format!("non-finite activation in layer {l}")));
        }
        acts.push(next);
    }
    Ok(acts)
}

/// Mean softmax cross-entropy of the masked model over a batch, plus the
/// cache `backward` needs.
pub fn forward_loss(
    model: &ModelParams,
    mask: &PruneMask,
    features: &Matrix,
    labels: &[u16],
) -> Result<(f64, ForwardCache)> {
    check_batch(model, mask, features, labels)?;
    let acts = forward_activations(model, mask, features)?;
    let logits = acts.last().unwrap();
    let (batch, classes) = (logits.rows(), logits.cols());
    let mut probs = Matrix::zeros(batch, classes);
    let mut loss = 0.0;
    for s in 0..batch {
        let row = logits.row(s);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..classes {
            let e = (row[c] - max).exp();
            probs.set(s, c, e);
            sum += e;
        }
        for c in 0..classes {
            probs.set(s, c, probs.get(s, c) / sum);
        }
        // -log p[label] computed in log-space for stability.
        loss += sum.ln() + max - row[labels[s] as usize];
    }
    loss /= batch as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    let cache = ForwardCache { activations: acts, probs, params_checksum: model.checksum() };
    Ok((loss, cache))
}

/// Exact gradient of the masked loss. Masked-out weights get zero gradient.
pub fn backward(
    model: &ModelParams,
    mask: &PruneMask,
    cache: &ForwardCache,
    features: &Matrix,
    labels: &[u16],
) -> Result<Gradient> {
    check_batch(model, mask, features, labels)?;
    if cache.params_checksum != model.checksum() {
        return Err(Error::Contract("cache is stale: model changed since forward_loss".into()));
    }
    if cache.activations.len() != model.layers.len() + 1
        || cache.activations[0].rows() != features.rows()
    {
        return Err(Error::Contract("cache does not match this batch".into()));
    }

    let batch = features.rows();
    let inv_batch = 1.0 / batch as f64;
    let mut grad = Gradient::zeros_like(model);

    // dL/dlogits = (softmax - onehot) / batch
    let classes = model.classes();
    let mut delta = Matrix::zeros(batch, classes);
    for s in 0..batch {
        for c in 0..classes {
            let y = if labels[s] as usize == c { 1.0 } else { 0.0 };
            delta.set(s, c, (cache.probs.get(s, c) - y) * inv_batch);
        }
    }

    for l in (0..model.layers.len()).rev() {
        let layer = &model.layers[l];
        let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
        let m = mask.layer(l);
        let prev = &cache.activations[l];

        {
            let gw = grad.weights[l].data_mut();
            let gb = &mut grad.biases[l];
            for s in 0..batch {
                let x = prev.row(s);
                let d = delta.row(s);
                for o in 0..out_dim {
                    let dv = d[o];
                    gb[o] += dv;
                    let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
                    let mrow = &m[o * in_dim..(o + 1) * in_dim];
                    for i in 0..in_dim {
                        if mrow[i] {
                            grow[i] += dv * x[i];
                        }
                    }
                }
            }
        }

        if l > 0 {
            // delta_prev = (delta · W_masked) ⊙ act'(prev)
            let w = layer.weight.data();
            let mut next_delta = Matrix::zeros(batch, in_dim);
            for s in 0..batch {
                let d = delta.row(s);
                let a = prev.row(s);
                for i in 0..in_dim {
                    let mut acc = 0.0;
                    for o in 0..out_dim {
                        if m[o * in_dim + i] {
                            acc += d[o] * w[o * in_dim + i];
                        }
                    }
                    let dv = acc * model.activation.derivative_from_output(a[i]);
                    next_delta.set(s, i, dv);
                }
            }
            delta = next_delta;
        }
    }
    Ok(grad)
}

/// One masked momentum step: θ ← θ − η·(g + γ·(θ − θ_ref)); masked weight
/// positions come out exactly 0. Biases follow the same rule, unmasked.
pub fn apply_update(
    model: &ModelParams,
    grad: &Gradient,
    mask: &PruneMask,
    eta: f64,
    gamma: f64,
    theta_ref: &ModelParams,
) -> Result<ModelParams> {
    if !model.congruent(theta_ref) {
        return Err(Error::Shape("theta_ref shape does not match model".into()));
    }
    if grad.weights.len() != model.layers.len() || !mask.congruent(model) {
        return Err(Error::Shape("gradient or mask shape does not match model".into()));
    }
    let mut out = model.clone();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        if grad.weights[l].data().len() != layer.weight.data().len()
            || grad.biases[l].len() != layer.bias.len()
        {
            return Err(Error::Shape(format!("gradient layer {l} shape mismatch")));
        }
        let gw = grad.weights[l].data();
        let rw = theta_ref.layers[l].weight.data();
        let m = mask.layer(l);
        for (i, w) in layer.weight.data_mut().iter_mut().enumerate() {
            if m[i] {
                *w -= eta * (gw[i] + gamma * (*w - rw[i]));
            } else {
                *w = 0.0;
            }
        }
        let gb = &grad.biases[l];
        let rb = &theta_ref.layers[l].bias;
        for (i, b) in layer.bias.iter_mut().enumerate() {
            *b -= eta * (gb[i] + gamma * (*b - rb[i]));
        }
    }
    Ok(out)
}

/// Top-1 accuracy of the masked model; argmax ties break toward the lowest
/// class index.
pub fn evaluate(model: &ModelParams, mask: &PruneMask, features: &Matrix, labels: &[u16]) -> Result<f64> {
    if features.rows() == 0 {
        return Err(Error::Shape("empty evaluation set".into()));
    }
    check_batch(model, mask, features, labels)?;
    let acts = forward_activations(model, mask, features)?;
    let logits = acts.last().unwrap();
    let mut correct = 0usize;
    for s in 0..logits.rows() {
        let row = logits.row(s);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == labels[s] as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / logits.rows() as f64)
}

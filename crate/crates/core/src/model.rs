//! Dense network with a decoupled representation and linear classifier.
//!
//! The representation is a stack of dense layers, each followed by the
//! configured nonlinearity. The classifier is a single linear layer whose rows
//! are the per-class weight vectors; row `c` together with `bias[c]` forms the
//! atomic class unit used by class-level aggregation.

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Split;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Network shape: `input_dim -> hidden[0] -> ... -> hidden[last] -> classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[out x in]`
    pub weights: Array2<f64>,
    /// `[out]`
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Dense {
            weights: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Self {
        let a = (6.0 / (inp + out) as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((out, inp), || rng.random_range(-a..=a));
        Dense {
            weights,
            bias: Array1::zeros(out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// `x W^T + b` for a row-major batch `x`.
    fn affine(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights.t());
        z += &self.bias;
        z
    }
}

/// Full parameter bundle of one client: representation layers and classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub activation: Activation,
    pub repr: Vec<Dense>,
    /// `[C x H]`; row `c` is the weight vector of class `c`.
    pub classifier: Dense,
}

/// Gradients share the exact shape of the parameters they differentiate.
pub type Gradients = ModelParams;

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let mut repr = Vec::with_capacity(arch.hidden.len());
        let mut inp = arch.input_dim;
        for &out in &arch.hidden {
            repr.push(Dense::glorot(out, inp, rng));
            inp = out;
        }
        ModelParams {
            activation: arch.activation,
            repr,
            classifier: Dense::glorot(arch.classes, inp, rng),
        }
    }

    pub fn zeros(arch: &Architecture) -> Self {
        let mut repr = Vec::with_capacity(arch.hidden.len());
        let mut inp = arch.input_dim;
        for &out in &arch.hidden {
            repr.push(Dense::zeros(out, inp));
            inp = out;
        }
        ModelParams {
            activation: arch.activation,
            repr,
            classifier: Dense::zeros(arch.classes, inp),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            hidden: self.repr.iter().map(Dense::out_dim).collect(),
            classes: self.num_classes(),
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.repr
            .first()
            .map(Dense::in_dim)
            .unwrap_or_else(|| self.classifier.in_dim())
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    pub fn num_values(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Representation layers followed by the classifier.
    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.repr.iter().chain(std::iter::once(&self.classifier))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.repr
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.repr.len() == other.repr.len()
            && self
                .layers()
                .zip(other.layers())
                .all(|(a, b)| a.weights.dim() == b.weights.dim() && a.bias.dim() == b.bias.dim())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let layer = |d: &Dense| Dense {
            weights: d.weights.mapv(&f),
            bias: d.bias.mapv(&f),
        };
        ModelParams {
            activation: self.activation,
            repr: self.repr.iter().map(layer).collect(),
            classifier: layer(&self.classifier),
        }
    }

    /// Element-wise `f(self_entry, other_entry)` over every tensor. Shapes must match.
    pub fn zip_apply(&mut self, other: &ModelParams, f: impl Fn(&mut f64, f64)) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.layers_mut().zip(other.layers()) {
            Zip::from(&mut a.weights)
                .and(&b.weights)
                .for_each(|x, &y| f(x, y));
            Zip::from(&mut a.bias)
                .and(&b.bias)
                .for_each(|x, &y| f(x, y));
        }
    }

    /// Every value in canonical order: per layer, weights row-major then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for l in self.layers() {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) for a given architecture.
    pub fn from_flat(arch: &Architecture, values: &[f64]) -> Result<Self> {
        let mut params = ModelParams::zeros(arch);
        if values.len() != params.num_values() {
            return Err(Error::config(format!(
                "expected {} parameter values, got {}",
                params.num_values(),
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for l in params.layers_mut() {
            l.weights.iter_mut().for_each(|x| *x = it.next().unwrap());
            l.bias.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        Ok(params)
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }

    pub fn squared_distance(&self, other: &ModelParams) -> f64 {
        self.layers()
            .zip(other.layers())
            .map(|(a, b)| {
                let w: f64 = Zip::from(&a.weights)
                    .and(&b.weights)
                    .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
                let bias: f64 = Zip::from(&a.bias)
                    .and(&b.bias)
                    .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
                w + bias
            })
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// SHA-256 over the little-endian bytes of [`flatten`](Self::flatten).
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.flatten() {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Class unit `c`: classifier row and its bias.
    pub fn class_row(&self, c: usize) -> (ArrayView1<'_, f64>, f64) {
        (self.classifier.weights.row(c), self.classifier.bias[c])
    }
}

/// A labeled minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B x D]`
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::usage("batch must contain at least one sample"));
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::config(format!(
                "batch has {} rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Everything [`backward`] needs from a [`forward`] pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input batch, `activations[k]` the output of repr layer `k-1`.
    activations: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

impl ForwardCache {
    pub fn features(&self) -> &Array2<f64> {
        self.activations
            .last()
            .expect("cache always holds the inputs")
    }
}

fn check_input(params: &ModelParams, inputs: &Array2<f64>) -> Result<()> {
    if inputs.ncols() != params.input_dim() {
        return Err(Error::config(format!(
            "feature width {} does not match model input width {}",
            inputs.ncols(),
            params.input_dim()
        )));
    }
    Ok(())
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::config(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Output of the representation layers, `[B x H]`.
pub fn features(params: &ModelParams, inputs: &Array2<f64>) -> Result<Array2<f64>> {
    check_input(params, inputs)?;
    let mut h = inputs.clone();
    for layer in &params.repr {
        let act = params.activation;
        h = layer.affine(&h).mapv_into(|z| act.apply(z));
    }
    Ok(h)
}

/// Classifier logits for precomputed features.
pub fn classify(classifier: &Dense, features: &Array2<f64>) -> Array2<f64> {
    classifier.affine(features)
}

pub fn forward(params: &ModelParams, batch: &Batch) -> Result<(Array2<f64>, ForwardCache)> {
    check_input(params, &batch.inputs)?;
    let mut activations = Vec::with_capacity(params.repr.len() + 1);
    activations.push(batch.inputs.clone());
    for layer in &params.repr {
        let act = params.activation;
        let h = layer
            .affine(activations.last().unwrap())
            .mapv_into(|z| act.apply(z));
        activations.push(h);
    }
    let logits = classify(&params.classifier, activations.last().unwrap());
    let cache = ForwardCache {
        activations,
        logits: logits.clone(),
    };
    Ok((logits, cache))
}

/// Mean softmax cross-entropy over the batch.
pub fn loss_ce(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(Error::config(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::usage("cross-entropy of an empty batch"));
    }
    check_labels(labels, logits.ncols())?;
    let total: f64 = logits
        .outer_iter()
        .zip(labels)
        .map(|(row, &y)| row_nll(row, y))
        .sum();
    Ok(total / labels.len() as f64)
}

/// `logsumexp(row) - row[y]`, computed as `(max - row[y]) + ln(1 + sum_{j != argmax} e^(row_j - max))`
/// so that confident rows keep full relative precision.
fn row_nll(row: ArrayView1<f64>, y: usize) -> f64 {
    let (k, max) = argmax(row);
    let tail: f64 = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    (max - row[y]) + tail.ln_1p()
}

/// Index and value of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Exact gradient of [`loss_ce`] w.r.t. every parameter.
pub fn backward(params: &ModelParams, batch: &Batch, cache: &ForwardCache) -> Result<Gradients> {
    if cache.activations.len() != params.repr.len() + 1
        || cache.activations[0].dim() != batch.inputs.dim()
        || cache.logits.dim() != (batch.len(), params.num_classes())
        || cache
            .activations
            .iter()
            .skip(1)
            .zip(&params.repr)
            .any(|(h, l)| h.ncols() != l.out_dim())
    {
        return Err(Error::Internal(
            "forward cache does not match the parameters or batch".into(),
        ));
    }
    check_labels(&batch.labels, params.num_classes())?;

    let n = batch.len() as f64;
    // dL/dlogits = (softmax - onehot) / B
    let mut delta = softmax_rows(&cache.logits);
    for (mut row, &y) in delta.outer_iter_mut().zip(&batch.labels) {
        row[y] -= 1.0;
    }
    delta /= n;

    let mut grads = params.zeros_like();
    let feats = cache.features();
    grads.classifier.weights = delta.t().dot(feats);
    grads.classifier.bias = delta.sum_axis(Axis(0));
    let mut upstream = delta.dot(&params.classifier.weights);

    for k in (0..params.repr.len()).rev() {
        let out = &cache.activations[k + 1];
        let act = params.activation;
        Zip::from(&mut upstream)
            .and(out)
            .for_each(|d, &h| *d *= act.derivative_from_output(h));
        let input = &cache.activations[k];
        grads.repr[k].weights = upstream.t().dot(input);
        grads.repr[k].bias = upstream.sum_axis(Axis(0));
        if k > 0 {
            upstream = upstream.dot(&params.repr[k].weights);
        }
    }
    Ok(grads)
}

/// Forward + loss + backward in one call.
pub fn loss_and_grad(params: &ModelParams, batch: &Batch) -> Result<(f64, Gradients)> {
    let (logits, cache) = forward(params, batch)?;
    let loss = loss_ce(&logits, &batch.labels)?;
    let grads = backward(params, batch, &cache)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments; weight decay is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
        }
    }

    /// In-place bias-corrected Adam update.
    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &Gradients,
        cfg: &AdamConfig,
    ) -> Result<()> {
        if !params.same_shape(grads) || !params.same_shape(&self.first_moment) {
            return Err(Error::Internal(
                "optimizer shapes do not mirror the parameters".into(),
            ));
        }
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        self.first_moment
            .zip_apply(grads, |m, g| *m = b1 * *m + (1.0 - b1) * g);
        self.second_moment
            .zip_apply(grads, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (cfg.learning_rate, cfg.epsilon);
        let m = &self.first_moment;
        let v = &self.second_moment;
        for ((p, m), v) in params.layers_mut().zip(m.layers()).zip(v.layers()) {
            Zip::from(&mut p.weights)
                .and(&m.weights)
                .and(&v.weights)
                .for_each(|p, &m, &v| *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps));
            Zip::from(&mut p.bias)
                .and(&m.bias)
                .and(&v.bias)
                .for_each(|p, &m, &v| *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps));
        }
        Ok(())
    }
}

/// Functional Adam step: returns the updated parameters and state.
pub fn adam_step(
    params: &ModelParams,
    grads: &Gradients,
    state: &OptimizerState,
    cfg: &AdamConfig,
) -> Result<(ModelParams, OptimizerState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    s.apply(&mut p, grads, cfg)?;
    Ok((p, s))
}

/// Mean loss and argmax accuracy over a whole split.
pub fn evaluate(params: &ModelParams, split: &Split) -> Result<(f64, f64)> {
    if split.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty split"));
    }
    let feats = features(params, &split.features)?;
    let logits = classify(&params.classifier, &feats);
    let loss = loss_ce(&logits, &split.labels)?;
    let correct = logits
        .outer_iter()
        .zip(&split.labels)
        .filter(|(row, &y)| argmax(row.view()).0 == y)
        .count();
    Ok((loss, correct as f64 / split.len() as f64))
}

//! Parameter-combination rules: size-weighted FedAvg, influence-weighted
//! personalized aggregation of the representation and the classifier, and the
//! FedProx proximal objective.
//!
//! Every rule goes through [`weighted_sum`], which accumulates clients in index
//! order. Identical weights therefore produce bit-identical parameters no
//! matter which rule computed them.

use ndarray::{Array, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::{InfluenceMatrix, InfluenceVector};
use crate::model::{loss_and_grad, Batch, Dense, Gradients, ModelParams};

/// Convex combination weights over clients.
///
/// After normalization the largest entry (the pivot) absorbs the rounding
/// residual, so [`total`](Self::total) is exactly `1.0` in floating point.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    weights: Vec<f64>,
    pivot: usize,
}

impl AggregationWeights {
    pub fn uniform(n: usize) -> Self {
        Self::normalized(vec![1.0; n])
    }

    /// `(v_i)^gamma / sum_j (v_j)^gamma`. Values are divided by their maximum
    /// first, which leaves the result unchanged but keeps large exponents in range.
    /// All-zero values give uniform weights.
    pub fn tempered(values: &[f64], gamma: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::usage("cannot normalize an empty weight vector"));
        }
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::usage(format!(
                "gamma must be finite and >= 0 (got {gamma})"
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::usage(format!(
                "losses must be finite and >= 0 (got {bad})"
            )));
        }
        let max = values.iter().copied().fold(0.0, f64::max);
        if max == 0.0 {
            return Ok(Self::uniform(values.len()));
        }
        Ok(Self::normalized(
            values.iter().map(|v| (v / max).powf(gamma)).collect(),
        ))
    }

    /// FedAvg weights `|D_m| / N`.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::usage("dataset sizes must be non-empty and > 0"));
        }
        Ok(Self::normalized(sizes.iter().map(|&s| s as f64).collect()))
    }

    /// Takes weights as given; they must be non-negative and sum to one within 1e-9.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.is_empty()
            || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(Error::usage(format!(
                "invalid aggregation weights {weights:?}"
            )));
        }
        Ok(Self::normalized(weights))
    }

    /// Positive scores in, normalized weights out.
    fn normalized(scores: Vec<f64>) -> Self {
        let total: f64 = scores.iter().sum();
        let mut weights: Vec<f64> = scores.iter().map(|s| s / total).collect();
        let pivot = weights
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &w)| {
                if w > best.1 {
                    (i, w)
                } else {
                    best
                }
            })
            .0;
        let rest = sum_except(&weights, pivot);
        if rest + weights[pivot] != 1.0 {
            // rest < 1 here, and fl(rest + fl(1 - rest)) == 1 for any rest in [0, 1).
            weights[pivot] = 1.0 - rest;
        }
        AggregationWeights { weights, pivot }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Sum of the weights, accumulated so that a normalized vector yields exactly `1.0`.
    pub fn total(&self) -> f64 {
        sum_except(&self.weights, self.pivot) + self.weights[self.pivot]
    }
}

fn sum_except(w: &[f64], skip: usize) -> f64 {
    w.iter()
        .enumerate()
        .filter(|&(i, _)| i != skip)
        .fold(0.0, |acc, (_, &v)| acc + v)
}

/// `sum_i w_i x_i` for weights summing to one, evaluated as
/// `x_p + sum_{i != p} w_i (x_i - x_p)` in client order, where `p` is the first
/// largest weight. Identical inputs and one-hot weights both come back bit for bit.
pub fn weighted_sum<D: Dimension>(inputs: &[&Array<f64, D>], weights: &[f64]) -> Array<f64, D> {
    let p = first_argmax(weights);
    let base = inputs[p];
    let mut acc = Array::zeros(base.raw_dim());
    for (i, (x, &w)) in inputs.iter().zip(weights).enumerate() {
        if i != p {
            Zip::from(&mut acc)
                .and(*x)
                .and(base)
                .for_each(|a, &v, &b| *a = *a + w * (v - b));
        }
    }
    acc + base
}

/// Scalar counterpart of [`weighted_sum`], same operation order.
pub fn weighted_scalar(values: &[f64], weights: &[f64]) -> f64 {
    let p = first_argmax(weights);
    let base = values[p];
    let acc = values
        .iter()
        .zip(weights)
        .enumerate()
        .filter(|&(i, _)| i != p)
        .fold(0.0, |a, (_, (&v, &w))| a + w * (v - base));
    base + acc
}

fn first_argmax(weights: &[f64]) -> usize {
    weights
        .iter()
        .enumerate()
        .fold(0, |best, (i, &w)| if w > weights[best] { i } else { best })
}

fn check_inputs(all: &[ModelParams], n_weights: usize) -> Result<()> {
    if all.is_empty() {
        return Err(Error::usage("no client models to aggregate"));
    }
    if all.len() != n_weights {
        return Err(Error::usage(format!(
            "{} client models but {} weights",
            all.len(),
            n_weights
        )));
    }
    if all.iter().any(|p| !p.same_shape(&all[0])) {
        return Err(Error::usage("client models have different shapes"));
    }
    Ok(())
}

fn combine_layers(
    all: &[ModelParams],
    weights: &AggregationWeights,
    pick: impl Fn(&ModelParams) -> &[Dense],
) -> Vec<Dense> {
    let w = weights.as_slice();
    (0..pick(&all[0]).len())
        .map(|k| Dense {
            weights: weighted_sum(
                &all.iter().map(|p| &pick(p)[k].weights).collect::<Vec<_>>(),
                w,
            ),
            bias: weighted_sum(&all.iter().map(|p| &pick(p)[k].bias).collect::<Vec<_>>(), w),
        })
        .collect()
}

/// FedAvg: `sum_m (|D_m| / N) w_m` over every tensor.
pub fn fedavg_aggregate(all: &[ModelParams], sizes: &[usize]) -> Result<ModelParams> {
    let weights = AggregationWeights::from_sizes(sizes)?;
    weighted_average(all, &weights)
}

/// Every tensor (representation and classifier) combined with the same client weights.
pub fn weighted_average(all: &[ModelParams], weights: &AggregationWeights) -> Result<ModelParams> {
    check_inputs(all, weights.len())?;
    Ok(ModelParams {
        activation: all[0].activation,
        repr: combine_layers(all, weights, |p| &p.repr),
        classifier: combine_layers(all, weights, |p| std::slice::from_ref(&p.classifier))
            .pop()
            .expect("one classifier layer"),
    })
}

/// Personalized representation `theta_bar_m = sum_i lambda_m^i theta_i`.
pub fn aggregate_repr(all: &[ModelParams], influence: &InfluenceVector) -> Result<Vec<Dense>> {
    repr_with_weights(all, influence.as_aggregation())
}

/// Representation layers combined with arbitrary client weights.
pub fn repr_with_weights(all: &[ModelParams], weights: &AggregationWeights) -> Result<Vec<Dense>> {
    check_inputs(all, weights.len())?;
    Ok(combine_layers(all, weights, |p| &p.repr))
}

/// How the class-level aggregation indexes the classifier rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierRule {
    /// `phi_bar_{m,c} = sum_i Lambda^{i,c} phi_{i,c}`.
    #[default]
    Corrected,
    /// `phi_bar_{m,c} = sum_i Lambda^{i,c} phi_{m,c}`; the summand does not depend on
    /// `i`, so this is the column total times client `m`'s own row.
    Literal,
}

/// Personalized classifier for client `m`: every class row (with its bias)
/// combined with that class's influence column.
pub fn aggregate_classifier(
    m: usize,
    all: &[ModelParams],
    influence: &InfluenceMatrix,
    rule: ClassifierRule,
) -> Result<Dense> {
    check_inputs(all, influence.clients())?;
    if m >= all.len() {
        return Err(Error::usage(format!("client {m} out of range")));
    }
    let classes = all[0].num_classes();
    if influence.classes() != classes {
        return Err(Error::usage(format!(
            "influence matrix has {} classes, classifier has {classes}",
            influence.classes()
        )));
    }
    let mut out = Dense::zeros(classes, all[0].feature_dim());
    for c in 0..classes {
        let column = influence.column(c);
        match rule {
            ClassifierRule::Corrected => {
                let rows: Vec<_> = all
                    .iter()
                    .map(|p| p.classifier.weights.row(c).to_owned())
                    .collect();
                let row_refs: Vec<_> = rows.iter().collect();
                out.weights
                    .row_mut(c)
                    .assign(&weighted_sum(&row_refs, column.as_slice()));
                let biases: Vec<f64> = all.iter().map(|p| p.classifier.bias[c]).collect();
                out.bias[c] = weighted_scalar(&biases, column.as_slice());
            }
            ClassifierRule::Literal => {
                let total = column.total();
                let (row, bias) = all[m].class_row(c);
                out.weights.row_mut(c).assign(&row.mapv(|v| total * v));
                out.bias[c] = total * bias;
            }
        }
    }
    Ok(out)
}

/// `(mu / 2) ||w - w_global||^2` over all parameters.
pub fn proximal_term(params: &ModelParams, global: &ModelParams, mu: f64) -> f64 {
    0.5 * mu * params.squared_distance(global)
}

/// FedProx local objective: cross-entropy plus the proximal term.
pub fn fedprox_local_loss(
    params: &ModelParams,
    global: &ModelParams,
    batch: &Batch,
    mu: f64,
) -> Result<f64> {
    Ok(fedprox_loss_and_grad(params, global, batch, mu)?.0)
}

/// FedProx objective and its gradient; the proximal part contributes `mu (w - w_global)`.
pub fn fedprox_loss_and_grad(
    params: &ModelParams,
    global: &ModelParams,
    batch: &Batch,
    mu: f64,
) -> Result<(f64, Gradients)> {
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(Error::usage(format!("mu must be >= 0 (got {mu})")));
    }
    if !params.same_shape(global) {
        return Err(Error::usage("global model shape differs from local model"));
    }
    let (ce, mut grads) = loss_and_grad(params, batch)?;
    if mu == 0.0 {
        return Ok((ce, grads));
    }
    let mut diff = params.clone();
    diff.zip_apply(global, |w, g| *w -= g);
    grads.zip_apply(&diff, |g, d| *g += mu * d);
    Ok((ce + proximal_term(params, global, mu), grads))
}

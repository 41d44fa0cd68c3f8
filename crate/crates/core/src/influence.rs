//! Leave-one-out influence measurement.
//!
//! For client `m`, peer `i` is influential when removing it from the
//! aggregate hurts `m`: the loss of `{theta^{-i}, phi_m}` on a probe batch
//! drawn from `m`'s own data goes up. Losses are tempered with exponent
//! `gamma` and normalized into a distribution over peers. The class-level
//! variant does the same per classifier row, leaving every other row of
//! `phi_m` and the feature extractor `theta_m` untouched.

use ndarray::{Array1, Array2};

use crate::aggregation::AggregationWeights;
use crate::error::{Error, Result};
use crate::model::{classify, features, forward, loss_ce, Batch, Dense, ModelParams};

/// `l_m^{-i}` for every peer `i`, measured on one probe batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossVector {
    pub values: Vec<f64>,
    pub probe_id: u64,
}

/// `l_m^{-i,-c}`, peers along rows and classes along columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    pub values: Array2<f64>,
    pub probe_id: u64,
}

/// Client-level influence `lambda_m`: non-negative, sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceVector(AggregationWeights);

impl InfluenceVector {
    pub fn weights(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_aggregation(&self) -> &AggregationWeights {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.len() == 0
    }

    pub fn uniform(clients: usize) -> Self {
        InfluenceVector(AggregationWeights::uniform(clients))
    }
}

impl From<AggregationWeights> for InfluenceVector {
    fn from(w: AggregationWeights) -> Self {
        InfluenceVector(w)
    }
}

/// Class-level influence `Lambda_m`: one weight column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    columns: Vec<AggregationWeights>,
}

impl InfluenceMatrix {
    pub fn from_columns(columns: Vec<AggregationWeights>) -> Result<Self> {
        let clients = columns.first().map_or(0, AggregationWeights::len);
        if columns.iter().any(|c| c.len() != clients) {
            return Err(Error::usage("influence matrix columns differ in length"));
        }
        Ok(InfluenceMatrix { columns })
    }

    pub fn uniform(clients: usize, classes: usize) -> Self {
        InfluenceMatrix {
            columns: vec![AggregationWeights::uniform(clients); classes],
        }
    }

    pub fn clients(&self) -> usize {
        self.columns.first().map_or(0, AggregationWeights::len)
    }

    pub fn classes(&self) -> usize {
        self.columns.len()
    }

    /// Weights of all peers for class `c`.
    pub fn column(&self, c: usize) -> &AggregationWeights {
        &self.columns[c]
    }

    pub fn get(&self, peer: usize, class: usize) -> f64 {
        self.columns[class].as_slice()[peer]
    }

    /// `[M x C]` copy.
    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.clients(), self.classes()), |(i, c)| self.get(i, c))
    }
}

fn require_leave_one_out(clients: usize, excluded: usize) -> Result<()> {
    if clients < 2 {
        return Err(Error::usage("leave-one-out needs at least two clients"));
    }
    if excluded >= clients {
        return Err(Error::usage(format!(
            "excluded client {excluded} out of range for {clients} clients"
        )));
    }
    Ok(())
}

fn check_same_shapes(all: &[ModelParams]) -> Result<()> {
    if all.iter().any(|p| !p.same_shape(&all[0])) {
        return Err(Error::usage("client models have different shapes"));
    }
    Ok(())
}

/// `theta^{-i}`: unweighted mean of every other client's representation layers.
pub fn loo_repr(all: &[ModelParams], excluded: usize) -> Result<Vec<Dense>> {
    require_leave_one_out(all.len(), excluded)?;
    check_same_shapes(all)?;
    let denom = (all.len() - 1) as f64;
    let rest: Vec<&ModelParams> = others(all, excluded).collect();
    let base = rest[0];
    let out = base
        .repr
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let mut dw = Array2::zeros(b.weights.raw_dim());
            let mut db = Array1::zeros(b.bias.raw_dim());
            for p in &rest[1..] {
                dw += &(&p.repr[k].weights - &b.weights);
                db += &(&p.repr[k].bias - &b.bias);
            }
            Dense {
                weights: dw / denom + &b.weights,
                bias: db / denom + &b.bias,
            }
        })
        .collect();
    Ok(out)
}

/// Every client except `excluded`, in order.
fn others(all: &[ModelParams], excluded: usize) -> impl Iterator<Item = &ModelParams> {
    all.iter()
        .enumerate()
        .filter(move |&(j, _)| j != excluded)
        .map(|(_, p)| p)
}

/// `phi^{-i}_{., c}`: unweighted mean of every other client's class-`c` row and bias.
pub fn loo_class_vector(
    all: &[ModelParams],
    excluded: usize,
    class: usize,
) -> Result<(Array1<f64>, f64)> {
    require_leave_one_out(all.len(), excluded)?;
    check_same_shapes(all)?;
    if class >= all[0].num_classes() {
        return Err(Error::usage(format!("class {class} out of range")));
    }
    let denom = (all.len() - 1) as f64;
    let mut rest = others(all, excluded).map(|p| p.class_row(class));
    let (base_row, base_bias) = rest.next().expect("at least one other client");
    let mut row = Array1::zeros(base_row.len());
    let mut bias = 0.0;
    for (r, b) in rest {
        row += &(&r - &base_row);
        bias += b - base_bias;
    }
    Ok((row / denom + base_row, bias / denom + base_bias))
}

fn check_client(m: usize, all: &[ModelParams]) -> Result<()> {
    if m >= all.len() {
        return Err(Error::usage(format!(
            "client {m} out of range for {} clients",
            all.len()
        )));
    }
    Ok(())
}

/// Loss of `{theta^{-i}, phi_m}` on the probe for every `i`, including `i = m`.
pub fn client_loss_vector(
    m: usize,
    all: &[ModelParams],
    probe: &Batch,
    probe_id: u64,
) -> Result<LossVector> {
    check_client(m, all)?;
    let values = (0..all.len())
        .map(|i| {
            let model = ModelParams {
                activation: all[m].activation,
                repr: loo_repr(all, i)?,
                classifier: all[m].classifier.clone(),
            };
            let (logits, _) = forward(&model, probe)?;
            loss_ce(&logits, &probe.labels)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossVector { values, probe_id })
}

/// Loss of `{theta_m, phi_m with row c replaced by phi^{-i}_{., c}}` for every `(i, c)`.
///
/// Only column `c` of the logits depends on row `c`, so the features and base
/// logits are computed once and a single column is patched per entry.
pub fn class_loss_matrix(
    m: usize,
    all: &[ModelParams],
    probe: &Batch,
    probe_id: u64,
) -> Result<LossMatrix> {
    check_client(m, all)?;
    let own = &all[m];
    let feats = features(own, &probe.inputs)?;
    let base = classify(&own.classifier, &feats);
    let (clients, classes) = (all.len(), own.num_classes());
    let mut values = Array2::zeros((clients, classes));
    for c in 0..classes {
        for i in 0..clients {
            let (row, bias) = loo_class_vector(all, i, c)?;
            let mut logits = base.clone();
            let mut col = logits.column_mut(c);
            col.assign(&feats.dot(&row));
            col += bias;
            values[[i, c]] = loss_ce(&logits, &probe.labels)?;
        }
    }
    Ok(LossMatrix { values, probe_id })
}

/// `lambda_m^i = (l^{-i})^gamma / sum_j (l^{-j})^gamma`; all-zero losses fall back to uniform.
pub fn influence_vector(losses: &LossVector, gamma: f64) -> Result<InfluenceVector> {
    AggregationWeights::tempered(&losses.values, gamma).map(InfluenceVector)
}

/// Column-wise tempered normalization of the class-level losses.
pub fn influence_matrix(losses: &LossMatrix, gamma: f64) -> Result<InfluenceMatrix> {
    let columns = losses
        .values
        .columns()
        .into_iter()
        .map(|col| AggregationWeights::tempered(&col.to_vec(), gamma))
        .collect::<Result<Vec<_>>>()?;
    InfluenceMatrix::from_columns(columns)
}

//! Synthetic feature-shift client shards.
//!
//! All clients share `C` latent class means in `R^L`. Client `m` observes
//! `x = A_m (mu_c + eps) + b_m` with `eps ~ N(0, sigma^2 I)`. Transforms are
//! organised in similarity groups: every group draws a transform
//! `A_g = B R_g` (a shared orthonormal embedding `B` composed with a
//! group-specific latent rotation `R_g`) and an offset `b_g`; members of the
//! group perturb both slightly. Since all groups embed into the same
//! subspace, the same input can mean different classes in different groups,
//! which is what makes a single global model a poor fit.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{stream, Purpose};

/// Labeled samples of one split; rows of `features` align with `labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::config(format!(
                "split has {} rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Split { features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Split {
            features: Array2::zeros((0, dim)),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> Split {
        Split {
            features: self.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Mean feature vector; `None` for an empty split.
    pub fn mean_feature(&self) -> Option<Array1<f64>> {
        self.features.mean_axis(Axis(0))
    }

    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.features.clone(), self.labels.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

/// One client's data.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetShard {
    pub owner: usize,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl DatasetShard {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    /// `|D_m|`, the training-set size used for FedAvg weighting.
    pub fn train_size(&self) -> usize {
        self.train.len()
    }

    /// Moves a stratified `fraction` of every class from train into val.
    pub fn with_validation_holdout<R: Rng + ?Sized>(
        &self,
        fraction: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::config(format!(
                "validation fraction {fraction} not in [0, 1)"
            )));
        }
        let classes = self.train.labels.iter().max().map_or(0, |&m| m + 1);
        let (mut keep, mut hold) = (Vec::new(), Vec::new());
        for c in 0..classes {
            let mut idx: Vec<usize> = (0..self.train.len())
                .filter(|&i| self.train.labels[i] == c)
                .collect();
            idx.shuffle(rng);
            let n_hold = (idx.len() as f64 * fraction).round() as usize;
            let n_hold = n_hold.min(idx.len().saturating_sub(1));
            hold.extend_from_slice(&idx[..n_hold]);
            keep.extend_from_slice(&idx[n_hold..]);
        }
        keep.sort_unstable();
        hold.sort_unstable();
        let mut val = self.train.select(&hold);
        if !self.val.is_empty() {
            val = concat(&self.val, &val);
        }
        Ok(DatasetShard {
            owner: self.owner,
            train: self.train.select(&keep),
            val,
            test: self.test.clone(),
        })
    }
}

fn concat(a: &Split, b: &Split) -> Split {
    Split {
        features: ndarray::concatenate(Axis(0), &[a.features.view(), b.features.view()])
            .expect("splits share a feature width"),
        labels: [a.labels.as_slice(), b.labels.as_slice()].concat(),
    }
}

/// Knobs for synthesizing a [`DomainSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub latent_dim: usize,
    pub feature_dim: usize,
    /// Within-class noise scale `sigma` in latent space.
    pub noise: f64,
    /// Scale of the latent class means.
    pub class_scale: f64,
    /// Size of per-client perturbations around the group transform.
    pub perturbation: f64,
    /// Scale of the per-group feature offsets.
    pub offset_scale: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Fraction of train moved into a validation split; 0 disables it.
    pub val_fraction: f64,
    /// Similarity groups; must partition the client ids.
    pub groups: Vec<Vec<usize>>,
    /// Fixed data seed; when absent it is derived from the run seed.
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            latent_dim: 32,
            feature_dim: 32,
            noise: 2.0,
            class_scale: 1.0,
            perturbation: 0.1,
            offset_scale: 1.0,
            train_per_class: 100,
            test_per_class: 200,
            val_fraction: 0.0,
            groups: vec![vec![0, 1], vec![2, 3, 4]],
            seed: None,
        }
    }
}

impl DataConfig {
    pub fn validate(&self, clients: usize, classes: usize) -> Result<()> {
        if classes < 2 {
            return Err(Error::config("classes must be >= 2"));
        }
        if self.latent_dim < 1 {
            return Err(Error::config("data.latent_dim must be >= 1"));
        }
        if self.feature_dim < self.latent_dim {
            return Err(Error::config(format!(
                "data.feature_dim ({}) must be >= data.latent_dim ({})",
                self.feature_dim, self.latent_dim
            )));
        }
        for (key, v) in [
            ("data.noise", self.noise),
            ("data.class_scale", self.class_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{key} must be > 0 (got {v})")));
            }
        }
        for (key, v) in [
            ("data.perturbation", self.perturbation),
            ("data.offset_scale", self.offset_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{key} must be >= 0 (got {v})")));
            }
        }
        if self.train_per_class < 1 || self.test_per_class < 1 {
            return Err(Error::config(
                "data.train_per_class and data.test_per_class must be >= 1",
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config(format!(
                "data.val_fraction must be in [0, 1) (got {})",
                self.val_fraction
            )));
        }
        group_assignment(&self.groups, clients).map(|_| ())
    }
}

/// Maps each client to its group index, checking that `groups` partitions `0..clients`.
pub fn group_assignment(groups: &[Vec<usize>], clients: usize) -> Result<Vec<usize>> {
    let mut owner = vec![None; clients];
    for (g, members) in groups.iter().enumerate() {
        for &m in members {
            if m >= clients {
                return Err(Error::config(format!(
                    "data.groups: client {m} out of range for {clients} clients"
                )));
            }
            if owner[m].replace(g).is_some() {
                return Err(Error::config(format!(
                    "data.groups: client {m} listed twice"
                )));
            }
        }
    }
    owner
        .into_iter()
        .enumerate()
        .map(|(m, g)| {
            g.ok_or_else(|| Error::config(format!("data.groups: client {m} has no group")))
        })
        .collect()
}

/// Realized generative model for all clients.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    /// `[C x L]`
    pub class_means: Array2<f64>,
    /// Per client, `[D x L]`.
    pub transforms: Vec<Array2<f64>>,
    /// Per client, `[D]`.
    pub offsets: Vec<Array1<f64>>,
    pub noise: f64,
    /// Group index of every client.
    pub groups: Vec<usize>,
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Orthonormal columns via Gram-Schmidt on a Gaussian matrix.
fn random_orthonormal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let mut q = gaussian_matrix(rows, cols, rng);
    for j in 0..cols {
        for k in 0..j {
            let proj = q.column(j).dot(&q.column(k));
            let qk = q.column(k).to_owned();
            q.column_mut(j).scaled_add(-proj, &qk);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    q
}

impl DomainSpec {
    pub fn synthesize(cfg: &DataConfig, clients: usize, classes: usize, seed: u64) -> Result<Self> {
        cfg.validate(clients, classes)?;
        let groups = group_assignment(&cfg.groups, clients)?;
        let (l, d) = (cfg.latent_dim, cfg.feature_dim);
        let mut rng = stream(seed, Purpose::DomainSpec, 0, 0);

        let class_means = gaussian_matrix(classes, l, &mut rng) * cfg.class_scale;
        let basis = random_orthonormal(d, l, &mut rng);
        let group_tf: Vec<(Array2<f64>, Array1<f64>)> = (0..cfg.groups.len())
            .map(|_| {
                let rot = random_orthonormal(l, l, &mut rng);
                let offset = Array1::from_shape_simple_fn(d, || {
                    cfg.offset_scale * {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    } / (d as f64).sqrt()
                });
                (basis.dot(&rot), offset)
            })
            .collect();

        let mut transforms = Vec::with_capacity(clients);
        let mut offsets = Vec::with_capacity(clients);
        for &g in &groups {
            let (a, b) = &group_tf[g];
            let da = gaussian_matrix(d, l, &mut rng) * (cfg.perturbation / (d as f64).sqrt());
            let db = Array1::from_shape_simple_fn(d, || {
                cfg.perturbation * {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                } / (d as f64).sqrt()
            });
            transforms.push(a + &da);
            offsets.push(b + &db);
        }
        Ok(DomainSpec {
            class_means,
            transforms,
            offsets,
            noise: cfg.noise,
            groups,
        })
    }

    pub fn clients(&self) -> usize {
        self.transforms.len()
    }

    pub fn classes(&self) -> usize {
        self.class_means.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.class_means.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.transforms.first().map_or(0, |a| a.nrows())
    }

    fn validate(&self) -> Result<()> {
        let (c, l, d) = (self.classes(), self.latent_dim(), self.feature_dim());
        if c < 2 || l < 1 || d < l {
            return Err(Error::config(format!(
                "invalid domain dims C={c} L={l} D={d}"
            )));
        }
        if !(self.noise.is_finite() && self.noise > 0.0) {
            return Err(Error::config("noise must be > 0"));
        }
        if self.transforms.iter().any(|a| a.dim() != (d, l))
            || self.offsets.len() != self.clients()
            || self.offsets.iter().any(|b| b.len() != d)
            || self.groups.len() != self.clients()
        {
            return Err(Error::config(
                "per-client transforms have inconsistent shapes",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardSizes {
    pub train_per_class: usize,
    pub test_per_class: usize,
}

/// Draws every client's shard. Client `m` uses its own stream, so its data
/// does not depend on how many other clients exist.
pub fn generate(spec: &DomainSpec, sizes: ShardSizes, seed: u64) -> Result<Vec<DatasetShard>> {
    spec.validate()?;
    if sizes.train_per_class < 1 || sizes.test_per_class < 1 {
        return Err(Error::config("sizes per class must be >= 1"));
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
    (0..spec.clients())
        .map(|m| {
            let mut rng = stream(seed, Purpose::Data, m, 0);
            let mut draw = |per_class: usize| -> Split {
                let n = per_class * spec.classes();
                let mut latent = Array2::zeros((n, spec.latent_dim()));
                let mut labels = Vec::with_capacity(n);
                for c in 0..spec.classes() {
                    for k in 0..per_class {
                        let mut row = latent.row_mut(c * per_class + k);
                        row.assign(&spec.class_means.row(c));
                        row.mapv_inplace(|v| v + noise.sample(&mut rng));
                        labels.push(c);
                    }
                }
                let mut features = latent.dot(&spec.transforms[m].t());
                features += &spec.offsets[m];
                Split { features, labels }
            };
            let train = draw(sizes.train_per_class);
            let test = draw(sizes.test_per_class);
            Ok(DatasetShard {
                owner: m,
                val: Split::empty(spec.feature_dim()),
                train,
                test,
            })
        })
        .collect()
}

/// Uniform without-replacement batch from one split. A `batch_size` larger
/// than the split is clamped to the split size.
pub fn sample_batch<R: Rng + ?Sized>(
    shard: &DatasetShard,
    kind: SplitKind,
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    let split = shard.split(kind);
    if split.is_empty() {
        return Err(Error::usage(format!(
            "client {}: cannot sample from empty {} split",
            shard.owner,
            kind.as_str()
        )));
    }
    let k = batch_size.clamp(1, split.len());
    let mut idx: Vec<usize> = (0..split.len()).collect();
    let (chosen, _) = idx.partial_shuffle(rng, k);
    split.select(chosen).as_batch()
}

/// One epoch of minibatches over a fresh permutation; the last batch may be short.
pub fn epoch_batches<R: Rng + ?Sized>(
    split: &Split,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if split.is_empty() {
        return Err(Error::usage("cannot iterate an empty split"));
    }
    let mut idx: Vec<usize> = (0..split.len()).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1))
        .map(|chunk| split.select(chunk).as_batch())
        .collect()
}

const SPLITS: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

/// CSV with one row per sample: `client_id, split, label, f0 .. f{D-1}`.
/// Floats use the shortest round-trip representation, so import is lossless.
pub fn export_csv<W: Write>(shards: &[DatasetShard], writer: W) -> Result<()> {
    let dim = shards.first().map_or(0, |s| s.train.dim());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["client_id".to_string(), "split".into(), "label".into()];
    header.extend((0..dim).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for shard in shards {
        for kind in SPLITS {
            let split = shard.split(kind);
            for (row, &y) in split.features.outer_iter().zip(&split.labels) {
                let mut rec = vec![shard.owner.to_string(), kind.as_str().into(), y.to_string()];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn import_csv<R: Read>(reader: R) -> Result<Vec<DatasetShard>> {
    let mut r = csv::Reader::from_reader(reader);
    let dim = r
        .headers()?
        .len()
        .checked_sub(3)
        .ok_or_else(|| Error::config("shard CSV header too short"))?;
    // per client, per split: (flat features, labels)
    let mut acc: Vec<[(Vec<f64>, Vec<usize>); 3]> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::config(format!("bad {what} `{s}` in shard CSV")))
        };
        let client = parse_usize(&rec[0], "client_id")?;
        let kind = SplitKind::parse(&rec[1])?;
        let label = parse_usize(&rec[2], "label")?;
        if acc.len() <= client {
            acc.resize_with(client + 1, Default::default);
        }
        let slot = &mut acc[client][SPLITS.iter().position(|&k| k == kind).unwrap()];
        for j in 0..dim {
            let v: f64 = rec[3 + j].parse().map_err(|_| {
                Error::config(format!("bad feature `{}` in shard CSV", &rec[3 + j]))
            })?;
            slot.0.push(v);
        }
        slot.1.push(label);
    }
    acc.into_iter()
        .enumerate()
        .map(|(owner, parts)| {
            let [train, val, test] = parts.map(|(flat, labels)| {
                let n = labels.len();
                Split {
                    features: Array2::from_shape_vec((n, dim), flat)
                        .expect("row width checked by csv"),
                    labels,
                }
            });
            Ok(DatasetShard {
                owner,
                train,
                val,
                test,
            })
        })
        .collect()
}

pub fn export_csv_file(shards: &[DatasetShard], path: &Path) -> Result<()> {
    export_csv(shards, std::fs::File::create(path)?)
}

//! Round-synchronous federated training.
//!
//! Each round freezes every client's parameters into a snapshot, runs the
//! two-stage local update for every client against that snapshot, and only
//! then replaces the client states. Stage one aggregates (how depends on the
//! [`Method`]); stage two trains for `local_epochs` epochs of minibatch Adam.
//! All randomness comes from per-`(client, round)` streams, so the outcome is
//! the same whether clients run sequentially or on a thread pool.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate_classifier, aggregate_repr, fedprox_loss_and_grad, repr_with_weights,
    weighted_average, AggregationWeights,
};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{
    epoch_batches, generate, sample_batch, DatasetShard, DomainSpec, ShardSizes, SplitKind,
};
use crate::error::{Error, Result};
use crate::influence::{
    class_loss_matrix, client_loss_vector, influence_matrix, influence_vector, InfluenceMatrix,
    InfluenceVector,
};
use crate::model::{evaluate, loss_and_grad, ModelParams, OptimizerState};
use crate::rng::{derive_seed, stream, Purpose};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "local")]
    Local,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[default]
    #[serde(rename = "fedc2i")]
    FedC2I,
    /// Client-level influence only; the classifier stays local.
    #[serde(rename = "fedc2i-lambda")]
    FedC2ILambdaOnly,
    /// Class-level influence only; the representation stays local.
    #[serde(rename = "fedc2i-matrix-local")]
    FedC2IMatrixLocalRepr,
    /// Class-level influence only; the representation is FedAvg-averaged.
    #[serde(rename = "fedc2i-matrix-global")]
    FedC2IMatrixGlobalRepr,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Local,
        Method::FedAvg,
        Method::FedProx,
        Method::FedC2I,
        Method::FedC2ILambdaOnly,
        Method::FedC2IMatrixLocalRepr,
        Method::FedC2IMatrixGlobalRepr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Local => "local",
            Method::FedAvg => "fedavg",
            Method::FedProx => "fedprox",
            Method::FedC2I => "fedc2i",
            Method::FedC2ILambdaOnly => "fedc2i-lambda",
            Method::FedC2IMatrixLocalRepr => "fedc2i-matrix-local",
            Method::FedC2IMatrixGlobalRepr => "fedc2i-matrix-global",
        }
    }

    pub fn uses_influence_vector(self) -> bool {
        matches!(self, Method::FedC2I | Method::FedC2ILambdaOnly)
    }

    pub fn uses_influence_matrix(self) -> bool {
        matches!(
            self,
            Method::FedC2I | Method::FedC2IMatrixLocalRepr | Method::FedC2IMatrixGlobalRepr
        )
    }

    pub fn uses_influence(self) -> bool {
        self.uses_influence_vector() || self.uses_influence_matrix()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::config(format!(
                    "unknown method `{s}` (expected one of {})",
                    known.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PostAgg,
    PostTrain,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PostAgg => "post_agg",
            Phase::PostTrain => "post_train",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub round: usize,
    pub client: usize,
    pub split: SplitKind,
    pub loss: f64,
    pub accuracy: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRound {
    pub client: usize,
    pub metrics: Vec<MetricRow>,
    /// `lambda_m` over peers.
    pub influence_vector: Option<Vec<f64>>,
    /// `Lambda_m`, rows are peers, columns classes.
    pub influence_matrix: Option<Vec<Vec<f64>>>,
}

impl ClientRound {
    pub fn metric(&self, phase: Phase, split: SplitKind) -> Option<&MetricRow> {
        self.metrics
            .iter()
            .find(|r| r.phase == phase && r.split == split)
    }
}

/// Everything observed in one round. Round 0 holds the initial-model evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientRound>,
    pub duration_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
}

/// Result of stage one for one client.
#[derive(Debug, Clone)]
pub struct Stage1 {
    pub params: ModelParams,
    /// FedProx anchor for stage two.
    pub global: Option<ModelParams>,
    pub influence_vector: Option<InfluenceVector>,
    pub influence_matrix: Option<InfluenceMatrix>,
}

/// Shared read-only inputs of one round.
pub struct RoundContext<'a> {
    pub config: &'a RunConfig,
    pub seed: u64,
    pub round: usize,
    pub snapshot: &'a [ModelParams],
    pub shards: &'a [DatasetShard],
}

impl RoundContext<'_> {
    fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(DatasetShard::train_size).collect()
    }
}

/// Influence-oriented (or baseline) aggregation for client `m`.
pub fn aggregation_stage(ctx: &RoundContext<'_>, m: usize, method: Method) -> Result<Stage1> {
    let own = &ctx.snapshot[m];
    let clients = ctx.snapshot.len();
    let mut out = Stage1 {
        params: own.clone(),
        global: None,
        influence_vector: None,
        influence_matrix: None,
    };
    match method {
        Method::Local => return Ok(out),
        Method::FedAvg | Method::FedProx => {
            let global =
                weighted_average(ctx.snapshot, &AggregationWeights::from_sizes(&ctx.sizes())?)?;
            if method == Method::FedProx {
                out.global = Some(global.clone());
            }
            out.params = global;
            return Ok(out);
        }
        _ => {}
    }

    if clients == 1 {
        // Leave-one-out is undefined; a single model aggregates to itself.
        out.influence_vector = method
            .uses_influence_vector()
            .then(|| InfluenceVector::uniform(1));
        out.influence_matrix = method
            .uses_influence_matrix()
            .then(|| InfluenceMatrix::uniform(1, own.num_classes()));
        if method == Method::FedC2IMatrixGlobalRepr {
            out.params.repr =
                repr_with_weights(ctx.snapshot, &AggregationWeights::from_sizes(&ctx.sizes())?)?;
        }
        return Ok(out);
    }

    // One probe batch per client per round, shared by both measurements.
    let probe_seed = derive_seed(ctx.seed, Purpose::Probe, m, ctx.round);
    let mut rng = stream(ctx.seed, Purpose::Probe, m, ctx.round);
    let probe = sample_batch(
        &ctx.shards[m],
        SplitKind::Train,
        ctx.config.batch_size,
        &mut rng,
    )?;

    let gamma = ctx.config.gamma;
    let lambda = if method.uses_influence_vector() {
        let losses = client_loss_vector(m, ctx.snapshot, &probe, probe_seed)?;
        Some(influence_vector(&losses, gamma)?)
    } else {
        None
    };
    let matrix = if method.uses_influence_matrix() {
        let losses = class_loss_matrix(m, ctx.snapshot, &probe, probe_seed)?;
        Some(influence_matrix(&losses, gamma)?)
    } else {
        None
    };

    out.params.repr = match (method, &lambda) {
        (Method::FedC2I | Method::FedC2ILambdaOnly, Some(l)) => aggregate_repr(ctx.snapshot, l)?,
        (Method::FedC2IMatrixGlobalRepr, _) => {
            repr_with_weights(ctx.snapshot, &AggregationWeights::from_sizes(&ctx.sizes())?)?
        }
        _ => own.repr.clone(),
    };
    if let Some(mat) = &matrix {
        out.params.classifier =
            aggregate_classifier(m, ctx.snapshot, mat, ctx.config.classifier_rule())?;
    }
    out.influence_vector = lambda;
    out.influence_matrix = matrix;
    Ok(out)
}

/// `local_epochs` epochs of minibatch Adam over the client's train split.
pub fn training_stage(
    cfg: &RunConfig,
    seed: u64,
    round: usize,
    shard: &DatasetShard,
    params: &mut ModelParams,
    optimizer: &mut OptimizerState,
    global: Option<&ModelParams>,
) -> Result<()> {
    let m = shard.owner;
    let adam = cfg.adam();
    let mut rng = stream(seed, Purpose::Train, m, round);
    for epoch in 0..cfg.local_epochs {
        for batch in epoch_batches(&shard.train, cfg.batch_size, &mut rng)? {
            let (loss, grads) = match global {
                Some(g) => fedprox_loss_and_grad(params, g, &batch, cfg.mu)?,
                None => loss_and_grad(params, &batch)?,
            };
            optimizer.apply(params, &grads, &adam)?;
            if !loss.is_finite() || !params.is_finite() {
                return Err(Error::NonFinite(format!(
                    "client {m}, round {round}, epoch {epoch}: batch loss {loss}, parameter norm {}",
                    params.norm()
                )));
            }
        }
    }
    Ok(())
}

fn eval_rows(
    params: &ModelParams,
    shard: &DatasetShard,
    round: usize,
    phase: Phase,
) -> Result<Vec<MetricRow>> {
    [SplitKind::Train, SplitKind::Val, SplitKind::Test]
        .into_iter()
        .filter(|&k| !shard.split(k).is_empty())
        .map(|split| {
            let (loss, accuracy) = evaluate(params, shard.split(split))?;
            Ok(MetricRow {
                round,
                client: shard.owner,
                split,
                loss,
                accuracy,
                phase,
            })
        })
        .collect()
}

/// Output of one client's two-stage update.
pub struct LocalUpdate {
    pub state: ClientState,
    pub stage1: ModelParams,
    pub record: ClientRound,
}

/// Both stages for client `m` against the round snapshot.
pub fn local_update(ctx: &RoundContext<'_>, state: &ClientState) -> Result<LocalUpdate> {
    let m = state.id;
    let method = ctx.config.method;
    let stage1 = aggregation_stage(ctx, m, method)?;
    if !stage1.params.is_finite() {
        return Err(Error::NonFinite(format!(
            "client {m}, round {}: aggregated parameters contain NaN/Inf",
            ctx.round
        )));
    }
    let mut metrics = eval_rows(&stage1.params, &ctx.shards[m], ctx.round, Phase::PostAgg)?;

    let mut params = stage1.params.clone();
    let mut optimizer = if ctx.config.reset_optimizer {
        OptimizerState::new(&params)
    } else {
        state.optimizer.clone()
    };
    training_stage(
        ctx.config,
        ctx.seed,
        ctx.round,
        &ctx.shards[m],
        &mut params,
        &mut optimizer,
        stage1.global.as_ref(),
    )?;
    metrics.extend(eval_rows(
        &params,
        &ctx.shards[m],
        ctx.round,
        Phase::PostTrain,
    )?);

    Ok(LocalUpdate {
        record: ClientRound {
            client: m,
            metrics,
            influence_vector: stage1
                .influence_vector
                .as_ref()
                .map(|v| v.weights().to_vec()),
            influence_matrix: stage1.influence_matrix.as_ref().map(|mat| {
                (0..mat.clients())
                    .map(|i| (0..mat.classes()).map(|c| mat.get(i, c)).collect())
                    .collect()
            }),
        },
        stage1: stage1.params,
        state: ClientState {
            id: m,
            params,
            optimizer,
        },
    })
}

/// Builds every client's shard from the config's data section.
pub fn build_shards(config: &RunConfig, seed: u64) -> Result<Vec<DatasetShard>> {
    let data_seed = config.data.seed.unwrap_or(seed);
    let spec = DomainSpec::synthesize(&config.data, config.clients, config.classes, data_seed)?;
    let sizes = ShardSizes {
        train_per_class: config.data.train_per_class,
        test_per_class: config.data.test_per_class,
    };
    let shards = generate(&spec, sizes, data_seed)?;
    if config.data.val_fraction > 0.0 {
        shards
            .iter()
            .map(|s| {
                s.with_validation_holdout(
                    config.data.val_fraction,
                    &mut stream(data_seed, Purpose::Holdout, s.owner, 0),
                )
            })
            .collect()
    } else {
        Ok(shards)
    }
}

/// The whole simulated federation.
pub struct Federation {
    config: RunConfig,
    seed: u64,
    shards: Vec<DatasetShard>,
    clients: Vec<ClientState>,
    records: Vec<RoundRecord>,
    pool: Option<rayon::ThreadPool>,
}

impl Federation {
    pub fn new(config: RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let shards = build_shards(&config, seed)?;
        Self::with_shards(config, seed, shards)
    }

    /// Uses caller-provided shards; the server initializes one model and every client gets a copy.
    pub fn with_shards(config: RunConfig, seed: u64, shards: Vec<DatasetShard>) -> Result<Self> {
        config.validate()?;
        if shards.len() != config.clients {
            return Err(Error::config(format!(
                "{} shards for {} clients",
                shards.len(),
                config.clients
            )));
        }
        let arch = config.architecture();
        for s in &shards {
            if s.train.is_empty() || s.test.is_empty() {
                return Err(Error::config(format!(
                    "client {} has an empty train or test split",
                    s.owner
                )));
            }
            if s.train.dim() != arch.input_dim {
                return Err(Error::config(format!(
                    "client {} features are {}-dimensional, model expects {}",
                    s.owner,
                    s.train.dim(),
                    arch.input_dim
                )));
            }
        }
        let init = ModelParams::init(&arch, &mut stream(seed, Purpose::Init, 0, 0));
        let clients = (0..config.clients)
            .map(|id| ClientState {
                id,
                optimizer: OptimizerState::new(&init),
                params: init.clone(),
            })
            .collect();
        let pool = if config.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.threads)
                    .build()
                    .map_err(|e| Error::config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        let mut fed = Federation {
            config,
            seed,
            shards,
            clients,
            records: Vec::new(),
            pool,
        };
        let initial = fed.evaluate_initial()?;
        fed.records.push(initial);
        Ok(fed)
    }

    fn evaluate_initial(&self) -> Result<RoundRecord> {
        let clients = self
            .clients
            .iter()
            .map(|c| {
                Ok(ClientRound {
                    client: c.id,
                    metrics: eval_rows(&c.params, &self.shards[c.id], 0, Phase::PostTrain)?,
                    influence_vector: None,
                    influence_matrix: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RoundRecord {
            round: 0,
            clients,
            duration_secs: 0.0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn shards(&self) -> &[DatasetShard] {
        &self.shards
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    /// Rounds completed so far.
    pub fn completed_rounds(&self) -> usize {
        self.records.last().map_or(0, |r| r.round)
    }

    /// Runs the next round and returns its record together with every client's stage-one parameters.
    pub fn step(&mut self) -> Result<(RoundRecord, Vec<ModelParams>)> {
        let started = Instant::now();
        let round = self.completed_rounds() + 1;
        let snapshot: Vec<ModelParams> = self.clients.iter().map(|c| c.params.clone()).collect();
        let before: Vec<String> = snapshot.iter().map(ModelParams::checksum).collect();
        let ctx = RoundContext {
            config: &self.config,
            seed: self.seed,
            round,
            snapshot: &snapshot,
            shards: &self.shards,
        };
        let updates: Vec<Result<LocalUpdate>> = match &self.pool {
            Some(pool) => pool.install(|| {
                self.clients
                    .par_iter()
                    .map(|c| local_update(&ctx, c))
                    .collect()
            }),
            None => self.clients.iter().map(|c| local_update(&ctx, c)).collect(),
        };
        let updates = updates.into_iter().collect::<Result<Vec<_>>>()?;
        let after: Vec<String> = snapshot.iter().map(ModelParams::checksum).collect();
        if before != after {
            return Err(Error::Internal(format!(
                "round {round}: snapshot modified during local updates"
            )));
        }

        let mut clients = Vec::with_capacity(updates.len());
        let mut stage1 = Vec::with_capacity(updates.len());
        let mut records = Vec::with_capacity(updates.len());
        for u in updates {
            clients.push(u.state);
            stage1.push(u.stage1);
            records.push(u.record);
        }
        self.clients = clients;
        let record = RoundRecord {
            round,
            clients: records,
            duration_secs: started.elapsed().as_secs_f64(),
        };
        self.records.push(record.clone());
        Ok((record, stage1))
    }

    /// Runs rounds until `config.rounds` are complete.
    pub fn run_to_end(&mut self) -> Result<()> {
        while self.completed_rounds() < self.config.rounds {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_outcome(self) -> RunOutcome {
        RunOutcome {
            summary: RunSummary::from_records(&self.records),
            final_params: self.clients.into_iter().map(|c| c.params).collect(),
            records: self.records,
        }
    }

    /// Writes client states and the records so far into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for c in &self.clients {
            checkpoint::write_client(
                &c.params,
                &c.optimizer,
                &dir.join(format!("client_{}.bin", c.id)),
            )?;
        }
        std::fs::write(dir.join("records.json"), serde_json::to_vec(&self.records)?)?;
        Ok(())
    }

    /// Restores a federation saved by [`save_checkpoint`](Self::save_checkpoint).
    pub fn load_checkpoint(config: RunConfig, seed: u64, dir: &Path) -> Result<Self> {
        let mut fed = Self::new(config, seed)?;
        let records: Vec<RoundRecord> =
            serde_json::from_slice(&std::fs::read(dir.join("records.json"))?)?;
        if records.is_empty() {
            return Err(Error::config("checkpoint holds no records"));
        }
        for c in fed.clients.iter_mut() {
            let (params, optimizer) =
                checkpoint::read_client(&dir.join(format!("client_{}.bin", c.id)))?;
            if !params.same_shape(&c.params) {
                return Err(Error::config(format!(
                    "checkpoint for client {} has a different shape",
                    c.id
                )));
            }
            c.params = params;
            c.optimizer = optimizer;
        }
        fed.records = records;
        Ok(fed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rounds: usize,
    /// Per client, after local training in the last round.
    pub final_test_accuracy: Vec<f64>,
    pub final_test_loss: Vec<f64>,
    /// Per client, right after aggregation in the last round (absent when no round ran).
    pub final_post_agg_test_accuracy: Option<Vec<f64>>,
    pub mean_test_accuracy: f64,
}

impl RunSummary {
    pub fn from_records(records: &[RoundRecord]) -> Self {
        let last = records.last().expect("round 0 is always recorded");
        let pick = |phase: Phase, f: fn(&MetricRow) -> f64| -> Option<Vec<f64>> {
            last.clients
                .iter()
                .map(|c| c.metric(phase, SplitKind::Test).map(f))
                .collect()
        };
        let acc = pick(Phase::PostTrain, |r| r.accuracy).expect("test metrics are always recorded");
        RunSummary {
            rounds: last.round,
            mean_test_accuracy: acc.iter().sum::<f64>() / acc.len() as f64,
            final_test_loss: pick(Phase::PostTrain, |r| r.loss).unwrap(),
            final_post_agg_test_accuracy: pick(Phase::PostAgg, |r| r.accuracy),
            final_test_accuracy: acc,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<RoundRecord>,
    pub final_params: Vec<ModelParams>,
    pub summary: RunSummary,
}

/// Generates data, initializes, and runs all configured rounds for one seed.
pub fn run_experiment(config: &RunConfig, seed: u64) -> Result<RunOutcome> {
    let mut fed = Federation::new(config.clone(), seed)?;
    fed.run_to_end()?;
    Ok(fed.into_outcome())
}

/// Trains one client alone for `rounds` rounds, exactly as the `local`
/// method would inside a federation.
pub fn train_standalone(
    config: &RunConfig,
    seed: u64,
    shard: &DatasetShard,
) -> Result<ModelParams> {
    let mut params = ModelParams::init(
        &config.architecture(),
        &mut stream(seed, Purpose::Init, 0, 0),
    );
    let mut optimizer = OptimizerState::new(&params);
    for round in 1..=config.rounds {
        if config.reset_optimizer {
            optimizer = OptimizerState::new(&params);
        }
        training_stage(
            config,
            seed,
            round,
            shard,
            &mut params,
            &mut optimizer,
            None,
        )?;
    }
    Ok(params)
}

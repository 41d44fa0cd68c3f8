//! Experiment drivers and on-disk artifacts.
//!
//! A run writes into `<root>/<method>_seed<s>/`:
//!
//! | file                    | columns / content                                   |
//! |-------------------------|-----------------------------------------------------|
//! | `metrics.csv`           | round, client, split, loss, accuracy, phase         |
//! | `influence.csv`         | round, client, peer, lambda                         |
//! | `influence_matrix.csv`  | round, client, peer, class, value                   |
//! | `summary.json`          | [`RunSummary`] plus method and seed                 |
//! | `effective_config.toml` | the fully resolved [`RunConfig`]                    |
//!
//! Floats are written in scientific notation with 9 significant digits.
//! Methods without influence still get both influence files, header only.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::SplitKind;
use crate::error::{Error, Result};
use crate::orchestration::{Federation, Method, MetricRow, Phase, RoundRecord, RunSummary};

pub const METRICS_FILE: &str = "metrics.csv";
pub const INFLUENCE_FILE: &str = "influence.csv";
pub const INFLUENCE_MATRIX_FILE: &str = "influence_matrix.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "effective_config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

const METRICS_HEADER: [&str; 6] = ["round", "client", "split", "loss", "accuracy", "phase"];
const INFLUENCE_HEADER: [&str; 4] = ["round", "client", "peer", "lambda"];
const MATRIX_HEADER: [&str; 5] = ["round", "client", "peer", "class", "value"];

/// Default gamma grid for [`sweep_gamma`].
pub const DEFAULT_GAMMAS: [f64; 5] = [0.5, 1.0, 2.0, 5.0, 10.0];

/// 9 significant digits, e.g. `7.99600000e-1`.
pub fn format_float(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn run_dir(root: &Path, method: Method, seed: u64) -> PathBuf {
    root.join(format!("{}_seed{seed}", method.name()))
}

pub fn write_metrics_csv<W: Write>(records: &[RoundRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METRICS_HEADER)?;
    for rec in records {
        for c in &rec.clients {
            for row in &c.metrics {
                w.write_record([
                    row.round.to_string(),
                    row.client.to_string(),
                    row.split.as_str().to_string(),
                    format_float(row.loss),
                    format_float(row.accuracy),
                    row.phase.as_str().to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_influence_csv<W: Write>(records: &[RoundRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(INFLUENCE_HEADER)?;
    for rec in records {
        for c in &rec.clients {
            for (peer, &v) in c.influence_vector.iter().flatten().enumerate() {
                w.write_record([
                    rec.round.to_string(),
                    c.client.to_string(),
                    peer.to_string(),
                    format_float(v),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_influence_matrix_csv<W: Write>(records: &[RoundRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MATRIX_HEADER)?;
    for rec in records {
        for c in &rec.clients {
            for (peer, row) in c.influence_matrix.iter().flatten().enumerate() {
                for (class, &v) in row.iter().enumerate() {
                    w.write_record([
                        rec.round.to_string(),
                        c.client.to_string(),
                        peer.to_string(),
                        class.to_string(),
                        format_float(v),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `influence.csv` and `influence_matrix.csv` into `dir`.
pub fn export_influence_traces(records: &[RoundRecord], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_influence_csv(records, std::fs::File::create(dir.join(INFLUENCE_FILE))?)?;
    write_influence_matrix_csv(
        records,
        std::fs::File::create(dir.join(INFLUENCE_MATRIX_FILE))?,
    )
}

/// Parses a `metrics.csv`, rejecting unknown headers and malformed rows.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(METRICS_HEADER) {
        return Err(Error::config(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = || {
            Error::config(format!(
                "{}: malformed row {:?}",
                path.display(),
                rec.position()
            ))
        };
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad());
        let split = match &rec[2] {
            "train" => SplitKind::Train,
            "val" => SplitKind::Val,
            "test" => SplitKind::Test,
            _ => return Err(bad()),
        };
        let phase = match &rec[5] {
            "post_agg" => Phase::PostAgg,
            "post_train" => Phase::PostTrain,
            _ => return Err(bad()),
        };
        rows.push(MetricRow {
            round: rec[0].parse().map_err(|_| bad())?,
            client: rec[1].parse().map_err(|_| bad())?,
            split,
            loss: num(3)?,
            accuracy: num(4)?,
            phase,
        });
    }
    Ok(rows)
}

/// Final-round post-training test accuracy per client, recomputed from metric rows.
pub fn final_accuracies(rows: &[MetricRow]) -> Vec<f64> {
    let last = rows.iter().map(|r| r.round).max().unwrap_or(0);
    let mut out: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.round == last && r.phase == Phase::PostTrain && r.split == SplitKind::Test)
        .map(|r| (r.client, r.accuracy))
        .collect();
    out.sort_by_key(|&(c, _)| c);
    out.into_iter().map(|(_, a)| a).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub method: Method,
    pub seed: u64,
    pub gamma: f64,
    #[serde(flatten)]
    pub summary: RunSummary,
}

/// Runs one seed and writes every artifact into `dir`.
///
/// With `config.checkpoint` the federation state is saved under
/// `dir/checkpoints` after every round; `resume` continues from there.
pub fn run_single(config: &RunConfig, seed: u64, dir: &Path, resume: bool) -> Result<RunSummary> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), config.to_toml_string()?)?;
    let ckpt = dir.join(CHECKPOINT_DIR);
    let mut fed = if resume && ckpt.join("records.json").exists() {
        tracing::info!(dir = %ckpt.display(), "resuming from checkpoint");
        Federation::load_checkpoint(config.clone(), seed, &ckpt)?
    } else {
        Federation::new(config.clone(), seed)?
    };
    while fed.completed_rounds() < config.rounds {
        let (rec, _) = fed.step()?;
        tracing::debug!(round = rec.round, secs = rec.duration_secs, "round done");
        if config.checkpoint {
            fed.save_checkpoint(&ckpt)?;
        }
    }
    let records = fed.records();
    write_metrics_csv(records, std::fs::File::create(dir.join(METRICS_FILE))?)?;
    export_influence_traces(records, dir)?;
    let summary = RunSummary::from_records(records);
    let artifact = RunArtifact {
        method: config.method,
        seed,
        gamma: config.gamma,
        summary: summary.clone(),
    };
    std::fs::write(
        dir.join(SUMMARY_FILE),
        serde_json::to_vec_pretty(&artifact)?,
    )?;
    Ok(summary)
}

/// Mean and optional standard deviation of a set of fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation; absent for fewer than 2 values.
    pub std: Option<f64>,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        // shifted by the first value so identical inputs give exactly that value and std 0
        let mean = values[0] + values.iter().map(|v| v - values[0]).sum::<f64>() / n;
        let std = (values.len() >= 2)
            .then(|| (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt());
        Some(MeanStd { mean, std })
    }
}

/// Percent with two decimals, `85.50(0.63)` or `85.50` without a std.
impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}", self.mean * 100.0)?;
        if let Some(s) = self.std {
            write!(f, "({:.2})", s * 100.0)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

/// One method over a list of seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatterySummary {
    pub method: Method,
    pub gamma: f64,
    /// Seeds that completed.
    pub seeds: Vec<u64>,
    pub failures: Vec<SeedFailure>,
    pub partial: bool,
    /// Per seed, per client final test accuracy.
    pub runs: Vec<Vec<f64>>,
    pub per_client: Vec<MeanStd>,
    /// Client-averaged accuracy across seeds.
    pub average: Option<MeanStd>,
}

impl BatterySummary {
    fn from_runs(
        method: Method,
        gamma: f64,
        done: Vec<(u64, RunSummary)>,
        failures: Vec<SeedFailure>,
    ) -> Self {
        let runs: Vec<Vec<f64>> = done
            .iter()
            .map(|(_, s)| s.final_test_accuracy.clone())
            .collect();
        let clients = runs.first().map_or(0, Vec::len);
        let per_client = (0..clients)
            .filter_map(|c| MeanStd::of(&runs.iter().map(|r| r[c]).collect::<Vec<_>>()))
            .collect();
        let means: Vec<f64> = done.iter().map(|(_, s)| s.mean_test_accuracy).collect();
        BatterySummary {
            method,
            gamma,
            seeds: done.iter().map(|&(s, _)| s).collect(),
            partial: !failures.is_empty(),
            failures,
            runs,
            per_client,
            average: MeanStd::of(&means),
        }
    }
}

/// Runs every seed of `config.seeds` into `root`. A failing seed is recorded
/// and the battery moves on.
pub fn run_battery(config: &RunConfig, root: &Path) -> Result<BatterySummary> {
    config.validate()?;
    let mut done = Vec::new();
    let mut failures = Vec::new();
    for &seed in &config.seeds {
        let dir = run_dir(root, config.method, seed);
        match run_single(config, seed, &dir, false) {
            Ok(s) => done.push((seed, s)),
            Err(e) => {
                tracing::error!(method = %config.method, seed, error = %e, "seed failed");
                failures.push(SeedFailure {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(BatterySummary::from_runs(
        config.method,
        config.gamma,
        done,
        failures,
    ))
}

/// Rows of batteries rendered as a mean(std) table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    /// First column heading, e.g. `method` or `gamma`.
    pub key: String,
    pub rows: Vec<(String, BatterySummary)>,
}

impl SummaryReport {
    pub fn is_partial(&self) -> bool {
        self.rows.iter().any(|(_, b)| b.partial)
    }

    pub fn to_table(&self) -> String {
        let clients = self
            .rows
            .iter()
            .map(|(_, b)| b.per_client.len())
            .max()
            .unwrap_or(0);
        let mut head = vec![self.key.clone()];
        head.extend((0..clients).map(|c| format!("client {c}")));
        head.push("avg".into());
        let mut lines = vec![
            format!("| {} |", head.join(" | ")),
            format!("|{}", "---|".repeat(head.len())),
        ];
        for (label, b) in &self.rows {
            let mut cells = vec![label.clone()];
            cells.extend(
                (0..clients).map(|c| b.per_client.get(c).map_or("-".into(), |m| m.to_string())),
            );
            cells.push(b.average.map_or("-".into(), |m| m.to_string()));
            if b.partial {
                cells[0].push_str(" (partial)");
            }
            lines.push(format!("| {} |", cells.join(" | ")));
        }
        lines.join("\n") + "\n"
    }

    /// Writes `<stem>.json` and `<stem>.md` into `root`.
    pub fn write(&self, root: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(root)?;
        std::fs::write(
            root.join(format!("{stem}.json")),
            serde_json::to_vec_pretty(self)?,
        )?;
        std::fs::write(root.join(format!("{stem}.md")), self.to_table())?;
        Ok(())
    }
}

/// Runs a battery per method into `root`.
pub fn compare(config: &RunConfig, methods: &[Method], root: &Path) -> Result<SummaryReport> {
    let mut rows = Vec::new();
    for &m in methods {
        let cfg = RunConfig {
            method: m,
            ..config.clone()
        };
        rows.push((m.name().to_string(), run_battery(&cfg, root)?));
    }
    let report = SummaryReport {
        key: "method".into(),
        rows,
    };
    report.write(root, "compare")?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSweep {
    pub report: SummaryReport,
    /// Gamma with the best mean final validation accuracy, when a validation split exists.
    pub selected: Option<f64>,
    /// Battery retrained on the full train split at the selected gamma.
    pub retrained: Option<BatterySummary>,
}

/// Runs a battery per gamma, each under `root/gamma_<g>/`.
///
/// When the config holds out validation data, the gamma with the best
/// validation accuracy is retrained with the holdout folded back into train.
pub fn sweep_gamma(config: &RunConfig, values: &[f64], root: &Path) -> Result<GammaSweep> {
    if values.is_empty() {
        return Err(Error::usage("gamma sweep needs at least one value"));
    }
    let mut rows = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for &g in values {
        let cfg = RunConfig {
            gamma: g,
            ..config.clone()
        };
        cfg.validate()?;
        let dir = root.join(format!("gamma_{g}"));
        let battery = run_battery(&cfg, &dir)?;
        if config.data.val_fraction > 0.0 {
            if let Some(v) = mean_validation_accuracy(&cfg, &dir, &battery.seeds)? {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
        }
        rows.push((g.to_string(), battery));
    }
    let selected = best.map(|(g, _)| g);
    let retrained = match selected {
        Some(g) => {
            let mut cfg = RunConfig {
                gamma: g,
                ..config.clone()
            };
            cfg.data.val_fraction = 0.0;
            Some(run_battery(
                &cfg,
                &root.join(format!("selected_gamma_{g}")),
            )?)
        }
        None => None,
    };
    let report = SummaryReport {
        key: "gamma".into(),
        rows,
    };
    report.write(root, "sweep_gamma")?;
    let sweep = GammaSweep {
        report,
        selected,
        retrained,
    };
    std::fs::write(
        root.join("sweep_gamma_selection.json"),
        serde_json::to_vec_pretty(&sweep)?,
    )?;
    Ok(sweep)
}

fn mean_validation_accuracy(cfg: &RunConfig, root: &Path, seeds: &[u64]) -> Result<Option<f64>> {
    let mut accs = Vec::new();
    for &s in seeds {
        let rows = read_metrics_csv(&run_dir(root, cfg.method, s).join(METRICS_FILE))?;
        let last = rows.iter().map(|r| r.round).max().unwrap_or(0);
        accs.extend(
            rows.iter()
                .filter(|r| {
                    r.round == last && r.phase == Phase::PostTrain && r.split == SplitKind::Val
                })
                .map(|r| r.accuracy),
        );
    }
    Ok(MeanStd::of(&accs).map(|m| m.mean))
}

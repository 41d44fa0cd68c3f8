use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use fedc2i::config::RunConfig;
use fedc2i::orchestration::{build_shards, Method};
use fedc2i::report::{self, DEFAULT_GAMMAS};

#[derive(Parser)]
#[command(
    version,
    about = "Federated learning simulator with influence-weighted personalized aggregation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method for one seed (or every configured seed).
    Run(RunArgs),
    /// Run a battery for each gamma value.
    SweepGamma {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_GAMMAS)]
        values: Vec<f64>,
    },
    /// Run a battery for each method.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<Method>,
    },
    /// Write the synthetic client shards of one seed as CSV.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; defaults to `<out>/data_seed<seed>.csv`.
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; overrides both the config and FEDC2I_OUTPUT_ROOT.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    method: Option<Method>,
    /// Single seed; without it every seed in the config is run.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    literal_eq10: bool,
    #[arg(long)]
    reset_optimizer: bool,
    /// Save a checkpoint after every round.
    #[arg(long)]
    checkpoint: bool,
    /// Continue from the checkpoint in the run directory if there is one.
    #[arg(long)]
    resume: bool,
}

impl Common {
    fn load(&self) -> anyhow::Result<(RunConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(r) = self.rounds {
            cfg.rounds = r;
        }
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        let out = self
            .out
            .clone()
            .unwrap_or_else(|| cfg.resolved_output_dir());
        cfg.output_dir = out.clone();
        Ok((cfg, out))
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(args) => run_cmd(args),
        Command::SweepGamma { common, values } => {
            let (cfg, out) = common.load()?;
            cfg.validate()?;
            let sweep = report::sweep_gamma(&cfg, &values, &out)?;
            print!("{}", sweep.report.to_table());
            if let Some(g) = sweep.selected {
                println!("selected gamma by validation accuracy: {g}");
            }
            finish(sweep.report.is_partial())
        }
        Command::Compare { common, methods } => {
            let (cfg, out) = common.load()?;
            cfg.validate()?;
            let rep = report::compare(&cfg, &methods, &out)?;
            print!("{}", rep.to_table());
            finish(rep.is_partial())
        }
        Command::GenerateData { common, seed, file } => {
            let (cfg, out) = common.load()?;
            cfg.validate()?;
            let path = file.unwrap_or_else(|| out.join(format!("data_seed{seed}.csv")));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            fedc2i::data::export_csv_file(&build_shards(&cfg, seed)?, &path)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn run_cmd(args: RunArgs) -> anyhow::Result<()> {
    let (mut cfg, out) = args.common.load()?;
    if let Some(m) = args.method {
        cfg.method = m;
    }
    cfg.literal_eq10 |= args.literal_eq10;
    cfg.reset_optimizer |= args.reset_optimizer;
    cfg.checkpoint |= args.checkpoint;
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    if args.resume {
        return resume_all(&cfg, &out);
    }
    let battery = report::run_battery(&cfg, &out)?;
    let rep = report::SummaryReport {
        key: "method".into(),
        rows: vec![(cfg.method.name().to_string(), battery)],
    };
    print!("{}", rep.to_table());
    for f in &rep.rows[0].1.failures {
        eprintln!("seed {} failed: {}", f.seed, f.error);
    }
    finish(rep.is_partial())
}

fn resume_all(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    for &seed in &cfg.seeds {
        let dir = report::run_dir(out, cfg.method, seed);
        let s = report::run_single(cfg, seed, &dir, true)
            .with_context(|| format!("seed {seed} in {}", dir.display()))?;
        println!(
            "{} seed {seed}: mean final test accuracy {:.2}",
            cfg.method,
            s.mean_test_accuracy * 100.0
        );
    }
    Ok(())
}

fn finish(partial: bool) -> anyhow::Result<()> {
    if partial {
        bail!("some seeds failed; summary is partial");
    }
    Ok(())
}

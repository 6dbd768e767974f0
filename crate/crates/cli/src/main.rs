use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod exit;

#[derive(Parser)]
#[command(
    name = "fedshard",
    version,
    about = "Sharded federated learning with exact client unlearning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a federation and write its shard cache.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Cache directory to create or overwrite.
        #[arg(long)]
        out: PathBuf,
        /// Merge shards at random instead of by direction.
        #[arg(long)]
        no_a1: bool,
        /// Use the midpoint of the round range for every shard.
        #[arg(long)]
        no_a2: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Remove clients from a trained federation.
    Unlearn {
        #[arg(long)]
        cache: PathBuf,
        /// Comma-separated client ids.
        #[arg(long, value_delimiter = ',', required = true)]
        clients: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also retrain the whole tree without the leavers and compare digests.
        #[arg(long)]
        verify: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fairness scores of an unlearning step.
    Metrics {
        /// Cache before unlearning.
        #[arg(long)]
        cache: PathBuf,
        /// Cache after unlearning; without it only M_e is computed.
        #[arg(long)]
        unlearned: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Sweep::Count)]
        sweep: Sweep,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Cascaded leaving or poisoning via unlearning on a two-group population.
    Scenario {
        #[arg(value_enum)]
        kind: ScenarioKind,
        #[arg(long)]
        config: PathBuf,
        /// Overrides the unlearner named in the config.
        #[arg(long, value_enum)]
        unlearner: Option<UnlearnerKind>,
        #[arg(long, default_value_t = 50)]
        gamma: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        /// Overrides both the data seed and the master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Closed-form and counted speedups on a random merge tree.
    Analyze {
        k: usize,
        r: usize,
        t0: usize,
        /// Number of leaving clients.
        #[arg(default_value_t = 1)]
        m: usize,
        /// Stage-1 shards the leavers are spread over; defaults to `m`.
        #[arg(long)]
        shards: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Retrain from scratch without the given clients and compare costs.
    Baseline {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        clients: Vec<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Count,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioKind {
    Cascade,
    Dpa,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnlearnerKind {
    Exact,
    Mock,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            out,
            no_a1,
            no_a2,
            report,
        } => commands::train(&config, &out, no_a1, no_a2)
            .and_then(|r| commands::emit(&r, report.as_deref())),
        Command::Unlearn {
            cache,
            clients,
            out,
            verify,
            report,
        } => commands::unlearn(&cache, &clients, &out, verify)
            .and_then(|r| commands::emit(&r, report.as_deref())),
        Command::Metrics {
            cache,
            unlearned,
            sweep,
            report,
        } => {
            let mode = match sweep {
                Sweep::Count => fedshard::unlearn::SweepMode::CountOnly,
                Sweep::Full => fedshard::unlearn::SweepMode::FullRetrain,
            };
            commands::metrics(&cache, unlearned.as_deref(), mode)
                .and_then(|r| commands::emit(&r, report.as_deref()))
        }
        Command::Scenario {
            kind,
            config,
            unlearner,
            gamma,
            lr,
            seed,
            report,
        } => {
            let unlearner = unlearner.map(|u| match u {
                UnlearnerKind::Exact => fedshard::scenarios::Unlearner::Exact,
                UnlearnerKind::Mock => fedshard::scenarios::Unlearner::Mock { gamma, lr },
            });
            let kind = match kind {
                ScenarioKind::Cascade => commands::Scenario::Cascade,
                ScenarioKind::Dpa => commands::Scenario::Dpa,
            };
            commands::scenario(kind, &config, unlearner, seed)
                .and_then(|r| commands::emit(&r, report.as_deref()))
        }
        Command::Analyze {
            k,
            r,
            t0,
            m,
            shards,
            seed,
            report,
        } => commands::analyze(k, r, t0, m, shards.unwrap_or(m), seed)
            .and_then(|r| commands::emit(&r, report.as_deref())),
        Command::Baseline {
            cache,
            clients,
            rounds,
            report,
        } => commands::baseline(&cache, &clients, rounds)
            .and_then(|r| commands::emit(&r, report.as_deref())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

//! `counsel-arena`: simulate sessions, run tournaments, fit ratings and
//! train on preferences from one binary. Logs go to stderr, data to files.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use counsel_arena::domain::CompetencyDimension;
use counsel_arena::report::ReportFormat;
use counsel_arena::synthcheck::Mode;

#[derive(Debug, Parser)]
#[command(name = "counsel-arena", version, about = "Calibration arena for counseling agents")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML config with backends, simulation, tournament, rating and preflearn sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config worker count (0 = all cores, 1 = sequential).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every configured model against every client.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Judge stored transcripts in a Swiss or round-robin tournament.
    Tournament {
        #[arg(long)]
        transcripts: PathBuf,
        /// Comma-separated model ids; defaults to every model in the transcripts.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        #[arg(long)]
        rounds: Option<u32>,
        /// Client ids, one per line; defaults to every client all models share.
        #[arg(long)]
        cases: Option<PathBuf>,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        standings: Option<PathBuf>,
    },
    /// Fit Bradley-Terry Elo ratings from battles.
    Rate {
        #[arg(long)]
        battles: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fit only this dimension instead of all thirteen tables.
        #[arg(long)]
        dimension: Option<CompetencyDimension>,
    },
    /// Render the leaderboard.
    Report {
        #[arg(long)]
        ratings: PathBuf,
        /// Battles for the win-rate column.
        #[arg(long)]
        battles: Option<PathBuf>,
        #[arg(long, default_value = "md")]
        format: ReportFormat,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cohen's kappa between two judgments of the same battles.
    Agree {
        #[arg(long = "battles-x")]
        battles_x: PathBuf,
        #[arg(long = "battles-y")]
        battles_y: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Position shares and swap consistency of a battle file.
    Bias {
        #[arg(long)]
        battles: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn battles into preference pairs.
    Prefs {
        #[arg(long)]
        battles: PathBuf,
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the pairwise reward model.
    #[command(name = "train-rm")]
    TrainRm {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the tabular policy with GRPO against the reward model.
    Grpo {
        #[arg(long)]
        rm: PathBuf,
        /// Training client profiles, JSONL.
        #[arg(long)]
        queries: PathBuf,
        /// Starting policy; defaults to the uniform policy.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Also write the starting policy here.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Battle a trained policy against its snapshot on held-out clients.
    #[command(name = "eval-heldout")]
    EvalHeldout {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        /// Held-out client profiles, JSONL.
        #[arg(long)]
        queries: PathBuf,
        /// Training client profiles; held-out clients must not overlap them.
        #[arg(long = "train-queries")]
        train_queries: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check scripts and profiles.
    Validate {
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        profiles: PathBuf,
    },
    /// Rating recovery on synthetic pools with known skills.
    Synthcheck {
        #[arg(long, default_value = "both")]
        mode: Mode,
        #[arg(long, default_value_t = 12)]
        models: usize,
        #[arg(long, default_value_t = 20.0)]
        spacing: f64,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic model pool, clients and a matching config.
    Gen {
        #[arg(long, default_value_t = 4)]
        models: usize,
        #[arg(long, default_value_t = 20)]
        clients: usize,
        #[arg(long, default_value_t = 40.0)]
        spacing: f64,
        /// Number the clients from here, to keep held-out sets disjoint.
        #[arg(long, default_value_t = 0)]
        id_offset: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Simulate { .. } => "simulate",
            Self::Tournament { .. } => "tournament",
            Self::Rate { .. } => "rate",
            Self::Report { .. } => "report",
            Self::Agree { .. } => "agree",
            Self::Bias { .. } => "bias",
            Self::Prefs { .. } => "prefs",
            Self::TrainRm { .. } => "train-rm",
            Self::Grpo { .. } => "grpo",
            Self::EvalHeldout { .. } => "eval-heldout",
            Self::Validate { .. } => "validate",
            Self::Synthcheck { .. } => "synthcheck",
            Self::Gen { .. } => "gen",
        }
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(2));
        }
    };
    init_logging(cli.global.verbose);
    let argv: Vec<String> = std::env::args().collect();
    match commands::run(&cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

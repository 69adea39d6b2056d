use std::path::PathBuf;
use std::process::exit;

use agvsim_cli::batch::{self, EXIT_FAILURE, EXIT_INVALID};
use agvsim_cli::config::ServiceConfig;
use agvsim_cli::service;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "agvsim",
    version,
    about = "Manual/autonomous handover simulator for a supervised AGV"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario script and write its event log and metrics.
    Run {
        script: PathBuf,
        /// Override the script's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run every script in a directory, repeated with derived seeds.
    Campaign {
        dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        reps: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Serve the live simulation to one operator over a websocket.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8765")]
        addr: String,
        /// TOML service configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = match Cli::parse().command {
        Command::Run { script, seed, out } => batch::cmd_run(&script, &out, seed),
        Command::Campaign { dir, reps, out } => batch::cmd_campaign(&dir, reps, &out),
        Command::Serve { addr, config } => serve(&addr, config),
    };
    exit(code);
}

fn serve(addr: &str, config: Option<PathBuf>) -> i32 {
    let cfg = match config {
        Some(path) => match ServiceConfig::load(&path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("error: {e:#}");
                return EXIT_INVALID;
            }
        },
        None => ServiceConfig::default(),
    };
    match service::start(cfg, addr) {
        Ok(handle) => {
            handle.wait();
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

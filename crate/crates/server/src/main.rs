use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vchatter_core::protocol::ProtocolConfig;
use vchatter_core::sim::{self, SimulationScript};
use vchatter_core::store::ENV_DATA_DIR;
use vchatter_server::{engine_from_env, router, AppState, ENV_ADDR};

/// Exposure-therapy chat service and offline tools.
///
/// Exit codes: 0 ok, 1 validation or runtime failure, 2 usage error.
#[derive(Debug, Parser)]
#[command(name = "vchatter", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serve the HTTP API. Provider, voice and template settings come from
    /// VCHATTER_* environment variables.
    Serve {
        #[arg(long, env = ENV_ADDR, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, env = ENV_DATA_DIR)]
        data_dir: Option<PathBuf>,
        /// Minimum hours between the end of one day and the next day's
        /// planning.
        #[arg(long, default_value_t = ProtocolConfig::deployment().min_hours_between_days)]
        min_hours: u32,
    },
    /// Run a scripted six-day walk on the mock provider and validate it.
    Simulate {
        /// Simulation script; the bundled canonical walk when omitted.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Output directory for data/, prompts.jsonl, final_state.json and
        /// validation.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Populate an empty data directory with simulated participants.
    Seed {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(short, long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Print the pre/post outcome table for a data directory.
    Report {
        #[arg(long)]
        data_dir: PathBuf,
    },
    /// Check transcripts in a simulation output or data directory.
    Validate { dir: PathBuf },
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

async fn serve(addr: String, data_dir: Option<PathBuf>, min_hours: u32) -> ExitCode {
    let engine = match engine_from_env(data_dir, ProtocolConfig { min_hours_between_days: min_hours }) {
        Ok(e) => e,
        Err(e) => return fail(e),
    };
    let listener = match tokio::net::TcpListener::bind(&addr).await {
        Ok(l) => l,
        Err(e) => return fail(format!("cannot bind {addr}: {e}")),
    };
    tracing::info!(%addr, "listening");
    match axum::serve(listener, router(AppState::new(engine))).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn report_outcome(report: &sim::ValidationReport) -> ExitCode {
    print!("{}", report.render());
    match &report.first_violation {
        None => ExitCode::SUCCESS,
        Some(v) => {
            eprintln!("violation: {v}");
            ExitCode::from(1)
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match cli.command {
        Command::Serve { addr, data_dir, min_hours } => serve(addr, data_dir, min_hours).await,
        Command::Simulate { script, out } => {
            let run = match script {
                Some(p) => sim::run_simulation_file(&p, &out),
                None => sim::run_simulation(&SimulationScript::canonical(), &out),
            };
            match run {
                Ok(o) => report_outcome(&o.report),
                Err(e) => fail(e),
            }
        }
        Command::Seed { data_dir, n, seed } => match sim::seed_cohort(&data_dir, n, seed) {
            Ok(ids) => {
                println!("seeded {} participant(s) into {}", ids.len(), data_dir.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Report { data_dir } => match sim::report(&data_dir) {
            Ok(table) => {
                print!("{table}");
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Validate { dir } => match sim::validate(&dir) {
            Ok(r) => report_outcome(&r),
            Err(e) => fail(e),
        },
    }
}

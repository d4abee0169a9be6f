// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use microserve::engine::service::{self, read_config, ServiceError};
use microserve::engine::EngineConfig;
use microserve::router::service::{self as router_service, RouterConfig};

/// Runs one serving process: an engine or the router.
#[derive(Parser)]
#[command(name = "microserve", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start an engine with its HTTP API and KV transfer listener.
    Engine {
        /// TOML or JSON engine config.
        #[arg(long)]
        config: PathBuf,
    },
    /// Start the router gateway.
    Router {
        /// TOML or JSON router config.
        #[arg(long)]
        config: PathBuf,
    },
}

async fn run(cli: Cli) -> Result<(), ServiceError> {
    match cli.command {
        Command::Engine { config } => service::serve(read_config::<EngineConfig>(&config)?).await,
        Command::Router { config } => router_service::serve(read_config::<RouterConfig>(&config)?).await,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("microserve: {e}");
            return ExitCode::FAILURE;
        }
    };
    match rt.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("microserve: {e}");
            ExitCode::FAILURE
        }
    }
}

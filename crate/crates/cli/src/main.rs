use std::process::ExitCode;

use clap::Parser;
use seqmatch_cli::cli::{self, Cli, Command};
use tracing_subscriber::EnvFilter;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let args = Cli::parse();
    let result = match &args.command {
        Command::Serve(a) => tokio::runtime::Runtime::new()
            .map_err(Into::into)
            .and_then(|rt| rt.block_on(cli::serve(args.lambda, a))),
        Command::Simulate(a) => cli::simulate(args.lambda, a),
        Command::Replay(a) => cli::replay(args.lambda, a),
        Command::Chain(a) => cli::chain(args.lambda, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use seqmatch::replay::{load_csv_path, replay_study, CsvLayout, ReplayOptions};
use seqmatch::simlab::{chain_stationary, chain_transition, run_grid, Allocator, Scenario, ScenarioSpec, TestKind};
use seqmatch::TrialStore;

use crate::http::{router, AppState};

#[derive(Debug, Parser)]
#[command(name = "seqmatch", version, about = "Sequential matched-pair allocation")]
pub struct Cli {
    /// Matching aggressiveness used when a request does not give one.
    #[arg(long, global = true, env = "SEQMATCH_LAMBDA", default_value_t = 0.10)]
    pub lambda: f64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the trial service over HTTP.
    Serve(ServeArgs),
    /// Run the simulation grid.
    Simulate(SimulateArgs),
    /// Replay a completed randomized trial through the matching rule.
    Replay(ReplayArgs),
    /// Stationary reservoir analysis of the idealized Markov chain.
    Chain(ChainArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "SEQMATCH_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "SEQMATCH_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "SEQMATCH_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
    /// Static bearer token; when unset the API is open.
    #[arg(long, env = "SEQMATCH_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [Scenario::NL, Scenario::LI, Scenario::ZE])]
    pub scenarios: Vec<Scenario>,
    #[arg(long = "n", value_delimiter = ',', default_values_t = [50, 100, 200])]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = Allocator::ALL)]
    pub allocators: Vec<Allocator>,
    #[arg(long, value_delimiter = ',', default_values_t = TestKind::ALL)]
    pub tests: Vec<TestKind>,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, default_value_t = 1000)]
    pub mc_draws: u64,
    #[arg(long, default_value_t = 1.0)]
    pub beta_t: f64,
    #[arg(long, default_value_t = 3.0)]
    pub sigma2_e: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-cell CSV output; the summary table always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Covariate columns to match on.
    #[arg(long, value_delimiter = ',', required = true)]
    pub covariates: Vec<String>,
    #[arg(long, default_value = "arm")]
    pub arm_column: String,
    #[arg(long, default_value = "y")]
    pub response_column: String,
    #[arg(long, default_value = "T")]
    pub treatment_label: String,
    #[arg(long, default_value = "C")]
    pub control_label: String,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    #[arg(long = "n", value_delimiter = ',', default_values_t = [50])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep discarded entrants out of the running covariance.
    #[arg(long)]
    pub exclude_discarded: bool,
    /// Tab-separated report; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-run traces as tab-separated rows.
    #[arg(long)]
    pub traces: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ChainArgs {
    /// Even cell counts; defaults to round(1 / lambda).
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<u32>,
    /// Print the stationary distribution too.
    #[arg(long)]
    pub distribution: bool,
}

pub type CliResult = Result<(), Box<dyn std::error::Error + Send + Sync>>;

fn output(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

pub fn simulate(lambda: f64, a: &SimulateArgs) -> CliResult {
    let mut specs = Vec::new();
    for &scenario in &a.scenarios {
        for &n in &a.sizes {
            specs.push(ScenarioSpec {
                scenario,
                beta_t: a.beta_t,
                sigma2_e: a.sigma2_e,
                n,
                lambda,
                replications: a.reps,
                mc_draws: a.mc_draws,
                alpha: a.alpha,
                seed: a.seed,
            });
        }
    }
    let report = run_grid(&specs, &a.allocators, &a.tests)?;
    if let Some(path) = &a.out {
        report.write_csv(BufWriter::new(File::create(path)?))?;
    }
    print!("{}", report.summary());
    Ok(())
}

pub fn replay(lambda: f64, a: &ReplayArgs) -> CliResult {
    let mut layout = CsvLayout::new(a.covariates.clone(), &a.arm_column, &a.response_column);
    layout.treatment_label = a.treatment_label.clone();
    layout.control_label = a.control_label.clone();
    layout.delimiter = u8::try_from(a.delimiter).map_err(|_| "delimiter must be a single ASCII character")?;
    let records = load_csv_path(&a.input, &layout)?;
    let mut opts = ReplayOptions::new(lambda);
    opts.discarded_update_covariance = !a.exclude_discarded;
    let report = replay_study(&records, &opts, &a.sizes, a.runs, a.seed)?;
    report.write_rows(output(&a.out)?)?;
    if let Some(path) = &a.traces {
        report.write_traces(BufWriter::new(File::create(path)?))?;
    }
    Ok(())
}

pub fn chain(lambda: f64, a: &ChainArgs) -> CliResult {
    let ks = if a.k.is_empty() {
        vec![(1.0 / lambda).round() as u32]
    } else {
        a.k.clone()
    };
    let mut out = io::stdout().lock();
    writeln!(out, "K\tlambda\tmean_items")?;
    for k in ks {
        let s = chain_stationary(&chain_transition(k)?)?;
        writeln!(out, "{k}\t{:.6}\t{:.10}", 1.0 / f64::from(k), s.mean_items)?;
        if a.distribution {
            for (state, p) in s.distribution.iter().enumerate() {
                writeln!(out, "  s={state}\t{p:.10}")?;
            }
        }
    }
    Ok(())
}

pub async fn serve(lambda: f64, a: &ServeArgs) -> CliResult {
    let store = TrialStore::open(&a.data_dir, lambda)?;
    tracing::info!(data_dir = %a.data_dir.display(), trials = store.list().len(), "store opened");
    let app = router(Arc::new(AppState {
        store,
        token: a.token.clone(),
    }));
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse()?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

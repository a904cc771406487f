use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tierkv_core::engine::Policy;

mod ops;

const PRECEDENCE: &str = "Settings resolve as command-line flags > config file (--config) > built-in defaults.";

#[derive(Parser, Debug)]
#[command(name = "tierkv", version, about = "Multi-tier KV-cache serving simulator", after_help = PRECEDENCE)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus and request trace.
    #[command(after_help = PRECEDENCE)]
    GenWorkload(GenArgs),
    /// Simulate one configuration and write its report.
    #[command(after_help = PRECEDENCE)]
    Run(RunArgs),
    /// Simulate every policy x rate x window x seed cell.
    #[command(after_help = PRECEDENCE)]
    Sweep(SweepArgs),
    /// Render a combined CSV as latency and breakdown tables.
    Report(ReportArgs),
    /// Replay conformance scenarios against their golden transcripts.
    Scenario(ScenarioArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// Simulation config JSON; omitted fields take defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory for corpus.jsonl and workload.jsonl.
    #[arg(long, short)]
    out: PathBuf,
    /// Workload seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_requests: Option<usize>,
    /// Target repetition ratio in [0, 1).
    #[arg(long)]
    repetition: Option<f64>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory for report.json, requests.csv, steps.jsonl and prefetch_log.csv.
    #[arg(long, short)]
    out: PathBuf,
    /// Directory holding corpus.jsonl and workload.jsonl; generated from the config if omitted.
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Arrival rate in requests per second.
    #[arg(long)]
    rate: Option<f64>,
    /// RECOMPUTE, CCACHE, SCCACHE, PCR, PCR_ONLY_UP, PCR_ONLY_DOWN, PCR_NO_PREFETCH, or base / +overlap / +prefetch.
    #[arg(long)]
    policy: Option<Policy>,
    /// Prefetch look-ahead window in requests.
    #[arg(long)]
    window: Option<usize>,
    /// Seed for arrivals and, when generated, the workload.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory; one subdirectory per cell plus combined.csv.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Comma-separated arrival rates.
    #[arg(long, value_delimiter = ',')]
    rate: Vec<f64>,
    /// Comma-separated policies.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    policy: Vec<Policy>,
    /// Comma-separated prefetch windows.
    #[arg(long, value_delimiter = ',')]
    window: Vec<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Combined CSV written by `sweep`.
    csv: PathBuf,
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Scenario names; all registered scenarios if none.
    names: Vec<String>,
    /// Scenario directory.
    #[arg(long)]
    dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::GenWorkload(a) => ops::gen_workload(a),
        Command::Run(a) => ops::run(a),
        Command::Sweep(a) => ops::sweep(a),
        Command::Report(a) => ops::report(a),
        Command::Scenario(a) => ops::scenario(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

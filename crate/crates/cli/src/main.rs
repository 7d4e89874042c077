use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use chipsim::analytics;
use chipsim::machine::{load_config_file, AnyConfig, ConfigError, MachineConfig, ModelConfig};
use chipsim::runtime::Mode;
use chipsim::scenario::{self, Format, Scenario, ScenarioError};
use clap::{Parser, Subcommand, ValueEnum};

/// Simulate persistent-megakernel decoder layers on chiplet GPUs.
///
/// The simulator is fully deterministic: there is no seed, and rerunning a
/// scenario reproduces its output byte for byte.
#[derive(Parser)]
#[command(name = "chipsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every (batch, mode) point and write one metrics row each.
    Run(RunArgs),
    /// Check config files and print derived quantities without simulating.
    Validate(ValidateArgs),
    /// Render a comparison table from an existing metrics file.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Machine preset (mi350, toy) or JSON file.
    #[arg(long, default_value = "mi350")]
    machine: String,
    /// Model preset (qwen3-8b, toy) or JSON file.
    #[arg(long, default_value = "qwen3-8b")]
    model: String,
    /// Execution mode; repeat for several [default: standard, chiplet_m_tile, chiplet_m_split]
    #[arg(long = "mode", value_parser = parse_mode)]
    modes: Vec<Mode>,
    /// Batch size; repeat for several [default: 1]
    #[arg(long = "batch")]
    batches: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    layers: u32,
    /// Tile profile: auto, reference or uniform.
    #[arg(long, default_value = "auto")]
    profile: String,
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: OutFormat,
    /// Also write a line-delimited JSON access trace per point (large).
    #[arg(long)]
    trace: bool,
    /// Points simulated in parallel (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(clap::Args)]
struct ValidateArgs {
    /// Machine or model JSON files (kind detected from their keys).
    paths: Vec<PathBuf>,
    #[arg(long)]
    machine: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Batch sizes to show m_tiles for.
    #[arg(long = "batch")]
    batches: Vec<u64>,
    #[arg(long, default_value_t = 16)]
    t_m: u64,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// Metrics file written by `run` (CSV or JSON).
    metrics: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: ReportFormat,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn run(args: RunArgs) -> Result<(), ScenarioError> {
    let defaults = Scenario::default();
    let s = Scenario {
        machine: args.machine,
        model: args.model,
        modes: if args.modes.is_empty() { defaults.modes } else { args.modes },
        batches: if args.batches.is_empty() { defaults.batches } else { args.batches },
        layers: args.layers,
        profile: args.profile,
        format: match args.format {
            OutFormat::Csv => Format::Csv,
            OutFormat::Json => Format::Json,
        },
        trace: args.trace,
        jobs: args.jobs,
    };
    let out = scenario::run(&s, &args.out)?;
    print!("{}", scenario::summary(&out.rows));
    eprintln!("wrote {} ({} rows) and {}", out.metrics_path.display(), out.rows.len(), out.summary_path.display());
    for p in &out.trace_paths {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn validate(args: ValidateArgs) -> Result<(), ConfigError> {
    let mut machine = args.machine.as_deref().map(MachineConfig::resolve).transpose()?;
    let mut model = args.model.as_deref().map(ModelConfig::resolve).transpose()?;
    for p in &args.paths {
        match load_config_file(p)? {
            AnyConfig::Machine(m) => machine = Some(m),
            AnyConfig::Model(q) => model = Some(q),
        }
        println!("{}: ok", p.display());
    }
    let batches = if args.batches.is_empty() { vec![1, 8, 16, 32, 64, 128] } else { args.batches };
    print!("{}", scenario::describe(machine.as_ref(), model.as_ref(), &batches, args.t_m.max(1)));
    Ok(())
}

fn report(args: ReportArgs) -> anyhow::Result<()> {
    let rows = scenario::read_metrics(&args.metrics).with_context(|| format!("reading {}", args.metrics.display()))?;
    let rows: Vec<_> = rows.iter().map(|r| r.report_row()).collect();
    match args.format {
        ReportFormat::Text => print!("{}", analytics::render_table(&rows)),
        ReportFormat::Json => println!("{}", analytics::render_json(&rows)),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<(), (i32, String)> = match cli.command {
        Command::Run(a) => run(a).map_err(|e| (e.exit_code(), e.to_string())),
        Command::Validate(a) => validate(a).map_err(|e| (2, e.to_string())),
        Command::Report(a) => report(a).map_err(|e| (2, format!("{e:#}"))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code as u8)
        }
    }
}

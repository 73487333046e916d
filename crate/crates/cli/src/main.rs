use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fracopt::harness::{format_number, run, ExperimentConfig, ExperimentKind, ReportRow};

#[derive(Parser)]
#[command(name = "fracopt", version, about = "Optimal control of space-time fractional diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// State of the manufactured problem under its exact optimal control.
    SolveState(Flags),
    /// Optimal control of the manufactured problem.
    SolveControl(Flags),
    /// Error and rates under refinement in space.
    ConvSpace(Flags),
    /// Error and rates under refinement in time.
    ConvTime(Flags),
    /// Decay of the state in the cylinder height.
    Truncation(Flags),
    /// Single-mode free decay against the spectral solution.
    OracleCheck(Flags),
}

/// Every flag overrides the config file key of the same name. Lists are
/// comma separated.
#[derive(Args)]
struct Flags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    s: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long = "K")]
    k: Option<String>,
    #[arg(long = "M")]
    m: Option<String>,
    #[arg(long = "T")]
    t: Option<String>,
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    zeta: Option<String>,
    #[arg(long = "Y")]
    y: Option<String>,
    #[arg(long)]
    tol: Option<String>,
}

impl Command {
    fn split(self) -> (ExperimentKind, Flags) {
        match self {
            Command::SolveState(f) => (ExperimentKind::SolveState, f),
            Command::SolveControl(f) => (ExperimentKind::SolveControl, f),
            Command::ConvSpace(f) => (ExperimentKind::ConvergenceSpace, f),
            Command::ConvTime(f) => (ExperimentKind::ConvergenceTime, f),
            Command::Truncation(f) => (ExperimentKind::Truncation, f),
            Command::OracleCheck(f) => (ExperimentKind::OracleCheck, f),
        }
    }
}

fn config(kind: ExperimentKind, flags: Flags) -> Result<ExperimentConfig> {
    let mut cfg = match &flags.config {
        Some(path) => ExperimentConfig::load(path, Some(kind)).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::defaults(kind),
    };
    let overrides = [
        ("s", flags.s),
        ("gamma", flags.gamma),
        ("K", flags.k),
        ("M", flags.m),
        ("T", flags.t),
        ("mu", flags.mu),
        ("zeta", flags.zeta),
        ("Y", flags.y),
        ("tol", flags.tol),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    if let Some(out) = flags.out {
        cfg.out = out;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_row(row: &ReportRow) {
    eprintln!(
        "{} s={} gamma={} M={} K={} N={} Y={} err_control={} err_state={} iters={} pg={}",
        row.case,
        row.s,
        row.gamma,
        row.m,
        row.k,
        row.n,
        format_number(row.y),
        format_number(row.err_control),
        format_number(row.err_state),
        row.iters,
        format_number(row.pg_norm),
    );
}

fn main() -> Result<()> {
    let (kind, flags) = Cli::parse().command.split();
    let cfg = config(kind, flags)?;
    let start = Instant::now();
    let report = run(&cfg, &mut print_row)?;
    for rate in &report.rates {
        eprintln!("rate {} s={} {}: {}", rate.case, rate.s, rate.quantity, format_number(rate.slope));
    }
    report
        .write(&cfg.out)
        .with_context(|| format!("writing reports to {}", cfg.out.display()))?;
    eprintln!("wrote {} rows to {} in {:.1?}", report.rows.len(), cfg.out.display(), start.elapsed());
    Ok(())
}

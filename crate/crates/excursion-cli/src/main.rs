//! Batch front end over the excursion engines. One subcommand per
//! computation, a TOML config carrying the model and parameters, and
//! machine-readable records on stdout or a file.
//!
//! Exit codes: 0 on success, 2 for configuration errors (the message names
//! the offending key), 3 for numerical or runtime failures. Everything on
//! stdout or the output file is deterministic given the config and seed;
//! progress and wall times go to stderr.

mod commands;
mod config;
mod records;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use config::Format;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "excursion",
    version,
    about = "Capacity functionals and boundary-length moments of planar Gaussian excursion sets"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration; commands with built-in defaults run without one.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Write records to this file instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    output: Option<PathBuf>,
    /// Record format; overrides the config file. Defaults to csv.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Base seed; the record at sweep index i uses seed + i. Defaults to 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap the worker pool. Results never depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, Subcommand)]
enum Cmd {
    /// Hitting probability of a two-segment bundle, by the sweeping-line engine.
    Capacity2,
    /// Hitting probability of a k-segment star, by the growing-circle engine.
    Capacityk,
    /// Boundary-length second moment over a window pair, by Crofton line pairs.
    SecondMoment,
    /// Run an engine and its Monte Carlo oracle on the same inputs; emit both and the z-score.
    McValidate,
    /// Empirical crossing intensity on long chords against the closed-form rate.
    RiceCheck,
}

impl Cmd {
    fn name(self) -> &'static str {
        match self {
            Cmd::Capacity2 => "capacity2",
            Cmd::Capacityk => "capacityk",
            Cmd::SecondMoment => "second-moment",
            Cmd::McValidate => "mc-validate",
            Cmd::RiceCheck => "rice-check",
        }
    }
}

enum Failure {
    Config(anyhow::Error),
    Exec(anyhow::Error),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match try_run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Exec(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn try_run(cli: &Cli) -> Result<(), Failure> {
    if let Some(workers) = cli.workers {
        if workers == 0 {
            return Err(Failure::Config(anyhow!("--workers must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Failure::Exec(anyhow!("worker pool: {e}")))?;
    }

    let doc = config::load(cli.config.as_deref()).map_err(Failure::Config)?;
    let name = cli.command.name();
    if let Some(declared) = &doc.command {
        if declared != name {
            return Err(Failure::Config(anyhow!(
                "config key \"command\" says {declared:?} but the subcommand is {name:?}"
            )));
        }
    }
    let model = doc.model.build().map_err(Failure::Config)?;
    let opts = doc.tolerances.solver_options().map_err(Failure::Config)?;
    let seed = cli.seed.or(doc.output.seed).unwrap_or(0);
    let format = cli.format.or(doc.output.format).unwrap_or(Format::Csv);
    let out_path = cli.output.clone().or_else(|| doc.output.path.clone());
    let prepared = commands::prepare(name, &doc).map_err(Failure::Config)?;

    let started = Instant::now();
    let records = commands::execute(&prepared, &model, seed, &opts).map_err(Failure::Exec)?;
    eprintln!(
        "# {name}: {} record(s) in {:.3}s",
        records.len(),
        started.elapsed().as_secs_f64()
    );

    let mut buf = Vec::new();
    match format {
        Format::Csv => records::write_csv(&mut buf, &records),
        Format::Json => records::write_json(&mut buf, &records),
    }
    .map_err(Failure::Exec)?;
    match &out_path {
        Some(path) => std::fs::write(path, &buf)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::Exec)?,
        None => std::io::stdout()
            .write_all(&buf)
            .context("writing stdout")
            .map_err(Failure::Exec)?,
    }
    Ok(())
}

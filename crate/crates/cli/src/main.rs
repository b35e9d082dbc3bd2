//! `cpsc`: Delaunay orbits, mode tables, gluing and the CPSC corrector.
//!
//! Exit codes: 0 success, 2 numerical failure, 3 configuration error.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cpsc_core::{Error, Result};

use config::{OrbitRequest, RunConfig};
use output::Output;

#[derive(Debug, Parser)]
#[command(name = "cpsc", version, about = "Constant positive scalar curvature metrics on Delaunay connected sums")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed for randomized probes; overrides the solver config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads for the linear algebra; 0 keeps the library default.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// JSON configuration document.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct OrbitArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    /// Highest mode in the table.
    #[arg(long)]
    jmax: Option<usize>,
    /// Mode for the Floquet analysis.
    #[arg(long)]
    j: Option<usize>,
    /// Periods of Jacobi field samples.
    #[arg(long)]
    periods: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Delaunay orbit: CSV samples and period, energy, maximum.
    Delaunay(OrbitArgs),
    /// Table of Fredholm weights by mode and the Jacobi fields.
    Modes(OrbitArgs),
    /// Monodromy and multipliers of one mode.
    Floquet(OrbitArgs),
    /// Approximate solution and gluing error of a configuration.
    Glue,
    /// Contraction solve with certification.
    Solve,
    /// Solve and check the acceptance gates.
    Verify,
    /// Error decay and right-inverse norms over a list of T.
    Sweep,
    /// Validate a configuration and print it with defaults filled in.
    Check,
}

fn orbit_request(cli: &Cli, a: &OrbitArgs) -> Result<OrbitRequest> {
    let mut req: OrbitRequest = match &cli.config {
        Some(p) => config::read(p)?,
        None => OrbitRequest::default(),
    };
    req.n = a.n.or(req.n);
    req.eps = a.eps.or(req.eps);
    req.jmax = a.jmax.or(req.jmax);
    req.j = a.j.or(req.j);
    req.periods = a.periods.or(req.periods);
    Ok(req)
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let path: &Path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --config PATH".into()))?;
    let mut run = config::read_run(path)?;
    if let Some(seed) = cli.seed {
        run.solver.seed = seed;
    }
    Ok(run)
}

fn run(cli: &Cli) -> Result<i32> {
    cpsc_core::corrector::set_threads(cli.threads);
    match &cli.command {
        Command::Delaunay(a) | Command::Modes(a) | Command::Floquet(a) => {
            let p = commands::resolve_orbit(&orbit_request(cli, a)?)?;
            let out = Output::new(&cli.out)?;
            match cli.command {
                Command::Delaunay(_) => commands::delaunay(&p, &out),
                Command::Modes(_) => commands::modes(&p, &out),
                _ => commands::floquet(&p, &out),
            }
        }
        Command::Check => commands::check(&run_config(cli)?),
        cmd => {
            let run = run_config(cli)?;
            let out = Output::new(&cli.out)?;
            match cmd {
                Command::Glue => commands::glue(&run, &out),
                Command::Solve => commands::solve(&run, &out),
                Command::Verify => commands::verify(&run, &out),
                _ => commands::sweep(&run, &out),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

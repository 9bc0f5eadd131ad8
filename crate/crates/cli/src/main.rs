mod run;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedgan_core::protocol::RunConfig;
use fedgan_core::verify::{self, Profile};

#[derive(Parser)]
#[command(name = "fedgan", version, about = "Decentralized GAN simulator over non-iid clients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write metrics, lambda trajectory, samples and a manifest.
    Run {
        config: PathBuf,
        /// Output directory (default: runs/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the gradient and divergence self-checks.
    Verify {
        #[arg(long, value_enum, default_value_t = ProfileArg::Default)]
        profile: ProfileArg,
        /// Print the report as JSON instead of one line per check.
        #[arg(long)]
        json: bool,
    },
    /// One run per value of an axis, for every seed, plus a comparison table.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: sweep::Axis,
        /// Output directory (default: sweeps/<name>-<axis>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Default,
    Strict,
}

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Exit 2.
    Config(String),
    /// Exit 3.
    NonFinite(String),
    /// Exit 1.
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::NonFinite(_) => 3,
            Failure::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::NonFinite(m) | Failure::Other(m) => m,
        }
    }
}

impl From<fedgan_core::Error> for Failure {
    fn from(e: fedgan_core::Error) -> Self {
        match &e {
            fedgan_core::Error::NonFinite { .. } => Failure::NonFinite(e.to_string()),
            fedgan_core::Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(format!("i/o: {e}"))
    }
}

pub fn load_config(path: &std::path::Path) -> Result<RunConfig, Failure> {
    RunConfig::from_path(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed } => cmd_run(&config, out, seed),
        Command::Verify { profile, json } => cmd_verify(profile, json),
        Command::Sweep { config, axis, out } => sweep::cmd_sweep(&config, axis, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn cmd_run(path: &std::path::Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), Failure> {
    let mut config = load_config(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let out = out.unwrap_or_else(|| PathBuf::from("runs").join(&config.name));
    let summary = run::run_to_dir(&config, &out)?;
    match summary.last {
        Some(m) => println!(
            "{}: {} iterations, covered {}/{} modes, divergence {:.4}, lambda {:.4} -> {}",
            config.name,
            m.iteration,
            m.covered_count,
            m.mode_fractions.len(),
            m.empirical_divergence,
            m.lambda,
            out.display()
        ),
        None => println!("{}: 0 iterations -> {}", config.name, out.display()),
    }
    Ok(())
}

fn cmd_verify(profile: ProfileArg, json: bool) -> Result<(), Failure> {
    let profile = match profile {
        ProfileArg::Default => Profile::Default,
        ProfileArg::Strict => Profile::Strict,
    };
    let report = verify::run(profile)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Failure::Other(e.to_string()))?);
    } else {
        for c in &report.checks {
            let note = if c.quadrature_bound && profile == Profile::Strict {
                "  (quadrature-bound; may fail under strict)"
            } else {
                ""
            };
            println!(
                "{}  {:<88} measured {:.3e}  tolerance {:.1e}  n={}{note}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance,
                c.instances,
            );
        }
    }
    let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Other(format!("{} check(s) failed: {}", failed.len(), failed.join("; "))))
    }
}

//! Command-line front end: CSV input, result tables and Monte-Carlo runs.

pub mod error;
pub mod io;
pub mod run;
pub mod sim;

use std::ffi::OsString;
use std::io::Write;

use clap::{Parser, Subcommand};

pub use error::CliError;
pub use run::{cmd_run, RunConfig};
pub use sim::{cmd_simulate, SimulateConfig};

#[derive(Debug, Parser)]
#[command(name = "permcca", version, about = "Permutation inference for canonical correlation analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Test canonical correlations of two data sets.
    Run(RunConfig),
    /// Estimate error rates or power on simulated data.
    Simulate(SimulateConfig),
    /// Print a predefined scenario as a TOML spec.
    Scenario(sim::ScenarioConfig),
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{rendered}");
            } else {
                let _ = write!(stderr, "{rendered}");
            }
            return code;
        }
    };
    let result = match &cli.command {
        Command::Run(cfg) => cmd_run(cfg, stderr).map(|text| (text, cfg.out.is_none())),
        Command::Simulate(cfg) => cmd_simulate(cfg, stderr).map(|text| (text, cfg.out.is_none())),
        Command::Scenario(cfg) => sim::cmd_scenario(cfg).map(|text| (text, true)),
    };
    match result {
        Ok((text, to_stdout)) => {
            if to_stdout && stdout.write_all(text.as_bytes()).is_err() {
                return 1;
            }
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

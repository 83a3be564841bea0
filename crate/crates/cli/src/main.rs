//! `covdiff`: two-sample covariance tests, simulation studies and
//! variable clustering from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use covdiff::Error;

mod cluster_cmd;
mod simulate;
mod test_cmd;

#[derive(Parser)]
#[command(name = "covdiff", version, about = "Max-type tests for equality of large covariance matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test whether two samples share a covariance matrix.
    Test(test_cmd::TestArgs),
    /// Run size or power studies described by a TOML file.
    Simulate(simulate::SimulateArgs),
    /// Cluster variables from block-wise covariance tests.
    Cluster(cluster_cmd::ClusterArgs),
}

/// Options every subcommand understands.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Worker threads (defaults to COVDIFF_THREADS, then all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Also print the machine-readable result on standard output.
    #[arg(long)]
    pub stdout: bool,
    /// Report timings as 0 so that repeated runs give identical bytes.
    #[arg(long)]
    pub reproducible: bool,
}

impl Common {
    pub fn threads(&self) -> Result<Option<usize>, Error> {
        if let Some(t) = self.threads {
            return positive_threads(t);
        }
        match std::env::var("COVDIFF_THREADS") {
            Ok(v) if !v.trim().is_empty() => {
                let t = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("COVDIFF_THREADS={v:?} is not a thread count")))?;
                positive_threads(t)
            }
            _ => Ok(None),
        }
    }

    pub fn elapsed_ms(&self, start: std::time::Instant) -> u128 {
        if self.reproducible {
            0
        } else {
            start.elapsed().as_millis()
        }
    }
}

fn positive_threads(t: usize) -> Result<Option<usize>, Error> {
    if t == 0 {
        Err(Error::Config("thread count must be positive".into()))
    } else {
        Ok(Some(t))
    }
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), Error> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf, Error> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(dir.to_path_buf())
}

pub fn to_json<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("reports serialise");
    out.push(b'\n');
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Test(args) => test_cmd::run(&args),
        Command::Simulate(args) => simulate::run(&args).map(|()| ExitCode::SUCCESS),
        Command::Cluster(args) => cluster_cmd::run(&args).map(|()| ExitCode::SUCCESS),
    };
    outcome.unwrap_or_else(|e| {
        eprintln!("covdiff: error: {e}");
        ExitCode::from(1)
    })
}

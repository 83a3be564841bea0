use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::Args;
use covdiff::io::{load_csv, CsvOptions};
use covdiff::two_sample::{clx_test, run_two_sample_test, t_max, t_stat_matrix, BootstrapConfig, TestReport};
use covdiff::{compute_moment_summary, DataMatrix, Error};
use serde::Serialize;

use crate::{to_json, write_file, Common};

pub const SCHEMA: &str = "covdiff.test_report.v1";

#[derive(Args, Debug)]
pub struct TestArgs {
    /// First sample, observations in rows.
    pub x: PathBuf,
    /// Second sample, same variables as the first.
    pub y: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Bootstrap replicates.
    #[arg(long = "B", default_value_t = 1500)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Make the extreme-value rule the primary decision (no bootstrap).
    #[arg(long)]
    pub clx: bool,
    /// Exit with status 2 when the null hypothesis is rejected.
    #[arg(long)]
    pub exit_on_reject: bool,
    /// Variables are in rows of the input files.
    #[arg(long)]
    pub transpose: bool,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Serialize)]
struct ArgmaxPair {
    /// 1-based variable indices.
    index: [usize; 2],
    labels: Option<[String; 2]>,
}

#[derive(Serialize)]
struct ClxBlock {
    statistic: f64,
    critical_value: f64,
    p_value: f64,
    reject: bool,
    q_alpha: f64,
}

#[derive(Serialize)]
struct Report {
    schema: &'static str,
    method: &'static str,
    statistic: f64,
    critical_value: f64,
    p_value: f64,
    reject: bool,
    argmax_pair: ArgmaxPair,
    n: usize,
    m: usize,
    p: usize,
    #[serde(rename = "B")]
    replicates: Option<usize>,
    alpha: f64,
    seed: u64,
    wall_time_ms: u128,
    clx: ClxBlock,
}

fn argmax(x: &DataMatrix, y: &DataMatrix, pair: (usize, usize)) -> ArgmaxPair {
    let names = x.column_names().or(y.column_names());
    ArgmaxPair {
        index: [pair.0 + 1, pair.1 + 1],
        labels: names.map(|n| [n[pair.0].clone(), n[pair.1].clone()]),
    }
}

fn clx_block(r: &TestReport) -> ClxBlock {
    ClxBlock {
        statistic: r.statistic,
        critical_value: r.critical_value,
        p_value: r.p_value,
        reject: r.reject,
        q_alpha: covdiff::two_sample::clx_quantile(r.alpha),
    }
}

pub fn run(args: &TestArgs) -> Result<ExitCode, Error> {
    let start = Instant::now();
    let opts = CsvOptions {
        transpose: args.transpose,
    };
    let x = load_csv(&args.x, opts)?;
    let y = load_csv(&args.y, opts)?;
    if x.p() != y.p() {
        return Err(Error::Dimension(format!(
            "{} has {} variables but {} has {}",
            args.x.display(),
            x.p(),
            args.y.display(),
            y.p()
        )));
    }
    if let (Some(a), Some(b)) = (x.column_names(), y.column_names()) {
        if a != b {
            eprintln!("covdiff: warning: the two files have different column names; matching by position");
        }
    }
    let mut cfg = BootstrapConfig::new(args.replicates, args.alpha, args.seed);
    cfg.threads = args.common.threads()?;
    cfg.validate()?;

    let report = if args.clx {
        let t = t_stat_matrix(&compute_moment_summary(&x), &compute_moment_summary(&y))?;
        let (stat, pair) = t_max(&t);
        let clx = clx_test(stat, x.p(), args.alpha)?;
        Report {
            schema: SCHEMA,
            method: "clx",
            statistic: stat,
            critical_value: clx.critical_value,
            p_value: clx.p_value,
            reject: clx.reject,
            argmax_pair: argmax(&x, &y, pair),
            n: x.n(),
            m: y.n(),
            p: x.p(),
            replicates: None,
            alpha: args.alpha,
            seed: args.seed,
            wall_time_ms: args.common.elapsed_ms(start),
            clx: clx_block(&clx),
        }
    } else {
        eprintln!(
            "covdiff: n = {}, m = {}, p = {}; running {} bootstrap replicates",
            x.n(),
            y.n(),
            x.p(),
            args.replicates
        );
        let boot = run_two_sample_test(&x, &y, &cfg)?;
        let clx = clx_test(boot.statistic, x.p(), args.alpha)?;
        Report {
            schema: SCHEMA,
            method: "bootstrap",
            statistic: boot.statistic,
            critical_value: boot.critical_value,
            p_value: boot.p_value,
            reject: boot.reject,
            argmax_pair: argmax(&x, &y, boot.argmax_pair.expect("bootstrap reports its argmax")),
            n: x.n(),
            m: y.n(),
            p: x.p(),
            replicates: Some(args.replicates),
            alpha: args.alpha,
            seed: args.seed,
            wall_time_ms: args.common.elapsed_ms(start),
            clx: clx_block(&clx),
        }
    };

    let json = to_json(&report);
    match &args.out {
        Some(path) => {
            write_file(path, &json)?;
            if args.common.stdout {
                print!("{}", String::from_utf8_lossy(&json));
            }
        }
        None => print!("{}", String::from_utf8_lossy(&json)),
    }
    Ok(if report.reject && args.exit_on_reject {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

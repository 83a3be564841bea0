use std::path::{Path, PathBuf};

use clap::Args;
use covdiff::cluster::{cluster_variables, ClusterConfig};
use covdiff::io::{load_csv, write_labeled_tsv, CsvOptions};
use covdiff::{DataMatrix, Error};
use serde::Serialize;

use crate::{ensure_dir, to_json, write_file, Common};

pub const SCHEMA: &str = "covdiff.cluster_summary.v1";

#[derive(Args, Debug)]
pub struct ClusterArgs {
    /// Data, observations in rows.
    pub x: PathBuf,
    /// Cut-off on the BH-adjusted block q-values.
    #[arg(long, default_value_t = 0.05)]
    pub pi: f64,
    /// Bootstrap replicates.
    #[arg(long = "B", default_value_t = 5000)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Block size; chosen from the data when omitted.
    #[arg(long)]
    pub s0: Option<usize>,
    /// Variable order to apply first: 1-based indices or column names,
    /// separated by whitespace or commas.
    #[arg(long)]
    pub order: Option<PathBuf>,
    /// Use |t| rather than signed statistics in block maxima.
    #[arg(long)]
    pub absolute: bool,
    /// Variables are in rows of the input file.
    #[arg(long)]
    pub transpose: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Serialize)]
struct Summary {
    schema: &'static str,
    n: usize,
    p: usize,
    s0: usize,
    s0_selected: bool,
    #[serde(rename = "S")]
    blocks: usize,
    rejected_blocks: usize,
    pi: f64,
    #[serde(rename = "B")]
    replicates: usize,
    seed: u64,
    absolute: bool,
    order: Vec<String>,
}

fn read_order(path: &Path, data: &DataMatrix) -> Result<Vec<usize>, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let labels = data.labels();
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|tok| {
            if let Some(k) = labels.iter().position(|l| l == tok) {
                return Ok(k);
            }
            match tok.parse::<usize>() {
                Ok(k) if (1..=data.p()).contains(&k) => Ok(k - 1),
                _ => Err(Error::Config(format!(
                    "{}: {tok:?} is neither a column name nor an index in 1..={}",
                    path.display(),
                    data.p()
                ))),
            }
        })
        .collect()
}

pub fn run(args: &ClusterArgs) -> Result<(), Error> {
    let mut x = load_csv(
        &args.x,
        CsvOptions {
            transpose: args.transpose,
        },
    )?;
    if let Some(path) = &args.order {
        let perm = read_order(path, &x)?;
        x = x.permute_columns(&perm)?;
    }
    let mut cfg = ClusterConfig::new(args.replicates, args.seed);
    cfg.pi = args.pi;
    cfg.s0 = args.s0;
    cfg.local.absolute = args.absolute;
    cfg.local.threads = args.common.threads()?;
    if !(cfg.pi > 0.0 && cfg.pi < 1.0) {
        return Err(Error::Config(format!("pi must lie in (0, 1), got {}", cfg.pi)));
    }
    eprintln!("covdiff: clustering {} variables from {} observations", x.p(), x.n());
    let analysis = cluster_variables(&x, &cfg)?;
    let labels = x.labels();

    let dir = ensure_dir(&args.out)?;
    let mut tsv = Vec::new();
    write_labeled_tsv(&mut tsv, &labels, &analysis.dissimilarity.values).expect("in-memory write");
    write_file(&dir.join("dissimilarity.tsv"), &tsv)?;
    let mut newick = analysis.tree.to_newick(&labels)?;
    newick.push('\n');
    write_file(&dir.join("tree.nwk"), newick.as_bytes())?;
    let summary = Summary {
        schema: SCHEMA,
        n: x.n(),
        p: x.p(),
        s0: analysis.s0,
        s0_selected: args.s0.is_none(),
        blocks: analysis.partition.len(),
        rejected_blocks: analysis.rejected_blocks(cfg.pi),
        pi: cfg.pi,
        replicates: args.replicates,
        seed: args.seed,
        absolute: args.absolute,
        order: labels,
    };
    let json = to_json(&summary);
    write_file(&dir.join("summary.json"), &json)?;
    if args.common.stdout {
        print!("{}", String::from_utf8_lossy(&json));
    }
    eprintln!(
        "covdiff: s0 = {}, {} of {} blocks rejected",
        summary.s0, summary.rejected_blocks, summary.blocks
    );
    Ok(())
}

//! Variable clustering from block-wise one-sample covariance tests.
//!
//! The strict upper triangle of the covariance grid is cut into
//! `s0 x s0` cells. Each cell is tested for being entirely zero with a
//! multiplier-bootstrap max statistic, the cell p-values are BH-adjusted,
//! and the surviving cells feed a dissimilarity that is clustered with
//! average linkage.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::bootstrap::{MultiplierKernel, SampleTerm, DEFAULT_MEMORY_BUDGET};
use crate::error::{invalid, Error, Result};
use crate::matrix::{compute_moment_summary, DataMatrix, MomentSummary};
use crate::packed::{strict_upper_index, strict_upper_pairs, upper_index};

/// `t[k,l] = sqrt(n) sigma_hat[k,l] / sqrt(s_hat[k,l])` for `k < l`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneSampleStatMatrix {
    pub p: usize,
    /// Strict upper triangle, row-major.
    pub values: Vec<f64>,
    /// `sqrt(s_hat / n)` per pair.
    pub denom: Vec<f64>,
}

impl OneSampleStatMatrix {
    pub fn get(&self, k: usize, l: usize) -> f64 {
        assert_ne!(k, l, "one-sample statistics are defined off the diagonal");
        self.values[strict_upper_index(self.p, k.min(l), k.max(l))]
    }
}

pub fn one_sample_t_matrix(m: &MomentSummary) -> Result<OneSampleStatMatrix> {
    let p = m.p();
    let n = m.n as f64;
    let mut values = Vec::with_capacity(p * (p - 1) / 2);
    let mut denom = Vec::with_capacity(values.capacity());
    for (k, l) in strict_upper_pairs(p) {
        let s = m.s_hat.get(k, l);
        if !(s > 0.0) {
            return Err(Error::DegeneratePair {
                k,
                l,
                reason: "centred product has zero sample variance",
            });
        }
        let d = (s / n).sqrt();
        values.push(m.sigma_hat.get(k, l) / d);
        denom.push(d);
    }
    Ok(OneSampleStatMatrix { p, values, denom })
}

/// Grid cell `(a, b)`, `a <= b`, and the strict-upper pairs it holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub cell: (usize, usize),
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    pub p: usize,
    pub s0: usize,
    /// Cells are listed row by row over `a <= b`.
    pub blocks: Vec<Block>,
}

/// `ceil(p/s0) (ceil(p/s0) + 1) / 2`.
pub fn block_count(p: usize, s0: usize) -> usize {
    let c = p.div_ceil(s0);
    c * (c + 1) / 2
}

impl BlockPartition {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    fn cells(&self) -> usize {
        self.p.div_ceil(self.s0)
    }

    /// Index of the block holding pair `(k, l)`, `k != l`.
    pub fn block_of(&self, k: usize, l: usize) -> usize {
        let (k, l) = (k.min(l), k.max(l));
        upper_index(self.cells(), k / self.s0, l / self.s0)
    }
}

pub fn block_partition(p: usize, s0: usize) -> Result<BlockPartition> {
    if s0 < 1 || s0 > p {
        return Err(invalid(format!("block size must lie in 1..={p}, got {s0}")));
    }
    let c = p.div_ceil(s0);
    let mut blocks = Vec::with_capacity(c * (c + 1) / 2);
    for a in 0..c {
        for b in a..c {
            let mut pairs = Vec::new();
            for k in a * s0..((a + 1) * s0).min(p) {
                for l in (b * s0).max(k + 1)..((b + 1) * s0).min(p) {
                    pairs.push((k, l));
                }
            }
            blocks.push(Block { cell: (a, b), pairs });
        }
    }
    Ok(BlockPartition { p, s0, blocks })
}

/// Settings shared by the local tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTestConfig {
    pub replicates: usize,
    pub seed: u64,
    pub threads: Option<usize>,
    /// Use `|t|` in block maxima and in the dissimilarity instead of the
    /// signed statistic.
    pub absolute: bool,
}

impl LocalTestConfig {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self {
            replicates,
            seed,
            threads: None,
            absolute: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.replicates < 1 {
            return Err(invalid("the bootstrap needs at least one replicate"));
        }
        if self.threads == Some(0) {
            return Err(invalid("thread count must be positive"));
        }
        Ok(())
    }

    fn fold(&self, v: f64) -> f64 {
        if self.absolute {
            v.abs()
        } else {
            v
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalTestResult {
    pub block: usize,
    /// `None` for a diagonal cell without pairs (`s0 = 1` or a trailing
    /// cell of width one); such blocks get `p_hat = 1`.
    pub max_stat: Option<f64>,
    pub p_hat: f64,
    pub q_hat: f64,
}

fn block_maxima(t: &OneSampleStatMatrix, part: &BlockPartition, cfg: &LocalTestConfig) -> Vec<Option<f64>> {
    part.blocks
        .iter()
        .map(|b| {
            b.pairs
                .iter()
                .map(|&(k, l)| cfg.fold(t.get(k, l)))
                .reduce(f64::max)
        })
        .collect()
}

fn one_sample_kernel(x: &DataMatrix, m: &MomentSummary, t: &OneSampleStatMatrix) -> MultiplierKernel {
    let p = t.p;
    let sigma = strict_upper_pairs(p).map(|(k, l)| m.sigma_hat.get(k, l)).collect();
    let term = SampleTerm {
        centered: x.centered(&m.means),
        sigma,
        coef: 1.0 / x.n() as f64,
    };
    let weights = t.denom.iter().map(|d| 1.0 / d).collect();
    MultiplierKernel::new(vec![term], strict_upper_pairs(p).collect(), weights, DEFAULT_MEMORY_BUDGET)
}

/// Add-one bootstrap p-values for every block of every partition, all
/// from one shared set of multiplier replicates.
fn p_values_for(
    kernel: &MultiplierKernel,
    t: &OneSampleStatMatrix,
    parts: &[&BlockPartition],
    cfg: &LocalTestConfig,
) -> Result<Vec<Vec<f64>>> {
    let p = t.p;
    let pairs: Vec<(usize, usize)> = strict_upper_pairs(p).collect();
    let mut offsets = Vec::with_capacity(parts.len());
    let mut total = 0;
    for part in parts {
        offsets.push(total);
        total += part.len();
    }
    let observed: Vec<Vec<Option<f64>>> = parts.iter().map(|part| block_maxima(t, part, cfg)).collect();

    // accumulator: replicate maxima laid out block-major, replicate-minor
    let chunks = kernel.run(
        cfg.replicates,
        cfg.seed,
        cfg.threads,
        |rc| (rc, vec![f64::NEG_INFINITY; rc * total]),
        |(rc, acc), start, block| {
            let rc = *rc;
            for (col, values) in block.column_iter().enumerate() {
                let (k, l) = pairs[start + col];
                for (q, part) in parts.iter().enumerate() {
                    let base = (offsets[q] + part.block_of(k, l)) * rc;
                    for (a, &v) in acc[base..base + rc].iter_mut().zip(values.iter()) {
                        *a = a.max(cfg.fold(v));
                    }
                }
            }
        },
    )?;

    let mut exceed = vec![0usize; total];
    for (rc, acc) in &chunks {
        for (q, obs) in observed.iter().enumerate() {
            for (s, o) in obs.iter().enumerate() {
                if let Some(o) = o {
                    let base = (offsets[q] + s) * rc;
                    exceed[offsets[q] + s] += acc[base..base + rc].iter().filter(|&&v| v >= *o).count();
                }
            }
        }
    }
    let b = cfg.replicates as f64;
    Ok(observed
        .iter()
        .enumerate()
        .map(|(q, obs)| {
            obs.iter()
                .enumerate()
                .map(|(s, o)| match o {
                    Some(_) => (1.0 + exceed[offsets[q] + s] as f64) / (b + 1.0),
                    None => 1.0,
                })
                .collect()
        })
        .collect())
}

pub fn local_p_values(
    t: &OneSampleStatMatrix,
    part: &BlockPartition,
    x: &DataMatrix,
    m: &MomentSummary,
    cfg: &LocalTestConfig,
) -> Result<Vec<LocalTestResult>> {
    cfg.validate()?;
    if part.p != t.p || x.p() != t.p || m.p() != t.p {
        return Err(Error::Dimension("partition, statistics and data disagree on p".into()));
    }
    let kernel = one_sample_kernel(x, m, t);
    let p_hat = p_values_for(&kernel, t, &[part], cfg)?.remove(0);
    let q_hat = bh_adjust(&p_hat)?;
    let maxima = block_maxima(t, part, cfg);
    Ok((0..part.len())
        .map(|s| LocalTestResult {
            block: s,
            max_stat: maxima[s],
            p_hat: p_hat[s],
            q_hat: q_hat[s],
        })
        .collect())
}

/// Benjamini-Hochberg adjusted p-values, in input order.
pub fn bh_adjust(p_values: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = p_values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid(format!("p-value {bad} outside [0, 1]")));
    }
    let s = p_values.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut q = vec![0.0; s];
    let mut running = 1.0_f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(s as f64 * p_values[i] / (rank + 1) as f64);
        q[i] = running;
    }
    Ok(q)
}

/// Storey's estimate `#{p > lambda} / (1 - lambda)`, capped at the count.
pub fn estimate_null_count(p_values: &[f64], lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(invalid(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    let above = p_values.iter().filter(|&&v| v > lambda).count() as f64;
    Ok((above / (1.0 - lambda)).min(p_values.len() as f64))
}

/// `d[k,l] = 1 - t[k,l] 1{q_s < pi} / max(M_s, 1)` with `M_s` the block
/// maximum; zero diagonal. Values above 1 are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityMatrix {
    pub values: DMatrix<f64>,
}

pub fn dissimilarity(
    t: &OneSampleStatMatrix,
    part: &BlockPartition,
    results: &[LocalTestResult],
    pi: f64,
    absolute: bool,
) -> Result<DissimilarityMatrix> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(invalid(format!("pi must lie in (0, 1), got {pi}")));
    }
    if part.p != t.p || results.len() != part.len() {
        return Err(Error::Dimension("dissimilarity inputs are inconsistent".into()));
    }
    let p = t.p;
    let mut d = DMatrix::from_element(p, p, 1.0);
    d.fill_diagonal(0.0);
    for (block, res) in part.blocks.iter().zip(results) {
        let Some(max) = res.max_stat else { continue };
        if res.q_hat >= pi {
            continue;
        }
        let scale = max.max(1.0);
        for &(k, l) in &block.pairs {
            let v = t.get(k, l);
            let v = if absolute { v.abs() } else { v };
            d[(k, l)] = 1.0 - v / scale;
            d[(l, k)] = d[(k, l)];
        }
    }
    Ok(DissimilarityMatrix { values: d })
}

/// Block size search result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockSizeChoice {
    pub s0: usize,
    /// `(s, S(s), estimated null count)` for every scanned size.
    pub scanned: Vec<(usize, usize, f64)>,
    /// True when no scanned size met the condition.
    pub fallback: bool,
}

/// Candidate block sizes scored per bootstrap pass.
const SIZES_PER_PASS: usize = 8;

/// Data-driven block size `max{ceil(log p), min{s : S0(s) <= S(s)/log S(s)}}`,
/// scanning `s = 1..=max_s` (default `p`). `S(s) = 1` always qualifies.
/// Without a qualifying size the result is `max{ceil(log p), argmin_s
/// S0(s) log S(s) / S(s)}`.
pub fn select_block_size(
    x: &DataMatrix,
    cfg: &LocalTestConfig,
    lambda: f64,
    max_s: Option<usize>,
) -> Result<BlockSizeChoice> {
    cfg.validate()?;
    let p = x.p();
    let max_s = max_s.unwrap_or(p).clamp(1, p);
    let floor = ((p as f64).ln().ceil() as usize).clamp(1, p);
    let m = compute_moment_summary(x);
    let t = one_sample_t_matrix(&m)?;
    let kernel = one_sample_kernel(x, &m, &t);

    let mut scanned = Vec::new();
    let mut chosen = None;
    let sizes: Vec<usize> = (1..=max_s).collect();
    'scan: for group in sizes.chunks(SIZES_PER_PASS) {
        let parts = group
            .iter()
            .map(|&s| block_partition(p, s))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&BlockPartition> = parts.iter().collect();
        let p_values = p_values_for(&kernel, &t, &refs, cfg)?;
        for (&s, pv) in group.iter().zip(&p_values) {
            let big_s = pv.len();
            let s0_hat = estimate_null_count(pv, lambda)?;
            scanned.push((s, big_s, s0_hat));
            if big_s == 1 || s0_hat <= big_s as f64 / (big_s as f64).ln() {
                chosen = Some(s);
                break 'scan;
            }
        }
    }
    let (s, fallback) = match chosen {
        Some(s) => (s, false),
        None => {
            let score = |&(_, big, s0): &(usize, usize, f64)| s0 * (big as f64).ln() / big as f64;
            let best = scanned
                .iter()
                .min_by(|a, b| score(a).total_cmp(&score(b)))
                .map(|e| e.0)
                .unwrap_or(1);
            (best, true)
        }
    };
    Ok(BlockSizeChoice {
        s0: s.max(floor),
        scanned,
        fallback,
    })
}

/// One agglomeration. Leaves are nodes `0..p`; the merge at step `i`
/// creates node `p + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterTree {
    pub leaves: usize,
    pub merges: Vec<Merge>,
}

fn validate_dissimilarity(d: &DMatrix<f64>) -> Result<()> {
    let p = d.nrows();
    if d.ncols() != p || p == 0 {
        return Err(Error::Dimension(format!("dissimilarity must be square, got {}x{}", p, d.ncols())));
    }
    for k in 0..p {
        for l in 0..p {
            if !d[(k, l)].is_finite() || d[(k, l)] != d[(l, k)] {
                return Err(invalid(format!(
                    "dissimilarity must be finite and symmetric (entry {}, {})",
                    k + 1,
                    l + 1
                )));
            }
        }
    }
    Ok(())
}

/// Average-linkage (UPGMA) clustering. Clusters are keyed by their
/// smallest leaf; among equal distances the merge with the smallest
/// `(left key, right key)` wins.
pub fn hierarchical_cluster(d: &DMatrix<f64>) -> Result<ClusterTree> {
    validate_dissimilarity(d)?;
    let p = d.nrows();
    let mut dist = d.clone();
    let mut active = vec![true; p];
    let mut size = vec![1usize; p];
    let mut node: Vec<usize> = (0..p).collect();
    // nearest active partner to the right of each slot
    let mut nn: Vec<Option<(usize, f64)>> = vec![None; p];
    let nearest = |dist: &DMatrix<f64>, active: &[bool], i: usize| -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for j in i + 1..active.len() {
            if active[j] && best.is_none_or(|(_, v)| dist[(i, j)] < v) {
                best = Some((j, dist[(i, j)]));
            }
        }
        best
    };
    for i in 0..p {
        nn[i] = nearest(&dist, &active, i);
    }
    let mut merges = Vec::with_capacity(p.saturating_sub(1));
    for step in 0..p.saturating_sub(1) {
        let mut pick: Option<(usize, usize, f64)> = None;
        for i in 0..p {
            if !active[i] {
                continue;
            }
            if let Some((j, v)) = nn[i] {
                if pick.is_none_or(|(_, _, w)| v < w) {
                    pick = Some((i, j, v));
                }
            }
        }
        let (a, b, h) = pick.expect("at least two active clusters");
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for i in 0..p {
            if !active[i] || i == a || i == b {
                continue;
            }
            let (x, y) = (dist[(a, i)], dist[(b, i)]);
            // clamping keeps the update inside its convex hull under rounding
            let v = ((na * x + nb * y) / (na + nb)).clamp(x.min(y), x.max(y));
            dist[(a, i)] = v;
            dist[(i, a)] = v;
        }
        active[b] = false;
        merges.push(Merge {
            left: node[a],
            right: node[b],
            height: h,
            size: size[a] + size[b],
        });
        size[a] += size[b];
        node[a] = p + step;
        for i in 0..p {
            if !active[i] {
                continue;
            }
            let stale = match nn[i] {
                Some((j, _)) => i == a || j == a || j == b,
                None => i == a,
            };
            if stale {
                nn[i] = nearest(&dist, &active, i);
            } else if i < a {
                let v = dist[(i, a)];
                if let Some((j, w)) = nn[i] {
                    if v < w || (v == w && a < j) {
                        nn[i] = Some((a, v));
                    }
                }
            }
        }
    }
    Ok(ClusterTree { leaves: p, merges })
}

impl ClusterTree {
    /// Leaves under each node, smallest first.
    fn members(&self) -> Vec<Vec<usize>> {
        let mut members: Vec<Vec<usize>> = (0..self.leaves).map(|i| vec![i]).collect();
        for m in &self.merges {
            let mut joined = [members[m.left].clone(), members[m.right].clone()].concat();
            joined.sort_unstable();
            members.push(joined);
        }
        members
    }

    fn labels_after(&self, merges: usize) -> Vec<usize> {
        let p = self.leaves;
        let mut parent: Vec<usize> = (0..p + merges).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for (step, m) in self.merges[..merges].iter().enumerate() {
            parent[m.left] = p + step;
            parent[m.right] = p + step;
        }
        let roots: Vec<usize> = (0..p).map(|i| find(&mut parent, i)).collect();
        // number clusters in order of their smallest member
        let mut ids = BTreeMap::new();
        roots
            .iter()
            .map(|r| {
                let next = ids.len();
                *ids.entry(*r).or_insert(next)
            })
            .collect()
    }

    /// Labels for `k` clusters; cluster ids follow the smallest member.
    pub fn cut_k(&self, k: usize) -> Result<Vec<usize>> {
        if k < 1 || k > self.leaves {
            return Err(invalid(format!("cluster count must lie in 1..={}, got {k}", self.leaves)));
        }
        Ok(self.labels_after(self.leaves - k))
    }

    /// Labels after applying every merge at or below `height`.
    pub fn cut_height(&self, height: f64) -> Result<Vec<usize>> {
        if !(height >= 0.0) {
            return Err(invalid(format!("cut height must be non-negative, got {height}")));
        }
        let merges = self.merges.iter().take_while(|m| m.height <= height).count();
        Ok(self.labels_after(merges))
    }

    /// Newick string. A node sits at half its merge height (leaves at 0),
    /// so leaf-to-leaf path lengths reproduce the merge heights.
    pub fn to_newick(&self, labels: &[String]) -> Result<String> {
        if labels.len() != self.leaves {
            return Err(Error::Dimension(format!(
                "{} labels for {} leaves",
                labels.len(),
                self.leaves
            )));
        }
        let p = self.leaves;
        let height = |node: usize| if node < p { 0.0 } else { self.merges[node - p].height };
        let mut out = String::new();
        if self.merges.is_empty() {
            out.push_str(&newick_label(&labels[0]));
        } else {
            self.write_node(&mut out, p + self.merges.len() - 1, labels, &height);
        }
        out.push(';');
        Ok(out)
    }

    fn write_node(&self, out: &mut String, node: usize, labels: &[String], height: &dyn Fn(usize) -> f64) {
        let p = self.leaves;
        if node < p {
            out.push_str(&newick_label(&labels[node]));
            return;
        }
        let m = self.merges[node - p];
        out.push('(');
        for (i, child) in [m.left, m.right].into_iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            self.write_node(out, child, labels, height);
            let _ = write!(out, ":{}", (m.height - height(child)) / 2.0);
        }
        out.push(')');
    }

    /// Leaf sets of every node, indexed like merges (`p + i`).
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        self.members().split_off(self.leaves)
    }
}

fn newick_label(label: &str) -> String {
    let plain = !label.is_empty()
        && !label
            .chars()
            .any(|c| c.is_whitespace() || "()[]':;,".contains(c));
    if plain {
        label.to_string()
    } else {
        format!("'{}'", label.replace('\'', "''"))
    }
}

/// Settings for the full clustering pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterConfig {
    pub local: LocalTestConfig,
    /// Cut-off on the BH-adjusted block q-values.
    pub pi: f64,
    /// Fixed block size; chosen from the data when `None`.
    pub s0: Option<usize>,
    /// Threshold of the null-count estimator.
    pub lambda: f64,
}

impl ClusterConfig {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self {
            local: LocalTestConfig::new(replicates, seed),
            pi: 0.05,
            s0: None,
            lambda: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterAnalysis {
    pub s0: usize,
    pub block_size: Option<BlockSizeChoice>,
    pub partition: BlockPartition,
    pub results: Vec<LocalTestResult>,
    pub dissimilarity: DissimilarityMatrix,
    pub tree: ClusterTree,
}

impl ClusterAnalysis {
    pub fn rejected_blocks(&self, pi: f64) -> usize {
        self.results.iter().filter(|r| r.q_hat < pi).count()
    }
}

pub fn cluster_variables(x: &DataMatrix, cfg: &ClusterConfig) -> Result<ClusterAnalysis> {
    let block_size = match cfg.s0 {
        Some(s) => {
            block_partition(x.p(), s)?;
            None
        }
        None => Some(select_block_size(x, &cfg.local, cfg.lambda, None)?),
    };
    let s0 = cfg.s0.or(block_size.as_ref().map(|b| b.s0)).expect("block size");
    let m = compute_moment_summary(x);
    let t = one_sample_t_matrix(&m)?;
    let partition = block_partition(x.p(), s0)?;
    let results = local_p_values(&t, &partition, x, &m, &cfg.local)?;
    let dissimilarity = dissimilarity(&t, &partition, &results, cfg.pi, cfg.local.absolute)?;
    let tree = hierarchical_cluster(&dissimilarity.values)?;
    Ok(ClusterAnalysis {
        s0,
        block_size,
        partition,
        results,
        dissimilarity,
        tree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, p: usize, seed: u64) -> DataMatrix {
        let mut rng = substream(seed, 0);
        DataMatrix::new(DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))).unwrap()
    }

    #[test]
    fn one_sample_scalar_oracle() {
        let x = DataMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0], vec![0.0, 0.0], vec![4.0, 5.0]]).unwrap();
        let t = one_sample_t_matrix(&compute_moment_summary(&x)).unwrap();
        assert_eq!(t.values.len(), 1);
        assert!((t.get(0, 1) - 1.572_667_301_989_868_3).abs() < 1e-12);
        assert_eq!(t.get(1, 0), t.get(0, 1));
    }

    #[test]
    fn one_sample_zero_for_orthogonal_columns() {
        let x = DataMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]]).unwrap();
        let t = one_sample_t_matrix(&compute_moment_summary(&x)).unwrap();
        assert_eq!(t.values, vec![0.0]);
    }

    #[test]
    fn one_sample_scale_invariant() {
        let x = gaussian(30, 5, 1);
        let t = one_sample_t_matrix(&compute_moment_summary(&x)).unwrap();
        let mut v = x.values().clone();
        v.column_mut(2).scale_mut(7.5);
        let scaled = DataMatrix::new(v).unwrap();
        let u = one_sample_t_matrix(&compute_moment_summary(&scaled)).unwrap();
        for (a, b) in t.values.iter().zip(&u.values) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn one_sample_degenerate_pair() {
        let x = DataMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 2.0]]).unwrap();
        let err = one_sample_t_matrix(&compute_moment_summary(&x)).unwrap_err();
        assert!(matches!(err, Error::DegeneratePair { k: 0, l: 1, .. }));
    }

    #[test]
    fn partition_small_example() {
        let part = block_partition(4, 2).unwrap();
        let pairs: Vec<Vec<(usize, usize)>> = part.blocks.iter().map(|b| b.pairs.clone()).collect();
        assert_eq!(
            pairs,
            vec![vec![(0, 1)], vec![(0, 2), (0, 3), (1, 2), (1, 3)], vec![(2, 3)]]
        );
        let one = block_partition(5, 5).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.blocks[0].pairs.len(), 10);
        assert!(block_partition(5, 0).is_err());
        assert!(block_partition(5, 6).is_err());
        assert_eq!(block_count(100, 10), 55);
    }

    #[test]
    fn partition_block_lookup() {
        let part = block_partition(11, 3).unwrap();
        for (s, block) in part.blocks.iter().enumerate() {
            for &(k, l) in &block.pairs {
                assert_eq!(part.block_of(k, l), s);
                assert_eq!(part.block_of(l, k), s);
            }
        }
    }

    fn brute_bh(p: &[f64]) -> Vec<f64> {
        let s = p.len() as f64;
        p.iter()
            .map(|&pi| {
                // min over ranks j with p_(j) >= p_i of S p_(j) / j
                let mut best = f64::INFINITY;
                for &pj in p {
                    if pj >= pi {
                        let rank = p.iter().filter(|&&v| v <= pj).count() as f64;
                        best = best.min(s * pj / rank);
                    }
                }
                best.min(1.0)
            })
            .collect()
    }

    #[test]
    fn bh_examples() {
        let q = bh_adjust(&[0.01, 0.02, 0.03]).unwrap();
        for v in q {
            assert!((v - 0.03).abs() < 1e-15);
        }
        assert_eq!(bh_adjust(&[1.0; 4]).unwrap(), vec![1.0; 4]);
        assert_eq!(bh_adjust(&[0.37]).unwrap(), vec![0.37]);
        assert!(bh_adjust(&[0.2, 1.2]).is_err());
        assert!(bh_adjust(&[f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn bh_matches_brute_force(p in proptest::collection::vec(0usize..=10, 1..=8)) {
            let p: Vec<f64> = p.into_iter().map(|v| v as f64 / 10.0).collect();
            let q = bh_adjust(&p).unwrap();
            let want = brute_bh(&p);
            for (a, b) in q.iter().zip(&want) {
                prop_assert!((a - b).abs() < 1e-15, "{:?} vs {:?}", q, want);
            }
        }
    }

    #[test]
    fn null_count_examples() {
        assert_eq!(estimate_null_count(&[1.0; 6], 0.5).unwrap(), 6.0);
        assert_eq!(estimate_null_count(&[0.0; 6], 0.5).unwrap(), 0.0);
        let s = 10;
        let grid: Vec<f64> = (0..s).map(|i| (i as f64 + 0.5) / s as f64).collect();
        assert_eq!(estimate_null_count(&grid, 0.5).unwrap(), 10.0);
        assert!(estimate_null_count(&grid, 1.0).is_err());
    }

    fn config(b: usize, seed: u64) -> LocalTestConfig {
        LocalTestConfig::new(b, seed)
    }

    #[test]
    fn single_replicate_p_values() {
        let x = gaussian(20, 6, 2);
        let m = compute_moment_summary(&x);
        let t = one_sample_t_matrix(&m).unwrap();
        let part = block_partition(6, 2).unwrap();
        let res = local_p_values(&t, &part, &x, &m, &config(1, 0)).unwrap();
        assert_eq!(res.len(), 6);
        for r in res {
            assert!(r.p_hat == 0.5 || r.p_hat == 1.0);
        }
    }

    #[test]
    fn strong_block_gets_smallest_p_value() {
        let mut x = gaussian(60, 6, 3).values().clone();
        let shared = x.column(0).clone_owned();
        for k in 1..3 {
            let col = x.column(k) * 0.2 + &shared;
            x.set_column(k, &col);
        }
        let x = DataMatrix::new(x).unwrap();
        let m = compute_moment_summary(&x);
        let t = one_sample_t_matrix(&m).unwrap();
        let part = block_partition(6, 3).unwrap();
        let res = local_p_values(&t, &part, &x, &m, &config(200, 5)).unwrap();
        assert_eq!(res[0].p_hat, 1.0 / 201.0);
        assert!(res[0].q_hat < 0.05);
    }

    #[test]
    fn empty_diagonal_cells_are_not_rejected() {
        let x = gaussian(20, 4, 4);
        let m = compute_moment_summary(&x);
        let t = one_sample_t_matrix(&m).unwrap();
        let part = block_partition(4, 1).unwrap();
        assert_eq!(part.len(), 10);
        let res = local_p_values(&t, &part, &x, &m, &config(50, 1)).unwrap();
        for (block, r) in part.blocks.iter().zip(&res) {
            if block.pairs.is_empty() {
                assert_eq!((r.max_stat, r.p_hat), (None, 1.0));
            }
        }
    }

    #[test]
    fn p_values_independent_of_threads() {
        let x = gaussian(40, 9, 8);
        let m = compute_moment_summary(&x);
        let t = one_sample_t_matrix(&m).unwrap();
        let part = block_partition(9, 4).unwrap();
        let mut cfg = config(300, 2);
        cfg.threads = Some(1);
        let a = local_p_values(&t, &part, &x, &m, &cfg).unwrap();
        cfg.threads = Some(3);
        let b = local_p_values(&t, &part, &x, &m, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn joint_and_separate_passes_agree() {
        let x = gaussian(25, 7, 9);
        let m = compute_moment_summary(&x);
        let t = one_sample_t_matrix(&m).unwrap();
        let cfg = config(100, 4);
        let kernel = one_sample_kernel(&x, &m, &t);
        let a = block_partition(7, 2).unwrap();
        let b = block_partition(7, 3).unwrap();
        let joint = p_values_for(&kernel, &t, &[&a, &b], &cfg).unwrap();
        assert_eq!(joint[0], p_values_for(&kernel, &t, &[&a], &cfg).unwrap()[0]);
        assert_eq!(joint[1], p_values_for(&kernel, &t, &[&b], &cfg).unwrap()[0]);
    }

    fn toy_t(values: Vec<f64>, p: usize) -> OneSampleStatMatrix {
        let denom = vec![1.0; values.len()];
        OneSampleStatMatrix { p, values, denom }
    }

    fn result(block: usize, max: f64, q: f64) -> LocalTestResult {
        LocalTestResult {
            block,
            max_stat: Some(max),
            p_hat: q,
            q_hat: q,
        }
    }

    #[test]
    fn dissimilarity_examples() {
        // p = 4, s0 = 2: blocks {(0,1)}, {(0,2),(0,3),(1,2),(1,3)}, {(2,3)}
        let t = toy_t(vec![3.0, 0.3, 0.5, -0.2, 0.1, 2.0], 4);
        let part = block_partition(4, 2).unwrap();
        let res = vec![result(0, 3.0, 0.01), result(1, 0.5, 0.02), result(2, 2.0, 0.5)];
        let d = dissimilarity(&t, &part, &res, 0.05, false).unwrap().values;
        assert_eq!(d[(0, 1)], 0.0);
        assert!((d[(0, 2)] - 0.7).abs() < 1e-15);
        assert_eq!(d[(0, 3)], 0.5);
        assert!((d[(1, 2)] - 1.2).abs() < 1e-15);
        assert_eq!(d[(2, 3)], 1.0);
        assert_eq!(d, d.transpose());
        for k in 0..4 {
            assert_eq!(d[(k, k)], 0.0);
        }
        let abs = dissimilarity(&t, &part, &res, 0.05, true).unwrap().values;
        assert!((abs[(1, 2)] - 0.8).abs() < 1e-15);
        assert!(dissimilarity(&t, &part, &res, 1.0, false).is_err());
    }

    #[test]
    fn upgma_examples() {
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 0.4, 0.4, 0.0]);
        let tree = hierarchical_cluster(&d).unwrap();
        assert_eq!(tree.merges, vec![Merge { left: 0, right: 1, height: 0.4, size: 2 }]);

        let d = DMatrix::from_row_slice(3, 3, &[0.0, 0.1, 0.9, 0.1, 0.0, 0.8, 0.9, 0.8, 0.0]);
        let tree = hierarchical_cluster(&d).unwrap();
        assert_eq!(tree.merges[0], Merge { left: 0, right: 1, height: 0.1, size: 2 });
        assert_eq!((tree.merges[1].left, tree.merges[1].right), (3, 2));
        assert!((tree.merges[1].height - 0.85).abs() < 1e-15);
        assert_eq!(tree.cut_k(2).unwrap(), vec![0, 0, 1]);
        assert_eq!(tree.cut_k(3).unwrap(), vec![0, 1, 2]);
        assert_eq!(tree.cut_k(1).unwrap(), vec![0, 0, 0]);
        assert!(tree.cut_k(0).is_err());
        assert!(tree.cut_k(4).is_err());
        assert_eq!(tree.cut_height(0.5).unwrap(), vec![0, 0, 1]);
        assert_eq!(tree.cut_height(0.0).unwrap(), vec![0, 1, 2]);
        let labels = vec!["a".to_string(), "b c".into(), "x".into()];
        let h = tree.merges[1].height;
        assert_eq!(
            tree.to_newick(&labels).unwrap(),
            format!("((a:0.05,'b c':0.05):{},x:{});", (h - 0.1) / 2.0, h / 2.0)
        );
        assert_eq!(tree.clusters()[1], vec![0, 1, 2]);
    }

    #[test]
    fn upgma_ties_prefer_smallest_keys() {
        let d = DMatrix::from_element(4, 4, 1.0) - DMatrix::identity(4, 4);
        let tree = hierarchical_cluster(&d).unwrap();
        let pairs: Vec<(usize, usize)> = tree.merges.iter().map(|m| (m.left, m.right)).collect();
        assert_eq!(pairs, vec![(0, 1), (4, 2), (5, 3)]);
    }

    #[test]
    fn upgma_rejects_bad_input() {
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 0.4, 0.5, 0.0]);
        assert!(hierarchical_cluster(&d).is_err());
        assert!(hierarchical_cluster(&DMatrix::zeros(2, 3)).is_err());
    }

    proptest! {
        #[test]
        fn upgma_heights_nondecreasing(seed in any::<u64>(), p in 2usize..30) {
            let mut rng = substream(seed, 0);
            let mut d = DMatrix::zeros(p, p);
            for k in 0..p {
                for l in k + 1..p {
                    let v: f64 = rng.random::<f64>() * 2.0;
                    d[(k, l)] = v;
                    d[(l, k)] = v;
                }
            }
            let tree = hierarchical_cluster(&d).unwrap();
            prop_assert_eq!(tree.merges.len(), p - 1);
            for w in tree.merges.windows(2) {
                prop_assert!(w[0].height <= w[1].height);
            }
            prop_assert_eq!(tree.merges.last().unwrap().size, p);
            for k in 1..=p {
                let labels = tree.cut_k(k).unwrap();
                prop_assert_eq!(labels.iter().max().unwrap() + 1, k);
            }
        }
    }

    #[test]
    fn block_size_on_clustered_data() {
        // three groups of five strongly correlated variables
        let (n, groups, width) = (80, 3, 5);
        let mut rng = substream(21, 0);
        let f = DMatrix::from_fn(n, groups, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_fn(n, groups * width, |i, k| f[(i, k / width)] + 0.5 * rng.sample::<f64, _>(StandardNormal));
        let x = DataMatrix::new(x).unwrap();
        let choice = select_block_size(&x, &config(200, 3), 0.5, None).unwrap();
        assert!(!choice.fallback);
        assert!(choice.s0 < 15);
        assert_eq!(choice.s0, choice.scanned.last().unwrap().0.max(3));
    }

    #[test]
    fn block_size_fallback() {
        let x = gaussian(40, 12, 6);
        let choice = select_block_size(&x, &config(100, 1), 0.5, Some(2)).unwrap();
        if choice.fallback {
            assert_eq!(choice.scanned.len(), 2);
            assert!(choice.s0 >= 3);
        }
        let full = select_block_size(&x, &config(100, 1), 0.5, None).unwrap();
        assert!(!full.fallback);
    }

    #[test]
    fn pipeline_recovers_groups() {
        let (n, width) = (100, 4);
        let mut rng = substream(5, 0);
        let f = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DMatrix::from_fn(n, 2 * width, |i, k| f[(i, k / width)] + 0.4 * rng.sample::<f64, _>(StandardNormal));
        let x = DataMatrix::new(x).unwrap();
        let mut cfg = ClusterConfig::new(300, 7);
        cfg.s0 = Some(4);
        let a = cluster_variables(&x, &cfg).unwrap();
        assert_eq!(a.tree.cut_k(2).unwrap(), vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(a.rejected_blocks(0.05), 2);
    }
}

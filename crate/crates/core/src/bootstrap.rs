//! Batched evaluation of Gaussian-multiplier replicates over many pairs.
//!
//! A replicate of a perturbed pair statistic is linear in the multipliers:
//!
//! ```text
//! t_dagger[b, j] = sum_i g[b, i] * W[i, j]
//! W[i, j]        = coef_s * weight_j * {c_s[i,k] c_s[i,l] - sigma_s[k,l]}
//! ```
//!
//! where sample `s` owns the row range of `i` it contributes and `(k, l)`
//! is pair `j`. A chunk of replicates is therefore one GEMM of the
//! multiplier block against `W`. `W` is materialised once when it fits the
//! memory budget and rebuilt per pair chunk otherwise.
//!
//! Replicates are split into chunks of fixed size and each replicate's
//! multipliers come from its own substream, so results do not depend on
//! how many threads run the chunks.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::multipliers;

/// Replicates per GEMM block. Fixed so that the arithmetic for a given
/// replicate never depends on the degree of parallelism.
pub(crate) const REPLICATE_CHUNK: usize = 64;

/// Default cap on the bytes spent materialising `W`.
pub(crate) const DEFAULT_MEMORY_BUDGET: usize = 256 << 20;

/// Target number of doubles in one pair chunk of `W`.
const PAIR_CHUNK_DOUBLES: usize = 1 << 18;

/// One sample's contribution to the replicate.
pub(crate) struct SampleTerm {
    /// Column-centred data, `n_s x p`.
    pub centered: DMatrix<f64>,
    /// `sigma_hat` of this sample for each kernel pair, in pair order.
    pub sigma: Vec<f64>,
    /// Scalar factor, e.g. `1/n` or `-1/m`.
    pub coef: f64,
}

pub(crate) struct MultiplierKernel {
    terms: Vec<SampleTerm>,
    pairs: Vec<(usize, usize)>,
    weights: Vec<f64>,
    n_total: usize,
    pair_chunk: usize,
    materialised: Option<Vec<DMatrix<f64>>>,
}

impl MultiplierKernel {
    pub fn new(
        terms: Vec<SampleTerm>,
        pairs: Vec<(usize, usize)>,
        weights: Vec<f64>,
        memory_budget: usize,
    ) -> Self {
        debug_assert_eq!(pairs.len(), weights.len());
        let n_total: usize = terms.iter().map(|t| t.centered.nrows()).sum();
        let pair_chunk = (PAIR_CHUNK_DOUBLES / n_total.max(1)).max(32);
        let mut kernel = Self {
            terms,
            pairs,
            weights,
            n_total,
            pair_chunk,
            materialised: None,
        };
        let bytes = n_total
            .saturating_mul(kernel.pairs.len())
            .saturating_mul(std::mem::size_of::<f64>());
        if bytes <= memory_budget {
            let chunks = kernel
                .pair_ranges()
                .map(|(a, b)| kernel.build_chunk(a, b))
                .collect();
            kernel.materialised = Some(chunks);
        }
        kernel
    }

    fn pair_ranges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let total = self.pairs.len();
        (0..total)
            .step_by(self.pair_chunk)
            .map(move |a| (a, (a + self.pair_chunk).min(total)))
    }

    fn build_chunk(&self, start: usize, end: usize) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n_total, end - start);
        for (col, j) in (start..end).enumerate() {
            let (k, l) = self.pairs[j];
            let weight = self.weights[j];
            let mut column = w.column_mut(col);
            let mut row = 0;
            for term in &self.terms {
                let scale = term.coef * weight;
                let sigma = term.sigma[j];
                let ck = term.centered.column(k);
                let cl = term.centered.column(l);
                for i in 0..term.centered.nrows() {
                    column[row + i] = scale * (ck[i] * cl[i] - sigma);
                }
                row += term.centered.nrows();
            }
        }
        w
    }

    /// Runs `replicates` multiplier replicates. For every replicate chunk,
    /// `init(chunk_len)` creates an accumulator and `absorb(acc, pair_start,
    /// block)` receives each `chunk_len x pair_chunk` block of replicated
    /// statistics. Accumulators come back in replicate order.
    pub fn run<A, I, F>(
        &self,
        replicates: usize,
        seed: u64,
        threads: Option<usize>,
        init: I,
        absorb: F,
    ) -> Result<Vec<A>>
    where
        A: Send,
        I: Fn(usize) -> A + Sync,
        F: Fn(&mut A, usize, &DMatrix<f64>) + Sync,
    {
        let chunks: Vec<(usize, usize)> = (0..replicates)
            .step_by(REPLICATE_CHUNK)
            .map(|a| (a, (a + REPLICATE_CHUNK).min(replicates)))
            .collect();
        let work = |&(r0, r1): &(usize, usize)| {
            let rc = r1 - r0;
            let mut g = DMatrix::zeros(rc, self.n_total);
            for (r, b) in (r0..r1).enumerate() {
                for (i, v) in multipliers(seed, b as u64, self.n_total).into_iter().enumerate() {
                    g[(r, i)] = v;
                }
            }
            let mut acc = init(rc);
            let mut out = DMatrix::zeros(rc, 0);
            for (idx, (a, b)) in self.pair_ranges().enumerate() {
                let built;
                let w = match &self.materialised {
                    Some(chunks) => &chunks[idx],
                    None => {
                        built = self.build_chunk(a, b);
                        &built
                    }
                };
                if out.ncols() != b - a {
                    out = DMatrix::zeros(rc, b - a);
                }
                out.gemm(1.0, &g, w, 0.0);
                absorb(&mut acc, a, &out);
            }
            acc
        };
        in_pool(threads, || chunks.par_iter().map(work).collect())
    }
}

/// Runs `f` on a dedicated pool of `threads` workers, or on the ambient
/// pool when `threads` is `None`.
pub(crate) fn in_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

//! The max-type two-sample covariance test.
//!
//! For each pair `k <= l` the standardised covariance difference is
//!
//! ```text
//! t[k,l] = (sigma1_hat[k,l] - sigma2_hat[k,l]) / sqrt(s1_hat[k,l]/n + s2_hat[k,l]/m)
//! ```
//!
//! and the test statistic is `max |t[k,l]|` over all pairs, diagonal
//! included. Its null law is approximated by a Gaussian-multiplier
//! bootstrap that perturbs the centred products of both samples while
//! keeping the original denominators. The extreme-value (CLX) rule is
//! provided as a baseline.

use serde::Serialize;

use crate::bootstrap::{MultiplierKernel, SampleTerm, DEFAULT_MEMORY_BUDGET};
use crate::error::{invalid, Error, Result};
use crate::matrix::{compute_moment_summary, DataMatrix, MomentSummary};
use crate::packed::upper_pairs;

/// Packed `t[k,l]` for `k <= l`, plus the denominators reused by every
/// bootstrap replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStatMatrix {
    pub p: usize,
    pub values: Vec<f64>,
    pub denom: Vec<f64>,
}

impl PairStatMatrix {
    pub fn get(&self, k: usize, l: usize) -> f64 {
        let (a, b) = if k <= l { (k, l) } else { (l, k) };
        self.values[crate::packed::upper_index(self.p, a, b)]
    }
}

fn check_same_dim(p1: usize, p2: usize) -> Result<()> {
    if p1 != p2 {
        return Err(Error::Dimension(format!(
            "samples have different numbers of variables: {p1} and {p2}"
        )));
    }
    Ok(())
}

pub fn t_stat_matrix(mx: &MomentSummary, my: &MomentSummary) -> Result<PairStatMatrix> {
    let p = mx.p();
    check_same_dim(p, my.p())?;
    let (n, m) = (mx.n as f64, my.n as f64);
    let mut values = Vec::with_capacity(mx.sigma_hat.len());
    let mut denom = Vec::with_capacity(mx.sigma_hat.len());
    for (j, (k, l)) in upper_pairs(p).enumerate() {
        let d = (mx.s_hat.as_slice()[j] / n + my.s_hat.as_slice()[j] / m).sqrt();
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::DegeneratePair {
                k,
                l,
                reason: "centred products have zero sample variance in both samples",
            });
        }
        values.push((mx.sigma_hat.as_slice()[j] - my.sigma_hat.as_slice()[j]) / d);
        denom.push(d);
    }
    Ok(PairStatMatrix { p, values, denom })
}

/// `max |t[k,l]|` and the first pair, in lexicographic `(k, l)` order,
/// attaining it. Pairs are 0-based.
pub fn t_max(t: &PairStatMatrix) -> (f64, (usize, usize)) {
    let mut best = (f64::NEG_INFINITY, (0, 0));
    for (v, pair) in t.values.iter().zip(upper_pairs(t.p)) {
        if v.abs() > best.0 {
            best = (v.abs(), pair);
        }
    }
    best
}

/// One replicate of the perturbed statistic for the multipliers `g`
/// (`g[..n]` for the first sample, `g[n..]` for the second), evaluated
/// directly from the defining sums.
pub fn perturbed_t_max_one(
    x: &DataMatrix,
    y: &DataMatrix,
    mx: &MomentSummary,
    my: &MomentSummary,
    denom: &[f64],
    g: &[f64],
) -> Result<f64> {
    let (n, m, p) = (x.n(), y.n(), x.p());
    check_same_dim(p, y.p())?;
    if g.len() != n + m {
        return Err(invalid(format!(
            "expected {} multipliers, got {}",
            n + m,
            g.len()
        )));
    }
    if denom.len() != p * (p + 1) / 2 {
        return Err(invalid("denominator length does not match the dimension"));
    }
    let cx = x.centered(&mx.means);
    let cy = y.centered(&my.means);
    let mut best = 0.0_f64;
    for (j, (k, l)) in upper_pairs(p).enumerate() {
        let s1 = mx.sigma_hat.as_slice()[j];
        let s2 = my.sigma_hat.as_slice()[j];
        let mut a = 0.0;
        for i in 0..n {
            a += g[i] * (cx[(i, k)] * cx[(i, l)] - s1);
        }
        let mut b = 0.0;
        for i in 0..m {
            b += g[n + i] * (cy[(i, k)] * cy[(i, l)] - s2);
        }
        let t = (a / n as f64 - b / m as f64) / denom[j];
        best = best.max(t.abs());
    }
    Ok(best)
}

/// Bootstrap settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BootstrapConfig {
    /// Number of multiplier replicates `B`.
    pub replicates: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Worker threads; `None` uses the ambient rayon pool.
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl BootstrapConfig {
    pub fn new(replicates: usize, alpha: f64, seed: u64) -> Self {
        Self {
            replicates,
            alpha,
            seed,
            threads: None,
        }
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = Some(threads);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates < 1 {
            return Err(invalid("the number of bootstrap replicates must be at least 1"));
        }
        check_alpha(self.alpha)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn kernel_for(
    x: &DataMatrix,
    y: &DataMatrix,
    mx: &MomentSummary,
    my: &MomentSummary,
    t: &PairStatMatrix,
) -> MultiplierKernel {
    let terms = vec![
        SampleTerm {
            centered: x.centered(&mx.means),
            sigma: mx.sigma_hat.as_slice().to_vec(),
            coef: 1.0 / x.n() as f64,
        },
        SampleTerm {
            centered: y.centered(&my.means),
            sigma: my.sigma_hat.as_slice().to_vec(),
            coef: -1.0 / y.n() as f64,
        },
    ];
    let weights = t.denom.iter().map(|d| 1.0 / d).collect();
    MultiplierKernel::new(terms, upper_pairs(t.p).collect(), weights, DEFAULT_MEMORY_BUDGET)
}

fn replicate_maxima(kernel: &MultiplierKernel, cfg: &BootstrapConfig) -> Result<Vec<f64>> {
    let chunks = kernel.run(
        cfg.replicates,
        cfg.seed,
        cfg.threads,
        |rc| vec![0.0_f64; rc],
        |acc, _, block| {
            for col in block.column_iter() {
                for (a, v) in acc.iter_mut().zip(col.iter()) {
                    *a = a.max(v.abs());
                }
            }
        },
    )?;
    let mut dist: Vec<f64> = chunks.into_iter().flatten().collect();
    dist.sort_by(f64::total_cmp);
    Ok(dist)
}

/// Sorted bootstrap replicates of the max statistic. Replicate `b` uses
/// multipliers from substream `b` of `cfg.seed`.
pub fn bootstrap_distribution(
    x: &DataMatrix,
    y: &DataMatrix,
    cfg: &BootstrapConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_same_dim(x.p(), y.p())?;
    let mx = compute_moment_summary(x);
    let my = compute_moment_summary(y);
    let t = t_stat_matrix(&mx, &my)?;
    replicate_maxima(&kernel_for(x, y, &mx, &my, &t), cfg)
}

/// Smallest `t` in `dist` with `1 - F_B(t) <= alpha`, i.e. the order
/// statistic of 1-based rank `ceil(B (1 - alpha))`.
pub fn bootstrap_critical_value(dist: &[f64], alpha: f64) -> f64 {
    let b = dist.len();
    assert!(b > 0, "empty bootstrap distribution");
    // number of replicates allowed strictly above the critical value;
    // the slack absorbs representation error in alpha * B
    let allowed = ((alpha * b as f64) + 1e-9).floor() as usize;
    let rank = b.saturating_sub(allowed).max(1);
    dist[rank - 1]
}

/// `(1 + #{b : dist_b >= statistic}) / (B + 1)` for a sorted `dist`.
pub fn bootstrap_p_value(dist: &[f64], statistic: f64) -> f64 {
    let below = dist.partition_point(|&v| v < statistic);
    (1 + dist.len() - below) as f64 / (dist.len() + 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bootstrap,
    Clx,
}

/// Outcome of a test. `argmax_pair` is 0-based.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestReport {
    pub method: Method,
    pub statistic: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub reject: bool,
    pub argmax_pair: Option<(usize, usize)>,
    pub alpha: f64,
    pub p: usize,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub replicates: Option<usize>,
    pub seed: Option<u64>,
}

pub fn run_two_sample_test(
    x: &DataMatrix,
    y: &DataMatrix,
    cfg: &BootstrapConfig,
) -> Result<TestReport> {
    cfg.validate()?;
    check_same_dim(x.p(), y.p())?;
    let mx = compute_moment_summary(x);
    let my = compute_moment_summary(y);
    let t = t_stat_matrix(&mx, &my)?;
    let (statistic, pair) = t_max(&t);
    let dist = replicate_maxima(&kernel_for(x, y, &mx, &my, &t), cfg)?;
    let critical_value = bootstrap_critical_value(&dist, cfg.alpha);
    Ok(TestReport {
        method: Method::Bootstrap,
        statistic,
        critical_value,
        p_value: bootstrap_p_value(&dist, statistic),
        reject: statistic > critical_value,
        argmax_pair: Some(pair),
        alpha: cfg.alpha,
        p: x.p(),
        n: Some(x.n()),
        m: Some(y.n()),
        replicates: Some(cfg.replicates),
        seed: Some(cfg.seed),
    })
}

/// Upper `alpha` quantile of the type I extreme value limit,
/// `-log(8 pi) - 2 log log (1 - alpha)^-1`.
pub fn clx_quantile(alpha: f64) -> f64 {
    -(8.0 * std::f64::consts::PI).ln() - 2.0 * (-(-alpha).ln_1p()).ln()
}

/// Extreme-value calibration of the max statistic: reject when
/// `T^2 - 4 log p + log log p > q_alpha`. The reported critical value is
/// the implied threshold on `T` (zero when that threshold is imaginary).
pub fn clx_test(statistic: f64, p: usize, alpha: f64) -> Result<TestReport> {
    if p < 2 {
        return Err(invalid(format!("the extreme-value rule needs p >= 2, got {p}")));
    }
    check_alpha(alpha)?;
    let lp = (p as f64).ln();
    let centering = 4.0 * lp - lp.ln();
    let q = clx_quantile(alpha);
    let centred = statistic * statistic - centering;
    // limiting cdf F(y) = exp(-exp(-y/2) / sqrt(8 pi))
    let tail = (-centred / 2.0).exp() / (8.0 * std::f64::consts::PI).sqrt();
    Ok(TestReport {
        method: Method::Clx,
        statistic,
        critical_value: (q + centering).max(0.0).sqrt(),
        p_value: -(-tail).exp_m1(),
        reject: centred > q,
        argmax_pair: None,
        alpha,
        p,
        n: None,
        m: None,
        replicates: None,
        seed: None,
    })
}

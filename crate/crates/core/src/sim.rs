//! Data-generating processes for size and power studies.
//!
//! Samples are drawn as `X_i = Sigma_*^{1/2} Z_i` where `Z_i` has i.i.d.
//! entries from one of the innovation laws below. No standardisation is
//! applied to `Z`, so the population covariance is `Var(Z) * Sigma_*`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Bernoulli, ChiSquared, Distribution, Gamma, Poisson, StandardNormal, StudentT, Uniform};
use rayon::prelude::*;
use serde::Serialize;

use crate::bootstrap::in_pool;
use crate::error::{invalid, Error, Result};
use crate::matrix::{min_eigenvalue, psd_sqrt, DataMatrix, SqrtFactor};
use crate::rng::{derive_seed, substream, StreamRng};
use crate::two_sample::{clx_test, run_two_sample_test, BootstrapConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum CovarianceKind {
    M1,
    M2,
    M3,
    M4,
}

impl FromStr for CovarianceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "M1" => Ok(Self::M1),
            "M2" => Ok(Self::M2),
            "M3" => Ok(Self::M3),
            "M4" => Ok(Self::M4),
            other => Err(Error::Config(format!("unknown covariance structure {other:?}"))),
        }
    }
}

impl fmt::Display for CovarianceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Covariance structures with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceModel {
    /// `D^{1/2} A D^{1/2}`: `A` is 1 on the diagonal and `rho` inside
    /// consecutive `block x block` diagonal blocks; `D` is i.i.d. uniform.
    BlockDiagonal {
        block: usize,
        rho: f64,
        diag: (f64, f64),
    },
    /// `base^(|k - l|^exponent)`.
    SlowDecay { base: f64, exponent: f64 },
    /// Off-diagonal `rho_H(|k - l|)` (fractional-noise autocorrelation)
    /// with an i.i.d. uniform diagonal pasted in.
    LongRange { hurst: f64, diag: (f64, f64) },
    /// `D^{1/2} (F + U U^T) D^{1/2}` with `F` tridiagonal and `U` uniform
    /// on the Stiefel manifold of `p x rank` frames.
    NonSparse {
        rank: usize,
        offdiag: f64,
        diag: (f64, f64),
    },
}

impl CovarianceModel {
    pub fn default_for(kind: CovarianceKind) -> Self {
        match kind {
            CovarianceKind::M1 => Self::BlockDiagonal {
                block: 10,
                rho: 0.55,
                diag: (0.5, 2.5),
            },
            CovarianceKind::M2 => Self::SlowDecay {
                base: 0.99,
                exponent: 1.0 / 3.0,
            },
            CovarianceKind::M3 => Self::LongRange {
                hurst: 0.85,
                diag: (1.0, 2.0),
            },
            CovarianceKind::M4 => Self::NonSparse {
                rank: 10,
                offdiag: 0.5,
                diag: (1.0, 6.0),
            },
        }
    }

    pub fn kind(&self) -> CovarianceKind {
        match self {
            Self::BlockDiagonal { .. } => CovarianceKind::M1,
            Self::SlowDecay { .. } => CovarianceKind::M2,
            Self::LongRange { .. } => CovarianceKind::M3,
            Self::NonSparse { .. } => CovarianceKind::M4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSpec {
    pub model: CovarianceModel,
    pub p: usize,
    pub seed: u64,
}

impl CovarianceSpec {
    pub fn new(kind: CovarianceKind, p: usize, seed: u64) -> Self {
        Self {
            model: CovarianceModel::default_for(kind),
            p,
            seed,
        }
    }

    pub fn kind(&self) -> CovarianceKind {
        self.model.kind()
    }
}

fn uniform(bounds: (f64, f64)) -> Result<Uniform<f64>> {
    Uniform::new_inclusive(bounds.0, bounds.1)
        .map_err(|e| invalid(format!("bad uniform bounds {bounds:?}: {e}")))
}

fn uniform_diag(bounds: (f64, f64), p: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
    if bounds.0 < 0.0 {
        return Err(invalid("diagonal scale law must be non-negative"));
    }
    let law = uniform(bounds)?;
    Ok((0..p).map(|_| law.sample(rng)).collect())
}

/// Autocorrelation of fractional Gaussian noise at lag `d`:
/// `{(d+1)^{2H} + (d-1)^{2H} - 2 d^{2H}} / 2`.
pub fn long_range_correlation(d: usize, hurst: f64) -> f64 {
    if d == 0 {
        return 1.0;
    }
    let h2 = 2.0 * hurst;
    let d = d as f64;
    ((d + 1.0).powf(h2) + (d - 1.0).powf(h2) - 2.0 * d.powf(h2)) / 2.0
}

pub fn gen_covariance(spec: &CovarianceSpec) -> Result<DMatrix<f64>> {
    let p = spec.p;
    if p < 2 {
        return Err(Error::Dimension(format!("covariance dimension must be >= 2, got {p}")));
    }
    let mut rng = substream(spec.seed, 0);
    let sigma = match &spec.model {
        &CovarianceModel::BlockDiagonal { block, rho, diag } => {
            if block == 0 {
                return Err(invalid("block size must be positive"));
            }
            let d = uniform_diag(diag, p, &mut rng)?;
            // only complete blocks carry correlation
            let full = (p / block) * block;
            DMatrix::from_fn(p, p, |k, l| {
                let a = if k == l {
                    1.0
                } else if k < full && l < full && k / block == l / block {
                    rho
                } else {
                    0.0
                };
                (d[k] * d[l]).sqrt() * a
            })
        }
        &CovarianceModel::SlowDecay { base, exponent } => DMatrix::from_fn(p, p, |k, l| {
            base.powf((k.abs_diff(l) as f64).powf(exponent))
        }),
        &CovarianceModel::LongRange { hurst, diag } => {
            let d = uniform_diag(diag, p, &mut rng)?;
            DMatrix::from_fn(p, p, |k, l| {
                if k == l {
                    d[k]
                } else {
                    long_range_correlation(k.abs_diff(l), hurst)
                }
            })
        }
        &CovarianceModel::NonSparse { rank, offdiag, diag } => {
            if rank > p {
                return Err(invalid(format!("Stiefel rank {rank} exceeds dimension {p}")));
            }
            let d = uniform_diag(diag, p, &mut rng)?;
            let u = stiefel_with(p, rank, &mut substream(spec.seed, 1))?;
            let uut = &u * u.transpose();
            DMatrix::from_fn(p, p, |k, l| {
                let f = if k == l {
                    1.0
                } else if k.abs_diff(l) == 1 {
                    offdiag
                } else {
                    0.0
                };
                (d[k] * d[l]).sqrt() * (f + uut[(k, l)])
            })
        }
    };
    Ok(symmetrize(sigma))
}

fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let p = m.nrows();
    for k in 0..p {
        for l in k + 1..p {
            m[(l, k)] = m[(k, l)];
        }
    }
    m
}

/// A `p x k0` matrix with orthonormal columns, uniformly (Haar)
/// distributed: the Q factor of a Gaussian matrix with the signs fixed so
/// that R has a positive diagonal.
pub fn sample_stiefel(p: usize, k0: usize, seed: u64) -> Result<DMatrix<f64>> {
    stiefel_with(p, k0, &mut substream(seed, 0))
}

fn stiefel_with(p: usize, k0: usize, rng: &mut StreamRng) -> Result<DMatrix<f64>> {
    if k0 < 1 || k0 > p {
        return Err(invalid(format!("need 1 <= k0 <= p, got k0 = {k0}, p = {p}")));
    }
    let g = DMatrix::from_fn(p, k0, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..k0 {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum InnovationKind {
    D1,
    D2,
    D3,
}

impl FromStr for InnovationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "D1" => Ok(Self::D1),
            "D2" => Ok(Self::D2),
            "D3" => Ok(Self::D3),
            other => Err(Error::Config(format!("unknown innovation model {other:?}"))),
        }
    }
}

impl fmt::Display for InnovationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// How often the noncentrality of the second sample's t innovations is redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoncentralityScope {
    /// One draw per variable per generated sample.
    PerVariable,
    /// One draw shared by all variables of a generated sample.
    PerSample,
}

/// Law of the i.i.d. innovations `Z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Innovation {
    /// Gamma with the given shape and rate (variance `shape / rate^2`).
    Gamma { shape: f64, rate: f64 },
    /// `Poisson(mean)` with probability `nonzero_prob`, zero otherwise.
    ZeroInflatedPoisson { mean: f64, nonzero_prob: f64 },
    /// Central `t_df` for the first sample; noncentral `t_df(mu)` with
    /// `mu ~ Unif(noncentrality)` for the second.
    StudentT {
        df: f64,
        noncentrality: (f64, f64),
        scope: NoncentralityScope,
    },
    Gaussian,
    /// Degenerate at a constant (testing aid).
    PointMass(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    First,
    Second,
}

impl Innovation {
    pub fn d1() -> Self {
        Self::Gamma {
            shape: 4.0,
            rate: 10.0,
        }
    }

    pub fn d2() -> Self {
        Self::ZeroInflatedPoisson {
            mean: 1000.0,
            nonzero_prob: 0.15,
        }
    }

    pub fn d3() -> Self {
        Self::StudentT {
            df: 5.0,
            noncentrality: (-2.0, 2.0),
            scope: NoncentralityScope::PerVariable,
        }
    }

    pub fn from_kind(kind: InnovationKind) -> Self {
        match kind {
            InnovationKind::D1 => Self::d1(),
            InnovationKind::D2 => Self::d2(),
            InnovationKind::D3 => Self::d3(),
        }
    }

    pub fn kind(&self) -> Option<InnovationKind> {
        match self {
            Self::Gamma { .. } => Some(InnovationKind::D1),
            Self::ZeroInflatedPoisson { .. } => Some(InnovationKind::D2),
            Self::StudentT { .. } => Some(InnovationKind::D3),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match self.kind() {
            Some(k) => k.to_string(),
            None => match self {
                Self::Gaussian => "N".into(),
                Self::PointMass(c) => format!("delta({c})"),
                _ => unreachable!(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Gamma { shape, rate } => shape > 0.0 && rate > 0.0,
            Self::ZeroInflatedPoisson { mean, nonzero_prob } => {
                mean > 0.0 && (0.0..=1.0).contains(&nonzero_prob)
            }
            Self::StudentT { df, noncentrality, .. } => {
                df > 0.0 && noncentrality.0 <= noncentrality.1
            }
            Self::Gaussian => true,
            Self::PointMass(c) => c.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid innovation parameters: {self:?}")))
        }
    }

    /// Variance and fourth cumulant of a single innovation, when finite
    /// and available in closed form. The second sample of the t model is
    /// summarised by its central law.
    pub fn moments(&self) -> Option<(f64, f64)> {
        match *self {
            Self::Gamma { shape, rate } => {
                Some((shape / rate.powi(2), 6.0 * shape / rate.powi(4)))
            }
            Self::ZeroInflatedPoisson { mean: l, nonzero_prob: w } => {
                // raw moments of the mixture, then central ones
                let m1 = w * l;
                let m2 = w * (l + l * l);
                let m3 = w * (l.powi(3) + 3.0 * l * l + l);
                let m4 = w * (l.powi(4) + 6.0 * l.powi(3) + 7.0 * l * l + l);
                let var = m2 - m1 * m1;
                let c4 = m4 - 4.0 * m1 * m3 + 6.0 * m1 * m1 * m2 - 3.0 * m1.powi(4);
                Some((var, c4 - 3.0 * var * var))
            }
            Self::StudentT { df, .. } if df > 4.0 => {
                let var = df / (df - 2.0);
                let m4 = 3.0 * df * df / ((df - 2.0) * (df - 4.0));
                Some((var, m4 - 3.0 * var * var))
            }
            Self::StudentT { .. } => None,
            Self::Gaussian => Some((1.0, 0.0)),
            Self::PointMass(_) => Some((0.0, 0.0)),
        }
    }

    /// `n x p` matrix of i.i.d. innovations for the given sample.
    pub fn draw(&self, side: Side, n: usize, p: usize, rng: &mut StreamRng) -> Result<DMatrix<f64>> {
        self.validate()?;
        let bad = |e: &dyn fmt::Display| invalid(format!("innovation law: {e}"));
        Ok(match *self {
            Self::Gamma { shape, rate } => {
                let law = Gamma::new(shape, 1.0 / rate).map_err(|e| bad(&e))?;
                DMatrix::from_fn(n, p, |_, _| law.sample(rng))
            }
            Self::ZeroInflatedPoisson { mean, nonzero_prob } => {
                let hit = Bernoulli::new(nonzero_prob).map_err(|e| bad(&e))?;
                let count = Poisson::new(mean).map_err(|e| bad(&e))?;
                DMatrix::from_fn(n, p, |_, _| {
                    if hit.sample(rng) {
                        count.sample(rng)
                    } else {
                        0.0
                    }
                })
            }
            Self::StudentT { df, noncentrality, scope } => match side {
                Side::First => {
                    let law = StudentT::new(df).map_err(|e| bad(&e))?;
                    DMatrix::from_fn(n, p, |_, _| law.sample(rng))
                }
                Side::Second => {
                    let mu_law = uniform(noncentrality)?;
                    let mu: Vec<f64> = match scope {
                        NoncentralityScope::PerVariable => (0..p).map(|_| mu_law.sample(rng)).collect(),
                        NoncentralityScope::PerSample => vec![mu_law.sample(rng); p],
                    };
                    let chi = ChiSquared::new(df).map_err(|e| bad(&e))?;
                    // column-major fill: index k is the variable
                    let mut z = DMatrix::zeros(n, p);
                    for k in 0..p {
                        for i in 0..n {
                            let num: f64 = rng.sample::<f64, _>(StandardNormal) + mu[k];
                            z[(i, k)] = num / (chi.sample(rng) / df).sqrt();
                        }
                    }
                    z
                }
            },
            Self::Gaussian => DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal)),
            Self::PointMass(c) => DMatrix::from_element(n, p, c),
        })
    }
}

/// Draws `n` rows `Sigma_*^{1/2} Z`.
pub fn gen_sample(
    sigma_star: &DMatrix<f64>,
    innov: &Innovation,
    side: Side,
    n: usize,
    seed: u64,
) -> Result<DataMatrix> {
    let root = psd_sqrt(sigma_star)?;
    sample_with_root(&root.root, innov, side, n, &mut substream(seed, 0))
}

fn sample_with_root(
    root: &DMatrix<f64>,
    innov: &Innovation,
    side: Side,
    n: usize,
    rng: &mut StreamRng,
) -> Result<DataMatrix> {
    let z = innov.draw(side, n, root.nrows(), rng)?;
    // rows are z_i^T R = (R z_i)^T since R is symmetric
    DataMatrix::new(z * root)
}

/// Covariance pair for a power study. `sigma2_star - sigma1_star` is the
/// perturbation supported on `q_support` (upper-triangle pairs, mirrored).
#[derive(Debug, Clone)]
pub struct AlternativePair {
    pub sigma1_star: DMatrix<f64>,
    pub sigma2_star: DMatrix<f64>,
    pub q_support: Vec<(usize, usize)>,
    pub q_values: Vec<f64>,
    pub lambda0: f64,
    pub tau: f64,
}

/// Sparse alternative with `floor(0.05 p)` nonzero perturbation entries.
pub fn build_alternative(sigma_star: &DMatrix<f64>, seed: u64) -> Result<AlternativePair> {
    build_alternative_with(sigma_star, 0.05, seed)
}

pub fn build_alternative_with(
    sigma_star: &DMatrix<f64>,
    fraction: f64,
    seed: u64,
) -> Result<AlternativePair> {
    let p = sigma_star.nrows();
    if p < 2 {
        return Err(Error::Dimension("alternative needs p >= 2".into()));
    }
    let nonzeros = (fraction * p as f64).floor() as usize;
    if nonzeros < 2 {
        return Err(invalid(format!(
            "floor({fraction} * {p}) = {nonzeros} perturbed entries; raise p or the sparsity fraction"
        )));
    }
    // odd counts lose one entry: the perturbation must stay symmetric
    let upper = nonzeros / 2;
    let mut rng = substream(seed, 0);
    let strict = p * (p - 1) / 2;
    let mut picks = index::sample(&mut rng, strict, upper).into_vec();
    picks.sort_unstable();
    let all: Vec<(usize, usize)> = crate::packed::strict_upper_pairs(p).collect();
    let q_support: Vec<(usize, usize)> = picks.iter().map(|&i| all[i]).collect();

    let max_diag = sigma_star.diagonal().max();
    let tau = 8.0 * max_diag.max((p as f64).ln().sqrt());
    let law = uniform((tau / 2.0, 1.5 * tau))?;
    let q_values: Vec<f64> = q_support.iter().map(|_| law.sample(&mut rng)).collect();

    let mut perturbed = sigma_star.clone();
    for (&(k, l), &q) in q_support.iter().zip(&q_values) {
        perturbed[(k, l)] += q;
        perturbed[(l, k)] += q;
    }
    let lambda0 = min_eigenvalue(&perturbed)?
        .min(min_eigenvalue(sigma_star)?)
        .abs()
        + 0.05;
    let shift = |m: &DMatrix<f64>| m + DMatrix::identity(p, p) * lambda0;
    Ok(AlternativePair {
        sigma1_star: shift(sigma_star),
        sigma2_star: shift(&perturbed),
        q_support,
        q_values,
        lambda0,
        tau,
    })
}

/// `max_{k<=l} |sigma1 - sigma2| / sqrt(s1/n + s2/m) / sqrt(log p)`: the
/// smallest `gamma` whose local-alternative class contains the pair.
pub fn signal_strength(
    sigma1: &DMatrix<f64>,
    sigma2: &DMatrix<f64>,
    s1: &DMatrix<f64>,
    s2: &DMatrix<f64>,
    n: usize,
    m: usize,
) -> Result<f64> {
    let p = sigma1.nrows();
    for mat in [sigma2, s1, s2] {
        if mat.shape() != (p, p) || sigma1.ncols() != p {
            return Err(Error::Dimension("signal strength inputs differ in shape".into()));
        }
    }
    if p < 2 {
        return Err(Error::Dimension("signal strength needs p >= 2".into()));
    }
    let mut best = 0.0_f64;
    for k in 0..p {
        for l in k..p {
            let d = (s1[(k, l)] / n as f64 + s2[(k, l)] / m as f64).sqrt();
            if !(d > 0.0) {
                return Err(Error::DegeneratePair {
                    k,
                    l,
                    reason: "zero population variance of the centred product",
                });
            }
            best = best.max((sigma1[(k, l)] - sigma2[(k, l)]).abs() / d);
        }
    }
    Ok(best / (p as f64).ln().sqrt())
}

/// Population covariance `v R R` and product variances
/// `s[k,l] = Sigma_kk Sigma_ll + Sigma_kl^2 + kappa4 sum_a R_ka^2 R_la^2`
/// of `X = R Z` for i.i.d. innovations with variance `v` and fourth
/// cumulant `kappa4`.
pub fn population_moments(root: &DMatrix<f64>, var: f64, kappa4: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let sigma = root * root.transpose() * var;
    let r2 = root.map(|v| v * v);
    let kurt = &r2 * r2.transpose() * kappa4;
    let p = root.nrows();
    let s = DMatrix::from_fn(p, p, |k, l| {
        sigma[(k, k)] * sigma[(l, l)] + sigma[(k, l)].powi(2) + kurt[(k, l)]
    });
    (sigma, s)
}

/// A pair of sampling designs sharing one innovation law.
#[derive(Debug, Clone)]
pub struct Design {
    pub sigma1_star: DMatrix<f64>,
    pub sigma2_star: DMatrix<f64>,
    root1: SqrtFactor,
    root2: SqrtFactor,
    pub innov: Innovation,
}

impl Design {
    pub fn null(sigma_star: &DMatrix<f64>, innov: Innovation) -> Result<Self> {
        let root = psd_sqrt(sigma_star)?;
        Ok(Self {
            sigma1_star: sigma_star.clone(),
            sigma2_star: sigma_star.clone(),
            root1: root.clone(),
            root2: root,
            innov,
        })
    }

    pub fn alternative(pair: &AlternativePair, innov: Innovation) -> Result<Self> {
        Ok(Self {
            root1: psd_sqrt(&pair.sigma1_star)?,
            root2: psd_sqrt(&pair.sigma2_star)?,
            sigma1_star: pair.sigma1_star.clone(),
            sigma2_star: pair.sigma2_star.clone(),
            innov,
        })
    }

    pub fn p(&self) -> usize {
        self.sigma1_star.nrows()
    }

    /// Largest eigenvalue magnitude clamped while factoring either matrix.
    pub fn clamp(&self) -> f64 {
        self.root1.clamped.max(self.root2.clamped)
    }

    /// One replication: samples of sizes `n1` and `n2` on independent
    /// substreams of `seed`.
    pub fn draw(&self, n1: usize, n2: usize, seed: u64) -> Result<(DataMatrix, DataMatrix)> {
        let x = sample_with_root(&self.root1.root, &self.innov, Side::First, n1, &mut substream(seed, 1))?;
        let y = sample_with_root(&self.root2.root, &self.innov, Side::Second, n2, &mut substream(seed, 2))?;
        Ok((x, y))
    }

    /// Signal strength of the design at sample sizes `(n1, n2)`, when the
    /// innovation moments are available in closed form.
    pub fn signal_strength(&self, n1: usize, n2: usize) -> Option<f64> {
        let (var, kappa4) = self.innov.moments()?;
        let (sigma1, s1) = population_moments(&self.root1.root, var, kappa4);
        let (sigma2, s2) = population_moments(&self.root2.root, var, kappa4);
        signal_strength(&sigma1, &sigma2, &s1, &s2, n1, n2).ok()
    }
}

/// Single planted difference `delta` at `pair` (and its mirror), with
/// `delta > 0` chosen so that the design has signal strength `gamma` at
/// sample sizes `(n, m)`.
pub fn plant_single_entry(
    sigma_star: &DMatrix<f64>,
    pair: (usize, usize),
    gamma: f64,
    innov: Innovation,
    n: usize,
    m: usize,
) -> Result<AlternativePair> {
    let p = sigma_star.nrows();
    let (k, l) = (pair.0.min(pair.1), pair.0.max(pair.1));
    if k == l || l >= p {
        return Err(invalid(format!("planted pair must be off-diagonal within 1..{p}")));
    }
    if !(gamma > 0.0) {
        return Err(invalid("target signal strength must be positive"));
    }
    let (var, kappa4) = innov
        .moments()
        .ok_or_else(|| invalid("innovation moments unavailable for signal planting"))?;
    let base_root = psd_sqrt(sigma_star)?;
    let (sigma1, s1) = population_moments(&base_root.root, var, kappa4);
    let perturbed = |delta: f64| {
        let mut s = sigma_star.clone();
        s[(k, l)] += delta;
        s[(l, k)] += delta;
        s
    };
    let floor = 1e-3 * min_eigenvalue(sigma_star)?.max(0.0);
    let strength = |delta: f64| -> Result<Option<f64>> {
        let s2_star = perturbed(delta);
        if min_eigenvalue(&s2_star)? < floor {
            return Ok(None);
        }
        let root2 = psd_sqrt(&s2_star)?;
        let (sigma2, s2) = population_moments(&root2.root, var, kappa4);
        signal_strength(&sigma1, &sigma2, &s1, &s2, n, m).map(Some)
    };

    // largest admissible delta, then bisect on the monotone strength
    let mut hi = sigma_star[(k, k)].min(sigma_star[(l, l)]).max(f64::MIN_POSITIVE);
    while strength(hi)?.is_some() {
        hi *= 2.0;
    }
    let mut lo_ok = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo_ok + hi);
        if strength(mid)?.is_some() {
            lo_ok = mid;
        } else {
            hi = mid;
        }
    }
    if strength(lo_ok)?.unwrap_or(0.0) < gamma {
        return Err(invalid(format!(
            "signal strength {gamma} is not attainable at n = {n}, m = {m} for pair ({}, {})",
            k + 1,
            l + 1
        )));
    }
    let (mut lo, mut hi) = (0.0, lo_ok);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if strength(mid)?.unwrap_or(f64::INFINITY) < gamma {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let delta = hi;
    Ok(AlternativePair {
        sigma1_star: sigma_star.clone(),
        sigma2_star: perturbed(delta),
        q_support: vec![(k, l)],
        q_values: vec![delta],
        lambda0: 0.0,
        tau: delta,
    })
}

/// A size or power study over one design.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub cov: CovarianceSpec,
    pub innov: Innovation,
    pub n1: usize,
    pub n2: usize,
    pub reps: usize,
    /// `alpha`, `B` and threading; the seed field is ignored in favour of
    /// per-replication seeds derived from `seed`.
    pub bootstrap: BootstrapConfig,
    pub alternative: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSummary {
    pub cov: CovarianceKind,
    pub innov: String,
    pub p: usize,
    pub n1: usize,
    pub n2: usize,
    pub reps: usize,
    pub alternative: bool,
    pub gamma: Option<f64>,
    pub bootstrap_rejections: usize,
    pub clx_rejections: usize,
    pub bootstrap_rate: f64,
    pub bootstrap_se: f64,
    pub clx_rate: f64,
    pub clx_se: f64,
    pub clamp: f64,
    pub elapsed_ms: u128,
}

/// Rejection counts over `reps` replications of a design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RejectionCounts {
    pub reps: usize,
    pub bootstrap: usize,
    pub clx: usize,
}

impl RejectionCounts {
    pub fn bootstrap_rate(&self) -> f64 {
        rate(self.bootstrap, self.reps)
    }

    pub fn clx_rate(&self) -> f64 {
        rate(self.clx, self.reps)
    }
}

fn rate(hits: usize, reps: usize) -> f64 {
    if reps == 0 {
        0.0
    } else {
        hits as f64 / reps as f64
    }
}

/// Monte Carlo standard error of a rejection fraction.
pub fn mc_standard_error(rate: f64, reps: usize) -> f64 {
    if reps == 0 {
        0.0
    } else {
        (rate * (1.0 - rate) / reps as f64).sqrt()
    }
}

/// Seed of replication `r` under master seed `seed`.
pub fn replication_seed(seed: u64, r: usize) -> u64 {
    derive_seed(seed, r as u64)
}

/// Runs the bootstrap and extreme-value tests on `reps` fresh draws from
/// `design`. Replication `r` draws its data and multipliers from
/// [`replication_seed`]`(seed, r)`.
pub fn run_design(
    design: &Design,
    n1: usize,
    n2: usize,
    reps: usize,
    cfg: &BootstrapConfig,
    seed: u64,
) -> Result<RejectionCounts> {
    cfg.validate()?;
    let one = |r: usize| -> Result<(bool, bool)> {
        let rs = replication_seed(seed, r);
        let (x, y) = design.draw(n1, n2, rs)?;
        let boot_cfg = BootstrapConfig {
            seed: derive_seed(rs, 0xB0075),
            threads: None,
            ..*cfg
        };
        let report = run_two_sample_test(&x, &y, &boot_cfg)?;
        let clx = clx_test(report.statistic, x.p(), cfg.alpha)?;
        Ok((report.reject, clx.reject))
    };
    let outcomes: Vec<Result<(bool, bool)>> =
        in_pool(cfg.threads, || (0..reps).into_par_iter().map(one).collect())?;
    let mut counts = RejectionCounts {
        reps,
        ..Default::default()
    };
    for o in outcomes {
        let (b, c) = o?;
        counts.bootstrap += b as usize;
        counts.clx += c as usize;
    }
    Ok(counts)
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentSummary> {
    let start = Instant::now();
    spec.innov.validate()?;
    let sigma_star = gen_covariance(&spec.cov)?;
    let design = if spec.alternative {
        let pair = build_alternative(&sigma_star, derive_seed(spec.seed, 0xA17))?;
        Design::alternative(&pair, spec.innov)?
    } else {
        Design::null(&sigma_star, spec.innov)?
    };
    let counts = if spec.reps == 0 {
        RejectionCounts::default()
    } else {
        run_design(&design, spec.n1, spec.n2, spec.reps, &spec.bootstrap, spec.seed)?
    };
    let gamma = if spec.alternative {
        design.signal_strength(spec.n1, spec.n2)
    } else {
        None
    };
    let (br, cr) = (counts.bootstrap_rate(), counts.clx_rate());
    Ok(ExperimentSummary {
        cov: spec.cov.kind(),
        innov: spec.innov.label(),
        p: spec.cov.p,
        n1: spec.n1,
        n2: spec.n2,
        reps: spec.reps,
        alternative: spec.alternative,
        gamma,
        bootstrap_rejections: counts.bootstrap,
        clx_rejections: counts.clx,
        bootstrap_rate: br,
        bootstrap_se: mc_standard_error(br, spec.reps),
        clx_rate: cr,
        clx_se: mc_standard_error(cr, spec.reps),
        clamp: design.clamp(),
        elapsed_ms: start.elapsed().as_millis(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::compute_moment_summary;
    use proptest::prelude::*;

    fn assert_symmetric(m: &DMatrix<f64>) {
        assert_eq!(m, &m.transpose());
    }

    #[test]
    fn m2_two_by_two() {
        let s = gen_covariance(&CovarianceSpec::new(CovarianceKind::M2, 2, 0)).unwrap();
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[1.0, 0.99, 0.99, 1.0]));
    }

    #[test]
    fn m2_decays_along_rows() {
        let s = gen_covariance(&CovarianceSpec::new(CovarianceKind::M2, 40, 0)).unwrap();
        for k in 0..40 {
            for l in k + 1..39 {
                assert!(s[(k, l + 1)] < s[(k, l)]);
            }
        }
        assert!(min_eigenvalue(&s).unwrap() >= -1e-10);
    }

    #[test]
    fn m3_lag_one_correlation() {
        // 2^1.7 = 3.2490095854249419...
        let rho = long_range_correlation(1, 0.85);
        assert!((rho - 0.624_504_792_712_471).abs() < 1e-14);
        assert!((long_range_correlation(2, 0.85) - 0.487_494_334_536_947_6).abs() < 1e-14);
        let s = gen_covariance(&CovarianceSpec::new(CovarianceKind::M3, 12, 3)).unwrap();
        assert_symmetric(&s);
        assert_eq!(s[(4, 5)], rho);
        for k in 0..12 {
            assert!((1.0..2.0).contains(&s[(k, k)]));
        }
    }

    #[test]
    fn m1_block_predicate() {
        for p in [10, 25] {
            let s = gen_covariance(&CovarianceSpec::new(CovarianceKind::M1, p, 17)).unwrap();
            assert_symmetric(&s);
            let full = p / 10 * 10;
            for k in 0..p {
                assert!((0.5..2.5).contains(&s[(k, k)]));
                for l in 0..p {
                    let a = s[(k, l)] / (s[(k, k)] * s[(l, l)]).sqrt();
                    let same = k < full && l < full && k / 10 == l / 10;
                    let want = if k == l {
                        1.0
                    } else if same {
                        0.55
                    } else {
                        0.0
                    };
                    assert!((a - want).abs() < 1e-14, "({k},{l})");
                }
            }
            assert!(min_eigenvalue(&s).unwrap() >= -1e-10);
        }
    }

    #[test]
    fn m4_is_psd_and_rejects_large_rank() {
        let s = gen_covariance(&CovarianceSpec::new(CovarianceKind::M4, 30, 2)).unwrap();
        assert_symmetric(&s);
        assert!(min_eigenvalue(&s).unwrap() >= -1e-10);
        assert!(gen_covariance(&CovarianceSpec::new(CovarianceKind::M4, 8, 2)).is_err());
        assert!(gen_covariance(&CovarianceSpec::new(CovarianceKind::M1, 1, 2)).is_err());
    }

    #[test]
    fn covariance_is_reproducible() {
        let spec = CovarianceSpec::new(CovarianceKind::M4, 20, 99);
        assert_eq!(gen_covariance(&spec).unwrap(), gen_covariance(&spec).unwrap());
    }

    fn orthonormality_error(u: &DMatrix<f64>) -> f64 {
        let k = u.ncols();
        (u.transpose() * u - DMatrix::identity(k, k)).amax()
    }

    #[test]
    fn stiefel_square_is_orthogonal() {
        let u = sample_stiefel(6, 6, 4).unwrap();
        assert!(orthonormality_error(&u) < 1e-10);
        assert!((u.determinant().abs() - 1.0).abs() < 1e-8);
        assert!(sample_stiefel(3, 4, 0).is_err());
        assert!(sample_stiefel(3, 0, 0).is_err());
    }

    #[test]
    fn stiefel_entries_are_centred() {
        let (p, k0, draws) = (50, 10, 2000);
        let mut sum = DMatrix::<f64>::zeros(p, k0);
        for s in 0..draws {
            sum += sample_stiefel(p, k0, s).unwrap();
        }
        // each entry has variance 1/p
        let se = (1.0 / (p as f64 * draws as f64)).sqrt();
        let means = sum / draws as f64;
        let worst = means.amax() / se;
        // 500 entries: a 4.5 s.e. band keeps the family-wise miss rate small
        assert!(worst < 4.5, "max |mean| = {worst} s.e.");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn stiefel_orthonormal(p in 1usize..30, frac in 0.0f64..1.0, seed in any::<u64>()) {
            let k0 = 1 + ((p - 1) as f64 * frac) as usize;
            let u = sample_stiefel(p, k0, seed).unwrap();
            prop_assert_eq!(u.shape(), (p, k0));
            prop_assert!(orthonormality_error(&u) < 1e-10);
        }
    }

    #[test]
    fn point_mass_rows_are_root_row_sums() {
        let sigma = gen_covariance(&CovarianceSpec::new(CovarianceKind::M2, 5, 0)).unwrap();
        let x = gen_sample(&sigma, &Innovation::PointMass(1.0), Side::First, 4, 1).unwrap();
        let root = psd_sqrt(&sigma).unwrap().root;
        for i in 0..4 {
            for k in 0..5 {
                let want: f64 = root.row(k).sum();
                assert!((x.values()[(i, k)] - want).abs() < 1e-12);
            }
        }
    }

    fn sample_cov(innov: Innovation, side: Side, n: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let x = gen_sample(&DMatrix::identity(2, 2), &innov, side, n, seed).unwrap();
        let m = compute_moment_summary(&x);
        (m.sigma_hat.to_dense(), m.means)
    }

    #[test]
    fn gamma_variance() {
        let (s, _) = sample_cov(Innovation::d1(), Side::First, 5000, 8);
        for k in 0..2 {
            assert!((s[(k, k)] / 0.04 - 1.0).abs() < 0.1, "{}", s[(k, k)]);
        }
        assert!(s[(0, 1)].abs() < 0.004);
    }

    #[test]
    fn zip_mean_and_variance() {
        let (s, means) = sample_cov(Innovation::d2(), Side::First, 5000, 8);
        let (var, _) = Innovation::d2().moments().unwrap();
        for k in 0..2 {
            assert!((means[k] / 150.0 - 1.0).abs() < 0.02, "{}", means[k]);
            assert!((s[(k, k)] / var - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn student_variance() {
        // squared t_5 draws are themselves heavy tailed; n = 5000 is too noisy
        let (s, _) = sample_cov(Innovation::d3(), Side::First, 40_000, 8);
        for k in 0..2 {
            assert!((s[(k, k)] / (5.0 / 3.0) - 1.0).abs() < 0.1, "{}", s[(k, k)]);
        }
    }

    #[test]
    fn noncentral_second_sample_shifts_means() {
        let innov = Innovation::StudentT {
            df: 5.0,
            noncentrality: (1.5, 1.5),
            scope: NoncentralityScope::PerSample,
        };
        let (_, means) = sample_cov(innov, Side::Second, 5000, 3);
        // E t_5(mu) = mu sqrt(5/2) Gamma(2) / Gamma(5/2)
        let want = 1.5 * (2.5f64).sqrt() / 1.329_340_388_179_137;
        for m in means {
            assert!((m / want - 1.0).abs() < 0.05, "{m} vs {want}");
        }
    }

    #[test]
    fn zip_moments_match_direct_sums() {
        let (l, w) = (3.0f64, 0.4);
        // central moments of the mixture by summing the pmf
        let mut pmf = vec![0.0; 80];
        pmf[0] = 1.0 - w;
        let mut term = (-l).exp();
        for (j, slot) in pmf.iter_mut().enumerate() {
            if j > 0 {
                term *= l / j as f64;
            }
            *slot += w * term;
        }
        let mean: f64 = pmf.iter().enumerate().map(|(j, q)| j as f64 * q).sum();
        let c = |r: i32| -> f64 { pmf.iter().enumerate().map(|(j, q)| (j as f64 - mean).powi(r) * q).sum() };
        let (var, k4) = Innovation::ZeroInflatedPoisson { mean: l, nonzero_prob: w }.moments().unwrap();
        assert!((var - c(2)).abs() < 1e-12);
        assert!((k4 - (c(4) - 3.0 * c(2).powi(2))).abs() < 1e-10);
    }

    #[test]
    fn sample_is_reproducible() {
        let sigma = gen_covariance(&CovarianceSpec::new(CovarianceKind::M1, 12, 0)).unwrap();
        for innov in [Innovation::d1(), Innovation::d2(), Innovation::d3()] {
            let a = gen_sample(&sigma, &innov, Side::Second, 7, 42).unwrap();
            let b = gen_sample(&sigma, &innov, Side::Second, 7, 42).unwrap();
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn sample_rejects_indefinite_input() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            gen_sample(&bad, &Innovation::Gaussian, Side::First, 3, 0),
            Err(Error::NotPsd { .. })
        ));
    }

    #[test]
    fn alternative_structure() {
        let sigma = gen_covariance(&CovarianceSpec::new(CovarianceKind::M1, 80, 5)).unwrap();
        for seed in 0..5 {
            let alt = build_alternative(&sigma, seed).unwrap();
            assert_eq!(alt.q_support.len(), 2);
            let q = &alt.sigma2_star - &alt.sigma1_star;
            assert_symmetric(&q);
            let mut nonzero = 0;
            for k in 0..80 {
                for l in 0..80 {
                    if q[(k, l)] != 0.0 {
                        nonzero += 1;
                    }
                }
            }
            assert_eq!(nonzero, 4);
            for (&(k, l), &v) in alt.q_support.iter().zip(&alt.q_values) {
                assert!(k < l);
                assert!(v >= alt.tau / 2.0 && v <= 1.5 * alt.tau);
                assert!((q[(k, l)] - v).abs() <= 1e-12 * v);
            }
            assert_eq!(alt.tau, 8.0 * sigma.diagonal().max().max(80f64.ln().sqrt()));
            assert!(min_eigenvalue(&alt.sigma1_star).unwrap() >= 0.05 - 1e-10);
            assert!(min_eigenvalue(&alt.sigma2_star).unwrap() >= 0.05 - 1e-10);
        }
        assert!(build_alternative(&DMatrix::identity(39, 39), 0).is_err());
        let odd = build_alternative(&DMatrix::identity(60, 60), 0).unwrap();
        assert_eq!(odd.q_support.len(), 1);
    }

    #[test]
    fn signal_strength_scalar_case() {
        let p = 4;
        let s1 = DMatrix::identity(p, p);
        let ones = DMatrix::from_element(p, p, 1.0);
        assert_eq!(signal_strength(&s1, &s1, &ones, &ones, 10, 10).unwrap(), 0.0);
        let mut s2 = s1.clone();
        s2[(0, 1)] = 0.3;
        s2[(1, 0)] = 0.3;
        let g = signal_strength(&s1, &s2, &ones, &ones, 10, 10).unwrap();
        let want = 0.3 / (2.0f64 / 10.0).sqrt() / (4f64).ln().sqrt();
        assert!((g - want).abs() < 1e-15);
        s2[(0, 1)] = 0.6;
        s2[(1, 0)] = 0.6;
        let g2 = signal_strength(&s1, &s2, &ones, &ones, 10, 10).unwrap();
        assert!((g2 - 2.0 * g).abs() < 1e-14);
        let zeros = DMatrix::zeros(p, p);
        assert!(matches!(
            signal_strength(&s1, &s2, &zeros, &zeros, 10, 10),
            Err(Error::DegeneratePair { .. })
        ));
    }

    #[test]
    fn population_moments_match_gaussian_formula() {
        let sigma = gen_covariance(&CovarianceSpec::new(CovarianceKind::M2, 4, 0)).unwrap();
        let root = psd_sqrt(&sigma).unwrap().root;
        let (cov, s) = population_moments(&root, 1.0, 0.0);
        for k in 0..4 {
            for l in 0..4 {
                assert!((cov[(k, l)] - sigma[(k, l)]).abs() < 1e-12);
                let want = sigma[(k, k)] * sigma[(l, l)] + sigma[(k, l)].powi(2);
                assert!((s[(k, l)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn population_product_variance_by_monte_carlo() {
        // gamma innovations make the cumulant term visible
        let sigma = gen_covariance(&CovarianceSpec::new(CovarianceKind::M2, 3, 0)).unwrap();
        let innov = Innovation::d1();
        let (v, k4) = innov.moments().unwrap();
        let root = psd_sqrt(&sigma).unwrap().root;
        let (_, s) = population_moments(&root, v, k4);
        let x = gen_sample(&sigma, &innov, Side::First, 200_000, 6).unwrap();
        let m = compute_moment_summary(&x);
        for (k, l) in [(0, 0), (0, 2), (1, 2)] {
            let rel = m.s_hat.get(k, l) / s[(k, l)] - 1.0;
            assert!(rel.abs() < 0.05, "({k},{l}) rel {rel}");
        }
    }

    #[test]
    fn planted_signal_hits_target() {
        let sigma = DMatrix::identity(10, 10);
        let innov = Innovation::Gaussian;
        let alt = plant_single_entry(&sigma, (2, 5), 1.5, innov, 200, 200).unwrap();
        let design = Design::alternative(&alt, innov).unwrap();
        let g = design.signal_strength(200, 200).unwrap();
        assert!((g - 1.5).abs() < 1e-9, "{g}");
        let diff = &alt.sigma2_star - &alt.sigma1_star;
        assert_eq!(diff[(2, 5)], alt.q_values[0]);
        assert_eq!(diff[(5, 2)], alt.q_values[0]);
        assert!(plant_single_entry(&sigma, (2, 5), 50.0, innov, 20, 20).is_err());
        assert!(plant_single_entry(&sigma, (3, 3), 1.0, innov, 20, 20).is_err());
    }

    #[test]
    fn experiment_with_no_replications() {
        let spec = ExperimentSpec {
            cov: CovarianceSpec::new(CovarianceKind::M1, 12, 0),
            innov: Innovation::d1(),
            n1: 10,
            n2: 10,
            reps: 0,
            bootstrap: BootstrapConfig::new(50, 0.05, 0),
            alternative: false,
            seed: 0,
        };
        let s = run_experiment(&spec).unwrap();
        assert_eq!((s.bootstrap_rejections, s.clx_rejections), (0, 0));
        assert_eq!((s.bootstrap_rate, s.bootstrap_se), (0.0, 0.0));
        assert!(s.gamma.is_none());
    }

    #[test]
    fn experiment_is_thread_independent() {
        let mut spec = ExperimentSpec {
            cov: CovarianceSpec::new(CovarianceKind::M4, 15, 1),
            innov: Innovation::d3(),
            n1: 12,
            n2: 14,
            reps: 6,
            bootstrap: BootstrapConfig::new(60, 0.2, 0).with_threads(1),
            alternative: false,
            seed: 77,
        };
        let a = run_experiment(&spec).unwrap();
        spec.bootstrap = spec.bootstrap.with_threads(4);
        let b = run_experiment(&spec).unwrap();
        assert_eq!(a.bootstrap_rejections, b.bootstrap_rejections);
        assert_eq!(a.clx_rejections, b.clx_rejections);
    }

    #[test]
    fn kinds_parse() {
        assert_eq!("m3".parse::<CovarianceKind>().unwrap(), CovarianceKind::M3);
        assert_eq!(" D2".parse::<InnovationKind>().unwrap(), InnovationKind::D2);
        assert!("M5".parse::<CovarianceKind>().is_err());
        assert_eq!(Innovation::from_kind(InnovationKind::D3).label(), "D3");
    }
}

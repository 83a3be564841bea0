//! Sample matrices, moment estimators and symmetric eigen-utilities.
//!
//! All second- and fourth-moment estimators here use divisor `n`, not
//! `n - 1`:
//!
//! ```text
//! sigma_hat[k,l] = n^-1 sum_i (X_ik - Xbar_k)(X_il - Xbar_l)
//! s_hat[k,l]     = n^-1 sum_i {(X_ik - Xbar_k)(X_il - Xbar_l) - sigma_hat[k,l]}^2
//! ```

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::packed::{upper_pairs, PackedSym};

/// An `n x p` sample: rows are observations, columns are variables.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: DMatrix<f64>,
    column_names: Option<Vec<String>>,
}

impl DataMatrix {
    /// Validates and wraps `values`. Requires `n >= 2`, `p >= 2` and finite entries.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let (n, p) = values.shape();
        if n < 2 || p < 2 {
            return Err(Error::Dimension(format!(
                "a sample needs at least 2 observations and 2 variables, got {n} x {p}"
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            // column-major position
            let (i, k) = (pos % n, pos / n);
            return Err(invalid(format!(
                "non-finite value at observation {}, variable {}",
                i + 1,
                k + 1
            )));
        }
        Ok(Self {
            values,
            column_names: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != p) {
            return Err(Error::Dimension(format!(
                "row {} has {} values, expected {p}",
                i + 1,
                rows[i].len()
            )));
        }
        Self::new(DMatrix::from_fn(n, p, |i, k| rows[i][k]))
    }

    pub fn with_column_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.p() {
            return Err(Error::Dimension(format!(
                "{} column names for {} variables",
                names.len(),
                self.p()
            )));
        }
        self.column_names = Some(names);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn column_names(&self) -> Option<&[String]> {
        self.column_names.as_deref()
    }

    /// Display label of variable `k` (0-based): its column name, or `V{k+1}`.
    pub fn label(&self, k: usize) -> String {
        match &self.column_names {
            Some(names) => names[k].clone(),
            None => format!("V{}", k + 1),
        }
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.p()).map(|k| self.label(k)).collect()
    }

    /// New matrix whose column `j` is column `perm[j]` of `self`.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        let p = self.p();
        let mut seen = vec![false; p];
        if perm.len() != p {
            return Err(invalid(format!("permutation of length {} for {p} variables", perm.len())));
        }
        for &j in perm {
            if j >= p || std::mem::replace(&mut seen[j], true) {
                return Err(invalid(format!("not a permutation of 1..{p}")));
            }
        }
        let values = self.values.select_columns(perm);
        let column_names = self
            .column_names
            .as_ref()
            .map(|names| perm.iter().map(|&j| names[j].clone()).collect());
        Ok(Self {
            values,
            column_names,
        })
    }

    /// Swaps the roles of observations and variables. Column names are dropped.
    pub fn transpose(&self) -> Result<Self> {
        Self::new(self.values.transpose())
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.n() as f64;
        self.values
            .column_iter()
            .map(|c| c.iter().sum::<f64>() / n)
            .collect()
    }

    /// Data with each column centred at `means`.
    pub fn centered(&self, means: &[f64]) -> DMatrix<f64> {
        let mut c = self.values.clone();
        for (k, mut col) in c.column_iter_mut().enumerate() {
            col.add_scalar_mut(-means[k]);
        }
        c
    }
}

/// Per-sample means together with the packed covariance estimate and the
/// fourth-moment variance estimate of each centred product.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSummary {
    pub n: usize,
    pub means: Vec<f64>,
    pub sigma_hat: PackedSym,
    pub s_hat: PackedSym,
}

impl MomentSummary {
    pub fn p(&self) -> usize {
        self.means.len()
    }
}

pub fn compute_moment_summary(data: &DataMatrix) -> MomentSummary {
    let (n, p) = (data.n(), data.p());
    let means = data.column_means();
    let centered = data.centered(&means);
    let nf = n as f64;

    // Rows of the packed triangle are independent, so the parallel split
    // cannot change any value.
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..p)
        .into_par_iter()
        .map(|k| {
            let ck = centered.column(k);
            let mut sig = Vec::with_capacity(p - k);
            let mut s = Vec::with_capacity(p - k);
            for l in k..p {
                let cl = centered.column(l);
                let mut acc = 0.0;
                for i in 0..n {
                    acc += ck[i] * cl[i];
                }
                let sigma = acc / nf;
                let mut acc2 = 0.0;
                for i in 0..n {
                    let d = ck[i] * cl[i] - sigma;
                    acc2 += d * d;
                }
                sig.push(sigma);
                s.push(acc2 / nf);
            }
            (sig, s)
        })
        .collect();

    let mut sigma_hat = Vec::with_capacity(p * (p + 1) / 2);
    let mut s_hat = Vec::with_capacity(p * (p + 1) / 2);
    for (sig, s) in rows {
        sigma_hat.extend(sig);
        s_hat.extend(s);
    }
    MomentSummary {
        n,
        means,
        sigma_hat: PackedSym::from_packed(p, sigma_hat),
        s_hat: PackedSym::from_packed(p, s_hat),
    }
}

/// Outcome of [`check_nondegeneracy`].
#[derive(Debug, Clone, PartialEq)]
pub struct NondegeneracyReport {
    /// Minimum of `s_hat[k,l] / (sigma_hat[k,k] sigma_hat[l,l])` over pairs
    /// whose variables both have positive variance; `None` if there are none.
    pub min_ratio: Option<f64>,
    /// Pairs (0-based, `k <= l`) whose ratio falls below the tolerance.
    pub below_tol: Vec<(usize, usize)>,
    /// Variables (0-based) with zero sample variance.
    pub degenerate_variables: Vec<usize>,
}

impl NondegeneracyReport {
    pub fn is_clean(&self) -> bool {
        self.below_tol.is_empty() && self.degenerate_variables.is_empty()
    }
}

/// Empirical counterpart of the non-degeneracy condition on the centred
/// products. Purely diagnostic.
pub fn check_nondegeneracy(m: &MomentSummary, tol: f64) -> NondegeneracyReport {
    let p = m.p();
    let var = m.sigma_hat.diagonal();
    let degenerate_variables: Vec<usize> = (0..p).filter(|&k| var[k] <= 0.0).collect();
    let mut min_ratio: Option<f64> = None;
    let mut below_tol = Vec::new();
    for (k, l) in upper_pairs(p) {
        if var[k] <= 0.0 || var[l] <= 0.0 {
            continue;
        }
        let ratio = m.s_hat.get(k, l) / (var[k] * var[l]);
        min_ratio = Some(min_ratio.map_or(ratio, |r| r.min(ratio)));
        if ratio < tol {
            below_tol.push((k, l));
        }
    }
    NondegeneracyReport {
        min_ratio,
        below_tol,
        degenerate_variables,
    }
}

fn check_symmetric(s: &DMatrix<f64>) -> Result<()> {
    if !s.is_square() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {} x {}",
            s.nrows(),
            s.ncols()
        )));
    }
    let scale = s.amax().max(f64::MIN_POSITIVE);
    let p = s.nrows();
    for k in 0..p {
        for l in k + 1..p {
            if (s[(k, l)] - s[(l, k)]).abs() > 1e-12 * scale {
                return Err(invalid(format!(
                    "matrix is not symmetric at ({}, {})",
                    k + 1,
                    l + 1
                )));
            }
        }
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(invalid("matrix has non-finite entries"));
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(s: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(s)?;
    Ok(s.clone().symmetric_eigenvalues().min())
}

/// Principal square root of a symmetric PSD matrix, with the magnitude of
/// the most negative eigenvalue that was clamped to zero.
#[derive(Debug, Clone)]
pub struct SqrtFactor {
    pub root: DMatrix<f64>,
    pub clamped: f64,
}

/// Symmetric `R` with `R R = S`. Eigenvalues in `[-tol, 0)` are clamped to
/// zero; anything below `-tol` is rejected.
pub fn symmetric_sqrt(s: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    symmetric_sqrt_factor(s, tol).map(|f| f.root)
}

pub fn symmetric_sqrt_factor(s: &DMatrix<f64>, tol: f64) -> Result<SqrtFactor> {
    check_symmetric(s)?;
    let eig = SymmetricEigen::new(s.clone());
    sqrt_from_eigen(eig, tol)
}

/// [`symmetric_sqrt_factor`] with the tolerance set to `1e-10` times the
/// largest eigenvalue magnitude.
pub fn psd_sqrt(s: &DMatrix<f64>) -> Result<SqrtFactor> {
    check_symmetric(s)?;
    let eig = SymmetricEigen::new(s.clone());
    let scale = eig.eigenvalues.amax();
    sqrt_from_eigen(eig, 1e-10 * scale)
}

fn sqrt_from_eigen(eig: SymmetricEigen<f64, nalgebra::Dyn>, tol: f64) -> Result<SqrtFactor> {
    let mut clamped = 0.0_f64;
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -tol {
            return Err(Error::NotPsd { eigenvalue: *v, tol });
        }
        if *v < 0.0 {
            clamped = clamped.max(-*v);
            *v = 0.0;
        }
        *v = v.sqrt();
    }
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= roots[j];
    }
    let mut root = &scaled * q.transpose();
    // exact symmetry
    let p = root.nrows();
    for k in 0..p {
        for l in k + 1..p {
            let v = 0.5 * (root[(k, l)] + root[(l, k)]);
            root[(k, l)] = v;
            root[(l, k)] = v;
        }
    }
    Ok(SqrtFactor { root, clamped })
}

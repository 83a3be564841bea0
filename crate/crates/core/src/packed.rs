//! Packed storage for symmetric pair-indexed quantities.
//!
//! The upper triangle (diagonal included) is stored row by row, so the
//! linear order of the buffer is the lexicographic order of `(k, l)` with
//! `k <= l`. Reads of `(l, k)` are mirrored.

use nalgebra::DMatrix;

/// Linear position of `(k, l)`, `k <= l < p`, in the packed upper triangle.
#[inline]
pub fn upper_index(p: usize, k: usize, l: usize) -> usize {
    debug_assert!(k <= l && l < p);
    k * (2 * p - k + 1) / 2 + (l - k)
}

/// Linear position of `(k, l)`, `k < l < p`, in the packed strict upper triangle.
#[inline]
pub fn strict_upper_index(p: usize, k: usize, l: usize) -> usize {
    debug_assert!(k < l && l < p);
    k * (2 * p - k - 1) / 2 + (l - k - 1)
}

/// Pairs `(k, l)` with `k <= l < p` in packed order.
pub fn upper_pairs(p: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..p).flat_map(move |k| (k..p).map(move |l| (k, l)))
}

/// Pairs `(k, l)` with `k < l < p` in packed order.
pub fn strict_upper_pairs(p: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..p).flat_map(move |k| (k + 1..p).map(move |l| (k, l)))
}

/// A symmetric `p x p` matrix stored as its packed upper triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSym {
    dim: usize,
    data: Vec<f64>,
}

impl PackedSym {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    /// Builds the matrix by evaluating `f(k, l)` once per unordered pair.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = upper_pairs(dim).map(|(k, l)| f(k, l)).collect();
        Self { dim, data }
    }

    /// Wraps an already packed buffer; `data.len()` must be `dim (dim + 1) / 2`.
    pub fn from_packed(dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), dim * (dim + 1) / 2, "packed length mismatch");
        Self { dim, data }
    }

    /// Packs the upper triangle of a square matrix.
    pub fn from_dense_upper(m: &DMatrix<f64>) -> Self {
        assert!(m.is_square());
        Self::from_fn(m.nrows(), |k, l| m[(k, l)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, k: usize, l: usize) -> f64 {
        let (a, b) = if k <= l { (k, l) } else { (l, k) };
        self.data[upper_index(self.dim, a, b)]
    }

    #[inline]
    pub fn set(&mut self, k: usize, l: usize, value: f64) {
        let (a, b) = if k <= l { (k, l) } else { (l, k) };
        let idx = upper_index(self.dim, a, b);
        self.data[idx] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|k| self.get(k, k)).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |k, l| self.get(k, l))
    }
}

//! Dense linear-algebra helpers shared by the sketching and spectral code.
//!
//! Numerical rank everywhere follows the usual SVD cutoff
//! `sigma_max * max(rows, cols) * f64::EPSILON`, scaled by an optional factor.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Multiplier applied to the default rank cutoff. `1.0` is the standard SVD rule.
pub const DEFAULT_RCOND_FACTOR: f64 = 1.0;

pub fn rank_tolerance(sigma_max: f64, rows: usize, cols: usize) -> f64 {
    sigma_max * rows.max(cols).max(1) as f64 * f64::EPSILON
}

/// Orthonormal basis of `range(Aᵀ)` together with the singular values of `A`.
#[derive(Clone, Debug)]
pub struct RowSpaceBasis {
    /// `n × r` matrix with orthonormal columns.
    pub basis: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub tolerance: f64,
    /// Set when a singular value sits close enough to the cutoff that the
    /// rank decision is fragile.
    pub ambiguous: bool,
}

impl RowSpaceBasis {
    pub fn new(a: &DMatrix<f64>) -> Self {
        Self::with_factor(a, DEFAULT_RCOND_FACTOR)
    }

    pub fn with_factor(a: &DMatrix<f64>, factor: f64) -> Self {
        let (m, n) = a.shape();
        if m == 0 || n == 0 {
            return Self {
                basis: DMatrix::zeros(n, 0),
                singular_values: Vec::new(),
                rank: 0,
                tolerance: 0.0,
                ambiguous: false,
            };
        }
        let svd = a.clone().svd(false, true);
        let v_t = svd.v_t.expect("requested V");
        let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        let sigma_max = sv.iter().copied().fold(0.0, f64::max);
        let tol = factor * rank_tolerance(sigma_max, m, n);
        let keep: Vec<usize> = (0..sv.len()).filter(|&k| sv[k] > tol && sv[k] > 0.0).collect();
        let mut basis = DMatrix::zeros(n, keep.len());
        for (c, &k) in keep.iter().enumerate() {
            basis.set_column(c, &v_t.row(k).transpose());
        }
        let ambiguous = sigma_max > 0.0
            && sv
                .iter()
                .any(|&s| s > 0.0 && ((s - tol) / sigma_max).abs() < 1e-10);
        Self {
            basis,
            singular_values: sv,
            rank: keep.len(),
            tolerance: tol,
            ambiguous,
        }
    }

    /// Coordinates of `v` in the basis.
    pub fn coords(&self, v: &DVector<f64>) -> DVector<f64> {
        self.basis.tr_mul(v)
    }

    /// Component of `v` orthogonal to `range(Aᵀ)`.
    pub fn orthogonal_residual(&self, v: &DVector<f64>) -> DVector<f64> {
        v - &self.basis * self.coords(v)
    }
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sorted_eigenvalues(sym: &DMatrix<f64>) -> Vec<f64> {
    if sym.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(sym.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Numerical rank of a symmetric positive semidefinite matrix.
pub fn psd_rank(sym: &DMatrix<f64>) -> usize {
    let ev = sorted_eigenvalues(sym);
    let top = ev.iter().copied().fold(0.0, f64::max);
    let tol = rank_tolerance(top, sym.nrows(), sym.ncols());
    ev.iter().filter(|&&e| e > tol && e > 0.0).count()
}

/// Smallest eigenvalue above the rank cutoff, or `None` for the zero matrix.
pub fn smallest_nonzero_eigenvalue(sym: &DMatrix<f64>) -> Option<f64> {
    let ev = sorted_eigenvalues(sym);
    let top = ev.iter().copied().fold(0.0, f64::max);
    let tol = rank_tolerance(top, sym.nrows(), sym.ncols());
    ev.into_iter().find(|&e| e > tol && e > 0.0)
}

/// Pseudo-inverse of a symmetric PSD Gram matrix `G = B Bᵀ`, returned as a
/// factor `F` with `G⁺ = Fᵀ F`. Eigenvalues are cut where the implied
/// singular value of `B` falls below the rank tolerance of a `rows × cols` matrix.
pub fn gram_pinv_factor(gram: &DMatrix<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    let k = gram.nrows();
    if k == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(gram.clone());
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let tol = rank_tolerance(lmax.max(0.0).sqrt(), rows, cols);
    let keep: Vec<usize> = (0..k)
        .filter(|&j| eig.eigenvalues[j] > 0.0 && eig.eigenvalues[j].sqrt() > tol)
        .collect();
    let mut f = DMatrix::zeros(keep.len(), k);
    for (r, &j) in keep.iter().enumerate() {
        let scale = 1.0 / eig.eigenvalues[j].sqrt();
        for c in 0..k {
            f[(r, c)] = scale * eig.eigenvectors[(c, j)];
        }
    }
    f
}

/// Largest eigenvalue of a symmetric PSD matrix.
pub fn largest_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    sorted_eigenvalues(sym).last().copied().unwrap_or(0.0)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

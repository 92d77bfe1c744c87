//! Finite sketch families, the projectors they induce, and sketched losses.
//!
//! A sketch `S_i` selects either one row of `A` (row sketch, `S_i = e_i`) or a
//! block of rows. With `H_i = S_i (S_iᵀ A Aᵀ S_i)⁺ S_iᵀ` the sketched loss is
//! `g_i(x) = (Ax − b)ᵀ H_i (Ax − b)` and `Z_i = Aᵀ H_i A` is the orthogonal
//! projector onto `range(Aᵀ S_i)`.
//!
//! Block pseudo-inverses are factorized once at construction and stored as
//! `F_i` with `(S_iᵀ A Aᵀ S_i)⁺ = F_iᵀ F_i`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SbpError};
use crate::linalg::{self, RowSpaceBasis};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SketchKind {
    Row,
    Block,
}

#[derive(Clone, Debug)]
pub struct SketchSet {
    kind: SketchKind,
    m: usize,
    n: usize,
    /// Row indices per sketch; empty for row sketches (block `i` is `{i}`).
    blocks: Vec<Vec<usize>>,
    /// `0..m` for row sketches, so `block(i)` can return a slice.
    row_indices: Vec<usize>,
    /// `‖S_iᵀA‖_F²` per sketch.
    frobenius_sq: Vec<f64>,
    /// `‖S_iᵀA‖₂²` per sketch.
    spectral_sq: Vec<f64>,
    /// Pseudo-inverse factors, block sketches only.
    pinv_factors: Vec<DMatrix<f64>>,
}

impl SketchSet {
    /// Row sketches `S_i = e_i`, `q = m`.
    pub fn rows(a: &DMatrix<f64>) -> Self {
        let (m, n) = a.shape();
        let norms: Vec<f64> = a.row_iter().map(|r| r.norm_squared()).collect();
        Self {
            kind: SketchKind::Row,
            m,
            n,
            blocks: Vec::new(),
            row_indices: (0..m).collect(),
            frobenius_sq: norms.clone(),
            spectral_sq: norms,
            pinv_factors: Vec::new(),
        }
    }

    /// Block sketches selecting the given row subsets. Blocks may overlap and
    /// may differ in size; each must be nonempty with indices in `[0, m)`.
    pub fn blocks(a: &DMatrix<f64>, blocks: Vec<Vec<usize>>) -> Result<Self> {
        let (m, n) = a.shape();
        if blocks.is_empty() {
            return Err(SbpError::InvalidParameter("sketch family is empty".into()));
        }
        let mut frobenius_sq = Vec::with_capacity(blocks.len());
        let mut spectral_sq = Vec::with_capacity(blocks.len());
        let mut pinv_factors = Vec::with_capacity(blocks.len());
        for (bi, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(SbpError::InvalidParameter(format!("block {bi} is empty")));
            }
            if let Some(&bad) = block.iter().find(|&&r| r >= m) {
                return Err(SbpError::IndexOutOfRange { index: bad, len: m });
            }
            let sub = a.select_rows(block.iter());
            let gram = &sub * sub.transpose();
            frobenius_sq.push(sub.norm_squared());
            spectral_sq.push(linalg::largest_eigenvalue(&gram));
            pinv_factors.push(linalg::gram_pinv_factor(&gram, block.len(), n));
        }
        Ok(Self {
            kind: SketchKind::Block,
            m,
            n,
            blocks,
            row_indices: Vec::new(),
            frobenius_sq,
            spectral_sq,
            pinv_factors,
        })
    }

    /// Partition `[0, m)` into consecutive blocks of `size` rows (the last may be shorter).
    pub fn contiguous_blocks(a: &DMatrix<f64>, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(SbpError::InvalidParameter("block size must be positive".into()));
        }
        let m = a.nrows();
        let blocks = (0..m)
            .step_by(size)
            .map(|s| (s..(s + size).min(m)).collect())
            .collect();
        Self::blocks(a, blocks)
    }

    pub fn kind(&self) -> SketchKind {
        self.kind
    }

    /// Number of sketches `q`.
    pub fn len(&self) -> usize {
        match self.kind {
            SketchKind::Row => self.m,
            SketchKind::Block => self.blocks.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nrows(&self) -> usize {
        self.m
    }

    pub fn ncols(&self) -> usize {
        self.n
    }

    /// Row indices of sketch `i`.
    pub fn block(&self, i: usize) -> &[usize] {
        match self.kind {
            SketchKind::Row => &self.row_indices[i..i + 1],
            SketchKind::Block => &self.blocks[i],
        }
    }

    /// `‖S_iᵀA‖_F²` for every sketch.
    pub fn frobenius_weights(&self) -> &[f64] {
        &self.frobenius_sq
    }

    /// `‖S_iᵀA‖₂²`.
    pub fn spectral_norm_sq(&self, i: usize) -> f64 {
        self.spectral_sq[i]
    }

    pub fn pinv_factor(&self, i: usize) -> Option<&DMatrix<f64>> {
        self.pinv_factors.get(i)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            Err(SbpError::IndexOutOfRange {
                index: i,
                len: self.len(),
            })
        } else {
            Ok(())
        }
    }

    fn check_matrix(&self, a: &DMatrix<f64>) -> Result<()> {
        if a.shape() != (self.m, self.n) {
            return Err(SbpError::DimensionMismatch(format!(
                "sketch family built for {}×{}, matrix is {}×{}",
                self.m,
                self.n,
                a.nrows(),
                a.ncols()
            )));
        }
        Ok(())
    }

    /// `g_i` from a residual `r = Ax − b`. Zero rows give loss 0.
    pub fn loss_from_residual(&self, i: usize, r: &[f64]) -> f64 {
        match self.kind {
            SketchKind::Row => {
                let w = self.frobenius_sq[i];
                if w == 0.0 {
                    0.0
                } else {
                    r[i] * r[i] / w
                }
            }
            SketchKind::Block => {
                let f = &self.pinv_factors[i];
                let block = &self.blocks[i];
                let mut total = 0.0;
                for row in 0..f.nrows() {
                    let mut s = 0.0;
                    for (c, &ri) in block.iter().enumerate() {
                        s += f[(row, c)] * r[ri];
                    }
                    total += s * s;
                }
                total
            }
        }
    }

    /// Flops charged for one `loss_from_residual` call.
    pub fn loss_cost(&self, i: usize) -> f64 {
        match self.kind {
            SketchKind::Row => 2.0,
            SketchKind::Block => {
                let f = &self.pinv_factors[i];
                (2 * f.nrows() * f.ncols() + 2 * f.nrows()) as f64
            }
        }
    }

    /// `y = H_i-solve` for block sketches: `(S_iᵀAAᵀS_i)⁺ r_τ`.
    pub(crate) fn apply_gram_pinv(&self, i: usize, r_block: &DVector<f64>) -> DVector<f64> {
        let f = &self.pinv_factors[i];
        f.tr_mul(&(f * r_block))
    }

    /// `Z_i v`.
    pub fn apply_z(&self, i: usize, a: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_index(i)?;
        self.check_matrix(a)?;
        if v.len() != self.n {
            return Err(SbpError::DimensionMismatch(format!(
                "vector has length {}, expected {}",
                v.len(),
                self.n
            )));
        }
        Ok(match self.kind {
            SketchKind::Row => {
                let w = self.frobenius_sq[i];
                if w == 0.0 {
                    DVector::zeros(self.n)
                } else {
                    let row = a.row(i);
                    let c = row.dot(&v.transpose()) / w;
                    row.transpose() * c
                }
            }
            SketchKind::Block => {
                let sub = a.select_rows(self.blocks[i].iter());
                let y = self.apply_gram_pinv(i, &(&sub * v));
                sub.tr_mul(&y)
            }
        })
    }

    /// Factor `K_i` (k × n) with `Z_i = K_iᵀ K_i`.
    pub fn projector_factor(&self, i: usize, a: &DMatrix<f64>) -> DMatrix<f64> {
        match self.kind {
            SketchKind::Row => {
                let w = self.frobenius_sq[i];
                if w == 0.0 {
                    DMatrix::zeros(0, self.n)
                } else {
                    DMatrix::from_row_slice(1, self.n, (a.row(i) / w.sqrt()).as_slice())
                }
            }
            SketchKind::Block => {
                let sub = a.select_rows(self.blocks[i].iter());
                &self.pinv_factors[i] * sub
            }
        }
    }

    /// Explicit `Z_i` (n × n).
    pub fn projector(&self, i: usize, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_index(i)?;
        self.check_matrix(a)?;
        let k = self.projector_factor(i, a);
        Ok(k.tr_mul(&k))
    }
}

/// Sketched losses for the current iterate with per-entry freshness.
#[derive(Clone, Debug)]
pub struct LossVector {
    values: Vec<f64>,
    fresh: Vec<bool>,
}

impl LossVector {
    pub fn new(q: usize) -> Self {
        Self {
            values: vec![0.0; q],
            fresh: vec![false; q],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        let q = values.len();
        Self {
            values,
            fresh: vec![true; q],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn set(&mut self, i: usize, value: f64) {
        self.values[i] = value.max(0.0);
        self.fresh[i] = true;
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        self.fresh[i].then_some(self.values[i])
    }

    /// Raw values; stale entries hold whatever was last written.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn invalidate(&mut self) {
        self.fresh.iter_mut().for_each(|f| *f = false);
    }

    pub fn is_fresh(&self, i: usize) -> bool {
        self.fresh[i]
    }
}

fn check_system(sketch: &SketchSet, a: &DMatrix<f64>, x: &DVector<f64>, b: &DVector<f64>) -> Result<()> {
    sketch.check_matrix(a)?;
    if x.len() != a.ncols() || b.len() != a.nrows() {
        return Err(SbpError::DimensionMismatch(format!(
            "A is {}×{}, x has length {}, b has length {}",
            a.nrows(),
            a.ncols(),
            x.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `g_i(x) = ‖Ax − b‖²_{H_i}`.
pub fn sketched_loss(
    sketch: &SketchSet,
    i: usize,
    a: &DMatrix<f64>,
    x: &DVector<f64>,
    b: &DVector<f64>,
) -> Result<f64> {
    check_system(sketch, a, x, b)?;
    sketch.check_index(i)?;
    let r = a * x - b;
    Ok(sketch.loss_from_residual(i, r.as_slice()))
}

/// `Z_i v`.
pub fn apply_z(sketch: &SketchSet, i: usize, a: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    sketch.apply_z(i, a, v)
}

pub(crate) fn validate_interior_probability(p: &[f64], q: usize) -> Result<()> {
    if p.len() != q {
        return Err(SbpError::InvalidProbability(format!(
            "expected {q} entries, got {}",
            p.len()
        )));
    }
    if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
        return Err(SbpError::InvalidProbability(format!(
            "entry {i} is {v}; all entries must be strictly positive"
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-12 * (q as f64).max(1.0) {
        return Err(SbpError::InvalidProbability(format!("entries sum to {sum}")));
    }
    Ok(())
}

/// `E_{i∼p}[Z_i] = Σ p_i Z_i`.
pub fn expected_projector(sketch: &SketchSet, a: &DMatrix<f64>, p: &[f64]) -> Result<DMatrix<f64>> {
    sketch.check_matrix(a)?;
    validate_interior_probability(p, sketch.len())?;
    let n = sketch.ncols();
    let mut out = DMatrix::zeros(n, n);
    for (i, &pi) in p.iter().enumerate() {
        let k = sketch.projector_factor(i, a);
        out += k.tr_mul(&k) * pi;
    }
    // Symmetrize away rounding.
    let sym = (&out + out.transpose()) * 0.5;
    Ok(sym)
}

/// Whether `Null(A) = Null(E_{i∼p}[Z_i])`, decided as `rank(E[Z]) = rank(A)`.
pub fn check_exactness(sketch: &SketchSet, a: &DMatrix<f64>, p: &[f64]) -> Result<bool> {
    let ez = expected_projector(sketch, a, p)?;
    let rank_a = RowSpaceBasis::new(a).rank;
    Ok(linalg::psd_rank(&ez) == rank_a)
}

/// Ranks behind [`check_exactness`], for error reporting.
pub(crate) fn exactness_ranks(sketch: &SketchSet, a: &DMatrix<f64>, p: &[f64]) -> Result<(usize, usize)> {
    let ez = expected_projector(sketch, a, p)?;
    Ok((linalg::psd_rank(&ez), RowSpaceBasis::new(a).rank))
}

/// Uniform probability vector of length `q`.
pub fn uniform_probabilities(q: usize) -> Vec<f64> {
    vec![1.0 / q as f64; q]
}

/// `p_i ∝ ‖S_iᵀA‖_F²`. Zero rows get probability zero.
pub fn frobenius_probabilities(sketch: &SketchSet) -> Vec<f64> {
    let w = sketch.frobenius_weights();
    let total: f64 = w.iter().sum();
    if total == 0.0 {
        return uniform_probabilities(w.len());
    }
    w.iter().map(|v| v / total).collect()
}

//! Spectral constants and per-rule contraction bounds.
//!
//! Everything is computed in the reduced space `range(Aᵀ)` with an orthonormal
//! basis `U`. Sketch `i` contributes `M_i = Uᵀ Z_i U = F_iᵀ F_i`, so that
//! `‖Uw‖²_{Z_i} = ‖F_i w‖²`.
//!
//! * `σ_p² = λ_min(Σ p_i M_i)` is an eigenvalue problem.
//! * `σ_∞² = min_{‖w‖=1} max_i ‖F_i w‖²` is a min-max on the sphere. It is
//!   bracketed: any `p` gives a lower bound and any unit `w` an upper bound.
//!   For rank ≤ 3 a grid over the sphere plus a Lipschitz argument gives a
//!   certified lower bound as well.
//! * The block constants replace `max_i` by `E_τ max_{i∈τ}` over size-β blocks.
//!   That expectation is evaluated exactly from order statistics.

use std::collections::BTreeMap;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Result, SbpError};
use crate::linalg::{self, RowSpaceBasis};
use crate::sampling::{BlockDistribution, RuleKind};
use crate::sketching::{self, frobenius_probabilities, uniform_probabilities, validate_interior_probability, SketchSet};
use crate::solver::Method;

/// Largest number of blocks enumerated literally.
pub const DEFAULT_ENUMERATION_CAP: u64 = 100_000;

/// `1 / max_i (1 − p_i)`.
pub fn eta(p: &[f64]) -> Result<f64> {
    validate_interior_probability(p, p.len())?;
    if p.len() < 2 {
        return Err(SbpError::InvalidProbability("eta needs at least two entries".into()));
    }
    let worst = p.iter().map(|pi| 1.0 - pi).fold(0.0, f64::max);
    Ok(1.0 / worst)
}

/// The reduced factors `F_i` of every sketch.
#[derive(Clone, Debug)]
pub struct ReducedSketches {
    pub basis: RowSpaceBasis,
    pub factors: Vec<DMatrix<f64>>,
}

impl ReducedSketches {
    pub fn new(sketch: &SketchSet, a: &DMatrix<f64>) -> Result<Self> {
        if a.shape() != (sketch.nrows(), sketch.ncols()) {
            return Err(SbpError::DimensionMismatch("sketch family does not match A".into()));
        }
        let basis = RowSpaceBasis::new(a);
        let factors = (0..sketch.len())
            .map(|i| sketch.projector_factor(i, a) * &basis.basis)
            .collect();
        Ok(Self { basis, factors })
    }

    pub fn rank(&self) -> usize {
        self.basis.rank
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// `‖F_i w‖²` for every `i`, written into `out`.
    pub fn values_into(&self, w: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.factors) {
            let mut s = 0.0;
            for row in 0..f.nrows() {
                let mut d = 0.0;
                for (c, &wc) in w.iter().enumerate() {
                    d += f[(row, c)] * wc;
                }
                s += d * d;
            }
            *o = s;
        }
    }

    /// `Σ p_i M_i`.
    pub fn averaged(&self, p: &[f64]) -> DMatrix<f64> {
        let r = self.rank();
        let mut out = DMatrix::zeros(r, r);
        for (f, &pi) in self.factors.iter().zip(p) {
            if pi != 0.0 {
                out += f.tr_mul(f) * pi;
            }
        }
        (&out + out.transpose()) * 0.5
    }

    /// `2 M_i w`.
    fn gradient_into(&self, i: usize, w: &[f64], out: &mut [f64], scale: f64) {
        let f = &self.factors[i];
        for row in 0..f.nrows() {
            let mut d = 0.0;
            for (c, &wc) in w.iter().enumerate() {
                d += f[(row, c)] * wc;
            }
            for (c, o) in out.iter_mut().enumerate() {
                *o += 2.0 * scale * d * f[(row, c)];
            }
        }
    }
}

/// `σ_p²`: smallest nonzero eigenvalue of `E_{i∼p}[Z_i]`.
pub fn sigma_p_squared(sketch: &SketchSet, a: &DMatrix<f64>, p: &[f64]) -> Result<f64> {
    let reduced = ReducedSketches::new(sketch, a)?;
    sigma_p_reduced(sketch, a, &reduced, p)
}

fn sigma_p_reduced(sketch: &SketchSet, a: &DMatrix<f64>, reduced: &ReducedSketches, p: &[f64]) -> Result<f64> {
    validate_interior_probability(p, sketch.len())?;
    if reduced.rank() == 0 {
        return Err(SbpError::InvalidParameter("A is the zero matrix".into()));
    }
    let (rank_projector, rank_matrix) = sketching::exactness_ranks(sketch, a, p)?;
    if rank_projector != rank_matrix {
        return Err(SbpError::ExactnessViolated {
            rank_projector,
            rank_matrix,
        });
    }
    let ev = linalg::sorted_eigenvalues(&reduced.averaged(p));
    Ok(ev[0].max(0.0))
}

/// Minimizer of the smallest eigenvalue of `Σ p_i M_i`, as a unit vector in reduced coordinates.
fn min_eigenvector(reduced: &ReducedSketches, p: &[f64]) -> DVector<f64> {
    let eig = nalgebra::SymmetricEigen::new(reduced.averaged(p));
    let (k, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("rank ≥ 1");
    eig.eigenvectors.column(k).into_owned()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bracket {
    pub lower: f64,
    pub upper: f64,
}

impl Bracket {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        self.lower - tol <= v && v <= self.upper + tol
    }
}

#[derive(Clone, Debug)]
pub struct SpectralOptions {
    pub restarts: usize,
    pub iters: usize,
    pub seed: u64,
    /// Grid certification for rank ≤ 3.
    pub grid: bool,
    /// Angular resolution of the rank-2 grid.
    pub grid_points_2d: usize,
    /// Resolution per angle of the rank-3 grid (polar, azimuthal = 4×).
    pub grid_points_3d: usize,
    pub enumeration_cap: u64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            restarts: 16,
            iters: 400,
            seed: 0x5eed,
            grid: true,
            grid_points_2d: 10_000,
            grid_points_3d: 500,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

/// Result of a min-max search: the bracket and the best unit vector found.
#[derive(Clone, Debug)]
pub struct MinMaxEstimate {
    pub bracket: Bracket,
    /// Best point found, in reduced coordinates.
    pub argmin: DVector<f64>,
    pub grid_certified: bool,
}

/// Riemannian subgradient descent of `obj` on the unit sphere of `R^r`.
/// `obj(w, grad)` returns the value and writes a subgradient.
fn sphere_descent(
    obj: &(dyn Fn(&[f64], &mut [f64]) -> f64 + Sync),
    start: &DVector<f64>,
    iters: usize,
) -> (f64, DVector<f64>) {
    let r = start.len();
    let mut w = start.normalize();
    let mut grad = vec![0.0; r];
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut best = (obj(w.as_slice(), &mut grad), w.clone());
    for t in 0..iters {
        let along: f64 = w.iter().zip(&grad).map(|(a, b)| a * b).sum();
        let mut tangent = DVector::from_iterator(r, grad.iter().zip(w.iter()).map(|(g, wi)| g - along * wi));
        let norm = tangent.norm();
        if norm == 0.0 {
            break;
        }
        tangent /= norm;
        let step = 0.5 / ((t + 1) as f64).sqrt();
        w -= tangent * step;
        w.normalize_mut();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let v = obj(w.as_slice(), &mut grad);
        if v < best.0 {
            best = (v, w.clone());
        }
    }
    best
}

fn random_unit(r: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = DVector::from_fn(r, |_, _| StandardNormal.sample(&mut rng));
    if v.norm() == 0.0 {
        DVector::from_element(r, 1.0).normalize()
    } else {
        v.normalize()
    }
}

/// Descent from random starts plus the supplied ones; returns the best value and point.
fn multi_start(
    obj: &(dyn Fn(&[f64], &mut [f64]) -> f64 + Sync),
    r: usize,
    starts: &[DVector<f64>],
    options: &SpectralOptions,
) -> (f64, DVector<f64>) {
    let mut all: Vec<DVector<f64>> = starts.to_vec();
    all.extend((0..options.restarts).map(|k| random_unit(r, options.seed.wrapping_add(k as u64 * 0x9e37_79b9))));
    all.par_iter()
        .map(|s| sphere_descent(obj, s, options.iters))
        .collect::<Vec<_>>()
        .into_iter()
        .fold((f64::INFINITY, DVector::zeros(r)), |best, cand| if cand.0 < best.0 { cand } else { best })
}

fn max_objective(reduced: &ReducedSketches) -> impl Fn(&[f64], &mut [f64]) -> f64 + Sync + '_ {
    move |w: &[f64], grad: &mut [f64]| {
        let mut vals = vec![0.0; reduced.len()];
        reduced.values_into(w, &mut vals);
        let (i, v) = vals
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, c| if c.1 > b.1 { c } else { b });
        reduced.gradient_into(i, w, grad, 1.0);
        v
    }
}

/// Grid minimum of `h(w) = max_i ‖F_i w‖²` over a covering of the half sphere,
/// with its covering radius (chordal).
fn grid_minimum(reduced: &ReducedSketches, options: &SpectralOptions) -> Option<(f64, DVector<f64>, f64)> {
    let r = reduced.rank();
    let mut vals = vec![0.0; reduced.len()];
    let mut eval = |w: &[f64]| -> f64 {
        reduced.values_into(w, &mut vals);
        vals.iter().copied().fold(0.0, f64::max)
    };
    match r {
        1 => {
            let w = [1.0];
            Some((eval(&w), DVector::from_element(1, 1.0), 0.0))
        }
        2 => {
            let n = options.grid_points_2d.max(1);
            let delta = std::f64::consts::PI / n as f64;
            let mut best = (f64::INFINITY, 0.0);
            for k in 0..n {
                let phi = (k as f64 + 0.5) * delta;
                let v = eval(&[phi.cos(), phi.sin()]);
                if v < best.0 {
                    best = (v, phi);
                }
            }
            Some((best.0, DVector::from_vec(vec![best.1.cos(), best.1.sin()]), delta / 2.0))
        }
        3 => {
            let nt = options.grid_points_3d.max(1);
            let np = 4 * nt;
            let dt = std::f64::consts::FRAC_PI_2 / nt as f64;
            let dp = 2.0 * std::f64::consts::PI / np as f64;
            let mut best = (f64::INFINITY, [0.0; 3]);
            for a in 0..nt {
                let theta = (a as f64 + 0.5) * dt;
                let (st, ct) = theta.sin_cos();
                for b in 0..np {
                    let phi = (b as f64 + 0.5) * dp;
                    let w = [st * phi.cos(), st * phi.sin(), ct];
                    let v = eval(&w);
                    if v < best.0 {
                        best = (v, w);
                    }
                }
            }
            // Every point is within half a cell in each angle of a grid node.
            let radius = 0.5 * (dt * dt + dp * dp).sqrt();
            Some((best.0, DVector::from_row_slice(&best.1), radius))
        }
        _ => None,
    }
}

/// Bracket for `σ_∞²`. The lower end is the best of `σ_p²` over the uniform
/// and row-norm distributions (and the grid certificate when available).
pub fn sigma_inf_squared_bracket(sketch: &SketchSet, a: &DMatrix<f64>, options: &SpectralOptions) -> Result<MinMaxEstimate> {
    let reduced = ReducedSketches::new(sketch, a)?;
    sigma_inf_reduced(sketch, a, &reduced, options)
}

fn candidate_distributions(sketch: &SketchSet) -> Vec<Vec<f64>> {
    let mut out = vec![uniform_probabilities(sketch.len())];
    let rownorm = frobenius_probabilities(sketch);
    if rownorm.iter().all(|&p| p > 0.0) && rownorm != out[0] {
        out.push(rownorm);
    }
    out
}

fn sigma_inf_reduced(
    sketch: &SketchSet,
    a: &DMatrix<f64>,
    reduced: &ReducedSketches,
    options: &SpectralOptions,
) -> Result<MinMaxEstimate> {
    let r = reduced.rank();
    if r == 0 {
        return Err(SbpError::InvalidParameter("A is the zero matrix".into()));
    }
    let mut lower: f64 = 0.0;
    let mut starts = Vec::new();
    for p in candidate_distributions(sketch) {
        match sigma_p_reduced(sketch, a, reduced, &p) {
            Ok(s) => lower = lower.max(s),
            Err(SbpError::ExactnessViolated { .. }) => {}
            Err(e) => return Err(e),
        }
        starts.push(min_eigenvector(reduced, &p));
    }
    let mut grid_certified = false;
    let mut grid_lower = 0.0;
    if options.grid {
        if let Some((gmin, gw, radius)) = grid_minimum(reduced, options) {
            // h is 2-Lipschitz in the chordal distance since every ‖M_i‖ ≤ 1.
            grid_lower = (gmin - 2.0 * radius).max(0.0);
            grid_certified = true;
            starts.push(gw);
        }
    }
    let obj = max_objective(reduced);
    let (upper, argmin) = multi_start(&obj, r, &starts, options);
    let lower = lower.max(grid_lower).min(upper);
    Ok(MinMaxEstimate {
        bracket: Bracket { lower, upper },
        argmin,
        grid_certified,
    })
}

/// Table of `ln k!` for `k ≤ n`.
fn ln_factorials(n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n + 1];
    for k in 1..=n {
        t[k] = t[k - 1] + (k as f64).ln();
    }
    t
}

fn ln_binom(t: &[f64], n: usize, k: usize) -> Option<f64> {
    (k <= n).then(|| t[n] - t[k] - t[n - k])
}

/// Exact `P(τ has its largest value at sorted position k)` for every `k`,
/// given values sorted descending. `weights` follow the same order.
///
/// Uniform blocks: `C(q−k, β−1)/C(q, β)`. Weighted blocks
/// `p(τ) = Σ_{j∈τ} w_j / (W·C(q−1, β−1))`:
/// `[w_(k) C(q−k, β−1) + S_k C(q−k−1, β−2)] / (W·C(q−1, β−1))`, `S_k = Σ_{l>k} w_(l)`.
fn max_position_probabilities(q: usize, beta: usize, weights: Option<&[f64]>, lf: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; q];
    match weights {
        None => {
            let total = ln_binom(lf, q, beta).expect("beta ≤ q");
            for (k0, o) in out.iter_mut().enumerate() {
                if let Some(c) = ln_binom(lf, q - 1 - k0, beta - 1) {
                    *o = (c - total).exp();
                }
            }
        }
        Some(w) => {
            let total_w: f64 = w.iter().sum();
            let base = ln_binom(lf, q - 1, beta - 1).expect("beta ≤ q");
            let mut suffix = total_w;
            for k0 in 0..q {
                suffix -= w[k0];
                let rest = (q - 1 - k0) as usize;
                let own = ln_binom(lf, rest, beta - 1).map_or(0.0, |c| w[k0] * (c - base).exp());
                let others = if beta >= 2 {
                    ln_binom(lf, rest.saturating_sub(1), beta - 2)
                        .filter(|_| rest >= 1)
                        .map_or(0.0, |c| suffix.max(0.0) * (c - base).exp())
                } else {
                    0.0
                };
                out[k0] = (own + others) / total_w;
            }
        }
    }
    out
}

/// `E_τ max_{i∈τ} s_i` over size-β blocks, and the probability that each index is the block maximum.
pub fn expected_block_max(values: &[f64], beta: usize, dist: &BlockDistribution) -> (f64, Vec<f64>) {
    let q = values.len();
    let lf = ln_factorials(q);
    let order: Vec<usize> = (0..q)
        .sorted_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)))
        .collect();
    let weights: Option<Vec<f64>> = match dist {
        BlockDistribution::Uniform => None,
        BlockDistribution::Weighted(w) if w.iter().sum::<f64>() > 0.0 => Some(order.iter().map(|&i| w[i]).collect()),
        BlockDistribution::Weighted(_) => None,
    };
    let probs = max_position_probabilities(q, beta, weights.as_deref(), &lf);
    let mut by_index = vec![0.0; q];
    let mut e = 0.0;
    for (pos, &i) in order.iter().enumerate() {
        by_index[i] = probs[pos];
        e += probs[pos] * values[i];
    }
    (e, by_index)
}

/// `p3_i = Σ_{τ∋i} p1(τ) / β`: probability that index `i` is drawn when a
/// block is drawn from `p1` and then an element uniformly from it.
pub fn joint_probability(q: usize, beta: usize, dist: &BlockDistribution, enumeration_cap: u64) -> Result<(Vec<f64>, bool)> {
    if beta == 0 || beta > q {
        return Err(SbpError::InvalidParameter(format!("beta = {beta} outside [1, {q}]")));
    }
    let lf = ln_factorials(q);
    let count = ln_binom(&lf, q, beta).expect("beta ≤ q").exp();
    let weights = match dist {
        BlockDistribution::Weighted(w) if w.iter().sum::<f64>() > 0.0 => Some(w.as_slice()),
        _ => None,
    };
    if count <= enumeration_cap as f64 {
        let mut p3 = vec![0.0; q];
        let blocks: Vec<Vec<usize>> = (0..q).combinations(beta).collect();
        let masses: Vec<f64> = match weights {
            None => vec![1.0; blocks.len()],
            Some(w) => blocks.iter().map(|b| b.iter().map(|&i| w[i]).sum()).collect(),
        };
        let total: f64 = masses.iter().sum();
        for (block, mass) in blocks.iter().zip(&masses) {
            for &i in block {
                p3[i] += mass / total / beta as f64;
            }
        }
        return Ok((p3, true));
    }
    let p3 = match weights {
        None => uniform_probabilities(q),
        Some(w) => {
            // Σ_{τ∋i} Σ_{j∈τ} w_j = w_i C(q−1, β−1) + (W − w_i) C(q−2, β−2).
            let total_w: f64 = w.iter().sum();
            let ratio = if beta >= 2 { (beta - 1) as f64 / (q - 1) as f64 } else { 0.0 };
            w.iter()
                .map(|&wi| (wi + (total_w - wi) * ratio) / total_w / beta as f64)
                .collect()
        }
    };
    Ok((p3, false))
}

#[derive(Clone, Debug)]
pub struct SkmConstants {
    pub beta: usize,
    /// `σ²_{p1,p2}(β)` with `p2` uniform on the block.
    pub sigma_blk_pp_sq: f64,
    pub sigma_blk_inf_sq: Bracket,
    pub p3: Vec<f64>,
    /// Whether `p3` came from literal enumeration of all blocks.
    pub enumerated: bool,
}

/// Block constants for block size `beta` and block distribution `p1`.
/// `sigma_inf` (if given) seeds the search so the chain with `σ_∞²` is preserved.
pub fn skm_constants(
    sketch: &SketchSet,
    a: &DMatrix<f64>,
    beta: usize,
    p1: &BlockDistribution,
    options: &SpectralOptions,
) -> Result<SkmConstants> {
    let reduced = ReducedSketches::new(sketch, a)?;
    let inf = sigma_inf_reduced(sketch, a, &reduced, options)?;
    skm_reduced(sketch, a, &reduced, beta, p1, options, Some(&inf))
}

fn skm_reduced(
    sketch: &SketchSet,
    a: &DMatrix<f64>,
    reduced: &ReducedSketches,
    beta: usize,
    p1: &BlockDistribution,
    options: &SpectralOptions,
    inf: Option<&MinMaxEstimate>,
) -> Result<SkmConstants> {
    let q = sketch.len();
    let (p3, enumerated) = joint_probability(q, beta, p1, options.enumeration_cap)?;
    let sigma_pp = sigma_p_reduced(sketch, a, reduced, &p3)?;
    let r = reduced.rank();
    let obj = move |w: &[f64], grad: &mut [f64]| -> f64 {
        let mut vals = vec![0.0; reduced.len()];
        reduced.values_into(w, &mut vals);
        let (e, probs) = expected_block_max(&vals, beta, p1);
        for (i, &pi) in probs.iter().enumerate() {
            if pi > 0.0 {
                reduced.gradient_into(i, w, grad, pi);
            }
        }
        e
    };
    let mut starts = vec![min_eigenvector(reduced, &p3)];
    if let Some(inf) = inf {
        starts.push(inf.argmin.clone());
    }
    let (mut upper, _) = multi_start(&obj, r, &starts, options);
    if let Some(inf) = inf {
        let mut g = vec![0.0; r];
        upper = upper.min(obj(inf.argmin.as_slice(), &mut g));
    }
    Ok(SkmConstants {
        beta,
        sigma_blk_pp_sq: sigma_pp,
        sigma_blk_inf_sq: Bracket {
            lower: sigma_pp.min(upper),
            upper,
        },
        p3,
        enumerated,
    })
}

/// Inputs to [`rate_bound`].
#[derive(Clone, Debug, Default)]
pub struct RateParams {
    /// Fixed reference distribution (capped rule); uniform when absent.
    pub p: Option<Vec<f64>>,
    pub theta: Option<f64>,
    pub lambda: f64,
    pub truth: Option<DVector<f64>>,
}

fn normalized_rows(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for i in 0..out.nrows() {
        let n = out.row(i).norm();
        if n > 0.0 {
            out.row_mut(i).scale_mut(1.0 / n);
        }
    }
    out
}

/// Smallest nonzero `|x̂_j|`.
pub fn smallest_nonzero_magnitude(x: &DVector<f64>) -> Option<f64> {
    x.iter().map(|v| v.abs()).filter(|&v| v > 0.0).min_by(|a, b| a.total_cmp(b))
}

/// `|x̂|_min / (|x̂|_min + 2λ)`, the sparse-method factor.
fn sparse_factor(params: &RateParams) -> Result<f64> {
    if params.lambda == 0.0 {
        return Ok(1.0);
    }
    let truth = params
        .truth
        .as_ref()
        .ok_or_else(|| SbpError::InvalidParameter("sparse Kaczmarz bounds need the ground truth".into()))?;
    let xmin = smallest_nonzero_magnitude(truth).ok_or(SbpError::ZeroTruth)?;
    Ok(xmin / (xmin + 2.0 * params.lambda))
}

/// Per-iteration contraction factor for row sketches. Rules with a block
/// size use the worst case `γ_k = β`, under which `β` cancels. Values are
/// clamped to `[0, 1)`.
pub fn rate_bound(method: Method, rule: RuleKind, a: &DMatrix<f64>, params: &RateParams) -> Result<f64> {
    let m = a.nrows() as f64;
    if a.nrows() == 0 || a.norm() == 0.0 {
        return Err(SbpError::InvalidParameter("A is the zero matrix".into()));
    }
    let abar = normalized_rows(a);
    let sigma_bar = || linalg::smallest_nonzero_eigenvalue(&abar.tr_mul(&abar)).unwrap_or(0.0);
    let base = match rule {
        RuleKind::Uniform | RuleKind::MaxDistance | RuleKind::SketchMotzkin { .. } => sigma_bar() / m,
        RuleKind::RowNorm => {
            let s = linalg::smallest_nonzero_eigenvalue(&a.tr_mul(a)).unwrap_or(0.0);
            s / a.norm_squared()
        }
        RuleKind::Proportional => 2.0 * sigma_bar() / m,
        RuleKind::Capped { theta } => {
            let theta = params.theta.unwrap_or(theta);
            let p = params.p.clone().unwrap_or_else(|| uniform_probabilities(a.nrows()));
            let e = eta(&p)?;
            let mut weighted = abar.clone();
            for (i, &pi) in p.iter().enumerate() {
                weighted.row_mut(i).scale_mut(pi.sqrt());
            }
            let s = linalg::smallest_nonzero_eigenvalue(&weighted.tr_mul(&weighted)).unwrap_or(0.0);
            (theta * e + 1.0) * s
        }
        RuleKind::General { .. } => {
            return Err(SbpError::InvalidParameter("no closed-form bound for the general rule".into()))
        }
    };
    let contraction = match method {
        Method::Kaczmarz => base,
        // Every sparse entry is half the smooth one times the |x̂|_min factor.
        Method::SparseKaczmarz => 0.5 * base * sparse_factor(params)?,
    };
    Ok((1.0 - contraction).clamp(0.0, 1.0 - f64::EPSILON))
}

/// Everything the `spectral` report prints.
#[derive(Clone, Debug)]
pub struct RateReport {
    pub rank: usize,
    pub rank_ambiguous: bool,
    /// Distribution used for `σ_p²` and `η`.
    pub p_name: &'static str,
    pub sigma_p_sq: f64,
    pub sigma_inf_sq: Bracket,
    pub grid_certified: bool,
    pub skm: Option<SkmConstants>,
    pub eta: Option<f64>,
    pub method: Method,
    pub lambda: f64,
    pub xhat_min: Option<f64>,
    /// Closed-form bound per rule name; `None` where it is undefined.
    pub per_rule_bounds: BTreeMap<&'static str, Option<f64>>,
    pub selected_rule: RuleKind,
}

/// Assemble a [`RateReport`] for row or block sketches.
pub fn rate_report(
    sketch: &SketchSet,
    a: &DMatrix<f64>,
    rule: RuleKind,
    method: Method,
    params: &RateParams,
    options: &SpectralOptions,
) -> Result<RateReport> {
    let reduced = ReducedSketches::new(sketch, a)?;
    let rownorm = frobenius_probabilities(sketch);
    let (p_name, p) = match rule {
        RuleKind::RowNorm if rownorm.iter().all(|&v| v > 0.0) => ("rownorm", rownorm),
        _ => match &params.p {
            Some(p) => ("custom", p.clone()),
            None => ("uniform", uniform_probabilities(sketch.len())),
        },
    };
    let sigma_p_sq = sigma_p_reduced(sketch, a, &reduced, &p)?;
    let inf = sigma_inf_reduced(sketch, a, &reduced, options)?;
    let skm = match rule.beta() {
        Some(beta) => {
            let dist = BlockDistribution::Weighted(sketch.frobenius_weights().to_vec());
            Some(skm_reduced(sketch, a, &reduced, beta, &dist, options, Some(&inf))?)
        }
        None => None,
    };
    let eta = if sketch.len() >= 2 { Some(eta(&p)?) } else { None };
    let theta = rule.theta().unwrap_or(0.5);
    let beta = rule.beta().unwrap_or(1);
    let rules = [
        RuleKind::Uniform,
        RuleKind::RowNorm,
        RuleKind::MaxDistance,
        RuleKind::Proportional,
        RuleKind::Capped { theta },
        RuleKind::SketchMotzkin { beta },
    ];
    let mut bound_params = params.clone();
    if bound_params.p.is_none() && sketch.len() >= 2 {
        bound_params.p = Some(p.clone());
    }
    let mut per_rule_bounds = BTreeMap::new();
    for r in rules {
        let b = if sketch.kind() == sketching::SketchKind::Row {
            rate_bound(method, r, a, &bound_params).ok()
        } else {
            None
        };
        per_rule_bounds.insert(r.name(), b);
    }
    Ok(RateReport {
        rank: reduced.rank(),
        rank_ambiguous: reduced.basis.ambiguous,
        p_name,
        sigma_p_sq,
        sigma_inf_sq: inf.bracket,
        grid_certified: inf.grid_certified,
        skm,
        eta,
        method,
        lambda: params.lambda,
        xhat_min: params.truth.as_ref().and_then(smallest_nonzero_magnitude),
        per_rule_bounds,
        selected_rule: rule,
    })
}

impl RateReport {
    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        let mut push = |k: &str, v: String| lines.push(format!("{k}: {v}"));
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.16e}"));
        push("rule", self.selected_rule.name().to_string());
        push("method", self.method.name().to_string());
        push("lambda", format!("{:.16e}", self.lambda));
        push("xhat_min", opt(self.xhat_min));
        push("rank", self.rank.to_string());
        push("rank_ambiguous", self.rank_ambiguous.to_string());
        push("p", self.p_name.to_string());
        push("sigma_p_sq", format!("{:.16e}", self.sigma_p_sq));
        push("sigma_inf_sq_lower", format!("{:.16e}", self.sigma_inf_sq.lower));
        push("sigma_inf_sq_upper", format!("{:.16e}", self.sigma_inf_sq.upper));
        push("sigma_inf_sq_width", format!("{:.16e}", self.sigma_inf_sq.width()));
        push("sigma_inf_grid_certified", self.grid_certified.to_string());
        if let Some(s) = &self.skm {
            push("beta", s.beta.to_string());
            push("sigma_blk_pp_sq", format!("{:.16e}", s.sigma_blk_pp_sq));
            push("sigma_blk_inf_sq_lower", format!("{:.16e}", s.sigma_blk_inf_sq.lower));
            push("sigma_blk_inf_sq_upper", format!("{:.16e}", s.sigma_blk_inf_sq.upper));
            push("sigma_blk_inf_sq_width", format!("{:.16e}", s.sigma_blk_inf_sq.width()));
            push(
                "p3_source",
                if s.enumerated { "enumerated" } else { "closed-form" }.to_string(),
            );
        }
        push("eta", opt(self.eta));
        for (rule, b) in &self.per_rule_bounds {
            push(&format!("bound_{rule}"), opt(*b));
        }
        lines.join("\n") + "\n"
    }
}

//! Generating functions, Bregman distances and the one-dimensional dual linesearch.
//!
//! Two generating functions are supported:
//!
//! * `f(x) = ½‖x‖²`, whose Bregman projections are Euclidean (Kaczmarz);
//! * `f(x) = ½‖x‖² + λ‖x‖₁`, whose conjugate is `f*(z) = ½‖S_λ(z)‖²` with the
//!   soft-thresholding operator `S_λ` (sparse Kaczmarz).
//!
//! Both are 1-strongly convex. An elastic net with `λ = 0` is routed through
//! the same code as the squared norm so the two produce bit-identical results.

use nalgebra::DVector;

use crate::error::{Result, SbpError};
use crate::linalg::{dot, norm_sq};

/// Absolute-plus-relative tolerance pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    pub abs: f64,
    pub rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            abs: 1e-12,
            rel: 1e-10,
        }
    }
}

impl Tolerances {
    pub fn close(&self, a: f64, b: f64) -> bool {
        (a - b).abs() <= self.abs + self.rel * a.abs().max(b.abs())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GeneratingFunction {
    SquaredNorm,
    ElasticNet { lambda: f64 },
}

impl GeneratingFunction {
    pub fn elastic_net(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(SbpError::InvalidParameter(format!(
                "lambda must be finite and nonnegative, got {lambda}"
            )));
        }
        Ok(Self::ElasticNet { lambda })
    }

    /// ℓ1 weight; zero for the squared norm.
    pub fn lambda(&self) -> f64 {
        match *self {
            Self::SquaredNorm => 0.0,
            Self::ElasticNet { lambda } => lambda,
        }
    }

    /// Strong-convexity modulus μ.
    pub fn modulus(&self) -> f64 {
        1.0
    }

    /// True when `∇f*` is the identity, i.e. the squared norm or `λ = 0`.
    pub fn is_smooth(&self) -> bool {
        self.lambda() == 0.0
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let lambda = self.lambda();
        let quad = 0.5 * norm_sq(x);
        if lambda == 0.0 {
            quad
        } else {
            quad + lambda * x.iter().map(|v| v.abs()).sum::<f64>()
        }
    }

    /// `f*(z)`.
    pub fn conjugate_value(&self, z: &[f64]) -> f64 {
        let lambda = self.lambda();
        if lambda == 0.0 {
            0.5 * norm_sq(z)
        } else {
            0.5 * z
                .iter()
                .map(|&v| {
                    let s = soft_threshold_scalar(v, lambda);
                    s * s
                })
                .sum::<f64>()
        }
    }

    /// `∇f*(z)` written into `out`.
    pub fn conjugate_gradient_into(&self, z: &[f64], out: &mut [f64]) {
        let lambda = self.lambda();
        if lambda == 0.0 {
            out.copy_from_slice(z);
        } else {
            for (o, &v) in out.iter_mut().zip(z) {
                *o = soft_threshold_scalar(v, lambda);
            }
        }
    }
}

/// `∇f*(z)`: the identity for the squared norm, soft thresholding for the elastic net.
pub fn conjugate_gradient_map(f: &GeneratingFunction, z: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(z.len());
    f.conjugate_gradient_into(z.as_slice(), out.as_mut_slice());
    out
}

#[inline]
pub fn soft_threshold_scalar(v: f64, lambda: f64) -> f64 {
    if v > lambda {
        v - lambda
    } else if v < -lambda {
        v + lambda
    } else {
        0.0
    }
}

/// Componentwise `max(|z| − λ, 0)·sign(z)`.
pub fn soft_threshold(z: &DVector<f64>, lambda: f64) -> DVector<f64> {
    z.map(|v| soft_threshold_scalar(v, lambda))
}

/// A primal iterate together with an admissible subgradient `x* ∈ ∂f(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimalDualPair {
    pub x: DVector<f64>,
    pub x_star: DVector<f64>,
}

impl PrimalDualPair {
    pub fn zeros(n: usize) -> Self {
        Self {
            x: DVector::zeros(n),
            x_star: DVector::zeros(n),
        }
    }

    /// Builds the pair `(∇f*(x_star), x_star)`, consistent by construction.
    pub fn from_dual(f: &GeneratingFunction, x_star: DVector<f64>) -> Self {
        let x = conjugate_gradient_map(f, &x_star);
        Self { x, x_star }
    }

    /// Checks `x = ∇f*(x_star)` componentwise within `tol`.
    pub fn is_consistent(&self, f: &GeneratingFunction, tol: Tolerances) -> bool {
        if self.x.len() != self.x_star.len() {
            return false;
        }
        let lambda = f.lambda();
        self.x
            .iter()
            .zip(self.x_star.iter())
            .all(|(&x, &xs)| tol.close(x, soft_threshold_scalar(xs, lambda)))
    }
}

/// `D_f^{x*}(x, y) = f(y) − f(x) − ⟨x*, y − x⟩`.
///
/// Evaluated as `½‖y − x‖² + Σ_j [λ(|y_j| − |x_j|) − (x*_j − x_j)(y_j − x_j)]`,
/// which is algebraically the same but avoids cancelling `½‖y‖² − ½‖x‖²`.
pub fn bregman_distance(f: &GeneratingFunction, from: &PrimalDualPair, to: &DVector<f64>) -> f64 {
    let lambda = f.lambda();
    let mut quad = 0.0;
    let mut rest = 0.0;
    for ((&x, &xs), &y) in from.x.iter().zip(from.x_star.iter()).zip(to.iter()) {
        let d = y - x;
        quad += d * d;
        rest += lambda * (y.abs() - x.abs()) - (xs - x) * d;
    }
    (0.5 * quad + rest).max(0.0)
}

/// Global minimizer of `φ(t) = f*(x_star − t·a) + t·β`.
///
/// For the squared norm this is `(⟨a, x_star⟩ − β)/‖a‖²`. For the elastic net,
/// `φ` is convex, C¹ and piecewise quadratic with breakpoints where a component
/// of `x_star − t·a` crosses `±λ`. The breakpoints are sorted, the sign change
/// of the nondecreasing derivative `φ'(t) = β − ⟨a, S_λ(x_star − t·a)⟩` is
/// located by bisection over them, and the quadratic piece is solved in
/// closed form. A root that falls exactly on a breakpoint returns the breakpoint.
pub fn exact_dual_linesearch(
    f: &GeneratingFunction,
    x_star: &[f64],
    a: &[f64],
    beta: f64,
) -> Result<f64> {
    if x_star.len() != a.len() {
        return Err(SbpError::DimensionMismatch(format!(
            "x_star has length {}, row has length {}",
            x_star.len(),
            a.len()
        )));
    }
    let a_sq = norm_sq(a);
    if a_sq == 0.0 {
        // φ(t) = f*(x_star) + tβ.
        return if beta == 0.0 { Ok(0.0) } else { Err(SbpError::UnboundedDual) };
    }
    let lambda = f.lambda();
    if lambda == 0.0 {
        return Ok((dot(a, x_star) - beta) / a_sq);
    }

    let mut breakpoints: Vec<f64> = Vec::with_capacity(2 * a.len());
    for (&z, &aj) in x_star.iter().zip(a) {
        if aj != 0.0 {
            breakpoints.push((z - lambda) / aj);
            breakpoints.push((z + lambda) / aj);
        }
    }
    breakpoints.sort_by(|p, q| p.total_cmp(q));
    breakpoints.dedup();

    let derivative = |t: f64| -> f64 {
        let mut s = 0.0;
        for (&z, &aj) in x_star.iter().zip(a) {
            s += aj * soft_threshold_scalar(z - t * aj, lambda);
        }
        beta - s
    };

    // First breakpoint index with φ'(t_k) ≥ 0; `breakpoints.len()` if none.
    let (mut lo, mut hi) = (0usize, breakpoints.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        let d = derivative(breakpoints[mid]);
        if d.is_nan() {
            return Err(SbpError::UnboundedDual);
        }
        if d >= 0.0 {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let k = lo;
    if k < breakpoints.len() && derivative(breakpoints[k]) == 0.0 {
        return Ok(breakpoints[k]);
    }
    let left = if k == 0 { f64::NEG_INFINITY } else { breakpoints[k - 1] };
    let right = if k == breakpoints.len() { f64::INFINITY } else { breakpoints[k] };

    // φ' is affine on (left, right): φ'(t) = β − C + t·Q over the active set.
    let probe = match (left.is_finite(), right.is_finite()) {
        (true, true) => 0.5 * (left + right),
        (false, true) => right - 1.0 - right.abs(),
        (true, false) => left + 1.0 + left.abs(),
        (false, false) => 0.0,
    };
    let mut c = 0.0;
    let mut q = 0.0;
    for (&z, &aj) in x_star.iter().zip(a) {
        let u = z - probe * aj;
        if u > lambda {
            c += aj * (z - lambda);
            q += aj * aj;
        } else if u < -lambda {
            c += aj * (z + lambda);
            q += aj * aj;
        }
    }
    if q == 0.0 {
        // Flat derivative on the piece; it must be zero there.
        return if left.is_finite() { Ok(left) } else { Err(SbpError::UnboundedDual) };
    }
    let t = (c - beta) / q;
    if t.is_nan() {
        return Err(SbpError::UnboundedDual);
    }
    Ok(t.clamp(left, right))
}

/// Inexact dual step `t = ⟨a, x⟩ − β`, evaluated at the primal iterate.
/// Only meaningful for unit-norm rows.
pub fn inexact_dual_step(x: &[f64], a: &[f64], beta: f64) -> f64 {
    dot(a, x) - beta
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(&dv(&[2.0, -0.5, 0.0]), 1.0), dv(&[1.0, 0.0, 0.0]));
        assert_eq!(soft_threshold(&dv(&[1.0, -2.0]), 0.5), dv(&[0.5, -1.5]));
        let z = dv(&[3.5, -0.2, 0.0, 1e-300]);
        assert_eq!(soft_threshold(&z, 0.0), z);
    }

    #[test]
    fn conjugate_gradient_examples() {
        let sq = GeneratingFunction::SquaredNorm;
        assert_eq!(conjugate_gradient_map(&sq, &dv(&[3.0, -1.0])), dv(&[3.0, -1.0]));
        let en = GeneratingFunction::elastic_net(1.0).unwrap();
        assert_eq!(conjugate_gradient_map(&en, &dv(&[3.0, 0.5])), dv(&[2.0, 0.0]));
        let en0 = GeneratingFunction::elastic_net(0.0).unwrap();
        let z = dv(&[0.3, -7.0]);
        assert_eq!(conjugate_gradient_map(&en0, &z), z);
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(GeneratingFunction::elastic_net(-1.0).is_err());
        assert!(GeneratingFunction::elastic_net(f64::NAN).is_err());
    }

    #[test]
    fn bregman_distance_examples() {
        let sq = GeneratingFunction::SquaredNorm;
        let p = PrimalDualPair {
            x: dv(&[1.0, 0.0]),
            x_star: dv(&[1.0, 0.0]),
        };
        assert_eq!(bregman_distance(&sq, &p, &dv(&[0.0, 0.0])), 0.5);

        let en = GeneratingFunction::elastic_net(1.0).unwrap();
        let origin = PrimalDualPair::zeros(2);
        assert_eq!(bregman_distance(&en, &origin, &dv(&[1.0, 0.0])), 1.5);

        let p = PrimalDualPair::from_dual(&en, dv(&[2.5, -0.3, -4.0]));
        assert_eq!(bregman_distance(&en, &p, &p.x.clone()), 0.0);
    }

    #[test]
    fn linesearch_squared_norm_closed_form() {
        let t = exact_dual_linesearch(&GeneratingFunction::SquaredNorm, &[1.0, 1.0], &[3.0, 4.0], 0.0)
            .unwrap();
        assert!((t - 0.28).abs() < 1e-15);
    }

    /// φ(t) = ½((|t| − 1)₊)² + 2t; minimum at t = −3. The grid search is the
    /// independent check.
    #[test]
    fn linesearch_elastic_net_against_grid() {
        let en = GeneratingFunction::elastic_net(1.0).unwrap();
        let phi = |t: f64| {
            let s = soft_threshold_scalar(-t, 1.0);
            0.5 * s * s + 2.0 * t
        };
        let mut best = (f64::INFINITY, 0.0);
        let steps = 2_000_000;
        for k in 0..=steps {
            let t = -10.0 + 20.0 * k as f64 / steps as f64;
            let v = phi(t);
            if v < best.0 {
                best = (v, t);
            }
        }
        assert!((best.1 + 3.0).abs() < 1e-5);
        let t = exact_dual_linesearch(&en, &[0.0, 0.0], &[1.0, 0.0], 2.0).unwrap();
        assert!((t - best.1).abs() < 1e-5);
        assert_eq!(t, -3.0);
    }

    #[test]
    fn linesearch_zero_row() {
        let en = GeneratingFunction::elastic_net(1.0).unwrap();
        assert_eq!(exact_dual_linesearch(&en, &[1.0], &[0.0], 0.0).unwrap(), 0.0);
        assert!(matches!(
            exact_dual_linesearch(&en, &[1.0], &[0.0], 1.0),
            Err(SbpError::UnboundedDual)
        ));
    }

    #[test]
    fn linesearch_root_on_breakpoint_returns_breakpoint() {
        // x* = [2], a = [1], λ = 1: φ'(t) = β − S_1(2 − t). With β = 0 the
        // derivative vanishes on the whole flat piece t ∈ [1, 3]; the
        // leftmost point of that piece is the breakpoint t = 1.
        let en = GeneratingFunction::elastic_net(1.0).unwrap();
        let t = exact_dual_linesearch(&en, &[2.0], &[1.0], 0.0).unwrap();
        assert_eq!(t, 1.0);
    }

    #[test]
    fn inexact_step_examples() {
        assert!((inexact_dual_step(&[1.0, 1.0], &[0.6, 0.8], 0.0) - 1.4).abs() < 1e-15);
        assert_eq!(inexact_dual_step(&[2.0, 0.0], &[1.0, 0.0], 1.0), 1.0);
        assert_eq!(inexact_dual_step(&[1.0, 2.0], &[1.0, 1.0], 3.0), 0.0);
    }

    fn phi(f: &GeneratingFunction, z: &[f64], a: &[f64], beta: f64, t: f64) -> f64 {
        let shifted: Vec<f64> = z.iter().zip(a).map(|(zi, ai)| zi - t * ai).collect();
        f.conjugate_value(&shifted) + t * beta
    }

    proptest! {
        #[test]
        fn soft_threshold_is_one_lipschitz(u in -10.0..10.0f64, v in -10.0..10.0f64, l in 0.0..5.0f64) {
            let d = (soft_threshold_scalar(u, l) - soft_threshold_scalar(v, l)).abs();
            prop_assert!(d <= (u - v).abs() + 1e-15);
        }

        #[test]
        fn soft_threshold_subgradient_identity(z in proptest::collection::vec(-5.0..5.0f64, 1..20), l in 0.0..3.0f64) {
            let z = DVector::from_vec(z);
            let s = soft_threshold(&z, l);
            let lhs = (&z - &s).dot(&s);
            let rhs = l * s.iter().map(|v| v.abs()).sum::<f64>();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        #[test]
        fn bregman_distance_strongly_convex(
            xs in proptest::collection::vec(-4.0..4.0f64, 6),
            y in proptest::collection::vec(-4.0..4.0f64, 6),
            l in 0.0..2.0f64,
        ) {
            let f = GeneratingFunction::elastic_net(l).unwrap();
            let p = PrimalDualPair::from_dual(&f, DVector::from_vec(xs));
            let y = DVector::from_vec(y);
            let d = bregman_distance(&f, &p, &y);
            let lower = 0.5 * (&p.x - &y).norm_squared();
            prop_assert!(d >= lower - 1e-12 * (1.0 + lower));
        }

        #[test]
        fn linesearch_is_stationary_and_local_min(
            z in proptest::collection::vec(-3.0..3.0f64, 1..12),
            seed_a in proptest::collection::vec(-2.0..2.0f64, 12),
            beta in -5.0..5.0f64,
            l in 0.0..2.0f64,
        ) {
            let n = z.len();
            let mut a: Vec<f64> = seed_a[..n].to_vec();
            if norm_sq(&a) < 1e-6 { a[0] = 1.0; }
            let f = GeneratingFunction::elastic_net(l).unwrap();
            let t = exact_dual_linesearch(&f, &z, &a, beta).unwrap();
            let shifted: Vec<f64> = z.iter().zip(&a).map(|(zi, ai)| zi - t * ai).collect();
            let s: Vec<f64> = shifted.iter().map(|&u| soft_threshold_scalar(u, l)).collect();
            let dphi = beta - dot(&a, &s);
            let scale = 1.0 + beta.abs() + norm_sq(&a).sqrt() * norm_sq(&z).sqrt();
            prop_assert!(dphi.abs() <= 1e-10 * scale, "phi'(t*) = {}", dphi);
            let here = phi(&f, &z, &a, beta, t);
            for h in [1e-4, -1e-4] {
                prop_assert!(here <= phi(&f, &z, &a, beta, t + h) + 1e-12);
            }
        }

        #[test]
        fn zero_lambda_matches_squared_norm(
            z in proptest::collection::vec(-3.0..3.0f64, 4),
            a in proptest::collection::vec(0.1..2.0f64, 4),
            beta in -5.0..5.0f64,
        ) {
            let sq = exact_dual_linesearch(&GeneratingFunction::SquaredNorm, &z, &a, beta).unwrap();
            let en = exact_dual_linesearch(&GeneratingFunction::ElasticNet { lambda: 0.0 }, &z, &a, beta).unwrap();
            prop_assert_eq!(sq.to_bits(), en.to_bits());
        }
    }
}

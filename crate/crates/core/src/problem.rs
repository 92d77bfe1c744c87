//! Random consistent test systems.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bregman::GeneratingFunction;
use crate::error::{Result, SbpError};
use crate::solver::Problem;

/// `A`, `b` and the ground truth `x̄` with `b = A x̄`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub truth: Option<DVector<f64>>,
}

impl LinearSystem {
    /// Wrap as a [`Problem`] with row sketches.
    pub fn into_problem(self, f: GeneratingFunction) -> Result<Problem> {
        Problem::with_rows(self.a, self.b, self.truth, f)
    }
}

/// Gaussian `A` (m × n), a `sparsity`-sparse Gaussian `x̄` with uniformly
/// random support, and `b = A x̄`.
pub fn generate_problem(m: usize, n: usize, sparsity: usize, seed: u64) -> Result<LinearSystem> {
    if m == 0 || n == 0 {
        return Err(SbpError::InvalidParameter(format!("dimensions must be positive, got {m}×{n}")));
    }
    if sparsity == 0 || sparsity > n {
        return Err(SbpError::InvalidParameter(format!("sparsity {sparsity} outside [1, {n}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(m, n, |_, _| StandardNormal.sample(&mut rng));
    let mut support = rand::seq::index::sample(&mut rng, n, sparsity).into_vec();
    support.sort_unstable();
    let mut truth = DVector::zeros(n);
    for j in support {
        truth[j] = StandardNormal.sample(&mut rng);
    }
    let b = &a * &truth;
    Ok(LinearSystem {
        a,
        b,
        truth: Some(truth),
    })
}

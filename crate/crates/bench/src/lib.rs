//! Shared fixtures for the benchmarks.

use sbp_core::{generate_problem, GeneratingFunction, Problem, RuleKind};

/// The four default experiment shapes.
pub use sbp_core::experiment::PRESET_SHAPES;

pub fn gaussian_problem(m: usize, n: usize, lambda: f64, seed: u64) -> Problem {
    let f = if lambda > 0.0 {
        GeneratingFunction::ElasticNet { lambda }
    } else {
        GeneratingFunction::SquaredNorm
    };
    generate_problem(m, n, 30.min(n), seed)
        .and_then(|sys| sys.into_problem(f))
        .expect("fixture parameters are valid")
}

/// Every rule with the parameters used in the experiments.
pub fn rules(m: usize) -> Vec<RuleKind> {
    vec![
        RuleKind::Uniform,
        RuleKind::RowNorm,
        RuleKind::MaxDistance,
        RuleKind::Proportional,
        RuleKind::Capped { theta: 0.5 },
        RuleKind::SketchMotzkin { beta: m / 2 },
        RuleKind::General { theta: 0.5, beta: m / 2 },
    ]
}

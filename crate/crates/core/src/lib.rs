//! Sketched Bregman projection solvers for consistent linear systems.

pub mod bregman;
pub mod error;
pub mod experiment;
pub mod history;
pub mod linalg;
pub mod mmio;
pub mod problem;
pub mod sampling;
pub mod sketching;
pub mod solver;
pub mod spectral;
pub mod svg;

pub use bregman::{bregman_distance, exact_dual_linesearch, GeneratingFunction, PrimalDualPair};
pub use error::{Result, SbpError};
pub use experiment::{run_experiment, write_outputs, Axis, ExperimentConfig, ExperimentOutput, MatrixSource, QuantileSeries};
pub use problem::{generate_problem, LinearSystem};
pub use sampling::{RuleKind, SamplingRule, Selection};
pub use sketching::{SketchKind, SketchSet};
pub use solver::{
    modeled_flops_per_iter, run, IterationRecord, Method, Problem, SolveOptions, SolveResult, SolveState, Solver,
    StepMode, StoppingCriteria, Termination,
};
pub use spectral::{rate_report, RateParams, RateReport, SpectralOptions};

pub use nalgebra::{DMatrix, DVector};

//! The SBP iteration: dual update, primal recovery, stopping and history.
//!
//! Every run starts from `x⁰ = x*⁰ = 0`. One step with sketch `i` is
//!
//! ```text
//! x*ᵏ⁺¹ = x*ᵏ − Aᵀ S_i yᵏ,     xᵏ⁺¹ = ∇f*(x*ᵏ⁺¹)
//! ```
//!
//! where `yᵏ` minimizes the dual subproblem. Two flop counters are kept: the
//! modeled one charges a fixed per-iteration cost, the measured one counts
//! the arithmetic actually performed.
//!
//! The residual `r = Ax − b` is only maintained when something reads it. It
//! is updated incrementally through the columns of `A` touched by the step
//! (through `AAᵀ` for the smooth row case) and recomputed from scratch every
//! `m` steps to stop rounding drift.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::bregman::{bregman_distance, exact_dual_linesearch, inexact_dual_step, GeneratingFunction, PrimalDualPair};
use crate::error::{Result, SbpError};
use crate::linalg::{self, dot};
use crate::sampling::{LossSource, RuleKind, SamplingRule, Selection};
use crate::sketching::{SketchKind, SketchSet};

/// Relative tolerance on `‖A·truth − b‖` accepted as consistent.
pub const CONSISTENCY_TOL: f64 = 1e-8;

/// Largest `m` for which the smooth row path precomputes `AAᵀ`.
pub const DEFAULT_GRAM_CAP: usize = 4000;

const INNER_MAX_ITERS: usize = 10_000;
const INNER_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Kaczmarz,
    SparseKaczmarz,
}

impl Method {
    pub fn for_function(f: &GeneratingFunction) -> Self {
        match f {
            GeneratingFunction::SquaredNorm => Method::Kaczmarz,
            GeneratingFunction::ElasticNet { .. } => Method::SparseKaczmarz,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Kaczmarz => "kaczmarz",
            Method::SparseKaczmarz => "sparse",
        }
    }

    /// Label of the per-iteration flop model in output metadata.
    pub fn flop_model(&self) -> &'static str {
        match self {
            Method::Kaczmarz => "modeled-kaczmarz",
            Method::SparseKaczmarz => "table4",
        }
    }
}

/// Modeled cost of one iteration.
///
/// Sparse Kaczmarz: `21n + n ln n` for uniform and row-norm sampling, and
/// `c + 17n + n ln n` with `c = m, 2m, 5m, β` for max-distance, proportional,
/// capped and Sketch-Motzkin. The general rule is charged `c = 5β`.
///
/// Kaczmarz has no linesearch or thresholding, so it is charged the rule
/// term `{0, 0, m, 2m, 5m, β, 5β}` plus `4n` for the update.
pub fn modeled_flops_per_iter(rule: RuleKind, method: Method, m: usize, n: usize) -> f64 {
    let (m, n) = (m as f64, n as f64);
    let rule_term = match rule {
        RuleKind::Uniform | RuleKind::RowNorm => 0.0,
        RuleKind::MaxDistance => m,
        RuleKind::Proportional => 2.0 * m,
        RuleKind::Capped { .. } => 5.0 * m,
        RuleKind::SketchMotzkin { beta } => beta as f64,
        RuleKind::General { beta, .. } => 5.0 * beta as f64,
    };
    match method {
        Method::Kaczmarz => rule_term + 4.0 * n,
        Method::SparseKaczmarz => {
            if rule.is_adaptive() {
                rule_term + 17.0 * n + n * n.ln()
            } else {
                21.0 * n + n * n.ln()
            }
        }
    }
}

/// `‖x − truth‖² / ‖truth‖²`.
pub fn mse(x: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if x.len() != truth.len() {
        return Err(SbpError::DimensionMismatch(format!(
            "x has length {}, truth has length {}",
            x.len(),
            truth.len()
        )));
    }
    let denom = truth.norm_squared();
    if denom == 0.0 {
        return Err(SbpError::ZeroTruth);
    }
    Ok(mse_unchecked(x.as_slice(), truth.as_slice(), denom))
}

fn mse_unchecked(x: &[f64], truth: &[f64], truth_sq: f64) -> f64 {
    x.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / truth_sq
}

/// A consistent system `Ax = b` with its geometry and sketch family.
#[derive(Debug)]
pub struct Problem {
    a: DMatrix<f64>,
    /// `Aᵀ`, so that row `i` of `A` is a contiguous column.
    rows: DMatrix<f64>,
    b: DVector<f64>,
    truth: Option<DVector<f64>>,
    f: GeneratingFunction,
    sketch: SketchSet,
    gram: OnceLock<DMatrix<f64>>,
}

impl Clone for Problem {
    fn clone(&self) -> Self {
        Self {
            a: self.a.clone(),
            rows: self.rows.clone(),
            b: self.b.clone(),
            truth: self.truth.clone(),
            f: self.f,
            sketch: self.sketch.clone(),
            gram: OnceLock::new(),
        }
    }
}

impl Problem {
    pub fn new(
        a: DMatrix<f64>,
        b: DVector<f64>,
        truth: Option<DVector<f64>>,
        f: GeneratingFunction,
        sketch: SketchSet,
    ) -> Result<Self> {
        let (m, n) = a.shape();
        if m == 0 || n == 0 {
            return Err(SbpError::DimensionMismatch("A has no entries".into()));
        }
        if b.len() != m {
            return Err(SbpError::DimensionMismatch(format!("A has {m} rows, b has length {}", b.len())));
        }
        if sketch.nrows() != m || sketch.ncols() != n {
            return Err(SbpError::DimensionMismatch(format!(
                "sketch family built for {}×{}, A is {m}×{n}",
                sketch.nrows(),
                sketch.ncols()
            )));
        }
        if let Some(t) = &truth {
            if t.len() != n {
                return Err(SbpError::DimensionMismatch(format!("A has {n} columns, truth has length {}", t.len())));
            }
            let gap = (&a * t - &b).norm();
            if gap > CONSISTENCY_TOL * (1.0 + b.norm()) {
                return Err(SbpError::InvalidParameter(format!(
                    "truth does not solve the system: ‖A·truth − b‖ = {gap:.3e}"
                )));
            }
        } else {
            // Without a certificate, b must lie in range(A).
            let gap = linalg::RowSpaceBasis::new(&a.transpose()).orthogonal_residual(&b).norm();
            if gap > CONSISTENCY_TOL * (1.0 + b.norm()) {
                return Err(SbpError::InvalidParameter(format!(
                    "inconsistent system: distance from b to range(A) is {gap:.3e}"
                )));
            }
        }
        let rows = a.transpose();
        Ok(Self {
            a,
            rows,
            b,
            truth,
            f,
            sketch,
            gram: OnceLock::new(),
        })
    }

    /// Row sketches `S_i = e_i`.
    pub fn with_rows(
        a: DMatrix<f64>,
        b: DVector<f64>,
        truth: Option<DVector<f64>>,
        f: GeneratingFunction,
    ) -> Result<Self> {
        let sketch = SketchSet::rows(&a);
        Self::new(a, b, truth, f, sketch)
    }

    /// The same system with every nonzero row (and its right-hand side) scaled
    /// to unit norm. Row sketches are rebuilt; block sketches keep their blocks.
    pub fn normalize_rows(&self) -> Result<Self> {
        let mut a = self.a.clone();
        let mut b = self.b.clone();
        for i in 0..a.nrows() {
            let norm = a.row(i).norm();
            if norm > 0.0 {
                a.row_mut(i).scale_mut(1.0 / norm);
                b[i] /= norm;
            }
        }
        let sketch = match self.sketch.kind() {
            SketchKind::Row => SketchSet::rows(&a),
            SketchKind::Block => {
                let blocks = (0..self.sketch.len()).map(|i| self.sketch.block(i).to_vec()).collect();
                SketchSet::blocks(&a, blocks)?
            }
        };
        Self::new(a, b, self.truth.clone(), self.f, sketch)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn truth(&self) -> Option<&DVector<f64>> {
        self.truth.as_ref()
    }

    pub fn generating_function(&self) -> &GeneratingFunction {
        &self.f
    }

    pub fn sketch(&self) -> &SketchSet {
        &self.sketch
    }

    pub fn nrows(&self) -> usize {
        self.a.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.a.ncols()
    }

    /// Row `i` of `A` as a contiguous slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.ncols();
        &self.rows.as_slice()[i * n..(i + 1) * n]
    }

    /// Column `j` of `A` as a contiguous slice.
    pub fn column(&self, j: usize) -> &[f64] {
        let m = self.nrows();
        &self.a.as_slice()[j * m..(j + 1) * m]
    }

    /// Same system with a different generating function.
    pub fn with_function(&self, f: GeneratingFunction) -> Self {
        Self { f, ..self.clone() }
    }

    fn gram(&self) -> &DMatrix<f64> {
        self.gram.get_or_init(|| &self.a * &self.rows)
    }

    fn has_unit_rows(&self) -> bool {
        self.sketch
            .frobenius_weights()
            .iter()
            .all(|&w| w == 0.0 || (w - 1.0).abs() <= 1e-10)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepMode {
    Exact,
    Inexact,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StoppingCriteria {
    pub max_iters: Option<usize>,
    pub mse_tol: Option<f64>,
    pub residual_tol: Option<f64>,
    /// Budget on the modeled flop counter.
    pub flop_budget: Option<f64>,
}

impl StoppingCriteria {
    /// `mse_tol = 1e−8` with a truth, else `residual_tol = 1e−8·(1 + ‖b‖)`;
    /// `max_iters = 10⁶`.
    pub fn defaults_for(problem: &Problem) -> Self {
        let mut s = Self {
            max_iters: Some(1_000_000),
            ..Self::default()
        };
        if problem.truth().is_some() {
            s.mse_tol = Some(1e-8);
        } else {
            s.residual_tol = Some(1e-8 * (1.0 + problem.b().norm()));
        }
        s
    }

    pub fn max_iters(n: usize) -> Self {
        Self {
            max_iters: Some(n),
            ..Self::default()
        }
    }

    fn is_empty(&self) -> bool {
        self.max_iters.is_none() && self.mse_tol.is_none() && self.residual_tol.is_none() && self.flop_budget.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    MaxIters,
    MseTol,
    ResidualTol,
    FlopBudget,
    /// Every sketched loss vanished: the iterate solves the system.
    Solved,
}

impl Termination {
    pub fn name(&self) -> &'static str {
        match self {
            Termination::MaxIters => "max_iters",
            Termination::MseTol => "mse_tol",
            Termination::ResidualTol => "residual_tol",
            Termination::FlopBudget => "flop_budget",
            Termination::Solved => "solved",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveState {
    pub pair: PrimalDualPair,
    /// `Ax − b`; current only when [`SolveState::residual_fresh`] is set.
    pub residual: DVector<f64>,
    pub residual_fresh: bool,
    pub k: usize,
    pub flops_modeled: f64,
    pub flops_measured: f64,
}

impl SolveState {
    /// `x⁰ = x*⁰ = 0`, `r⁰ = −b`.
    pub fn initial(problem: &Problem) -> Self {
        Self {
            pair: PrimalDualPair::zeros(problem.ncols()),
            residual: -problem.b(),
            residual_fresh: true,
            k: 0,
            flops_modeled: 0.0,
            flops_measured: 0.0,
        }
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.pair.x
    }

    pub fn x_star(&self) -> &DVector<f64> {
        &self.pair.x_star
    }
}

/// One history entry: the state after `k` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    /// Sketch used for step `k − 1`; `None` at `k = 0`.
    pub chosen: Option<usize>,
    pub mse: Option<f64>,
    pub bregman_dist: Option<f64>,
    /// `g_i(x^{k−1})` for the sketch used by step `k − 1`.
    pub loss_at_chosen: Option<f64>,
    pub flops_modeled: f64,
    pub flops_measured: f64,
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub step: StepMode,
    pub stop: StoppingCriteria,
    /// Record every `history_stride` iterations (plus first and last); 0 keeps only the last.
    pub history_stride: usize,
    /// Flop model; defaults to the one matching the generating function.
    pub method: Option<Method>,
    pub gram_cap: usize,
    /// Log `γ_k` for rules with a block size.
    pub track_gamma: bool,
}

impl SolveOptions {
    pub fn new(step: StepMode, stop: StoppingCriteria) -> Self {
        Self {
            step,
            stop,
            history_stride: 1,
            method: None,
            gram_cap: DEFAULT_GRAM_CAP,
            track_gamma: false,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.history_stride = stride;
        self
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = Some(method);
        self
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub state: SolveState,
    pub termination: Termination,
    pub history: Vec<IterationRecord>,
    /// `γ_k` per iteration when tracked.
    pub gamma_trace: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ResidualMode {
    Off,
    /// `r ← r − t·(AAᵀ)e_i`.
    Gram,
    /// `r ← r + Σ_j Δx_j A_{:,j}`.
    Columns,
}

/// Step-by-step driver over a borrowed problem.
pub struct Solver<'p> {
    problem: &'p Problem,
    step: StepMode,
    state: SolveState,
    mode: ResidualMode,
    since_refresh: usize,
    truth_sq: Option<f64>,
    /// Scratch for changed primal coordinates.
    delta: Vec<(usize, f64)>,
    scratch_r: Vec<f64>,
    loss_buf: Vec<f64>,
}

impl<'p> Solver<'p> {
    /// `maintain_residual` forces the residual to be kept current.
    pub fn new(problem: &'p Problem, step: StepMode, maintain_residual: bool) -> Result<Self> {
        Self::with_gram_cap(problem, step, maintain_residual, DEFAULT_GRAM_CAP)
    }

    fn with_gram_cap(problem: &'p Problem, step: StepMode, maintain_residual: bool, gram_cap: usize) -> Result<Self> {
        if step == StepMode::Inexact {
            if problem.sketch().kind() == SketchKind::Block {
                return Err(SbpError::InvalidParameter("the inexact step is only defined for row sketches".into()));
            }
            if !problem.has_unit_rows() {
                return Err(SbpError::InvalidParameter(
                    "the inexact step needs unit-norm rows; normalize the problem first".into(),
                ));
            }
        }
        let mode = if !maintain_residual {
            ResidualMode::Off
        } else if problem.sketch().kind() == SketchKind::Row
            && problem.generating_function().is_smooth()
            && step == StepMode::Exact
            && problem.nrows() <= gram_cap
        {
            ResidualMode::Gram
        } else {
            ResidualMode::Columns
        };
        let truth_sq = match problem.truth() {
            Some(t) => {
                let sq = t.norm_squared();
                if sq == 0.0 {
                    None
                } else {
                    Some(sq)
                }
            }
            None => None,
        };
        Ok(Self {
            problem,
            step,
            state: SolveState::initial(problem),
            mode,
            since_refresh: 0,
            truth_sq,
            delta: Vec::new(),
            scratch_r: vec![0.0; problem.nrows()],
            loss_buf: vec![0.0; problem.sketch().len()],
        })
    }

    /// Continue from an existing consistent state.
    pub fn from_state(problem: &'p Problem, step: StepMode, state: SolveState) -> Result<Self> {
        if state.pair.x.len() != problem.ncols() || state.residual.len() != problem.nrows() {
            return Err(SbpError::DimensionMismatch("state does not match problem".into()));
        }
        let mut s = Self::new(problem, step, true)?;
        s.state = state;
        s.refresh_residual();
        Ok(s)
    }

    pub fn state(&self) -> &SolveState {
        &self.state
    }

    pub fn into_state(self) -> SolveState {
        self.state
    }

    pub fn problem(&self) -> &Problem {
        self.problem
    }

    pub fn mse(&self) -> Option<f64> {
        let truth = self.problem.truth()?;
        let sq = self.truth_sq?;
        Some(mse_unchecked(self.state.pair.x.as_slice(), truth.as_slice(), sq))
    }

    /// `D_f(xᵏ, x̄)` with the current subgradient.
    pub fn bregman_to_truth(&self) -> Option<f64> {
        let truth = self.problem.truth()?;
        Some(bregman_distance(self.problem.generating_function(), &self.state.pair, truth))
    }

    /// `Ax − b` recomputed from scratch.
    pub fn exact_residual(&self) -> DVector<f64> {
        self.problem.a() * &self.state.pair.x - self.problem.b()
    }

    fn refresh_residual(&mut self) {
        let r = self.exact_residual();
        self.state.residual = r;
        self.state.residual_fresh = true;
        self.since_refresh = 0;
        let (m, n) = (self.problem.nrows() as f64, self.problem.ncols() as f64);
        self.state.flops_measured += 2.0 * m * n + m;
    }

    /// `g_i(xᵏ)`, charged to the measured counter.
    pub fn loss(&mut self, i: usize) -> f64 {
        let problem = self.problem;
        let (value, cost) = loss_at(problem, &self.state, &mut self.scratch_r, i);
        self.state.flops_measured += cost;
        value
    }

    /// `g_i(xᵏ)` without touching the counters.
    pub fn peek_loss(&mut self, i: usize) -> f64 {
        let problem = self.problem;
        loss_at(problem, &self.state, &mut self.scratch_r, i).0
    }

    /// All sketched losses at the current iterate, without touching the counters.
    pub fn all_losses(&mut self) -> Vec<f64> {
        let r = if self.state.residual_fresh {
            self.state.residual.clone()
        } else {
            self.exact_residual()
        };
        let sketch = self.problem.sketch();
        (0..sketch.len()).map(|i| sketch.loss_from_residual(i, r.as_slice())).collect()
    }

    /// Ask `rule` for the next sketch index.
    pub fn select(&mut self, rule: &mut SamplingRule) -> Selection {
        let mut src = SolverLosses {
            problem: self.problem,
            state: &self.state,
            scratch_r: &mut self.scratch_r,
            losses: &mut self.loss_buf,
            flops: 0.0,
        };
        let sel = rule.select(&mut src);
        let flops = src.flops;
        self.state.flops_measured += flops;
        sel
    }

    /// One SBP step with sketch `i`.
    pub fn step(&mut self, i: usize) -> Result<()> {
        let q = self.problem.sketch().len();
        if i >= q {
            return Err(SbpError::IndexOutOfRange { index: i, len: q });
        }
        match self.problem.sketch().kind() {
            SketchKind::Row => self.row_step(i)?,
            SketchKind::Block => self.block_step(i)?,
        }
        self.state.k += 1;
        Ok(())
    }

    fn row_step(&mut self, i: usize) -> Result<()> {
        let problem = self.problem;
        let f = problem.generating_function();
        let a = problem.row(i);
        let w = problem.sketch().frobenius_weights()[i];
        let bi = problem.b()[i];
        let n = a.len() as f64;
        if w == 0.0 {
            // Zero row: identity step.
            return Ok(());
        }
        let t = match self.step {
            StepMode::Exact if f.is_smooth() => {
                self.state.flops_measured += 2.0 * n + 2.0;
                (dot(a, self.state.pair.x_star.as_slice()) - bi) / w
            }
            StepMode::Exact => {
                self.state.flops_measured += linesearch_cost(a.len());
                exact_dual_linesearch(f, self.state.pair.x_star.as_slice(), a, bi)?
            }
            StepMode::Inexact => {
                self.state.flops_measured += 2.0 * n + 1.0;
                inexact_dual_step(self.state.pair.x.as_slice(), a, bi)
            }
        };
        if t == 0.0 {
            return Ok(());
        }
        let lambda = f.lambda();
        self.delta.clear();
        let x_star = self.state.pair.x_star.as_mut_slice();
        let x = self.state.pair.x.as_mut_slice();
        if f.is_smooth() {
            for j in 0..a.len() {
                if a[j] != 0.0 {
                    x_star[j] -= t * a[j];
                    x[j] = x_star[j];
                }
            }
            self.state.flops_measured += 2.0 * n;
            self.advance_residual_smooth_row(i, t);
        } else {
            for j in 0..a.len() {
                if a[j] != 0.0 {
                    x_star[j] -= t * a[j];
                    let new = crate::bregman::soft_threshold_scalar(x_star[j], lambda);
                    if new != x[j] {
                        self.delta.push((j, new - x[j]));
                        x[j] = new;
                    }
                }
            }
            // Update plus soft thresholding.
            self.state.flops_measured += 2.0 * n + 3.0 * n;
            self.advance_residual_columns();
        }
        Ok(())
    }

    fn advance_residual_smooth_row(&mut self, i: usize, t: f64) {
        match self.mode {
            ResidualMode::Off => self.state.residual_fresh = false,
            ResidualMode::Gram => {
                let g = self.problem.gram().column(i);
                self.state.residual.axpy(-t, &g, 1.0);
                let m = self.problem.nrows() as f64;
                self.state.flops_measured += 2.0 * m;
                self.after_incremental_update();
            }
            ResidualMode::Columns => {
                self.delta.clear();
                let a = self.problem.row(i);
                self.delta
                    .extend(a.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(j, &v)| (j, -t * v)));
                self.advance_residual_columns();
            }
        }
    }

    fn advance_residual_columns(&mut self) {
        if self.mode == ResidualMode::Off {
            self.state.residual_fresh = false;
            return;
        }
        let m = self.problem.nrows();
        let r = self.state.residual.as_mut_slice();
        for &(j, d) in &self.delta {
            let col = self.problem.column(j);
            for (ri, &c) in r.iter_mut().zip(col) {
                *ri += d * c;
            }
        }
        self.state.flops_measured += 2.0 * m as f64 * self.delta.len() as f64;
        self.after_incremental_update();
    }

    fn after_incremental_update(&mut self) {
        self.since_refresh += 1;
        if self.since_refresh >= self.problem.nrows() {
            self.refresh_residual();
        }
    }

    fn block_step(&mut self, i: usize) -> Result<()> {
        let problem = self.problem;
        let f = problem.generating_function();
        let sketch = problem.sketch();
        let block = sketch.block(i);
        let n = problem.ncols();
        let sub = problem.a().select_rows(block.iter());
        let b_tau = DVector::from_iterator(block.len(), block.iter().map(|&r| problem.b()[r]));
        let k = block.len() as f64;
        let nf = n as f64;

        let y = if f.is_smooth() {
            let r_tau = &sub * &self.state.pair.x - &b_tau;
            let f_i = sketch.pinv_factor(i).expect("block sketch");
            self.state.flops_measured += 2.0 * k * nf + 4.0 * (f_i.nrows() as f64) * k;
            sketch.apply_gram_pinv(i, &r_tau)
        } else {
            self.inner_dual_solve(&sub, &b_tau, sketch.spectral_norm_sq(i))?
        };
        let step = sub.tr_mul(&y);
        self.state.flops_measured += 2.0 * k * nf;
        let old_x = self.state.pair.x.clone();
        self.state.pair.x_star -= &step;
        f.conjugate_gradient_into(self.state.pair.x_star.as_slice(), self.state.pair.x.as_mut_slice());
        self.state.flops_measured += nf + if f.is_smooth() { 0.0 } else { 3.0 * nf };
        self.delta.clear();
        for j in 0..n {
            let d = self.state.pair.x[j] - old_x[j];
            if d != 0.0 {
                self.delta.push((j, d));
            }
        }
        self.advance_residual_columns();
        Ok(())
    }

    /// Gradient descent on `D(y) = f*(x* − A_τᵀy) + ⟨b_τ, y⟩` with step `1/‖A_τ‖₂²`.
    fn inner_dual_solve(&mut self, sub: &DMatrix<f64>, b_tau: &DVector<f64>, lipschitz: f64) -> Result<DVector<f64>> {
        let f = *self.problem.generating_function();
        let k = sub.nrows();
        let n = sub.ncols() as f64;
        let mut y = DVector::zeros(k);
        if lipschitz == 0.0 {
            return if b_tau.norm() == 0.0 { Ok(y) } else { Err(SbpError::UnboundedDual) };
        }
        let tol = INNER_TOL * (1.0 + b_tau.norm());
        let x_star = &self.state.pair.x_star;
        let mut z = DVector::zeros(x_star.len());
        let mut grad_norm = f64::INFINITY;
        for _ in 0..INNER_MAX_ITERS {
            let u = x_star - sub.tr_mul(&y);
            f.conjugate_gradient_into(u.as_slice(), z.as_mut_slice());
            let grad = b_tau - sub * &z;
            self.state.flops_measured += 4.0 * k as f64 * n + 4.0 * n + 3.0 * k as f64;
            grad_norm = grad.norm();
            if grad_norm <= tol {
                return Ok(y);
            }
            y.axpy(-1.0 / lipschitz, &grad, 1.0);
        }
        Err(SbpError::InnerSolver {
            iters: INNER_MAX_ITERS,
            grad_norm,
        })
    }
}

/// Flops charged for one elastic-net linesearch over a length-`n` row.
fn linesearch_cost(n: usize) -> f64 {
    let nf = n as f64;
    let bp = 2.0 * nf;
    // Breakpoints, sort, bisection over derivative evaluations, final piece.
    4.0 * nf + bp * bp.max(2.0).log2() + 4.0 * nf * (bp.max(2.0).log2() + 1.0) + 6.0 * nf
}

/// `g_i` at the state's iterate and the flops spent computing it.
fn loss_at(problem: &Problem, state: &SolveState, scratch_r: &mut [f64], i: usize) -> (f64, f64) {
    let sketch = problem.sketch();
    if state.residual_fresh {
        return (
            sketch.loss_from_residual(i, state.residual.as_slice()),
            sketch.loss_cost(i),
        );
    }
    let x = state.pair.x.as_slice();
    let n = problem.ncols() as f64;
    match sketch.kind() {
        SketchKind::Row => {
            let w = sketch.frobenius_weights()[i];
            if w == 0.0 {
                return (0.0, 0.0);
            }
            let r = dot(problem.row(i), x) - problem.b()[i];
            (r * r / w, 2.0 * n + 3.0)
        }
        SketchKind::Block => {
            let block = sketch.block(i);
            for &ri in block {
                scratch_r[ri] = dot(problem.row(ri), x) - problem.b()[ri];
            }
            (
                sketch.loss_from_residual(i, scratch_r),
                2.0 * n * block.len() as f64 + sketch.loss_cost(i),
            )
        }
    }
}

struct SolverLosses<'a> {
    problem: &'a Problem,
    state: &'a SolveState,
    scratch_r: &'a mut Vec<f64>,
    losses: &'a mut Vec<f64>,
    flops: f64,
}

impl LossSource for SolverLosses<'_> {
    fn len(&self) -> usize {
        self.problem.sketch().len()
    }

    fn loss(&mut self, i: usize) -> f64 {
        let (v, c) = loss_at(self.problem, self.state, self.scratch_r, i);
        self.flops += c;
        v
    }

    fn all_losses(&mut self) -> &[f64] {
        let q = self.len();
        for i in 0..q {
            let (v, c) = loss_at(self.problem, self.state, self.scratch_r, i);
            self.losses[i] = v;
            self.flops += c;
        }
        &self.losses[..]
    }
}

/// One step applied to a copy of `state`. The residual of the result is recomputed.
pub fn sbp_step(state: &SolveState, problem: &Problem, i: usize, step: StepMode) -> Result<SolveState> {
    let mut solver = Solver::from_state(problem, step, state.clone())?;
    solver.step(i)?;
    solver.refresh_residual();
    let mut out = solver.into_state();
    out.flops_measured = state.flops_measured;
    Ok(out)
}

/// `γ_k = C(m−1, β−1)‖r‖² / Σ_k r²_(k) C(m−k, β−1)` with `r²_(1) ≥ r²_(2) ≥ …`:
/// the ratio of summed squared block residual norms to summed squared block
/// maxima over all size-β blocks. Lies in `[1, β]`.
pub fn gamma_k(residual: &[f64], beta: usize) -> f64 {
    let m = residual.len();
    if beta == 0 || beta > m {
        return f64::NAN;
    }
    let mut sq: Vec<f64> = residual.iter().map(|v| v * v).collect();
    sq.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sq.iter().sum();
    if total == 0.0 {
        return 1.0;
    }
    // C(m−k, β−1) / C(m−1, β−1) via the running product.
    let mut ratio = 1.0;
    let mut denom = 0.0;
    for (k0, &s) in sq.iter().enumerate() {
        if m - 1 - k0 < beta - 1 {
            break;
        }
        denom += s * ratio;
        // Next ratio: C(m−k−1, β−1)/C(m−k, β−1) = (m−k−β+1)/(m−k) with k = k0+1.
        let mk = (m - 1 - k0) as f64;
        ratio *= (mk - (beta as f64 - 1.0)) / mk;
    }
    total / denom
}

fn needs_residual(rule: &SamplingRule, options: &SolveOptions) -> bool {
    rule.kind().needs_all_losses() || options.stop.residual_tol.is_some() || options.track_gamma
}

/// Run the method from `x⁰ = x*⁰ = 0` until a stopping criterion fires.
pub fn run(problem: &Problem, rule: &mut SamplingRule, options: &SolveOptions) -> Result<SolveResult> {
    if options.stop.is_empty() {
        return Err(SbpError::NoStoppingCriterion);
    }
    if options.stop.mse_tol.is_some() {
        match problem.truth() {
            None => return Err(SbpError::InvalidParameter("mse_tol needs a ground truth".into())),
            Some(t) if t.norm_squared() == 0.0 => return Err(SbpError::ZeroTruth),
            _ => {}
        }
    }
    if rule.kind().beta().is_some_and(|b| b > problem.sketch().len()) {
        return Err(SbpError::InvalidParameter("beta exceeds the number of sketches".into()));
    }
    let method = options
        .method
        .unwrap_or_else(|| Method::for_function(problem.generating_function()));
    let per_iter = modeled_flops_per_iter(rule.kind(), method, problem.sketch().len(), problem.ncols());
    let mut solver = Solver::with_gram_cap(problem, options.step, needs_residual(rule, options), options.gram_cap)?;
    let gamma_beta = if options.track_gamma { rule.kind().beta() } else { None };

    let stop = options.stop;
    let stride = options.history_stride;
    let mut history = Vec::new();
    let mut gamma_trace = Vec::new();
    let mut last_chosen: Option<usize> = None;
    let mut last_loss: Option<f64> = None;
    let mut recorded_k: Option<usize> = None;

    let record = |solver: &Solver, chosen, loss, history: &mut Vec<IterationRecord>| {
        history.push(IterationRecord {
            k: solver.state.k,
            chosen,
            mse: solver.mse(),
            bregman_dist: solver.bregman_to_truth(),
            loss_at_chosen: loss,
            flops_modeled: solver.state.flops_modeled,
            flops_measured: solver.state.flops_measured,
        });
    };

    let termination = loop {
        let k = solver.state.k;
        if stride > 0 && k % stride == 0 {
            record(&solver, last_chosen, last_loss, &mut history);
            recorded_k = Some(k);
        }
        if k == 0 && problem.b().iter().all(|&v| v == 0.0) {
            break Termination::Solved;
        }
        if let Some(tol) = stop.mse_tol {
            if solver.mse().is_some_and(|e| e <= tol) {
                break Termination::MseTol;
            }
        }
        if let Some(tol) = stop.residual_tol {
            let r = if solver.state.residual_fresh {
                solver.state.residual.norm()
            } else {
                solver.exact_residual().norm()
            };
            if r <= tol {
                break Termination::ResidualTol;
            }
        }
        if stop.max_iters.is_some_and(|n| k >= n) {
            break Termination::MaxIters;
        }
        if stop.flop_budget.is_some_and(|budget| solver.state.flops_modeled + per_iter > budget) {
            break Termination::FlopBudget;
        }
        if let Some(beta) = gamma_beta {
            gamma_trace.push(gamma_k(solver.state.residual.as_slice(), beta));
        }
        let i = match solver.select(rule) {
            Selection::Chosen(t) => t.chosen,
            Selection::Converged => break Termination::Solved,
        };
        last_loss = Some(solver.peek_loss(i));
        last_chosen = Some(i);
        solver.step(i)?;
        solver.state.flops_modeled += per_iter;
    };
    if recorded_k != Some(solver.state.k) {
        record(&solver, last_chosen, last_loss, &mut history);
    }
    Ok(SolveResult {
        state: solver.into_state(),
        termination,
        history,
        gamma_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RowSpaceBasis;
    use crate::sketching::sketched_loss;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, n, |_, _| StandardNormal.sample(&mut rng))
    }

    fn consistent(m: usize, n: usize, seed: u64, f: GeneratingFunction) -> Problem {
        let a = gaussian(m, n, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        let truth = DVector::from_fn(n, |j, _| if j % 3 == 0 { StandardNormal.sample(&mut rng) } else { 0.0 });
        let b = &a * &truth;
        Problem::with_rows(a, b, Some(truth), f).unwrap()
    }

    fn rule(kind: RuleKind, p: &Problem, seed: u64) -> SamplingRule {
        SamplingRule::new(kind, p.sketch(), seed).unwrap()
    }

    #[test]
    fn inconsistent_systems_are_rejected() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let bad = DVector::from_row_slice(&[1.0, 2.0]);
        assert!(Problem::with_rows(a.clone(), bad, None, GeneratingFunction::SquaredNorm).is_err());
        let good = DVector::from_row_slice(&[2.0, 2.0]);
        assert!(Problem::with_rows(a, good, None, GeneratingFunction::SquaredNorm).is_ok());
    }

    #[test]
    fn kaczmarz_step_example() {
        let a = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let b = DVector::from_vec(vec![0.0]);
        let p = Problem::with_rows(a, b, None, GeneratingFunction::SquaredNorm).unwrap();
        let mut s = SolveState::initial(&p);
        s.pair = PrimalDualPair {
            x: DVector::from_vec(vec![1.0, 1.0]),
            x_star: DVector::from_vec(vec![1.0, 1.0]),
        };
        let out = sbp_step(&s, &p, 0, StepMode::Exact).unwrap();
        let expected = [4.0 / 25.0, -3.0 / 25.0];
        for j in 0..2 {
            assert!((out.pair.x[j] - expected[j]).abs() < 1e-15);
        }
        assert!((3.0 * out.pair.x[0] + 4.0 * out.pair.x[1]).abs() < 1e-12);
        assert!(out.residual[0].abs() < 1e-12);
    }

    #[test]
    fn fixed_point_when_constraint_holds() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 1.0]);
        let p = Problem::with_rows(a, DVector::from_vec(vec![3.0, 0.0]), None, GeneratingFunction::elastic_net(0.5).unwrap())
            .unwrap();
        let mut s = SolveState::initial(&p);
        // x* = [1.5, 1.5] → x = [1, 1], which satisfies row 0.
        s.pair = PrimalDualPair::from_dual(p.generating_function(), DVector::from_vec(vec![1.5, 1.5]));
        let out = sbp_step(&s, &p, 0, StepMode::Exact).unwrap();
        assert!((&out.pair.x - &s.pair.x).norm() < 1e-14);
        assert!((&out.pair.x_star - &s.pair.x_star).norm() < 1e-14);
    }

    #[test]
    fn identity_system_converges() {
        let a = DMatrix::identity(2, 2);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let p = Problem::with_rows(a, b.clone(), Some(b), GeneratingFunction::SquaredNorm).unwrap();
        let mut r = rule(RuleKind::Uniform, &p, 3);
        let stop = StoppingCriteria {
            max_iters: Some(50),
            mse_tol: Some(1e-20),
            ..Default::default()
        };
        let res = run(&p, &mut r, &SolveOptions::new(StepMode::Exact, stop)).unwrap();
        assert_eq!(res.termination, Termination::MseTol);
        assert!((res.state.pair.x.clone() - DVector::from_vec(vec![1.0, 1.0])).norm() < 1e-15);
    }

    #[test]
    fn zero_rhs_terminates_immediately() {
        let a = gaussian(4, 3, 1);
        let p = Problem::with_rows(a, DVector::zeros(4), None, GeneratingFunction::SquaredNorm).unwrap();
        let mut r = rule(RuleKind::Uniform, &p, 0);
        let res = run(&p, &mut r, &SolveOptions::new(StepMode::Exact, StoppingCriteria::max_iters(10))).unwrap();
        assert_eq!(res.termination, Termination::Solved);
        assert_eq!(res.state.k, 0);
        assert_eq!(res.history.len(), 1);
    }

    #[test]
    fn tiny_flop_budget_stops_early() {
        let p = consistent(10, 5, 2, GeneratingFunction::elastic_net(1.0).unwrap());
        let mut r = rule(RuleKind::Uniform, &p, 0);
        let stop = StoppingCriteria {
            flop_budget: Some(1.0),
            ..Default::default()
        };
        let res = run(&p, &mut r, &SolveOptions::new(StepMode::Exact, stop)).unwrap();
        assert_eq!(res.termination, Termination::FlopBudget);
        assert!(res.state.k <= 1);
    }

    #[test]
    fn empty_stopping_criteria_rejected() {
        let p = consistent(5, 3, 2, GeneratingFunction::SquaredNorm);
        let mut r = rule(RuleKind::Uniform, &p, 0);
        assert!(matches!(
            run(&p, &mut r, &SolveOptions::new(StepMode::Exact, StoppingCriteria::default())),
            Err(SbpError::NoStoppingCriterion)
        ));
    }

    #[test]
    fn mse_examples() {
        let t = DVector::from_vec(vec![1.0, -2.0]);
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
        assert_eq!(mse(&DVector::zeros(2), &t).unwrap(), 1.0);
        assert_eq!(mse(&(&t * 2.0), &t).unwrap(), 1.0);
        assert!(matches!(mse(&t, &DVector::zeros(2)), Err(SbpError::ZeroTruth)));
    }

    #[test]
    fn table4_values() {
        let sparse = Method::SparseKaczmarz;
        let v = modeled_flops_per_iter(RuleKind::Uniform, sparse, 10, 100);
        assert!((v - (2100.0 + 100.0 * 100f64.ln())).abs() < 1e-9);
        assert!((v - 2560.517).abs() < 1e-3);
        let capped = modeled_flops_per_iter(RuleKind::Capped { theta: 0.5 }, sparse, 1000, 100);
        assert!((capped - 7160.517).abs() < 1e-3);
        assert_eq!(
            modeled_flops_per_iter(RuleKind::SketchMotzkin { beta: 37 }, sparse, 37, 20),
            modeled_flops_per_iter(RuleKind::MaxDistance, sparse, 37, 20)
        );
        assert_eq!(modeled_flops_per_iter(RuleKind::Uniform, Method::Kaczmarz, 10, 7), 28.0);
        assert_eq!(modeled_flops_per_iter(RuleKind::Capped { theta: 0.1 }, Method::Kaczmarz, 10, 7), 78.0);
    }

    #[test]
    fn gamma_k_matches_enumeration() {
        use itertools::Itertools;
        let r = [0.5, -2.0, 1.0, 0.0, 3.0, -0.25];
        for beta in 1..=r.len() {
            let (mut num, mut den) = (0.0, 0.0);
            for block in (0..r.len()).combinations(beta) {
                num += block.iter().map(|&i| r[i] * r[i]).sum::<f64>();
                den += block.iter().map(|&i| r[i] * r[i]).fold(0.0, f64::max);
            }
            let g = gamma_k(&r, beta);
            assert!((g - num / den).abs() < 1e-12 * g, "beta {beta}: {g} vs {}", num / den);
            assert!(g >= 1.0 - 1e-12 && g <= beta as f64 + 1e-12);
        }
    }

    #[test]
    fn inexact_requires_unit_rows() {
        let p = consistent(6, 4, 3, GeneratingFunction::elastic_net(0.1).unwrap());
        assert!(Solver::new(&p, StepMode::Inexact, false).is_err());
        let normalized = p.normalize_rows().unwrap();
        assert!(Solver::new(&normalized, StepMode::Inexact, false).is_ok());
    }

    #[test]
    fn inexact_step_converges_on_normalized_rows() {
        let p = consistent(40, 20, 4, GeneratingFunction::elastic_net(0.5).unwrap())
            .normalize_rows()
            .unwrap();
        let mut r = rule(RuleKind::Uniform, &p, 1);
        let stop = StoppingCriteria {
            max_iters: Some(40_000),
            mse_tol: Some(1e-8),
            ..Default::default()
        };
        let res = run(&p, &mut r, &SolveOptions::new(StepMode::Inexact, stop).with_stride(0)).unwrap();
        assert_eq!(res.termination, Termination::MseTol);
    }

    #[test]
    fn history_records_layout() {
        let p = consistent(12, 6, 5, GeneratingFunction::SquaredNorm);
        let mut r = rule(RuleKind::MaxDistance, &p, 0);
        let res = run(
            &p,
            &mut r,
            &SolveOptions::new(StepMode::Exact, StoppingCriteria::max_iters(23)).with_stride(5),
        )
        .unwrap();
        let ks: Vec<usize> = res.history.iter().map(|h| h.k).collect();
        assert_eq!(ks, vec![0, 5, 10, 15, 20, 23]);
        assert_eq!(res.history[0].chosen, None);
        assert_eq!(res.history[0].mse, Some(1.0));
        assert!(res.history.iter().skip(1).all(|h| h.chosen.is_some() && h.loss_at_chosen.unwrap() > 0.0));
        assert!(res.history.windows(2).all(|w| w[0].flops_modeled <= w[1].flops_modeled));
    }

    #[test]
    fn residual_tracking_stays_accurate() {
        for f in [GeneratingFunction::SquaredNorm, GeneratingFunction::elastic_net(0.7).unwrap()] {
            let p = consistent(30, 50, 6, f);
            let mut r = rule(RuleKind::Proportional, &p, 9);
            let mut solver = Solver::new(&p, StepMode::Exact, true).unwrap();
            for _ in 0..500 {
                let i = solver.select(&mut r).chosen().unwrap();
                solver.step(i).unwrap();
                let exact = solver.exact_residual();
                let err = (&solver.state().residual - &exact).norm();
                assert!(err <= 1e-9 * (1.0 + p.b().norm()), "drift {err}");
            }
        }
    }

    #[test]
    fn block_sketch_steps_annihilate_block_loss() {
        for f in [GeneratingFunction::SquaredNorm, GeneratingFunction::elastic_net(0.3).unwrap()] {
            let a = gaussian(12, 8, 7);
            let truth = DVector::from_fn(8, |j, _| (j as f64 - 3.5) / 2.0);
            let b = &a * &truth;
            let sketch = SketchSet::contiguous_blocks(&a, 3).unwrap();
            let p = Problem::new(a.clone(), b.clone(), Some(truth), f, sketch).unwrap();
            let mut r = rule(RuleKind::Uniform, &p, 2);
            let mut solver = Solver::new(&p, StepMode::Exact, false).unwrap();
            let mut prev = solver.bregman_to_truth().unwrap();
            for _ in 0..200 {
                let i = solver.select(&mut r).chosen().unwrap();
                let g = solver.peek_loss(i);
                solver.step(i).unwrap();
                let after = sketched_loss(p.sketch(), i, &a, solver.state().x(), &b).unwrap();
                assert!(after <= 1e-10 * (1.0 + b.norm_squared()), "{after}");
                let d = solver.bregman_to_truth().unwrap();
                assert!(d - prev + 0.5 * g <= 1e-9 * (1.0 + prev));
                prev = d;
            }
        }
    }

    #[test]
    fn invariants_along_trajectories() {
        let kinds = [
            RuleKind::Uniform,
            RuleKind::RowNorm,
            RuleKind::MaxDistance,
            RuleKind::Proportional,
            RuleKind::Capped { theta: 0.5 },
            RuleKind::SketchMotzkin { beta: 7 },
            RuleKind::General { theta: 0.5, beta: 7 },
        ];
        for (seed, f) in [(11, GeneratingFunction::SquaredNorm), (12, GeneratingFunction::elastic_net(1.0).unwrap())] {
            let p = consistent(25, 35, seed, f);
            let basis = RowSpaceBasis::new(p.a());
            for kind in kinds {
                let mut r = rule(kind, &p, seed);
                let mut solver = Solver::new(&p, StepMode::Exact, kind.needs_all_losses()).unwrap();
                let mut prev_i: Option<usize> = None;
                for _ in 0..300 {
                    let Some(i) = solver.select(&mut r).chosen() else { break };
                    if kind.is_adaptive() {
                        assert_ne!(Some(i), prev_i, "{kind:?} reselected a zero-loss index");
                    }
                    let before = solver.bregman_to_truth().unwrap();
                    let g = solver.peek_loss(i);
                    solver.step(i).unwrap();
                    let after = solver.bregman_to_truth().unwrap();
                    assert!(after - before + 0.5 * g <= 1e-9, "{kind:?}: descent");
                    assert!(solver.peek_loss(i) <= 1e-10 * (1.0 + p.b().norm_squared()));
                    let st = solver.state();
                    assert!(st.pair.is_consistent(p.generating_function(), Default::default()));
                    let off = basis.orthogonal_residual(&st.pair.x_star).norm();
                    assert!(off <= 1e-8 * st.pair.x_star.norm().max(1e-300));
                    prev_i = Some(i);
                }
            }
        }
    }

    #[test]
    fn zero_lambda_reproduces_kaczmarz_bitwise() {
        let base = consistent(20, 15, 13, GeneratingFunction::SquaredNorm);
        let sparse = base.with_function(GeneratingFunction::elastic_net(0.0).unwrap());
        for kind in [RuleKind::Uniform, RuleKind::Capped { theta: 0.5 }, RuleKind::SketchMotzkin { beta: 5 }] {
            let opts = SolveOptions::new(StepMode::Exact, StoppingCriteria::max_iters(300));
            let a = run(&base, &mut rule(kind, &base, 4), &opts).unwrap();
            let b = run(&sparse, &mut rule(kind, &sparse, 4), &opts).unwrap();
            assert_eq!(a.state.pair, b.state.pair);
            let ia: Vec<_> = a.history.iter().map(|h| (h.chosen, h.mse)).collect();
            let ib: Vec<_> = b.history.iter().map(|h| (h.chosen, h.mse)).collect();
            assert_eq!(ia, ib);
        }
    }

    #[test]
    fn zero_rows_are_identity_steps() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let truth = DVector::from_vec(vec![2.0, -1.0]);
        let b = &a * &truth;
        let p = Problem::with_rows(a, b, Some(truth), GeneratingFunction::SquaredNorm).unwrap();
        let mut solver = Solver::new(&p, StepMode::Exact, false).unwrap();
        solver.step(1).unwrap();
        assert_eq!(solver.state().pair.x, DVector::zeros(2));
        let mut r = rule(RuleKind::MaxDistance, &p, 0);
        let res = run(&p, &mut r, &SolveOptions::new(StepMode::Exact, StoppingCriteria::max_iters(10))).unwrap();
        assert_eq!(res.termination, Termination::Solved);
        assert!(res.history.iter().all(|h| h.chosen != Some(1)));
    }

    #[test]
    fn gamma_trace_is_logged() {
        let p = consistent(16, 10, 14, GeneratingFunction::SquaredNorm);
        let mut r = rule(RuleKind::SketchMotzkin { beta: 4 }, &p, 0);
        let mut opts = SolveOptions::new(StepMode::Exact, StoppingCriteria::max_iters(30));
        opts.track_gamma = true;
        let res = run(&p, &mut r, &opts).unwrap();
        assert_eq!(res.gamma_trace.len(), 30);
        assert!(res.gamma_trace.iter().all(|&g| (1.0..=4.0 + 1e-12).contains(&g)));
    }

    #[test]
    fn inconsistent_truth_rejected() {
        let a = DMatrix::identity(2, 2);
        let r = Problem::with_rows(
            a,
            DVector::from_vec(vec![1.0, 1.0]),
            Some(DVector::from_vec(vec![1.0, 0.0])),
            GeneratingFunction::SquaredNorm,
        );
        assert!(r.is_err());
    }
}

//! Multi-trial experiments with quantile aggregation.
//!
//! Seeds: with master seed `s`, trial `t` samples with `child_seed(s, t + 1)`;
//! the shared Gaussian draw uses `child_seed(s, 0)` unless a data seed is
//! given, and fresh per-trial draws use `child_seed(s ^ FRESH_DATA_SALT, t)`.
//! `child_seed(s, j)` is the `(j + 1)`-th output of a splitmix64 stream
//! started at `s`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::bregman::GeneratingFunction;
use crate::error::{Result, SbpError};
use crate::mmio;
use crate::problem::{generate_problem, LinearSystem};
use crate::sampling::{RuleKind, SamplingRule};
use crate::solver::{run, IterationRecord, Method, Problem, SolveOptions, StepMode, StoppingCriteria, Termination};
use crate::svg;

/// Shapes of the default experiment grid: m/n = 1.5 and m/n ≈ 3.3, both orientations.
pub const PRESET_SHAPES: [(usize, usize); 4] = [(300, 200), (200, 300), (1000, 300), (300, 1000)];
pub const DEFAULT_SPARSITY: usize = 30;
pub const DEFAULT_TRIALS: usize = 100;
pub const DEFAULT_MAX_ITERS: usize = 20_000;
pub const DEFAULT_GRID_POINTS: usize = 200;

const FRESH_DATA_SALT: u64 = 0xD1B5_4A32_D192_ED03;
const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn child_seed(master: u64, index: u64) -> u64 {
    let mut state = master.wrapping_add(index.wrapping_mul(GOLDEN_GAMMA));
    splitmix64(&mut state)
}

#[derive(Clone, Debug, PartialEq)]
pub enum MatrixSource {
    Gaussian { m: usize, n: usize, seed: Option<u64> },
    File { matrix: PathBuf, rhs: PathBuf, truth: Option<PathBuf> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Iteration,
    ModeledFlops,
    MeasuredFlops,
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Iteration => "iteration",
            Axis::ModeledFlops => "modeled-flops",
            Axis::MeasuredFlops => "measured-flops",
        }
    }

    fn value(&self, r: &IterationRecord) -> f64 {
        match self {
            Axis::Iteration => r.k as f64,
            Axis::ModeledFlops => r.flops_modeled,
            Axis::MeasuredFlops => r.flops_measured,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub source: MatrixSource,
    pub sparsity: usize,
    pub method: Method,
    pub lambda: f64,
    pub rule: RuleKind,
    pub step: StepMode,
    pub trials: usize,
    pub master_seed: u64,
    pub stop: StoppingCriteria,
    pub output_prefix: PathBuf,
    /// `None` uses the global rayon pool.
    pub workers: Option<usize>,
    pub fresh_data_per_trial: bool,
    pub flop_axis: Axis,
    pub svg: bool,
    pub grid_points: usize,
    pub history_stride: usize,
}

impl ExperimentConfig {
    /// Gaussian preset with the default sparsity and trial count.
    pub fn gaussian(m: usize, n: usize, rule: RuleKind, method: Method, lambda: f64) -> Self {
        Self {
            source: MatrixSource::Gaussian { m, n, seed: None },
            sparsity: DEFAULT_SPARSITY.min(n),
            method,
            lambda,
            rule,
            step: StepMode::Exact,
            trials: DEFAULT_TRIALS,
            master_seed: 0,
            stop: StoppingCriteria::max_iters(DEFAULT_MAX_ITERS),
            output_prefix: PathBuf::from("experiment"),
            workers: None,
            fresh_data_per_trial: false,
            flop_axis: Axis::ModeledFlops,
            svg: false,
            grid_points: DEFAULT_GRID_POINTS,
            history_stride: 1,
        }
    }

    /// Build from flat `key=value` pairs; keys match the `bench` flag names.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut pairs: BTreeMap<String, String> =
            pairs.iter().map(|(k, v)| (k.trim().replace('_', "-"), v.trim().to_string())).collect();
        let mut take = |k: &str| pairs.remove(k);

        fn num<T: std::str::FromStr>(key: &str, v: Option<String>) -> Result<Option<T>> {
            v.map(|s| {
                s.parse()
                    .map_err(|_| SbpError::InvalidParameter(format!("{key}: cannot parse {s:?}")))
            })
            .transpose()
        }
        fn flag(key: &str, v: Option<String>) -> Result<bool> {
            match v.as_deref() {
                None => Ok(false),
                Some("" | "true" | "1" | "yes") => Ok(true),
                Some("false" | "0" | "no") => Ok(false),
                Some(s) => Err(SbpError::InvalidParameter(format!("{key}: expected a boolean, got {s:?}"))),
            }
        }

        let matrix = take("matrix");
        let rhs = take("rhs");
        let truth = take("truth");
        let rows: Option<usize> = num("rows", take("rows"))?;
        let cols: Option<usize> = num("cols", take("cols"))?;
        let data_seed: Option<u64> = num("data-seed", take("data-seed"))?;
        let source = match (matrix, rhs) {
            (Some(matrix), Some(rhs)) => {
                if rows.is_some() || cols.is_some() {
                    return Err(SbpError::InvalidParameter("give either matrix/rhs files or rows/cols".into()));
                }
                MatrixSource::File {
                    matrix: matrix.into(),
                    rhs: rhs.into(),
                    truth: truth.map(PathBuf::from),
                }
            }
            (None, None) => {
                if truth.is_some() {
                    return Err(SbpError::InvalidParameter("truth file given without a matrix".into()));
                }
                MatrixSource::Gaussian {
                    m: rows.unwrap_or(PRESET_SHAPES[1].0),
                    n: cols.unwrap_or(PRESET_SHAPES[1].1),
                    seed: data_seed,
                }
            }
            _ => return Err(SbpError::InvalidParameter("matrix and rhs must be given together".into())),
        };
        let ncols = match &source {
            MatrixSource::Gaussian { n, .. } => Some(*n),
            MatrixSource::File { .. } => None,
        };

        let method = match take("method").as_deref() {
            None | Some("sparse") => Method::SparseKaczmarz,
            Some("kaczmarz") => Method::Kaczmarz,
            Some(other) => return Err(SbpError::InvalidParameter(format!("unknown method {other:?}"))),
        };
        let lambda: Option<f64> = num("lambda", take("lambda"))?;
        let lambda = match method {
            Method::SparseKaczmarz => lambda.unwrap_or(1.0),
            Method::Kaczmarz => match lambda {
                Some(l) if l != 0.0 => {
                    return Err(SbpError::InvalidParameter("lambda applies to the sparse method only".into()))
                }
                _ => 0.0,
            },
        };
        let theta: Option<f64> = num("theta", take("theta"))?;
        let beta: Option<usize> = num("beta", take("beta"))?;
        let rule = RuleKind::parse(take("rule").as_deref().unwrap_or("uniform"), theta, beta)?;
        let step = match take("step").as_deref() {
            None | Some("exact") => StepMode::Exact,
            Some("inexact") => StepMode::Inexact,
            Some(other) => return Err(SbpError::InvalidParameter(format!("unknown step {other:?}"))),
        };

        let mut stop = StoppingCriteria {
            max_iters: num("max-iters", take("max-iters"))?,
            mse_tol: num("mse-tol", take("mse-tol"))?,
            residual_tol: num("residual-tol", take("residual-tol"))?,
            flop_budget: num("flop-budget", take("flop-budget"))?,
        };
        if stop == StoppingCriteria::default() {
            stop.max_iters = Some(DEFAULT_MAX_ITERS);
        }

        let measured = flag("measured", take("measured"))?;
        let cfg = Self {
            source,
            sparsity: num("sparsity", take("sparsity"))?.unwrap_or(DEFAULT_SPARSITY.min(ncols.unwrap_or(usize::MAX))),
            method,
            lambda,
            rule,
            step,
            trials: num("trials", take("trials"))?.unwrap_or(DEFAULT_TRIALS),
            master_seed: num("seed", take("seed"))?.unwrap_or(0),
            stop,
            output_prefix: take("out").unwrap_or_else(|| "experiment".into()).into(),
            workers: num("workers", take("workers"))?,
            fresh_data_per_trial: flag("fresh-data-per-trial", take("fresh-data-per-trial"))?,
            flop_axis: if measured { Axis::MeasuredFlops } else { Axis::ModeledFlops },
            svg: flag("svg", take("svg"))?,
            grid_points: num("grid-points", take("grid-points"))?.unwrap_or(DEFAULT_GRID_POINTS),
            history_stride: num("stride", take("stride"))?.unwrap_or(1),
        };
        if let Some(key) = pairs.keys().next() {
            return Err(SbpError::InvalidParameter(format!("unknown config key {key:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(SbpError::InvalidParameter("trials must be at least 1".into()));
        }
        if self.grid_points == 0 {
            return Err(SbpError::InvalidParameter("grid-points must be at least 1".into()));
        }
        if self.history_stride == 0 {
            return Err(SbpError::InvalidParameter("stride must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(SbpError::InvalidParameter("workers must be at least 1".into()));
        }
        match &self.source {
            MatrixSource::Gaussian { n, .. } => {
                if self.sparsity == 0 || self.sparsity > *n {
                    return Err(SbpError::InvalidParameter(format!(
                        "sparsity {} outside [1, {n}]",
                        self.sparsity
                    )));
                }
            }
            MatrixSource::File { .. } => {
                if self.fresh_data_per_trial {
                    return Err(SbpError::InvalidParameter("fresh data per trial needs a Gaussian source".into()));
                }
            }
        }
        self.generating_function()?;
        Ok(())
    }

    pub fn generating_function(&self) -> Result<GeneratingFunction> {
        match self.method {
            Method::Kaczmarz => Ok(GeneratingFunction::SquaredNorm),
            Method::SparseKaczmarz => GeneratingFunction::elastic_net(self.lambda),
        }
    }

    /// Canonical `key=value` description, written as CSV metadata.
    pub fn metadata(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        match &self.source {
            MatrixSource::Gaussian { m, n, seed } => {
                put("source", "gaussian".into());
                put("rows", m.to_string());
                put("cols", n.to_string());
                put("sparsity", self.sparsity.to_string());
                if let Some(s) = seed {
                    put("data-seed", s.to_string());
                }
            }
            MatrixSource::File { matrix, rhs, truth } => {
                put("source", "file".into());
                put("matrix", matrix.display().to_string());
                put("rhs", rhs.display().to_string());
                if let Some(t) = truth {
                    put("truth", t.display().to_string());
                }
            }
        }
        put("method", self.method.name().into());
        put("lambda", format!("{}", self.lambda));
        put("rule", self.rule.name().into());
        if let Some(theta) = self.rule.theta() {
            put("theta", format!("{theta}"));
        }
        if let Some(beta) = self.rule.beta() {
            put("beta", beta.to_string());
        }
        put(
            "step",
            match self.step {
                StepMode::Exact => "exact".into(),
                StepMode::Inexact => "inexact".into(),
            },
        );
        put("trials", self.trials.to_string());
        put("seed", self.master_seed.to_string());
        put("fresh-data-per-trial", self.fresh_data_per_trial.to_string());
        if let Some(v) = self.stop.max_iters {
            put("max-iters", v.to_string());
        }
        if let Some(v) = self.stop.mse_tol {
            put("mse-tol", format!("{v:e}"));
        }
        if let Some(v) = self.stop.residual_tol {
            put("residual-tol", format!("{v:e}"));
        }
        if let Some(v) = self.stop.flop_budget {
            put("flop-budget", format!("{v:e}"));
        }
        out
    }
}

/// Read flat `key=value` lines; `#` starts a comment line.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| SbpError::Parse {
            line: idx + 1,
            msg: "expected key=value".into(),
        })?;
        out.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(out)
}

/// Per-checkpoint MSE quantiles across trials.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileSeries {
    pub axis: Axis,
    pub grid: Vec<f64>,
    pub min: Vec<f64>,
    pub q25: Vec<f64>,
    pub median: Vec<f64>,
    pub q75: Vec<f64>,
    pub max: Vec<f64>,
}

impl QuantileSeries {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// First checkpoint whose median is at most `tol`.
    pub fn first_median_below(&self, tol: f64) -> Option<f64> {
        self.median.iter().position(|&v| v <= tol).map(|i| self.grid[i])
    }

    pub fn to_csv(&self, metadata: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in metadata {
            let _ = writeln!(out, "# {k}={v}");
        }
        let head = if self.axis == Axis::Iteration { "k" } else { "flops" };
        let _ = writeln!(out, "{head},min,q25,median,q75,max");
        for i in 0..self.len() {
            if self.axis == Axis::Iteration {
                let _ = write!(out, "{}", self.grid[i] as u64);
            } else {
                let _ = write!(out, "{:.16e}", self.grid[i]);
            }
            for col in [&self.min, &self.q25, &self.median, &self.q75, &self.max] {
                let _ = write!(out, ",{:.16e}", col[i]);
            }
            out.push('\n');
        }
        out
    }
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(axis: Axis, grid: Vec<f64>, columns: impl Iterator<Item = Vec<f64>>) -> QuantileSeries {
    let mut s = QuantileSeries {
        axis,
        grid,
        min: Vec::new(),
        q25: Vec::new(),
        median: Vec::new(),
        q75: Vec::new(),
        max: Vec::new(),
    };
    for mut values in columns {
        values.sort_by(f64::total_cmp);
        s.min.push(values[0]);
        s.q25.push(quantile_sorted(&values, 0.25));
        s.median.push(quantile_sorted(&values, 0.5));
        s.q75.push(quantile_sorted(&values, 0.75));
        s.max.push(values[values.len() - 1]);
    }
    s
}

fn mse_of(r: &IterationRecord) -> Result<f64> {
    r.mse
        .ok_or_else(|| SbpError::InvalidParameter("aggregation needs a ground truth for the MSE".into()))
}

/// Checkpoints are every recorded iteration of any trial; a trial that has
/// stopped contributes its last value.
pub fn aggregate_by_iteration(histories: &[&[IterationRecord]]) -> Result<QuantileSeries> {
    let mut grid: Vec<usize> = histories.iter().flat_map(|h| h.iter().map(|r| r.k)).collect();
    grid.sort_unstable();
    grid.dedup();
    let mut columns = vec![Vec::with_capacity(histories.len()); grid.len()];
    for h in histories {
        if h.is_empty() {
            return Err(SbpError::InvalidParameter("empty trial history".into()));
        }
        let mut j = 0;
        for (c, &k) in grid.iter().enumerate() {
            while j + 1 < h.len() && h[j + 1].k <= k {
                j += 1;
            }
            columns[c].push(mse_of(&h[j])?);
        }
    }
    Ok(summarize(Axis::Iteration, grid.into_iter().map(|k| k as f64).collect(), columns.into_iter()))
}

/// `points` equispaced flop checkpoints from 0 to the largest final count;
/// MSE is linearly interpolated between records and held after a trial stops.
pub fn aggregate_by_flops(histories: &[&[IterationRecord]], axis: Axis, points: usize) -> Result<QuantileSeries> {
    if axis == Axis::Iteration {
        return Err(SbpError::InvalidParameter("flop aggregation needs a flop axis".into()));
    }
    let mut top = 0.0f64;
    for h in histories {
        let last = h.last().ok_or_else(|| SbpError::InvalidParameter("empty trial history".into()))?;
        top = top.max(axis.value(last));
    }
    let grid: Vec<f64> = if points == 1 || top == 0.0 {
        vec![0.0]
    } else {
        (0..points).map(|i| top * i as f64 / (points - 1) as f64).collect()
    };
    let mut columns = vec![Vec::with_capacity(histories.len()); grid.len()];
    for h in histories {
        for (c, &f) in grid.iter().enumerate() {
            let idx = h.partition_point(|r| axis.value(r) <= f);
            let v = if idx == 0 {
                mse_of(&h[0])?
            } else if idx == h.len() {
                mse_of(&h[h.len() - 1])?
            } else {
                let (lo, hi) = (&h[idx - 1], &h[idx]);
                let (f0, f1) = (axis.value(lo), axis.value(hi));
                let (y0, y1) = (mse_of(lo)?, mse_of(hi)?);
                y0 + (f - f0) / (f1 - f0) * (y1 - y0)
            };
            columns[c].push(v);
        }
    }
    Ok(summarize(axis, grid, columns.into_iter()))
}

#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub seed: u64,
    pub data_seed: Option<u64>,
    pub termination: Termination,
    pub history: Vec<IterationRecord>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub by_iteration: QuantileSeries,
    pub by_flops: QuantileSeries,
    pub trials: Vec<TrialOutcome>,
}

fn load_source(cfg: &ExperimentConfig, data_seed: Option<u64>) -> Result<LinearSystem> {
    match &cfg.source {
        MatrixSource::Gaussian { m, n, .. } => {
            generate_problem(*m, *n, cfg.sparsity, data_seed.expect("gaussian source has a data seed"))
        }
        MatrixSource::File { matrix, rhs, truth } => Ok(LinearSystem {
            a: mmio::load_matrix(matrix)?,
            b: mmio::load_vector(rhs)?,
            truth: truth.as_ref().map(mmio::load_vector).transpose()?,
        }),
    }
}

fn build_problem(cfg: &ExperimentConfig, data_seed: Option<u64>) -> Result<Problem> {
    let problem = load_source(cfg, data_seed)?.into_problem(cfg.generating_function()?)?;
    if cfg.step == StepMode::Inexact {
        problem.normalize_rows()
    } else {
        Ok(problem)
    }
}

fn run_trial(problem: &Problem, cfg: &ExperimentConfig, seed: u64) -> Result<(Termination, Vec<IterationRecord>)> {
    let mut rule = SamplingRule::new(cfg.rule, problem.sketch(), seed)?;
    let options = SolveOptions::new(cfg.step, cfg.stop)
        .with_stride(cfg.history_stride)
        .with_method(cfg.method);
    let result = run(problem, &mut rule, &options)?;
    Ok((result.termination, result.history))
}

/// Run every trial, then aggregate on the iteration and flop axes.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let shared_seed = match &cfg.source {
        MatrixSource::Gaussian { seed, .. } => Some(seed.unwrap_or_else(|| child_seed(cfg.master_seed, 0))),
        MatrixSource::File { .. } => None,
    };
    let shared = if cfg.fresh_data_per_trial {
        None
    } else {
        Some(build_problem(cfg, shared_seed)?)
    };
    if let Some(p) = &shared {
        if p.truth().is_none() {
            return Err(SbpError::InvalidParameter("experiments need a ground truth for the MSE".into()));
        }
    }

    let trial = |t: usize| -> Result<TrialOutcome> {
        let seed = child_seed(cfg.master_seed, t as u64 + 1);
        let wrap = |e: SbpError| SbpError::TrialFailed {
            seed,
            source: Box::new(e),
        };
        let (data_seed, outcome) = match &shared {
            Some(p) => (shared_seed, run_trial(p, cfg, seed)),
            None => {
                let ds = child_seed(cfg.master_seed ^ FRESH_DATA_SALT, t as u64);
                let p = build_problem(cfg, Some(ds)).map_err(wrap)?;
                (Some(ds), run_trial(&p, cfg, seed))
            }
        };
        let (termination, history) = outcome.map_err(wrap)?;
        Ok(TrialOutcome {
            seed,
            data_seed,
            termination,
            history,
        })
    };
    let collect = || (0..cfg.trials).into_par_iter().map(trial).collect::<Result<Vec<_>>>();
    let trials = match cfg.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| SbpError::InvalidParameter(format!("thread pool: {e}")))?
            .install(collect)?,
        None => collect()?,
    };

    let histories: Vec<&[IterationRecord]> = trials.iter().map(|t| t.history.as_slice()).collect();
    Ok(ExperimentOutput {
        by_iteration: aggregate_by_iteration(&histories)?,
        by_flops: aggregate_by_flops(&histories, cfg.flop_axis, cfg.grid_points)?,
        trials,
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Write `<prefix>_iter.csv`, `<prefix>_flops.csv` and, if enabled,
/// `<prefix>.svg`. Returns the written paths.
pub fn write_outputs(cfg: &ExperimentConfig, output: &ExperimentOutput) -> Result<Vec<PathBuf>> {
    let prefix = &cfg.output_prefix;
    let mut meta = cfg.metadata();
    let mut paths = Vec::new();

    meta.push(("axis".into(), Axis::Iteration.name().into()));
    let iter_path = with_suffix(prefix, "_iter.csv");
    fs::write(&iter_path, output.by_iteration.to_csv(&meta))?;
    paths.push(iter_path);

    meta.pop();
    meta.push(("axis".into(), cfg.flop_axis.name().into()));
    let model = match cfg.flop_axis {
        Axis::MeasuredFlops => "measured",
        _ => cfg.method.flop_model(),
    };
    meta.push(("flop-model".into(), model.into()));
    let flops_path = with_suffix(prefix, "_flops.csv");
    fs::write(&flops_path, output.by_flops.to_csv(&meta))?;
    paths.push(flops_path);

    if cfg.svg {
        let svg_path = with_suffix(prefix, ".svg");
        fs::write(&svg_path, svg::render_panels(&[&output.by_iteration, &output.by_flops]))?;
        paths.push(svg_path);
    }
    Ok(paths)
}

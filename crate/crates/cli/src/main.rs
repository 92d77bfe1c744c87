//! `sbp`: generate test systems, solve them, run multi-trial benches and
//! print spectral rate reports.
//!
//! Exit codes: 0 success, 2 bad input, 3 numerical failure.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sbp_core::experiment::{parse_config_text, run_experiment, write_outputs, ExperimentConfig};
use sbp_core::history::write_history;
use sbp_core::mmio;
use sbp_core::sketching::SketchSet;
use sbp_core::spectral::{rate_report, RateParams, SpectralOptions};
use sbp_core::{
    generate_problem, GeneratingFunction, Method, Problem, RuleKind, SamplingRule, SolveOptions, StepMode,
    StoppingCriteria,
};

#[derive(Parser)]
#[command(name = "sbp", version, about = "Sketched Bregman projection solvers for consistent linear systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a Gaussian system with a sparse ground truth as PREFIX_{A,b,x}.mtx.
    Generate(GenerateArgs),
    /// Run one solve and write its iteration history.
    Solve(SolveArgs),
    /// Run a multi-trial experiment and write quantile CSVs.
    Bench(BenchArgs),
    /// Compute spectral constants and rate bounds.
    Spectral(SpectralArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    #[arg(long)]
    sparsity: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Kaczmarz,
    Sparse,
}

#[derive(Clone, Copy, ValueEnum)]
enum StepArg {
    Exact,
    Inexact,
}

#[derive(Args)]
struct RuleArgs {
    /// uniform, rownorm, maxdist, proportional, capped, skm or general.
    #[arg(long, default_value = "uniform")]
    rule: String,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    beta: Option<usize>,
}

impl RuleArgs {
    fn kind(&self) -> sbp_core::Result<RuleKind> {
        RuleKind::parse(&self.rule, self.theta, self.beta)
    }
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    rhs: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sparse")]
    method: MethodArg,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[command(flatten)]
    rule: RuleArgs,
    #[arg(long, value_enum, default_value = "exact")]
    step: StepArg,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    mse_tol: Option<f64>,
    #[arg(long)]
    residual_tol: Option<f64>,
    #[arg(long)]
    flop_budget: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Record every STRIDE-th iteration (the final one is always kept).
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long)]
    history: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Flat key=value file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    sparsity: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long)]
    rhs: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rule: Option<String>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    beta: Option<usize>,
    #[arg(long)]
    step: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    mse_tol: Option<f64>,
    #[arg(long)]
    residual_tol: Option<f64>,
    #[arg(long)]
    flop_budget: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    grid_points: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    svg: bool,
    /// Aggregate on measured instead of modeled flops.
    #[arg(long)]
    measured: bool,
    #[arg(long)]
    fresh_data_per_trial: bool,
}

impl BenchArgs {
    fn pairs(&self) -> sbp_core::Result<BTreeMap<String, String>> {
        let mut pairs = match &self.config {
            Some(path) => parse_config_text(&fs::read_to_string(path)?)?,
            None => BTreeMap::new(),
        };
        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.insert(k.to_string(), v);
            }
        };
        let s = |v: &Option<usize>| v.map(|x| x.to_string());
        let path = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string());
        let float = |v: &Option<f64>| v.map(|x| x.to_string());
        set("rows", s(&self.rows));
        set("cols", s(&self.cols));
        set("sparsity", s(&self.sparsity));
        set("data-seed", self.data_seed.map(|x| x.to_string()));
        set("matrix", path(&self.matrix));
        set("rhs", path(&self.rhs));
        set("truth", path(&self.truth));
        set("method", self.method.clone());
        set("lambda", float(&self.lambda));
        set("rule", self.rule.clone());
        set("theta", float(&self.theta));
        set("beta", s(&self.beta));
        set("step", self.step.clone());
        set("trials", s(&self.trials));
        set("seed", self.seed.map(|x| x.to_string()));
        set("max-iters", s(&self.max_iters));
        set("mse-tol", float(&self.mse_tol));
        set("residual-tol", float(&self.residual_tol));
        set("flop-budget", float(&self.flop_budget));
        set("workers", s(&self.workers));
        set("grid-points", s(&self.grid_points));
        set("stride", s(&self.stride));
        set("out", path(&self.out));
        for (k, on) in [
            ("svg", self.svg),
            ("measured", self.measured),
            ("fresh-data-per-trial", self.fresh_data_per_trial),
        ] {
            if on {
                set(k, Some("true".into()));
            }
        }
        Ok(pairs)
    }
}

#[derive(Args)]
struct SpectralArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    rule: RuleArgs,
    /// Sparse Kaczmarz when positive, Kaczmarz otherwise.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Contiguous row blocks of this size instead of single rows.
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn generate(args: &GenerateArgs) -> sbp_core::Result<()> {
    let sys = generate_problem(args.rows, args.cols, args.sparsity, args.seed)?;
    let stem = args.out.display().to_string();
    mmio::write_matrix(format!("{stem}_A.mtx"), &sys.a)?;
    mmio::write_vector(format!("{stem}_b.mtx"), &sys.b)?;
    if let Some(x) = &sys.truth {
        mmio::write_vector(format!("{stem}_x.mtx"), x)?;
    }
    println!("wrote {stem}_A.mtx {stem}_b.mtx {stem}_x.mtx");
    Ok(())
}

fn generating_function(method: MethodArg, lambda: f64) -> sbp_core::Result<GeneratingFunction> {
    match method {
        MethodArg::Kaczmarz => Ok(GeneratingFunction::SquaredNorm),
        MethodArg::Sparse => GeneratingFunction::elastic_net(lambda),
    }
}

fn solve(args: &SolveArgs) -> sbp_core::Result<()> {
    let a = mmio::load_matrix(&args.matrix)?;
    let b = mmio::load_vector(&args.rhs)?;
    let truth = args.truth.as_ref().map(mmio::load_vector).transpose()?;
    let f = generating_function(args.method, args.lambda)?;
    let mut problem = Problem::with_rows(a, b, truth, f)?;
    let step = match args.step {
        StepArg::Exact => StepMode::Exact,
        StepArg::Inexact => {
            problem = problem.normalize_rows()?;
            StepMode::Inexact
        }
    };
    let mut stop = StoppingCriteria {
        max_iters: args.max_iters,
        mse_tol: args.mse_tol,
        residual_tol: args.residual_tol,
        flop_budget: args.flop_budget,
    };
    if stop == StoppingCriteria::default() {
        stop = StoppingCriteria::defaults_for(&problem);
    }
    let kind = args.rule.kind()?;
    let mut rule = SamplingRule::new(kind, problem.sketch(), args.seed)?;
    let options = SolveOptions::new(step, stop).with_stride(args.stride);
    let result = sbp_core::run(&problem, &mut rule, &options)?;

    let method = Method::for_function(problem.generating_function());
    let meta: Vec<(String, String)> = [
        ("method", method.name().to_string()),
        ("lambda", f.lambda().to_string()),
        ("rule", kind.name().to_string()),
        ("seed", args.seed.to_string()),
        ("flop-model", method.flop_model().to_string()),
        ("termination", result.termination.name().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    write_history(BufWriter::new(File::create(&args.history)?), &result.history, &meta)?;

    let last = result.history.last().expect("history keeps the final iterate");
    println!("termination: {}", result.termination.name());
    println!("iterations: {}", result.state.k);
    if let Some(mse) = last.mse {
        println!("mse: {mse:.6e}");
    }
    println!("residual_norm: {:.6e}", (problem.a() * result.state.x() - problem.b()).norm());
    println!("flops_modeled: {:.6e}", result.state.flops_modeled);
    Ok(())
}

fn bench(args: &BenchArgs) -> sbp_core::Result<()> {
    let cfg = ExperimentConfig::from_pairs(&args.pairs()?)?;
    let output = run_experiment(&cfg)?;
    for path in write_outputs(&cfg, &output)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn spectral(args: &SpectralArgs) -> sbp_core::Result<()> {
    let a = mmio::load_matrix(&args.matrix)?;
    let truth = args.truth.as_ref().map(mmio::load_vector).transpose()?;
    let sketch = match args.block_size {
        Some(size) => SketchSet::contiguous_blocks(&a, size)?,
        None => SketchSet::rows(&a),
    };
    let method = if args.lambda > 0.0 {
        Method::SparseKaczmarz
    } else {
        Method::Kaczmarz
    };
    let params = RateParams {
        p: None,
        theta: args.rule.theta,
        lambda: args.lambda,
        truth,
    };
    let options = SpectralOptions {
        seed: args.seed,
        ..SpectralOptions::default()
    };
    let report = rate_report(&sketch, &a, args.rule.kind()?, method, &params, &options)?;
    fs::write(&args.out, report.to_text())?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Solve(a) => solve(a),
        Command::Bench(a) => bench(a),
        Command::Spectral(a) => spectral(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}


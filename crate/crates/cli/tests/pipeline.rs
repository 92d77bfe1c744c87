use std::fs;

use sbp_core::experiment::{run_experiment, write_outputs, ExperimentConfig, MatrixSource};
use sbp_core::history::{read_history, write_history};
use sbp_core::{
    generate_problem, mmio, run, DMatrix, DVector, GeneratingFunction, Method, Problem, RuleKind, SamplingRule,
    SolveOptions, StepMode, StoppingCriteria,
};

#[test]
fn files_solve_and_history_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sys = generate_problem(40, 60, 5, 11).unwrap();
    mmio::write_matrix(dir.path().join("A.mtx"), &sys.a).unwrap();
    mmio::write_vector(dir.path().join("b.mtx"), &sys.b).unwrap();
    mmio::write_vector(dir.path().join("x.mtx"), sys.truth.as_ref().unwrap()).unwrap();

    let a = mmio::load_matrix(dir.path().join("A.mtx")).unwrap();
    let b = mmio::load_vector(dir.path().join("b.mtx")).unwrap();
    let x = mmio::load_vector(dir.path().join("x.mtx")).unwrap();
    assert_eq!((&a, &b, &x), (&sys.a, &sys.b, sys.truth.as_ref().unwrap()));

    let problem = Problem::with_rows(a, b, Some(x), GeneratingFunction::ElasticNet { lambda: 0.5 }).unwrap();
    let mut rule = SamplingRule::new(RuleKind::SketchMotzkin { beta: 20 }, problem.sketch(), 3).unwrap();
    let stop = StoppingCriteria {
        max_iters: Some(50_000),
        mse_tol: Some(1e-8),
        ..Default::default()
    };
    let result = run(&problem, &mut rule, &SolveOptions::new(StepMode::Exact, stop)).unwrap();
    assert!(result.history.last().unwrap().mse.unwrap() <= 1e-8);

    let path = dir.path().join("h.csv");
    write_history(fs::File::create(&path).unwrap(), &result.history, &[("rule".into(), "skm".into())]).unwrap();
    let back = read_history(fs::read(&path).unwrap().as_slice()).unwrap();
    assert_eq!(back, result.history);
}

#[test]
fn identity_system_median_reaches_machine_precision() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("I.mtx"), dir.path().join("b.mtx"));
    mmio::write_matrix(&a, &DMatrix::identity(2, 2)).unwrap();
    mmio::write_vector(&b, &DVector::from_row_slice(&[1.0, -2.0])).unwrap();
    let mut cfg = ExperimentConfig::gaussian(2, 2, RuleKind::Uniform, Method::Kaczmarz, 0.0);
    cfg.source = MatrixSource::File {
        matrix: a,
        rhs: b.clone(),
        truth: Some(b),
    };
    cfg.trials = 100;
    cfg.stop = StoppingCriteria::max_iters(50);
    cfg.output_prefix = dir.path().join("id");
    cfg.svg = true;
    let out = run_experiment(&cfg).unwrap();
    let k50 = out.by_iteration.grid.iter().position(|&k| k == 50.0).unwrap();
    assert!(out.by_iteration.median[k50] <= 1e-16);

    let paths = write_outputs(&cfg, &out).unwrap();
    assert_eq!(paths.len(), 3);
    let first = fs::read(&paths[0]).unwrap();
    let again = run_experiment(&cfg).unwrap();
    write_outputs(&cfg, &again).unwrap();
    assert_eq!(fs::read(&paths[0]).unwrap(), first);
}

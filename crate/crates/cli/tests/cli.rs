//! End-to-end checks of the binary: artifact layout, error reporting, and
//! rerun determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn genhybr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genhybr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL_HEAT: &str = "\
problem.kind = heat
problem.n = 32
problem.noise = 0.02
problem.seed = 3
solver.rule = gcv
solver.max_iter = 15
";

#[test]
fn run_writes_history_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", SMALL_HEAT);
    let out = dir.path().join("out");

    let result = genhybr(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(result.status.success(), "{result:?}");

    let history = fs::read_to_string(out.join("history_main.csv")).unwrap();
    assert!(history.starts_with("# solve history v1\nk,lambda,"));
    assert!(history.lines().count() > 3);

    let log = fs::read_to_string(out.join("run.log")).unwrap();
    assert!(log.contains("problem.kind = heat"));
    assert!(log.contains("problem.seed = 3"));
    assert!(log.contains("solver main: stopped after"));
    assert!(log.contains("total time"));
}

#[test]
fn unknown_key_is_reported_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.cfg",
        "problem.kind = heat\nsolver.lambda_style = 5\n",
    );

    let result = genhybr(&["run", &cfg]);
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("line 2"), "{stderr}");
    assert!(stderr.contains("lambda_style"), "{stderr}");
}

#[test]
fn rerun_with_the_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", SMALL_HEAT);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");

    for out in [&out_a, &out_b] {
        let result = genhybr(&["run", &cfg, "--out", out.to_str().unwrap(), "--seed", "42"]);
        assert!(result.status.success(), "{result:?}");
    }
    let a = fs::read(out_a.join("history_main.csv")).unwrap();
    let b = fs::read(out_b.join("history_main.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seed_flag_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", SMALL_HEAT);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");

    genhybr(&["run", &cfg, "--out", out_a.to_str().unwrap(), "--seed", "1"]);
    genhybr(&["run", &cfg, "--out", out_b.to_str().unwrap(), "--seed", "2"]);
    let a = fs::read(out_a.join("history_main.csv")).unwrap();
    let b = fs::read(out_b.join("history_main.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn picard_subcommand_writes_the_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "picard.cfg",
        "problem.kind = heat\nproblem.n = 48\nprior.kind = matern\nprior.nu = 0.5\nprior.alpha = 2.0\n",
    );
    let out = dir.path().join("out");

    let result = genhybr(&["picard", &cfg, "--out", out.to_str().unwrap()]);
    assert!(result.status.success(), "{result:?}");

    let picard = fs::read_to_string(out.join("picard.csv")).unwrap();
    assert!(picard.starts_with("# generalized picard data v1\nj,sigma,"));
    assert_eq!(picard.lines().count(), 48 + 2);
}

#[test]
fn verify_subcommand_passes() {
    let result = genhybr(&["verify"]);
    assert!(result.status.success(), "{result:?}");
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("all checks passed"), "{stdout}");
}

#[test]
fn failed_solver_leaves_partial_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "partial.cfg",
        "\
problem.kind = heat
problem.n = 32
solver.good.rule = fixed:0.1
solver.good.max_iter = 5
solver.good.gcv_window = 0
solver.bad.rule = fixed:-1
",
    );
    let out = dir.path().join("out");

    let result = genhybr(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(!result.status.success());

    assert!(out.join("history_good.csv").exists());
    assert!(!out.join("run.log").exists());
    let partial = fs::read_to_string(out.join("run.log.partial")).unwrap();
    assert!(partial.contains("error: solver bad"), "{partial}");
}

#[test]
fn images_are_emitted_for_2d_problems() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "img.cfg",
        "\
problem.kind = seismic
problem.n_side = 12
problem.n_sou = 6
problem.n_rec = 6
solver.rule = optimal
solver.max_iter = 8
solver.gcv_window = 0
",
    );
    let out = dir.path().join("out");

    let result = genhybr(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(result.status.success(), "{result:?}");

    let truth = fs::read(out.join("truth.pgm")).unwrap();
    assert!(truth.starts_with(b"P5\n12 12\n255\n"));
    assert_eq!(truth.len(), "P5\n12 12\n255\n".len() + 144);
    assert!(out.join("solution_main.pgm").exists());
    let scale = fs::read_to_string(out.join("solution_main_scale.txt")).unwrap();
    assert!(scale.starts_with("min = "), "{scale}");
}

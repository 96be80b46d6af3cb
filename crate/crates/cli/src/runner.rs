//! Problem assembly, solver dispatch, and artifact emission.

use anyhow::{anyhow, bail, Context, Result};
use genhybr::covariance::CovarianceError;
use genhybr::linop::{adjoint_check, dense_from_operator, DiagonalOperator};
use genhybr::problems::{heat_problem, seismic_problem, superres_problem};
use genhybr::reference;
use genhybr::regparam::DEFAULT_WGCV_OMEGA;
use genhybr::{
    GridGeometry, HybridOptions, KernelSpec, KlSpec, LinearOperator, ParamRule, ProblemInstance,
    SolveRecord, SolverVariant, StationaryCovarianceOperator, StopRule,
};
use nalgebra::{DMatrix, DVector};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::config::{
    load_config, PriorConfig, ProblemKind, RuleConfig, RunConfig, SolverConfig,
};

/// Padding factors tried in order when a circulant embedding of the prior
/// kernel is not positive semidefinite at the default size. Long-range
/// kernels on short grids can need extreme padding before the wraparound
/// contribution stops poisoning the spectrum.
const PAD_LADDER: [usize; 12] = [2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64, 96];

fn build_problem(cfg: &RunConfig, seed: u64) -> Result<ProblemInstance> {
    let p = &cfg.problem;
    let instance = match p.kind {
        ProblemKind::Heat => heat_problem(p.n, p.noise, seed),
        ProblemKind::Seismic => {
            let kernel = KernelSpec::gaussian(1.0 / p.kl_length)
                .and_then(|k| k.with_amplitude(p.kl_theta))
                .context("truth-field kernel")?;
            let kl = KlSpec::new(kernel, p.kl_mean, p.kl_modes).context("truth-field expansion")?;
            seismic_problem(p.n_side, p.n_sou, p.n_rec, p.noise, &kl, seed)
        }
        ProblemKind::Superres => {
            superres_problem(p.hi_side, p.frames, p.lo_factor, None, p.noise, seed)
        }
    };
    instance.with_context(|| format!("building {} problem", p.kind.label()))
}

fn prior_kernel(prior: &PriorConfig) -> Result<Option<KernelSpec>> {
    let spec = match *prior {
        PriorConfig::Identity => return Ok(None),
        PriorConfig::Matern { nu, alpha } => KernelSpec::matern(nu, alpha),
        PriorConfig::GammaExponential { gamma, alpha } => {
            KernelSpec::gamma_exponential(1.0 / alpha, gamma)
        }
        PriorConfig::Gaussian { alpha } => KernelSpec::gaussian(alpha),
    };
    Ok(Some(spec.context("prior kernel parameters")?))
}

/// Builds the prior covariance operator, walking the padding ladder when the
/// minimum-size embedding is indefinite. Appends retry notes to `log`.
pub fn build_prior(
    prior: &PriorConfig,
    geometry: &GridGeometry,
    log: &mut String,
) -> Result<Arc<dyn LinearOperator>> {
    let Some(spec) = prior_kernel(prior)? else {
        return Ok(Arc::new(DiagonalOperator::identity(geometry.num_points())));
    };
    for &pad in &PAD_LADDER {
        match StationaryCovarianceOperator::build_padded(&spec, geometry, pad) {
            Ok(op) => {
                if pad > PAD_LADDER[0] {
                    let _ = writeln!(log, "prior embedding needed pad factor {pad}");
                }
                return Ok(Arc::new(op));
            }
            Err(CovarianceError::EmbeddingNotPsd { min, .. }) => {
                let _ = writeln!(
                    log,
                    "prior embedding not psd at pad factor {pad} (min eigenvalue {min:.3e}), retrying"
                );
            }
            Err(other) => return Err(other).context("building prior covariance"),
        }
    }
    bail!(
        "prior {} has no positive circulant embedding up to pad factor {}",
        prior.describe(),
        PAD_LADDER[PAD_LADDER.len() - 1]
    );
}

fn param_rule_for(rule: &RuleConfig, problem: &ProblemInstance) -> ParamRule {
    match *rule {
        RuleConfig::Fixed(lambda) => ParamRule::Fixed { lambda },
        RuleConfig::Optimal => ParamRule::Optimal,
        RuleConfig::Gcv => ParamRule::Gcv,
        RuleConfig::Wgcv(omega) => ParamRule::Wgcv {
            omega: omega.unwrap_or(DEFAULT_WGCV_OMEGA),
        },
        RuleConfig::Dp { tau } => ParamRule::Dp {
            tau,
            delta: problem.noise_norm_squared(),
        },
        RuleConfig::Upre(eta2) => ParamRule::Upre {
            eta2: eta2.unwrap_or_else(|| problem.noise_variance()),
        },
    }
}

fn hybrid_options(
    solver: &SolverConfig,
    problem: &ProblemInstance,
    mu: f64,
) -> HybridOptions {
    HybridOptions {
        variant: solver.variant,
        param_rule: param_rule_for(&solver.rule, problem),
        stop_rule: StopRule {
            max_iter: solver.max_iter,
            gcv_flat_tol: solver.gcv_flat_tol,
            gcv_window: solver.gcv_window,
            residual_tol: solver.residual_tol,
        },
        reorth: solver.reorth,
        mu: (mu != 0.0).then(|| DVector::from_element(problem.a.ncols(), mu)),
        record_errors_against: Some(problem.s_true.clone()),
    }
}

/// Writes an 8-bit binary PGM plus a `_scale.txt` sidecar recording the
/// affine map between gray levels and field values.
fn write_pgm(path: &Path, data: &DVector<f64>, shape: &[usize]) -> Result<()> {
    let (height, width) = (shape[0], shape[1]);
    assert_eq!(height * width, data.len(), "image shape mismatch");
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(data.iter().map(|&v| {
        if span > 0.0 {
            ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            128
        }
    }));
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;

    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| anyhow!("image path {} has no stem", path.display()))?;
    let sidecar = path.with_file_name(format!("{stem}_scale.txt"));
    let text = format!("min = {min:.17e}\nmax = {max:.17e}\n");
    fs::write(&sidecar, text).with_context(|| format!("writing {}", sidecar.display()))?;
    Ok(())
}

fn write_diagnostics(path: &Path, record: &SolveRecord) -> Result<()> {
    let mut out = String::from("# bidiagonal entries v1\nj,alpha,beta\n");
    let rows = record.alphas.len().max(record.betas.len());
    for j in 0..rows {
        let alpha = record
            .alphas
            .get(j)
            .map(|a| format!("{a:.17e}"))
            .unwrap_or_default();
        let beta = record
            .betas
            .get(j)
            .map(|b| format!("{b:.17e}"))
            .unwrap_or_default();
        let _ = writeln!(out, "{},{alpha},{beta}", j + 1);
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn densified(problem: &ProblemInstance, q_op: &dyn LinearOperator) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = problem.a.ncols();
    if n > reference::DENSE_LIMIT {
        bail!(
            "dense factorization needs at most {} unknowns, problem has {n}",
            reference::DENSE_LIMIT
        );
    }
    let a = dense_from_operator(problem.a.as_ref()).context("densifying forward operator")?;
    let q = dense_from_operator(q_op).context("densifying prior covariance")?;
    let r = DMatrix::from_diagonal(problem.r.diag());
    Ok((a, q, r))
}

fn write_picard(
    dir: &Path,
    problem: &ProblemInstance,
    q_op: &dyn LinearOperator,
    mu: f64,
) -> Result<()> {
    let (a, q, r) = densified(problem, q_op)?;
    let factors = reference::gsvd(&a, &q, &r).context("factorizing for the Picard data")?;
    let b = if mu != 0.0 {
        let shift = problem
            .a
            .apply(&DVector::from_element(a.ncols(), mu))
            .context("applying the mean shift")?;
        &problem.d - shift
    } else {
        problem.d.clone()
    };
    let rows = reference::picard_data(&factors, &b, &r);
    let mut out = String::from("# generalized picard data v1\nj,sigma,coefficient,ratio\n");
    for (j, row) in rows.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{:.17e},{:.17e},{:.17e}",
            j + 1,
            row.sigma,
            row.coefficient,
            row.ratio
        );
    }
    let path = dir.join("picard.csv");
    fs::write(&path, out).with_context(|| format!("writing {}", path.display()))
}

fn resolve_output(cfg: &RunConfig, out_override: Option<&Path>) -> PathBuf {
    out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.clone())
}

fn finish_log(dir: &Path, log: &str, partial: bool) -> Result<()> {
    let name = if partial { "run.log.partial" } else { "run.log" };
    let path = dir.join(name);
    fs::write(&path, log).with_context(|| format!("writing {}", path.display()))
}

pub fn run(
    config_path: &Path,
    out_override: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config_path)?;
    let seed = seed_override.unwrap_or(cfg.problem.seed);
    let dir = resolve_output(&cfg, out_override);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let started = Instant::now();
    let mut log = cfg.echo(seed);
    let _ = writeln!(log, "# run");

    match run_inner(&cfg, seed, &dir, &mut log) {
        Ok(()) => {
            let _ = writeln!(log, "total time {:.3} s", started.elapsed().as_secs_f64());
            finish_log(&dir, &log, false)?;
            Ok(())
        }
        Err(err) => {
            let _ = writeln!(log, "error: {err:#}");
            let _ = writeln!(log, "total time {:.3} s", started.elapsed().as_secs_f64());
            finish_log(&dir, &log, true)?;
            Err(err)
        }
    }
}

fn run_inner(cfg: &RunConfig, seed: u64, dir: &Path, log: &mut String) -> Result<()> {
    let problem = build_problem(cfg, seed)?;
    let mu = cfg.problem.effective_mu();
    let _ = writeln!(
        log,
        "data rows m = {}, unknowns n = {}",
        problem.a.nrows(),
        problem.a.ncols()
    );
    let _ = writeln!(
        log,
        "realized noise norm = {:.6e}",
        problem.noise_norm_squared().sqrt()
    );

    let global_prior = build_prior(&cfg.prior, &problem.geometry, log)
        .with_context(|| format!("prior {}", cfg.prior.describe()))?;

    if cfg.emit.picard_csv {
        write_picard(dir, &problem, global_prior.as_ref(), mu)?;
        let _ = writeln!(log, "wrote picard.csv");
    }

    if cfg.emit.images && problem.geometry.dims() == 2 {
        let path = dir.join("truth.pgm");
        write_pgm(&path, &problem.s_true, problem.geometry.shape())?;
        let _ = writeln!(log, "wrote truth.pgm");
    }

    for solver in &cfg.solvers {
        let q: Arc<dyn LinearOperator> = match &solver.prior {
            Some(prior) => build_prior(prior, &problem.geometry, log)
                .with_context(|| format!("solver {} prior {}", solver.name, prior.describe()))?,
            None => Arc::clone(&global_prior),
        };
        let opts = hybrid_options(solver, &problem, mu);
        let solver_started = Instant::now();
        let record = genhybr::solve(
            problem.a.as_ref(),
            &problem.r,
            q.as_ref(),
            &problem.d,
            &opts,
        )
        .with_context(|| format!("solver {}", solver.name))?;

        for row in &record.rows {
            let _ = writeln!(
                log,
                "solver {}: iter {} lambda = {:.10e}",
                solver.name, row.k, row.lambda
            );
        }
        let _ = writeln!(
            log,
            "solver {}: stopped after {} iterations ({}), final lambda = {:.10e}, time {:.3} s",
            solver.name,
            record.iterations(),
            record.stop_reason,
            record.final_lambda(),
            solver_started.elapsed().as_secs_f64()
        );

        if cfg.emit.history_csv {
            let path = dir.join(format!("history_{}.csv", solver.name));
            let file = fs::File::create(&path)
                .with_context(|| format!("creating {}", path.display()))?;
            record
                .write_csv(std::io::BufWriter::new(file))
                .with_context(|| format!("writing {}", path.display()))?;
        }
        if cfg.emit.diagnostics {
            write_diagnostics(&dir.join(format!("diagnostics_{}.csv", solver.name)), &record)?;
        }
        if cfg.emit.images && problem.geometry.dims() == 2 {
            let path = dir.join(format!("solution_{}.pgm", solver.name));
            write_pgm(&path, &record.solution, problem.geometry.shape())?;
        }
    }
    Ok(())
}

pub fn picard(
    config_path: &Path,
    out_override: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config_path)?;
    let seed = seed_override.unwrap_or(cfg.problem.seed);
    let dir = resolve_output(&cfg, out_override);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let mut log = cfg.echo(seed);
    let problem = build_problem(&cfg, seed)?;
    let prior = build_prior(&cfg.prior, &problem.geometry, &mut log)?;
    write_picard(&dir, &problem, prior.as_ref(), cfg.problem.effective_mu())?;
    let _ = writeln!(log, "wrote picard.csv");
    finish_log(&dir, &log, false)
}

/// Runs a short invariant suite against small built-in problems and prints
/// one line per check. Fails fast with a nonzero exit when any check fails.
pub fn verify() -> Result<()> {
    let mut failures = 0usize;
    let mut check = |name: &str, result: Result<f64>, tol: f64| {
        match result {
            Ok(value) if value <= tol => {
                println!("ok: {name} ({value:.3e} <= {tol:.1e})");
            }
            Ok(value) => {
                println!("FAIL: {name} ({value:.3e} > {tol:.1e})");
                failures += 1;
            }
            Err(err) => {
                println!("FAIL: {name} ({err:#})");
                failures += 1;
            }
        }
    };

    check("forward operator adjoint", verify_adjoint(), 1e-10);
    check("circulant prior matches dense kernel", verify_prior(), 1e-10);
    check("bidiagonalization identities", verify_gengk(), 1e-8);
    check("fixed-parameter solve matches dense oracle", verify_hybrid(), 1e-8);

    if failures > 0 {
        bail!("{failures} verification check(s) failed");
    }
    println!("all checks passed");
    Ok(())
}

fn verify_adjoint() -> Result<f64> {
    let problem = heat_problem(48, 0.01, 11)?;
    Ok(adjoint_check(problem.a.as_ref(), 5, 17)?)
}

fn verify_prior() -> Result<f64> {
    let spec = KernelSpec::matern(1.5, 2.0)?;
    let grid = GridGeometry::new_1d(64, 1.0 / 64.0)?;
    let mut log = String::new();
    let op = build_prior(
        &PriorConfig::Matern { nu: 1.5, alpha: 2.0 },
        &grid,
        &mut log,
    )?;
    let dense = genhybr::covariance::assemble_dense(&spec, &grid.grid_points())?;
    let got = dense_from_operator(op.as_ref())?;
    let scale = dense.amax().max(1.0);
    Ok((got - dense).amax() / scale)
}

fn verify_gengk() -> Result<f64> {
    let problem = heat_problem(48, 0.01, 3)?;
    let spec = KernelSpec::matern(0.5, 2.0)?;
    let q = StationaryCovarianceOperator::build(&spec, &problem.geometry)?;
    let mut state = genhybr::GenGkState::init(
        problem.a.as_ref(),
        &problem.r,
        &q,
        &problem.d,
        true,
    )?;
    for _ in 0..20 {
        state.step()?;
    }
    let k = state.available_k();
    let b = state.bidiagonal().to_dense();

    // AQV_k = U_{k+1} B_k, columnwise.
    let mut worst = 0.0f64;
    for j in 0..k {
        let lhs = problem.a.apply(state.qv(j))?;
        let mut rhs = DVector::zeros(lhs.len());
        for i in 0..=k {
            rhs += state.u(i) * b[(i, j)];
        }
        worst = worst.max((lhs - rhs).norm());
    }
    Ok(worst / state.beta1().max(1.0))
}

fn verify_hybrid() -> Result<f64> {
    let problem = heat_problem(48, 0.01, 5)?;
    let spec = KernelSpec::matern(0.5, 2.0)?;
    let q = StationaryCovarianceOperator::build(&spec, &problem.geometry)?;
    let lambda = 0.3;

    let opts = HybridOptions {
        variant: SolverVariant::Lsqr,
        param_rule: ParamRule::Fixed { lambda },
        stop_rule: StopRule {
            max_iter: 48,
            gcv_window: 0,
            ..StopRule::default()
        },
        ..HybridOptions::default()
    };
    let record = genhybr::solve(problem.a.as_ref(), &problem.r, &q, &problem.d, &opts)?;

    let a = dense_from_operator(problem.a.as_ref())?;
    let qd = dense_from_operator(&q)?;
    let r = DMatrix::from_diagonal(problem.r.diag());
    let factors = reference::gsvd(&a, &qd, &r)?;
    let direct = reference::filtered_solution(
        &factors,
        &reference::FilterSpec::Tikhonov { lambda },
        &problem.d,
        &r,
        None,
    );
    Ok((record.solution - &direct).norm() / direct.norm().max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn identity_prior_is_the_identity_operator() {
        let grid = GridGeometry::new_1d(12, 1.0).unwrap();
        let mut log = String::new();
        let op = build_prior(&PriorConfig::Identity, &grid, &mut log).unwrap();
        let dense = dense_from_operator(op.as_ref()).unwrap();
        assert_eq!(dense, DMatrix::identity(12, 12));
        assert!(log.is_empty());
    }

    #[test]
    fn pgm_writer_scales_to_full_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.pgm");
        let data = DVector::from_vec(vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        write_pgm(&path, &data, &[2, 3]).unwrap();

        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let pixels = &bytes[bytes.len() - 6..];
        assert_eq!(pixels[0], 0);
        assert_eq!(pixels[5], 255);

        let sidecar = fs::read_to_string(dir.path().join("field_scale.txt")).unwrap();
        assert!(sidecar.contains("min = 0"));
        assert!(sidecar.contains("max = 5"));
    }

    #[test]
    fn constant_image_maps_to_mid_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.pgm");
        let data = DVector::from_element(4, 7.5);
        write_pgm(&path, &data, &[2, 2]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes[bytes.len() - 4..].iter().all(|&b| b == 128));
    }

    #[test]
    fn dp_rule_reads_the_realized_noise() {
        let cfg = parse_config("problem.kind = heat\nsolver.rule = dp:1.25\n").unwrap();
        let problem = build_problem(&cfg, 1).unwrap();
        let rule = param_rule_for(&cfg.solvers[0].rule, &problem);
        match rule {
            ParamRule::Dp { tau, delta } => {
                assert_eq!(tau, 1.25);
                assert_eq!(delta, problem.noise_norm_squared());
            }
            other => panic!("unexpected rule {other:?}"),
        }
    }
}

//! The outer hybrid solver: gen-GK steps, per-iteration parameter selection
//! on the projected subproblem, iterate recovery, history recording, and
//! stopping.
//!
//! Because the regularization parameter enters only the projected solve, one
//! bidiagonalization serves every candidate `lambda`: the basis produced by
//! [`solve`] is bitwise independent of the parameter rule. Setting a fixed
//! `lambda = 0` gives the undamped gen-LSQR/gen-LSMR iteration, which is the
//! semiconvergent baseline the probe below quantifies.

use crate::gengk::{GenGkError, GenGkState, StepOutcome};
use crate::linop::{LinearOperator, NoiseModel, OperatorError};
use crate::projected::{recover_solution, ProjectedProblem, SolverVariant};
use crate::regparam::{
    gcv_projected, select_lambda, should_stop, ParamRule, RegParamError, SelectionContext,
    StopReason, StopRule,
};
use nalgebra::DVector;
use std::io::Write;
use thiserror::Error;

/// Stand-in for an infinite parameter when the discrepancy target exceeds
/// the data norm and no finite `lambda` can reach it.
const LAMBDA_GUARD: f64 = 1e10;

#[derive(Debug, Error)]
pub enum HybridError {
    #[error(transparent)]
    GenGk(#[from] GenGkError),
    #[error(transparent)]
    Param(#[from] RegParamError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error("solve record carries no relative errors; run with a reference solution")]
    MissingErrors,
}

/// Solver configuration. `mu` is the prior mean (`None` for zero); when
/// `record_errors_against` is set, every iterate is recovered and its
/// relative error recorded, and the optimal parameter rule reads the same
/// vector as its reference.
#[derive(Debug, Clone)]
pub struct HybridOptions {
    pub variant: SolverVariant,
    pub param_rule: ParamRule,
    pub stop_rule: StopRule,
    pub reorth: bool,
    pub mu: Option<DVector<f64>>,
    pub record_errors_against: Option<DVector<f64>>,
}

impl Default for HybridOptions {
    fn default() -> Self {
        HybridOptions {
            variant: SolverVariant::Lsqr,
            param_rule: ParamRule::Gcv,
            stop_rule: StopRule::default(),
            reorth: true,
            mu: None,
            record_errors_against: None,
        }
    }
}

/// One outer iteration's scalars.
#[derive(Debug, Clone)]
pub struct IterationRow {
    pub k: usize,
    pub lambda: f64,
    /// Projected residual norm at the selected parameter.
    pub residual_norm: f64,
    /// Norm of the projected coefficient vector.
    pub solution_seminorm: f64,
    /// Projected cross-validation score at the selected parameter, the
    /// stopping quantity.
    pub gcv: f64,
    pub relative_error: Option<f64>,
    /// Set on the final row only.
    pub reason: Option<StopReason>,
}

/// Full history of one solve plus the final recovered solution.
#[derive(Debug, Clone)]
pub struct SolveRecord {
    pub rows: Vec<IterationRow>,
    pub solution: DVector<f64>,
    pub stop_reason: StopReason,
    /// Recurrence constants `alpha_1..` and `beta_1..` of the underlying
    /// bidiagonalization, recorded for diagnostics and reproducibility
    /// checks.
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl SolveRecord {
    pub fn final_lambda(&self) -> f64 {
        self.rows.last().map(|r| r.lambda).unwrap_or(0.0)
    }

    pub fn iterations(&self) -> usize {
        self.rows.len()
    }

    /// Writes the history as CSV with the fixed column set
    /// `k,lambda,resnorm,znorm,gcv,relerr,reason`. Floats are printed with
    /// full precision so identical runs serialize identically.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# solve history v1")?;
        writeln!(w, "k,lambda,resnorm,znorm,gcv,relerr,reason")?;
        for row in &self.rows {
            let relerr = row
                .relative_error
                .map(|e| format!("{e:.17e}"))
                .unwrap_or_default();
            let reason = row.reason.map(|r| r.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{},{}",
                row.k,
                row.lambda,
                row.residual_norm,
                row.solution_seminorm,
                row.gcv,
                relerr,
                reason
            )?;
        }
        Ok(())
    }
}

/// Runs the hybrid iteration on `R^{-1}`-weighted data `d` with prior
/// covariance `Q`. Shifts the data by the prior mean, iterates gen-GK,
/// selects the parameter each iteration per the rule, and stops per the
/// stop rule or on subspace exhaustion.
pub fn solve(
    a: &dyn LinearOperator,
    r: &NoiseModel,
    q: &dyn LinearOperator,
    d: &DVector<f64>,
    opts: &HybridOptions,
) -> Result<SolveRecord, HybridError> {
    opts.param_rule.validate()?;
    let b = match &opts.mu {
        Some(mu) => d - a.apply(mu)?,
        None => d.clone(),
    };
    let truth_norm = opts.record_errors_against.as_ref().map(|t| t.norm());

    let mut state = GenGkState::init(a, r, q, &b, opts.reorth)?;
    let mut rows: Vec<IterationRow> = Vec::new();
    let mut gcv_history = Vec::new();
    let mut residual_history = Vec::new();

    let (stop_reason, z) = loop {
        let outcome = state.step()?;
        let pp = ProjectedProblem::build(&state, opts.variant);
        let ctx = SelectionContext {
            state: &state,
            mu: opts.mu.as_ref(),
            truth: opts.record_errors_against.as_ref(),
        };
        let lambda = match select_lambda(&opts.param_rule, &pp, &ctx) {
            Ok(lam) => lam,
            // Discrepancy signals are iteration-local: a target below the
            // reachable floor resolves itself once the subspace grows, and a
            // target above the data norm pins the guard value.
            Err(RegParamError::DpTooEarly { .. }) => 0.0,
            Err(RegParamError::DpBelowData { .. }) => LAMBDA_GUARD,
            Err(other) => return Err(other.into()),
        };
        let sol = pp.solve_for_lambda(lambda);
        let gcv = gcv_projected(&pp, lambda);
        let relative_error = match (&opts.record_errors_against, truth_norm) {
            (Some(truth), Some(scale)) => {
                let recovered = recover_solution(&state, &sol.z, opts.mu.as_ref());
                Some((recovered - truth).norm() / scale)
            }
            _ => None,
        };
        rows.push(IterationRow {
            k: pp.k(),
            lambda,
            residual_norm: sol.residual_norm,
            solution_seminorm: sol.solution_seminorm,
            gcv,
            relative_error,
            reason: None,
        });
        gcv_history.push(gcv);
        residual_history.push(sol.residual_norm);

        if let StepOutcome::Breakdown(_) = outcome {
            break (StopReason::Breakdown, sol.z);
        }
        if let Some(reason) = should_stop(&gcv_history, &residual_history, &opts.stop_rule) {
            break (reason, sol.z);
        }
    };

    if let Some(row) = rows.last_mut() {
        row.reason = Some(stop_reason);
    }
    let solution = recover_solution(&state, &z, opts.mu.as_ref());
    Ok(SolveRecord {
        rows,
        solution,
        stop_reason,
        alphas: state.alphas().to_vec(),
        betas: state.betas().to_vec(),
    })
}

/// Error trajectory digest of one run: where the error bottomed out, where
/// it ended, and whether the tail rose more than 10% above the bottom.
#[derive(Debug, Clone, Copy)]
pub struct RunErrorSummary {
    pub min_error: f64,
    pub min_iteration: usize,
    pub terminal_error: f64,
    pub semiconvergent: bool,
}

/// Side-by-side semiconvergence report for an undamped baseline and a
/// regularized run.
#[derive(Debug, Clone, Copy)]
pub struct SemiconvergenceReport {
    pub baseline: RunErrorSummary,
    pub regularized: RunErrorSummary,
}

fn summarize_errors(record: &SolveRecord) -> Result<RunErrorSummary, HybridError> {
    let mut min_error = f64::INFINITY;
    let mut min_iteration = 0;
    let mut terminal_error = f64::NAN;
    let mut any = false;
    for row in &record.rows {
        let Some(err) = row.relative_error else {
            continue;
        };
        any = true;
        terminal_error = err;
        if err < min_error {
            min_error = err;
            min_iteration = row.k;
        }
    }
    if !any {
        return Err(HybridError::MissingErrors);
    }
    Ok(RunErrorSummary {
        min_error,
        min_iteration,
        terminal_error,
        semiconvergent: terminal_error > 1.1 * min_error,
    })
}

/// Compares the error histories of an undamped (`lambda = 0`) baseline and a
/// regularized run; both records must have been produced with a reference
/// solution.
pub fn semiconvergence_probe(
    baseline: &SolveRecord,
    regularized: &SolveRecord,
) -> Result<SemiconvergenceReport, HybridError> {
    Ok(SemiconvergenceReport {
        baseline: summarize_errors(baseline)?,
        regularized: summarize_errors(regularized)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{assemble_dense, KernelSpec};
    use crate::linop::{dense_from_operator, DenseOperator, DiagonalOperator};
    use crate::problems::{heat_problem, seismic_problem, KlSpec};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn fixed(lambda: f64) -> ParamRule {
        ParamRule::Fixed { lambda }
    }

    fn run_to_iteration_cap(max_iter: usize, rule: ParamRule) -> HybridOptions {
        HybridOptions {
            param_rule: rule,
            stop_rule: StopRule {
                max_iter,
                gcv_window: 0,
                ..StopRule::default()
            },
            ..HybridOptions::default()
        }
    }

    #[test]
    fn identity_problem_converges_in_one_iteration() {
        let a = DiagonalOperator::identity(4);
        let q = DiagonalOperator::identity(4);
        let r = NoiseModel::identity(4);
        let d = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let record = solve(&a, &r, &q, &d, &run_to_iteration_cap(10, fixed(0.0))).unwrap();
        assert_eq!(record.iterations(), 1);
        assert_eq!(record.stop_reason, StopReason::Breakdown);
        assert_relative_eq!((&record.solution - &d).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn heat_solution_matches_dense_map_oracle() {
        let n = 64;
        let problem = heat_problem(n, 0.01, 31).unwrap();
        let a_mat = dense_from_operator(problem.a.as_ref()).unwrap();
        let spec = KernelSpec::matern(0.5, 2.0).unwrap();
        let q_mat = assemble_dense(&spec, &problem.geometry.grid_points()).unwrap();
        let a = DenseOperator::new(a_mat.clone()).unwrap();
        let q = DenseOperator::new(q_mat.clone()).unwrap();
        let r = NoiseModel::identity(n);

        let lambda = 0.4;
        let record = solve(&a, &r, &q, &problem.d, &run_to_iteration_cap(n, fixed(lambda))).unwrap();

        let lhs = a_mat.transpose() * &a_mat * &q_mat
            + DMatrix::identity(n, n) * (lambda * lambda);
        let rhs = a_mat.transpose() * &problem.d;
        let x = lhs.lu().solve(&rhs).unwrap();
        let direct = &q_mat * x;
        let rel = (&record.solution - &direct).norm() / direct.norm();
        assert!(rel <= 1e-6, "MAP mismatch {rel}");
    }

    #[test]
    fn basis_is_independent_of_the_parameter_rule() {
        let n = 64;
        let problem = heat_problem(n, 0.02, 5).unwrap();
        let a_mat = dense_from_operator(problem.a.as_ref()).unwrap();
        let spec = KernelSpec::matern(0.5, 2.0).unwrap();
        let q_mat = assemble_dense(&spec, &problem.geometry.grid_points()).unwrap();
        let a = DenseOperator::new(a_mat).unwrap();
        let q = DenseOperator::new(q_mat).unwrap();
        let r = NoiseModel::identity(n);

        let rec_small = solve(&a, &r, &q, &problem.d, &run_to_iteration_cap(12, fixed(1e-3)))
            .unwrap();
        let rec_large = solve(&a, &r, &q, &problem.d, &run_to_iteration_cap(12, fixed(10.0)))
            .unwrap();
        assert_eq!(rec_small.alphas.len(), rec_large.alphas.len());
        for (x, y) in rec_small.alphas.iter().zip(&rec_large.alphas) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in rec_small.betas.iter().zip(&rec_large.betas) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn projected_objective_is_monotone_for_fixed_lambda() {
        let n = 64;
        let problem = heat_problem(n, 0.02, 11).unwrap();
        let a_mat = dense_from_operator(problem.a.as_ref()).unwrap();
        let spec = KernelSpec::matern(0.5, 2.0).unwrap();
        let q_mat = assemble_dense(&spec, &problem.geometry.grid_points()).unwrap();
        let a = DenseOperator::new(a_mat).unwrap();
        let q = DenseOperator::new(q_mat).unwrap();
        let r = NoiseModel::identity(n);

        let lambda = 0.2;
        let record = solve(&a, &r, &q, &problem.d, &run_to_iteration_cap(20, fixed(lambda)))
            .unwrap();
        let mut prev = f64::INFINITY;
        for row in &record.rows {
            let objective = 0.5 * row.residual_norm * row.residual_norm
                + 0.5 * lambda * lambda * row.solution_seminorm * row.solution_seminorm;
            assert!(
                objective <= prev + 1e-12,
                "objective rose from {prev} to {objective} at k = {}",
                row.k
            );
            prev = objective;
        }
    }

    #[test]
    fn matern_prior_beats_identity_prior_on_seismic_toy() {
        let kl = KlSpec::paper_defaults();
        let problem = seismic_problem(16, 12, 12, 0.02, &kl, 7).unwrap();
        let n = problem.ncols();
        let spec = KernelSpec::matern(1.5, 0.01).unwrap();
        let q_mat = assemble_dense(&spec, &problem.geometry.grid_points()).unwrap();
        let q_gen = DenseOperator::new(q_mat).unwrap();
        let q_id = DiagonalOperator::identity(n);
        let mu = DVector::from_element(n, 0.08);

        let opts = |_: usize| HybridOptions {
            param_rule: ParamRule::Optimal,
            stop_rule: StopRule {
                max_iter: 25,
                gcv_window: 0,
                ..StopRule::default()
            },
            mu: Some(mu.clone()),
            record_errors_against: Some(problem.s_true.clone()),
            ..HybridOptions::default()
        };
        let rec_gen = solve(problem.a.as_ref(), &problem.r, &q_gen, &problem.d, &opts(0)).unwrap();
        let rec_id = solve(problem.a.as_ref(), &problem.r, &q_id, &problem.d, &opts(0)).unwrap();

        for (row_gen, row_id) in rec_gen.rows.iter().zip(&rec_id.rows).skip(10) {
            let (eg, ei) = (
                row_gen.relative_error.unwrap(),
                row_id.relative_error.unwrap(),
            );
            assert!(
                eg < ei,
                "iteration {}: matern prior error {eg} not below identity prior {ei}",
                row_gen.k
            );
        }
    }

    #[test]
    fn undamped_run_semiconverges_and_hybrid_does_not() {
        let n = 64;
        let problem = heat_problem(n, 0.02, 3).unwrap();
        let a_mat = dense_from_operator(problem.a.as_ref()).unwrap();
        let spec = KernelSpec::matern(0.5, 2.0).unwrap();
        let q_mat = assemble_dense(&spec, &problem.geometry.grid_points()).unwrap();
        let a = DenseOperator::new(a_mat).unwrap();
        let q = DenseOperator::new(q_mat).unwrap();
        let r = NoiseModel::identity(n);

        let with_truth = |rule: ParamRule| HybridOptions {
            param_rule: rule,
            stop_rule: StopRule {
                max_iter: 40,
                gcv_window: 0,
                ..StopRule::default()
            },
            record_errors_against: Some(problem.s_true.clone()),
            ..HybridOptions::default()
        };
        let baseline = solve(&a, &r, &q, &problem.d, &with_truth(fixed(0.0))).unwrap();
        let regularized = solve(&a, &r, &q, &problem.d, &with_truth(ParamRule::Optimal)).unwrap();
        let report = semiconvergence_probe(&baseline, &regularized).unwrap();
        assert!(
            report.baseline.semiconvergent,
            "undamped terminal {} vs min {} at k={}",
            report.baseline.terminal_error,
            report.baseline.min_error,
            report.baseline.min_iteration
        );
        assert!(
            !report.regularized.semiconvergent,
            "regularized terminal {} vs min {}",
            report.regularized.terminal_error,
            report.regularized.min_error
        );
        assert!(report.regularized.terminal_error <= report.baseline.terminal_error);
    }

    #[test]
    fn noiseless_undamped_run_does_not_semiconverge() {
        let n = 64;
        let problem = heat_problem(n, 0.0, 3).unwrap();
        let a_mat = dense_from_operator(problem.a.as_ref()).unwrap();
        let spec = KernelSpec::matern(0.5, 2.0).unwrap();
        let q_mat = assemble_dense(&spec, &problem.geometry.grid_points()).unwrap();
        let a = DenseOperator::new(a_mat).unwrap();
        let q = DenseOperator::new(q_mat).unwrap();
        let r = NoiseModel::identity(n);
        let opts = HybridOptions {
            param_rule: fixed(0.0),
            stop_rule: StopRule {
                max_iter: 40,
                gcv_window: 0,
                ..StopRule::default()
            },
            record_errors_against: Some(problem.s_true.clone()),
            ..HybridOptions::default()
        };
        let record = solve(&a, &r, &q, &problem.d, &opts).unwrap();
        let summary = summarize_errors(&record).unwrap();
        assert!(
            !summary.semiconvergent,
            "terminal {} vs min {}",
            summary.terminal_error,
            summary.min_error
        );
    }

    #[test]
    fn gcv_stopping_halts_before_iteration_cap() {
        let n = 64;
        let problem = heat_problem(n, 0.02, 13).unwrap();
        let a_mat = dense_from_operator(problem.a.as_ref()).unwrap();
        let spec = KernelSpec::matern(0.5, 2.0).unwrap();
        let q_mat = assemble_dense(&spec, &problem.geometry.grid_points()).unwrap();
        let a = DenseOperator::new(a_mat).unwrap();
        let q = DenseOperator::new(q_mat).unwrap();
        let r = NoiseModel::identity(n);
        let opts = HybridOptions {
            param_rule: ParamRule::Wgcv { omega: 0.8 },
            stop_rule: StopRule {
                max_iter: 60,
                ..StopRule::default()
            },
            ..HybridOptions::default()
        };
        let record = solve(&a, &r, &q, &problem.d, &opts).unwrap();
        assert!(
            record.iterations() < 60,
            "expected early stop, ran {} iterations",
            record.iterations()
        );
        assert!(matches!(
            record.stop_reason,
            StopReason::GcvFlat | StopReason::GcvRising | StopReason::Breakdown
        ));
        let last = record.rows.last().unwrap();
        assert_eq!(last.reason, Some(record.stop_reason));
    }

    #[test]
    fn too_early_discrepancy_records_zero_lambda_then_recovers() {
        let n = 64;
        let problem = heat_problem(n, 0.02, 19).unwrap();
        let a_mat = dense_from_operator(problem.a.as_ref()).unwrap();
        let spec = KernelSpec::matern(0.5, 2.0).unwrap();
        let q_mat = assemble_dense(&spec, &problem.geometry.grid_points()).unwrap();
        let a = DenseOperator::new(a_mat).unwrap();
        let q = DenseOperator::new(q_mat).unwrap();
        let r = NoiseModel::identity(n);

        let delta = problem.noise_norm_squared();
        let opts = HybridOptions {
            param_rule: ParamRule::Dp { tau: 1.0, delta },
            stop_rule: StopRule {
                max_iter: 30,
                gcv_window: 0,
                ..StopRule::default()
            },
            ..HybridOptions::default()
        };
        let record = solve(&a, &r, &q, &problem.d, &opts).unwrap();
        assert_eq!(record.rows[0].lambda, 0.0, "first subspace cannot reach the target");
        let attained = record
            .rows
            .iter()
            .find(|row| row.lambda > 0.0)
            .expect("discrepancy eventually attainable");
        let achieved = attained.residual_norm * attained.residual_norm;
        assert_relative_eq!(achieved, delta, max_relative = 1e-6);
    }

    #[test]
    fn csv_export_has_fixed_schema() {
        let a = DiagonalOperator::identity(4);
        let q = DiagonalOperator::identity(4);
        let r = NoiseModel::identity(4);
        let d = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let record = solve(&a, &r, &q, &d, &run_to_iteration_cap(10, fixed(0.0))).unwrap();
        let mut buf = Vec::new();
        record.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# solve history v1"));
        assert_eq!(lines.next(), Some("k,lambda,resnorm,znorm,gcv,relerr,reason"));
        let first = lines.next().unwrap();
        assert!(first.starts_with("1,"));
        assert!(first.ends_with(",breakdown"));
        assert_eq!(first.split(',').count(), 7);
    }
}

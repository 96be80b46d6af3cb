//! Regularization-parameter selection on the projected subproblems and the
//! stopping logic for the outer hybrid iteration.
//!
//! Every estimator works on [`ProjectedProblem`] quantities alone, so each
//! evaluation costs `O(k)` and the search over `lambda` never touches the
//! full-size operators. The projected generalized cross-validation score is
//!
//! ```text
//! G(lambda) = k ||M z_lambda - rhs||^2 / [(k+1) - sum_i s_i^2/(s_i^2 + lambda^2)]^2
//! ```
//!
//! with the weighted variant scaling the trace sum by `omega`. The
//! discrepancy principle solves `||M z_lambda - rhs||^2 = tau delta` by
//! bisection, and the unbiased-risk score adds the filter trace to the
//! residual with the noise variance as weight.

use crate::gengk::GenGkState;
use crate::projected::{recover_solution, ProjectedProblem};
use nalgebra::DVector;
use thiserror::Error;

/// Search bracket for `log10(lambda)` and the seed grid resolution.
const LOG_LAMBDA_LO: f64 = -10.0;
const LOG_LAMBDA_HI: f64 = 10.0;
const SEED_GRID_POINTS: usize = 41;
const GOLDEN_ITERATIONS: usize = 80;

/// Relative tolerance on the squared-residual match in [`dp_solve`].
const DP_REL_TOL: f64 = 1e-8;
const DP_MAX_BISECTIONS: usize = 500;

#[derive(Debug, Error)]
pub enum RegParamError {
    #[error("fixed lambda must be a finite nonnegative number, got {0}")]
    InvalidFixedLambda(f64),
    #[error("wgcv weight must lie in (0, 1], got {0}")]
    InvalidOmega(f64),
    #[error("discrepancy rule needs tau >= 1 and delta > 0, got tau = {tau}, delta = {delta}")]
    InvalidDiscrepancy { tau: f64, delta: f64 },
    #[error("noise variance must be positive, got {0}")]
    InvalidNoiseVariance(f64),
    #[error("optimal rule requires a reference solution")]
    MissingTruth,
    #[error(
        "discrepancy target {target:.6e} is below the reachable projected residual {floor:.6e}"
    )]
    DpTooEarly { floor: f64, target: f64 },
    #[error("discrepancy target {target:.6e} exceeds the squared data norm {ceiling:.6e}")]
    DpBelowData { ceiling: f64, target: f64 },
}

/// How to pick the regularization parameter at each outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamRule {
    Fixed { lambda: f64 },
    /// Minimizes the reconstruction error against a known solution supplied
    /// through [`SelectionContext::truth`].
    Optimal,
    Gcv,
    Wgcv { omega: f64 },
    /// Discrepancy principle with target `tau * delta`, `delta` the expected
    /// squared noise level.
    Dp { tau: f64, delta: f64 },
    /// Unbiased predictive risk with noise variance `eta2`.
    Upre { eta2: f64 },
}

/// Weighted-GCV weight used when a config enables the rule without one.
pub const DEFAULT_WGCV_OMEGA: f64 = 0.8;

impl ParamRule {
    pub fn validate(&self) -> Result<(), RegParamError> {
        match *self {
            ParamRule::Fixed { lambda } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(RegParamError::InvalidFixedLambda(lambda));
                }
            }
            ParamRule::Wgcv { omega } => {
                if !(omega > 0.0 && omega <= 1.0) {
                    return Err(RegParamError::InvalidOmega(omega));
                }
            }
            ParamRule::Dp { tau, delta } => {
                if !(tau >= 1.0 && delta > 0.0) {
                    return Err(RegParamError::InvalidDiscrepancy { tau, delta });
                }
            }
            ParamRule::Upre { eta2 } => {
                if !(eta2 > 0.0) {
                    return Err(RegParamError::InvalidNoiseVariance(eta2));
                }
            }
            ParamRule::Optimal | ParamRule::Gcv => {}
        }
        Ok(())
    }
}

/// When the outer iteration stops. Reasons are ordered: iteration cap, then
/// residual tolerance, then the cross-validation trend tests.
#[derive(Debug, Clone, PartialEq)]
pub struct StopRule {
    pub max_iter: usize,
    /// Relative spread of recent scores under which the curve counts as flat.
    pub gcv_flat_tol: f64,
    /// Number of consecutive increases (or the flat-spread span) examined.
    pub gcv_window: usize,
    /// Absolute threshold on the projected residual norm, when set.
    pub residual_tol: Option<f64>,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            max_iter: 100,
            gcv_flat_tol: 1e-6,
            gcv_window: 3,
            residual_tol: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIter,
    ResidualTol,
    GcvRising,
    GcvFlat,
    /// Produced by the solver driver, not by [`should_stop`].
    Breakdown,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            StopReason::MaxIter => "max_iter",
            StopReason::ResidualTol => "residual_tol",
            StopReason::GcvRising => "gcv_rising",
            StopReason::GcvFlat => "gcv_flat",
            StopReason::Breakdown => "breakdown",
        };
        f.write_str(name)
    }
}

/// Inputs for the optimal rule: the bidiagonalization state to recover
/// iterates from, the prior mean shift, and the reference solution.
pub struct SelectionContext<'a> {
    pub state: &'a GenGkState<'a>,
    pub mu: Option<&'a DVector<f64>>,
    pub truth: Option<&'a DVector<f64>>,
}

/// Projected generalized cross-validation score.
pub fn gcv_projected(pp: &ProjectedProblem, lambda: f64) -> f64 {
    wgcv_projected(pp, lambda, 1.0)
}

/// Weighted variant: `omega` scales the filter trace in the denominator and
/// `omega = 1` reduces to [`gcv_projected`] exactly.
pub fn wgcv_projected(pp: &ProjectedProblem, lambda: f64, omega: f64) -> f64 {
    let k = pp.k() as f64;
    let residual_sq = pp.residual_norm_squared(lambda);
    let denom = (k + 1.0) - omega * pp.filter_trace(lambda);
    k * residual_sq / (denom * denom)
}

/// Projected unbiased-predictive-risk score with noise variance `eta2`.
pub fn upre_projected(pp: &ProjectedProblem, lambda: f64, eta2: f64) -> f64 {
    let k = pp.k() as f64;
    pp.residual_norm_squared(lambda) / k + 2.0 * eta2 * pp.filter_trace(lambda) / k - eta2
}

/// Solves the projected discrepancy equation
/// `||M z_lambda - rhs||^2 = tau * delta` by bisection. The squared residual
/// grows monotonically from its `lambda = 0` floor to the squared data norm,
/// so a target outside that range is reported instead of solved: below the
/// floor the subspace is still too small (keep iterating), above the ceiling
/// no `lambda` can damp that far (callers substitute a large guard value).
pub fn dp_solve(pp: &ProjectedProblem, tau: f64, delta: f64) -> Result<f64, RegParamError> {
    let target = tau * delta;
    assert!(target > 0.0, "discrepancy target must be positive");
    let floor = pp.residual_norm_squared(0.0);
    let ceiling = pp.rhs_scale() * pp.rhs_scale();
    if floor > target {
        return Err(RegParamError::DpTooEarly { floor, target });
    }
    if ceiling < target {
        return Err(RegParamError::DpBelowData { ceiling, target });
    }
    let tol = DP_REL_TOL * target;
    if (floor - target).abs() <= tol {
        return Ok(0.0);
    }

    let mut hi = 1.0;
    while pp.residual_norm_squared(hi) < target && hi < 1e12 {
        hi *= 4.0;
    }
    let mut lo = 0.0;
    let mut mid = hi;
    for _ in 0..DP_MAX_BISECTIONS {
        let value = pp.residual_norm_squared(mid);
        if (value - target).abs() <= tol {
            return Ok(mid);
        }
        if value < target {
            lo = mid;
        } else {
            hi = mid;
        }
        mid = 0.5 * (lo + hi);
    }
    Ok(mid)
}

/// Applies `rule` on the current projected problem, searching over `lambda`
/// where the rule calls for a minimizer. Searches scan a 41-point grid on
/// `log10(lambda)` in `[-10, 10]` and refine the best cell by golden
/// section, so the result never scores worse than the grid optimum.
pub fn select_lambda(
    rule: &ParamRule,
    pp: &ProjectedProblem,
    ctx: &SelectionContext,
) -> Result<f64, RegParamError> {
    rule.validate()?;
    match *rule {
        ParamRule::Fixed { lambda } => Ok(lambda),
        ParamRule::Gcv => Ok(minimize_over_lambda(|lam| gcv_projected(pp, lam))),
        ParamRule::Wgcv { omega } => {
            Ok(minimize_over_lambda(|lam| wgcv_projected(pp, lam, omega)))
        }
        ParamRule::Upre { eta2 } => {
            Ok(minimize_over_lambda(|lam| upre_projected(pp, lam, eta2)))
        }
        ParamRule::Dp { tau, delta } => dp_solve(pp, tau, delta),
        ParamRule::Optimal => {
            let truth = ctx.truth.ok_or(RegParamError::MissingTruth)?;
            Ok(minimize_over_lambda(|lam| {
                let sol = pp.solve_for_lambda(lam);
                let recovered = recover_solution(ctx.state, &sol.z, ctx.mu);
                (recovered - truth).norm()
            }))
        }
    }
}

/// Checks the stopping conditions against the per-iteration score and
/// residual histories; index `i` holds the values from iteration `i + 1`.
pub fn should_stop(
    gcv_history: &[f64],
    residual_history: &[f64],
    rule: &StopRule,
) -> Option<StopReason> {
    assert!(!gcv_history.is_empty(), "history must be nonempty");
    assert!(rule.max_iter >= 1, "iteration cap must be at least 1");
    let k = gcv_history.len();
    if k >= rule.max_iter {
        return Some(StopReason::MaxIter);
    }
    if let Some(tol) = rule.residual_tol {
        if residual_history.last().is_some_and(|&r| r <= tol) {
            return Some(StopReason::ResidualTol);
        }
    }
    let w = rule.gcv_window;
    if w >= 1 && k >= w + 1 {
        let tail = &gcv_history[k - w - 1..];
        if tail.windows(2).all(|p| p[1] > p[0]) {
            return Some(StopReason::GcvRising);
        }
        let hi = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
        let scale = tail.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
        if scale > 0.0 && (hi - lo) <= rule.gcv_flat_tol * scale {
            return Some(StopReason::GcvFlat);
        }
    }
    None
}

/// Grid scan plus golden-section refinement of `f(lambda)` on the standard
/// bracket; returns the best `lambda` seen.
fn minimize_over_lambda(f: impl Fn(f64) -> f64) -> f64 {
    let step = (LOG_LAMBDA_HI - LOG_LAMBDA_LO) / (SEED_GRID_POINTS - 1) as f64;
    let mut best_idx = 0;
    let mut best_val = f64::INFINITY;
    let mut best_log = LOG_LAMBDA_LO;
    for i in 0..SEED_GRID_POINTS {
        let x = LOG_LAMBDA_LO + step * i as f64;
        let val = f(10f64.powf(x));
        if val < best_val {
            best_val = val;
            best_idx = i;
            best_log = x;
        }
    }
    let lo = LOG_LAMBDA_LO + step * best_idx.saturating_sub(1) as f64;
    let hi = (LOG_LAMBDA_LO + step * (best_idx + 1) as f64).min(LOG_LAMBDA_HI);
    let (x, val) = golden_section_min(|x| f(10f64.powf(x)), lo, hi, GOLDEN_ITERATIONS);
    if val < best_val {
        10f64.powf(x)
    } else {
        10f64.powf(best_log)
    }
}

fn golden_section_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let (mut best_x, mut best_f) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    for _ in 0..iters {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
        if f1 < best_f {
            best_x = x1;
            best_f = f1;
        }
        if f2 < best_f {
            best_x = x2;
            best_f = f2;
        }
    }
    (best_x, best_f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{assemble_dense, KernelSpec};
    use crate::gengk::GenGkState;
    use crate::linop::{dense_from_operator, DenseOperator, NoiseModel};
    use crate::problems::heat_problem;
    use crate::projected::SolverVariant;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    /// The hand toy: `M = [1; 1]`, unit right-hand-side scale.
    fn toy_problem() -> ProjectedProblem {
        let m = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        ProjectedProblem::from_parts(SolverVariant::Lsqr, m, 1.0)
    }

    struct HeatFixture {
        a: DenseOperator,
        r: NoiseModel,
        q: DenseOperator,
        b: DVector<f64>,
        truth: DVector<f64>,
        noise_variance: f64,
    }

    fn heat_fixture(n: usize) -> HeatFixture {
        let problem = heat_problem(n, 0.02, 41).unwrap();
        let a = dense_from_operator(problem.a.as_ref()).unwrap();
        let spec = KernelSpec::matern(0.5, 2.0).unwrap();
        let q = assemble_dense(&spec, &problem.geometry.grid_points()).unwrap();
        let noise_variance = problem.noise_variance();
        HeatFixture {
            a: DenseOperator::new(a).unwrap(),
            r: NoiseModel::identity(n),
            q: DenseOperator::new(q).unwrap(),
            b: problem.d.clone(),
            truth: problem.s_true.clone(),
            noise_variance,
        }
    }

    fn heat_state<'a>(fx: &'a HeatFixture, steps: usize) -> GenGkState<'a> {
        let mut state = GenGkState::init(&fx.a, &fx.r, &fx.q, &fx.b, true).unwrap();
        for _ in 0..steps {
            state.step().unwrap();
        }
        state
    }

    /// Dense evaluation of the cross-validation score straight from the
    /// influence matrix, with an explicit regularized pseudoinverse.
    fn gcv_dense_oracle(m: &DMatrix<f64>, scale: f64, lambda: f64, omega: f64) -> f64 {
        let k = m.ncols();
        let mut rhs = DVector::zeros(m.nrows());
        rhs[0] = scale;
        let gram = m.transpose() * m + DMatrix::identity(k, k) * (lambda * lambda);
        let pinv = gram.lu().solve(&m.transpose().clone_owned()).unwrap();
        let influence = m * &pinv;
        let residual = &rhs - &influence * &rhs;
        let denom = (k as f64 + 1.0) - omega * influence.trace();
        k as f64 * residual.norm_squared() / (denom * denom)
    }

    #[test]
    fn gcv_toy_value_matches_dense_oracle() {
        let pp = toy_problem();
        let got = gcv_projected(&pp, 1.0);
        // By hand: residual^2 = 5/9, trace of the influence matrix = 2/3,
        // so G = (5/9) / (2 - 2/3)^2 = 5/16.
        assert_relative_eq!(got, 5.0 / 16.0, max_relative = 1e-12);
        let oracle = gcv_dense_oracle(pp.matrix(), pp.rhs_scale(), 1.0, 1.0);
        assert_relative_eq!(got, oracle, max_relative = 1e-12);
    }

    #[test]
    fn gcv_limit_at_large_lambda() {
        let pp = toy_problem();
        let expected = 1.0 * 1.0 / 4.0;
        assert_relative_eq!(gcv_projected(&pp, 1e10), expected, max_relative = 1e-6);

        let fx = heat_fixture(32);
        let state = heat_state(&fx, 6);
        let pp = ProjectedProblem::build(&state, SolverVariant::Lsqr);
        let k = pp.k() as f64;
        let expected = k * state.beta1() * state.beta1() / ((k + 1.0) * (k + 1.0));
        assert_relative_eq!(gcv_projected(&pp, 1e12), expected, max_relative = 1e-6);
    }

    #[test]
    fn gcv_positive_and_locally_continuous() {
        let m = DMatrix::from_fn(6, 5, |i, j| {
            if i == j {
                1.0 / (1.0 + j as f64)
            } else if i == j + 1 {
                0.3 / (1.0 + j as f64)
            } else {
                0.0
            }
        });
        let pp = ProjectedProblem::from_parts(SolverVariant::Lsqr, m, 2.0);
        for e in -8..=8 {
            let lambda = 10f64.powi(e);
            let g = gcv_projected(&pp, lambda);
            assert!(g > 0.0 && g.is_finite());
            let g_near = gcv_projected(&pp, lambda * (1.0 + 1e-9));
            assert_relative_eq!(g, g_near, max_relative = 1e-6);
        }
    }

    #[test]
    fn wgcv_with_unit_weight_is_gcv() {
        let fx = heat_fixture(32);
        let state = heat_state(&fx, 8);
        let pp = ProjectedProblem::build(&state, SolverVariant::Lsqr);
        for e in -10..=10 {
            let lambda = 10f64.powi(e);
            assert_eq!(
                gcv_projected(&pp, lambda).to_bits(),
                wgcv_projected(&pp, lambda, 1.0).to_bits()
            );
        }
    }

    #[test]
    fn wgcv_toy_value_matches_dense_oracle() {
        let pp = toy_problem();
        let got = wgcv_projected(&pp, 1.0, 0.8);
        // Same residual as the unweighted case; the trace term becomes
        // 2 - 0.8 * (2/3) = 22/15, so the score is (5/9) / (22/15)^2.
        assert_relative_eq!(got, 125.0 / 484.0, max_relative = 1e-12);
        let oracle = gcv_dense_oracle(pp.matrix(), pp.rhs_scale(), 1.0, 0.8);
        assert_relative_eq!(got, oracle, max_relative = 1e-12);
    }

    #[test]
    fn wgcv_minimizer_moves_monotonically_with_weight() {
        // Stationarity of the scalar model gives
        // 1 - f* = omega o^2 / ((2 - omega) c^2) for the optimal filter
        // value, so the selected lambda shrinks together with omega; the
        // grid scan confirms the same direction on a real spectrum.
        let fx = heat_fixture(64);
        let state = heat_state(&fx, 10);
        let pp = ProjectedProblem::build(&state, SolverVariant::Lsqr);
        let grid_argmin = |omega: f64| -> f64 {
            let mut best = (f64::INFINITY, 0.0);
            for i in 0..=2000 {
                let x = -10.0 + 20.0 * i as f64 / 2000.0;
                let lam = 10f64.powf(x);
                let val = wgcv_projected(&pp, lam, omega);
                if val < best.0 {
                    best = (val, x);
                }
            }
            best.1
        };
        let first = grid_argmin(1.0);
        let mut prev = first;
        for omega in [0.9, 0.8, 0.7, 0.6] {
            let cur = grid_argmin(omega);
            assert!(
                cur <= prev + 0.011,
                "omega {omega}: argmin log-lambda {cur} rose above {prev}"
            );
            prev = cur;
        }
        assert!(
            prev < first - 0.05,
            "expected a real shift, got {first} -> {prev}"
        );
    }

    #[test]
    fn dp_recovers_forward_computed_target() {
        let pp = toy_problem();
        let target = pp.residual_norm_squared(1.0);
        let lambda = dp_solve(&pp, 1.0, target).unwrap();
        assert!((lambda - 1.0).abs() <= 1e-6, "lambda = {lambda}");
        let achieved = pp.residual_norm_squared(lambda);
        assert!((achieved - target).abs() <= 1e-8 * target);
    }

    #[test]
    fn dp_signals_target_below_reachable_floor() {
        let pp = toy_problem();
        // The toy's lambda = 0 residual floor is 1/2.
        match dp_solve(&pp, 1.0, 0.4) {
            Err(RegParamError::DpTooEarly { floor, target }) => {
                assert_relative_eq!(floor, 0.5, max_relative = 1e-12);
                assert_relative_eq!(target, 0.4);
            }
            other => panic!("expected too-early signal, got {other:?}"),
        }
    }

    #[test]
    fn dp_signals_target_above_data_norm() {
        let pp = toy_problem();
        match dp_solve(&pp, 1.5, 1.0) {
            Err(RegParamError::DpBelowData { ceiling, target }) => {
                assert_relative_eq!(ceiling, 1.0);
                assert_relative_eq!(target, 1.5);
            }
            other => panic!("expected below-data signal, got {other:?}"),
        }
    }

    #[test]
    fn dp_near_ceiling_returns_large_lambda() {
        let pp = toy_problem();
        let target = 0.999;
        let lambda = dp_solve(&pp, 1.0, target).unwrap();
        assert!(lambda > 10.0, "expected strong damping, got {lambda}");
        let achieved = pp.residual_norm_squared(lambda);
        assert!((achieved - target).abs() <= 1e-8 * target);
    }

    #[test]
    fn upre_toy_value_and_limit() {
        let pp = toy_problem();
        // Residual^2 = 5/9, trace = 2/3, eta2 = 1/10:
        // U = 5/9 + 2*(1/10)*(2/3) - 1/10 = 53/90.
        assert_relative_eq!(upre_projected(&pp, 1.0, 0.1), 53.0 / 90.0, max_relative = 1e-12);
        assert_relative_eq!(
            upre_projected(&pp, 1e10, 0.1),
            1.0 / 1.0 - 0.1,
            max_relative = 1e-6
        );
    }

    #[test]
    fn upre_has_interior_minimizer_on_noisy_problem() {
        let fx = heat_fixture(64);
        let state = heat_state(&fx, 10);
        let pp = ProjectedProblem::build(&state, SolverVariant::Lsqr);
        let eta2 = fx.noise_variance;
        let mut best = (f64::INFINITY, 0usize);
        let mut values = Vec::new();
        for i in 0..=400 {
            let x = -10.0 + 20.0 * i as f64 / 400.0;
            let val = upre_projected(&pp, 10f64.powf(x), eta2);
            if val < best.0 {
                best = (val, i);
            }
            values.push(val);
        }
        assert!(best.1 > 0 && best.1 < 400, "minimizer at grid edge {}", best.1);
        assert!(values[best.1] < values[0] && values[best.1] < values[400]);
    }

    #[test]
    fn fixed_rule_returns_its_lambda() {
        let fx = heat_fixture(32);
        let state = heat_state(&fx, 4);
        let pp = ProjectedProblem::build(&state, SolverVariant::Lsqr);
        let ctx = SelectionContext {
            state: &state,
            mu: None,
            truth: None,
        };
        let rule = ParamRule::Fixed { lambda: 0.3 };
        assert_eq!(select_lambda(&rule, &pp, &ctx).unwrap(), 0.3);
    }

    #[test]
    fn rule_validation_rejects_bad_parameters() {
        assert!(matches!(
            ParamRule::Fixed { lambda: -1.0 }.validate(),
            Err(RegParamError::InvalidFixedLambda(_))
        ));
        assert!(matches!(
            ParamRule::Wgcv { omega: 0.0 }.validate(),
            Err(RegParamError::InvalidOmega(_))
        ));
        assert!(matches!(
            ParamRule::Wgcv { omega: 1.2 }.validate(),
            Err(RegParamError::InvalidOmega(_))
        ));
        assert!(matches!(
            ParamRule::Dp {
                tau: 0.5,
                delta: 1.0
            }
            .validate(),
            Err(RegParamError::InvalidDiscrepancy { .. })
        ));
        assert!(matches!(
            ParamRule::Upre { eta2: 0.0 }.validate(),
            Err(RegParamError::InvalidNoiseVariance(_))
        ));
    }

    #[test]
    fn gcv_selection_matches_fine_grid_oracle() {
        let fx = heat_fixture(64);
        let state = heat_state(&fx, 8);
        let pp = ProjectedProblem::build(&state, SolverVariant::Lsqr);
        let ctx = SelectionContext {
            state: &state,
            mu: None,
            truth: None,
        };
        let lambda = select_lambda(&ParamRule::Gcv, &pp, &ctx).unwrap();

        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=20_000 {
            let x = -10.0 + 20.0 * i as f64 / 20_000.0;
            let val = gcv_projected(&pp, 10f64.powf(x));
            if val < best.0 {
                best = (val, x);
            }
        }
        assert!(
            (lambda.log10() - best.1).abs() <= 1e-3,
            "selected 10^{} vs grid 10^{}",
            lambda.log10(),
            best.1
        );
        // The refined value never loses to the 41-point seed grid.
        for i in 0..41 {
            let seed = 10f64.powf(-10.0 + 0.5 * i as f64);
            assert!(gcv_projected(&pp, lambda) <= gcv_projected(&pp, seed) + 1e-15);
        }
    }

    #[test]
    fn optimal_selection_beats_every_grid_point() {
        let fx = heat_fixture(64);
        let state = heat_state(&fx, 8);
        let pp = ProjectedProblem::build(&state, SolverVariant::Lsqr);
        let ctx = SelectionContext {
            state: &state,
            mu: None,
            truth: Some(&fx.truth),
        };
        let lambda = select_lambda(&ParamRule::Optimal, &pp, &ctx).unwrap();
        let err_at = |lam: f64| {
            let sol = pp.solve_for_lambda(lam);
            (recover_solution(&state, &sol.z, None) - &fx.truth).norm()
        };
        let selected = err_at(lambda);
        for i in 0..=200 {
            let x = -10.0 + 20.0 * i as f64 / 200.0;
            let grid_err = err_at(10f64.powf(x));
            assert!(
                selected <= grid_err + 1e-12,
                "error {selected} at selected lambda exceeds {grid_err} at 10^{x}"
            );
        }
    }

    #[test]
    fn optimal_rule_requires_truth() {
        let fx = heat_fixture(32);
        let state = heat_state(&fx, 4);
        let pp = ProjectedProblem::build(&state, SolverVariant::Lsqr);
        let ctx = SelectionContext {
            state: &state,
            mu: None,
            truth: None,
        };
        assert!(matches!(
            select_lambda(&ParamRule::Optimal, &pp, &ctx),
            Err(RegParamError::MissingTruth)
        ));
    }

    #[test]
    fn stop_on_iteration_cap() {
        let rule = StopRule {
            max_iter: 5,
            ..StopRule::default()
        };
        let history = [1.0, 0.9, 0.8, 0.7, 0.6];
        assert_eq!(
            should_stop(&history, &history, &rule),
            Some(StopReason::MaxIter)
        );
    }

    #[test]
    fn continue_on_decreasing_scores() {
        let rule = StopRule::default();
        let history = [1.0, 0.5, 0.25, 0.12, 0.06];
        assert_eq!(should_stop(&history, &history, &rule), None);
    }

    #[test]
    fn stop_when_scores_flatten() {
        let rule = StopRule {
            gcv_flat_tol: 1e-6,
            gcv_window: 3,
            ..StopRule::default()
        };
        let history = [1.0, 0.5, 0.2, 0.1, 0.1, 0.1 + 1e-8, 0.1];
        assert_eq!(
            should_stop(&history, &history, &rule),
            Some(StopReason::GcvFlat)
        );
    }

    #[test]
    fn stop_when_scores_keep_rising() {
        let rule = StopRule {
            gcv_window: 3,
            ..StopRule::default()
        };
        let history = [1.0, 0.5, 0.2, 0.25, 0.3, 0.4];
        assert_eq!(
            should_stop(&history, &history, &rule),
            Some(StopReason::GcvRising)
        );
    }

    #[test]
    fn stop_on_residual_tolerance() {
        let rule = StopRule {
            residual_tol: Some(1e-3),
            ..StopRule::default()
        };
        let gcv = [1.0, 0.9, 0.8];
        let residuals = [0.5, 0.1, 5e-4];
        assert_eq!(
            should_stop(&gcv, &residuals, &rule),
            Some(StopReason::ResidualTol)
        );
    }
}

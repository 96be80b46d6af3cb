//! Small projected Tikhonov subproblems built from the bidiagonalization
//! state, one per outer iteration, solved for any regularization parameter
//! through a single shared SVD.
//!
//! The gen-LSQR variant damps `min ||B_k z - beta_1 e_1||`, which matches
//! `min 0.5 ||A Q x - b||^2_{R^{-1}} + 0.5 lambda^2 ||x||^2_Q` over the span
//! of the solution basis. The gen-LSMR variant replaces `B_k` with the
//! augmented factor and the right-hand side scale with `beta_1 alpha_1`,
//! matching the same penalty on the weighted normal-equation residual
//! `||A^T R^{-1} r||_Q`. Each `lambda` evaluation costs `O(k^2)` from the
//! filtered SVD coefficients; no matrix is refactored.

use crate::gengk::GenGkState;
use nalgebra::{DMatrix, DVector};

/// Which projected functional the subproblem damps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverVariant {
    Lsqr,
    Lsmr,
}

/// Projected matrix, right-hand side scale, and its SVD. Immutable after
/// build; [`solve_for_lambda`](Self::solve_for_lambda) is pure.
#[derive(Debug, Clone)]
pub struct ProjectedProblem {
    variant: SolverVariant,
    m: DMatrix<f64>,
    rhs_scale: f64,
    singular_values: DVector<f64>,
    /// Coefficients of the right-hand side in the left singular basis.
    rhs_coeffs: DVector<f64>,
    /// Right singular vectors as columns.
    right_vectors: DMatrix<f64>,
    /// Squared norm of the right-hand side component outside the range of
    /// the projected matrix.
    orthogonal_rhs_sq: f64,
}

/// Filtered solution of one projected subproblem at a fixed `lambda`.
#[derive(Debug, Clone)]
pub struct ProjectedSolution {
    pub z: DVector<f64>,
    pub residual_norm: f64,
    pub solution_seminorm: f64,
    pub lambda: f64,
}

impl ProjectedProblem {
    /// Assembles the subproblem at `k = state.available_k()`.
    pub fn build(state: &GenGkState, variant: SolverVariant) -> ProjectedProblem {
        let (m, rhs_scale) = match variant {
            SolverVariant::Lsqr => (state.bidiagonal().to_dense(), state.beta1()),
            SolverVariant::Lsmr => (state.augmented(), state.beta1() * state.alpha1()),
        };
        Self::from_parts(variant, m, rhs_scale)
    }

    pub(crate) fn from_parts(
        variant: SolverVariant,
        m: DMatrix<f64>,
        rhs_scale: f64,
    ) -> ProjectedProblem {
        assert!(m.ncols() >= 1, "projected problem needs at least one column");
        assert!(
            m.nrows() == m.ncols() + 1,
            "projected matrix must be (k+1) x k"
        );
        let svd = m.clone().svd(true, true);
        let u = svd.u.expect("left singular vectors requested");
        let v_t = svd.v_t.expect("right singular vectors requested");
        let rhs_coeffs = DVector::from_fn(m.ncols(), |i, _| rhs_scale * u[(0, i)]);
        let orthogonal_rhs_sq =
            (rhs_scale * rhs_scale - rhs_coeffs.norm_squared()).max(0.0);
        ProjectedProblem {
            variant,
            m,
            rhs_scale,
            singular_values: svd.singular_values,
            rhs_coeffs,
            right_vectors: v_t.transpose(),
            orthogonal_rhs_sq,
        }
    }

    pub fn variant(&self) -> SolverVariant {
        self.variant
    }

    /// Subproblem dimension `k`.
    pub fn k(&self) -> usize {
        self.m.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Norm of the projected right-hand side (`beta_1`, or `beta_1 alpha_1`
    /// for the lsmr variant).
    pub fn rhs_scale(&self) -> f64 {
        self.rhs_scale
    }

    /// Singular values in descending order.
    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    /// Coefficients of the right-hand side against the left singular
    /// vectors, in the same order as the singular values.
    pub fn rhs_coeffs(&self) -> &DVector<f64> {
        &self.rhs_coeffs
    }

    /// Squared right-hand-side mass outside the range of the projected
    /// matrix; a floor under every achievable residual.
    pub fn orthogonal_rhs_sq(&self) -> f64 {
        self.orthogonal_rhs_sq
    }

    /// Squared residual `||M z_lambda - rhs||^2` of the filtered solution,
    /// without forming `z_lambda`.
    pub fn residual_norm_squared(&self, lambda: f64) -> f64 {
        let lam_sq = lambda * lambda;
        let mut residual_sq = self.orthogonal_rhs_sq;
        for i in 0..self.k() {
            let s = self.singular_values[i];
            let c = self.rhs_coeffs[i];
            let denom = s * s + lam_sq;
            if denom == 0.0 {
                residual_sq += c * c;
            } else {
                let miss = lam_sq * c / denom;
                residual_sq += miss * miss;
            }
        }
        residual_sq.max(0.0)
    }

    /// Trace of the influence matrix `M Mdagger_lambda`, the sum of filter
    /// factors `s_i^2 / (s_i^2 + lambda^2)`.
    pub fn filter_trace(&self, lambda: f64) -> f64 {
        let lam_sq = lambda * lambda;
        let mut trace = 0.0;
        for i in 0..self.k() {
            let s = self.singular_values[i];
            let denom = s * s + lam_sq;
            if denom > 0.0 {
                trace += s * s / denom;
            }
        }
        trace
    }

    /// Solves the damped subproblem with the Tikhonov filter
    /// `z = sum_i s_i / (s_i^2 + lambda^2) c_i w_i`. Null directions get a
    /// zero filter weight, so `lambda = 0` yields the minimum-norm solution.
    pub fn solve_for_lambda(&self, lambda: f64) -> ProjectedSolution {
        assert!(
            lambda >= 0.0 && lambda.is_finite(),
            "lambda must be a finite nonnegative number"
        );
        let k = self.k();
        let lam_sq = lambda * lambda;
        let mut z = DVector::zeros(k);
        let mut residual_sq = self.orthogonal_rhs_sq;
        let mut seminorm_sq = 0.0;
        for i in 0..k {
            let s = self.singular_values[i];
            let c = self.rhs_coeffs[i];
            let denom = s * s + lam_sq;
            if denom == 0.0 {
                residual_sq += c * c;
                continue;
            }
            let zeta = s * c / denom;
            z.axpy(zeta, &self.right_vectors.column(i), 1.0);
            seminorm_sq += zeta * zeta;
            let miss = lam_sq * c / denom;
            residual_sq += miss * miss;
        }
        ProjectedSolution {
            z,
            residual_norm: residual_sq.max(0.0).sqrt(),
            solution_seminorm: seminorm_sq.sqrt(),
            lambda,
        }
    }
}

/// Maps projected coordinates back to the model space: `mu + sum_i z_i Q v_i`
/// from the cached products, costing no covariance applications. `None`
/// stands for a zero shift.
pub fn recover_solution(
    state: &GenGkState,
    z: &DVector<f64>,
    mu: Option<&DVector<f64>>,
) -> DVector<f64> {
    assert!(
        z.len() >= 1 && z.len() <= state.qvs().len(),
        "coefficient count {} exceeds available basis size {}",
        z.len(),
        state.qvs().len()
    );
    let n = state.qv(0).len();
    let mut out = match mu {
        Some(shift) => {
            assert_eq!(shift.len(), n, "mean shift length mismatch");
            shift.clone()
        }
        None => DVector::zeros(n),
    };
    for (i, qv) in state.qvs().iter().take(z.len()).enumerate() {
        out.axpy(z[i], qv, 1.0);
    }
    out
}

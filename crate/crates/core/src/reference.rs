//! Desk-scale dense oracles: the weighted generalized SVD, filtered direct
//! solutions, Picard-plot data, full-problem parameter scores, conjugate
//! gradients and MINRES in the covariance inner product, and LSQR on the
//! priorconditioned system.
//!
//! Everything here materializes matrices, factors them, and pays cubic cost.
//! None of it scales past [`DENSE_LIMIT`] unknowns by design; the point is
//! ground truth for the matrix-free solvers, not performance.

use crate::gengk::{GenGkState, StepOutcome};
use crate::linop::{DenseOperator, DiagonalOperator, LinearOperator, NoiseModel};
use crate::projected::{ProjectedProblem, SolverVariant};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Largest dimension any dense reference computation accepts.
pub const DENSE_LIMIT: usize = 512;

/// Reciprocals of generalized singular values below this relative threshold
/// are zeroed instead of inverted.
const SIGMA_REL_FLOOR: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("matrix is not symmetric within tolerance")]
    NotSymmetric,
    #[error("matrix is not positive definite: smallest eigenvalue {0:.6e}")]
    NotPositiveDefinite(f64),
    #[error("dimension {0} exceeds the dense reference limit {DENSE_LIMIT}")]
    AboveDenseLimit(usize),
    #[error("weighted SVD needs at least as many rows as columns, got {nrows} x {ncols}")]
    WideMatrix { nrows: usize, ncols: usize },
}

/// Weighted generalized SVD factors: `U_R^{-1} A V_Q` is rectangular
/// diagonal, the columns of `U_R` are orthonormal in the `R^{-1}` inner
/// product, and the columns of `V_Q` are orthonormal in the `Q^{-1}` inner
/// product.
#[derive(Debug, Clone)]
pub struct GsvdFactors {
    u_r: DMatrix<f64>,
    v_q: DMatrix<f64>,
    sigma_hat: DVector<f64>,
}

impl GsvdFactors {
    /// Data-space factor, `m x m`.
    pub fn u_r(&self) -> &DMatrix<f64> {
        &self.u_r
    }

    /// Solution-space factor, `n x n`.
    pub fn v_q(&self) -> &DMatrix<f64> {
        &self.v_q
    }

    /// Generalized singular values, nonincreasing, length `n`.
    pub fn sigma_hat(&self) -> &DVector<f64> {
        &self.sigma_hat
    }

    pub fn nrows(&self) -> usize {
        self.u_r.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.v_q.nrows()
    }

    /// Expansion coefficients `g = U_R^T R^{-1} b`, length `m`.
    pub fn data_coefficients(&self, b: &DVector<f64>, r: &DMatrix<f64>) -> DVector<f64> {
        let r_inv_b = r
            .clone()
            .lu()
            .solve(b)
            .expect("noise covariance factor is invertible");
        self.u_r.transpose() * r_inv_b
    }
}

/// Inverse square-root factor pair of a symmetric positive definite matrix:
/// `factor^T factor = mat^{-1}` and `inverse = factor^{-1}`, built from the
/// symmetric eigendecomposition.
fn inverse_sqrt_factor(mat: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), ReferenceError> {
    let scale = mat.amax();
    let asym = (mat - mat.transpose()).amax();
    if scale > 0.0 && asym > 1e-10 * scale {
        return Err(ReferenceError::NotSymmetric);
    }
    let eig = mat.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        return Err(ReferenceError::NotPositiveDefinite(min));
    }
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| 1.0 / x.sqrt()));
    let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let factor = inv_sqrt * eig.eigenvectors.transpose();
    let inverse = &eig.eigenvectors * sqrt;
    Ok((factor, inverse))
}

/// Computes the weighted generalized SVD of `a` under the noise covariance
/// `r` and prior covariance `q`: factor the whitened operator
/// `L_R a L_Q^{-1}` and map its singular vectors back through the weights.
pub fn gsvd(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<GsvdFactors, ReferenceError> {
    let (m, n) = a.shape();
    if m.max(n) > DENSE_LIMIT {
        return Err(ReferenceError::AboveDenseLimit(m.max(n)));
    }
    if m < n {
        return Err(ReferenceError::WideMatrix { nrows: m, ncols: n });
    }
    let (l_r, l_r_inv) = inverse_sqrt_factor(r)?;
    let (_, l_q_inv) = inverse_sqrt_factor(q)?;
    let a_hat = &l_r * a * &l_q_inv;
    let svd = a_hat.clone().svd(true, true);
    let u_thin = svd.u.expect("left singular vectors requested");
    let v_hat = svd.v_t.expect("right singular vectors requested").transpose();

    let u_full = if m == n {
        u_thin
    } else {
        // Complete the thin factor to an orthonormal basis of the data
        // space; the trailing QR columns span the orthogonal complement.
        let mut ext = DMatrix::zeros(m, n + m);
        ext.view_mut((0, 0), (m, n)).copy_from(&u_thin);
        ext.view_mut((0, n), (m, m))
            .copy_from(&DMatrix::identity(m, m));
        let qfull = ext.qr().q();
        let mut u = DMatrix::zeros(m, m);
        u.view_mut((0, 0), (m, n)).copy_from(&u_thin);
        u.view_mut((0, n), (m, m - n))
            .copy_from(&qfull.view((0, n), (m, m - n)));
        u
    };

    Ok(GsvdFactors {
        u_r: l_r_inv * u_full,
        v_q: l_q_inv * v_hat,
        sigma_hat: svd.singular_values,
    })
}

/// Spectral filter applied to the generalized singular expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterSpec {
    Tikhonov { lambda: f64 },
    /// Keep the leading `cutoff` modes unchanged, zero the rest.
    Truncated { cutoff: usize },
}

/// Filtered direct solution `mu + V_Q Phi Sigma^dagger g` for mean-shifted
/// data `b`. Modes whose generalized singular value sits below the relative
/// floor are excluded.
pub fn filtered_solution(
    f: &GsvdFactors,
    spec: &FilterSpec,
    b: &DVector<f64>,
    r: &DMatrix<f64>,
    mu: Option<&DVector<f64>>,
) -> DVector<f64> {
    let n = f.ncols();
    if let FilterSpec::Truncated { cutoff } = spec {
        assert!(
            (1..=n).contains(cutoff),
            "truncation cutoff must lie in 1..=n"
        );
    }
    if let FilterSpec::Tikhonov { lambda } = spec {
        assert!(*lambda >= 0.0, "lambda must be nonnegative");
    }
    let g = f.data_coefficients(b, r);
    let sigma1 = f.sigma_hat.max();
    let mut s = match mu {
        Some(shift) => shift.clone(),
        None => DVector::zeros(n),
    };
    for j in 0..n {
        let sigma = f.sigma_hat[j];
        if sigma <= SIGMA_REL_FLOOR * sigma1 {
            continue;
        }
        let phi = match *spec {
            FilterSpec::Tikhonov { lambda } => sigma * sigma / (sigma * sigma + lambda * lambda),
            FilterSpec::Truncated { cutoff } => {
                if j < cutoff {
                    1.0
                } else {
                    0.0
                }
            }
        };
        if phi == 0.0 {
            continue;
        }
        s.axpy(phi * g[j] / sigma, &f.v_q.column(j), 1.0);
    }
    s
}

/// One row of the discrete Picard diagnostic: the generalized singular
/// value, the magnitude of the matching data coefficient, and their ratio.
#[derive(Debug, Clone, Copy)]
pub struct PicardRow {
    pub sigma: f64,
    pub coefficient: f64,
    pub ratio: f64,
}

/// The generalized Picard-plot sequences for the first `n` modes.
pub fn picard_data(f: &GsvdFactors, b: &DVector<f64>, r: &DMatrix<f64>) -> Vec<PicardRow> {
    let g = f.data_coefficients(b, r);
    (0..f.ncols())
        .map(|j| {
            let sigma = f.sigma_hat[j];
            let coefficient = g[j].abs();
            PicardRow {
                sigma,
                coefficient,
                ratio: coefficient / sigma,
            }
        })
        .collect()
}

/// Full-problem cross-validation score evaluated through the generalized
/// singular expansion, including the data mass outside the operator range.
pub fn full_gcv(f: &GsvdFactors, b: &DVector<f64>, r: &DMatrix<f64>, lambda: f64) -> f64 {
    let (m, n) = (f.nrows() as f64, f.ncols());
    let g = f.data_coefficients(b, r);
    let lam_sq = lambda * lambda;
    let mut residual_sq = 0.0;
    let mut trace = m - n as f64;
    for j in 0..n {
        let s_sq = f.sigma_hat[j] * f.sigma_hat[j];
        let denom = s_sq + lam_sq;
        if denom == 0.0 {
            residual_sq += g[j] * g[j];
            trace += 1.0;
        } else {
            let miss = lam_sq * g[j] / denom;
            residual_sq += miss * miss;
            trace += lam_sq / denom;
        }
    }
    for j in n..g.len() {
        residual_sq += g[j] * g[j];
    }
    n as f64 * residual_sq / (trace * trace)
}

/// Full-problem unbiased-predictive-risk score with noise variance `eta2`.
pub fn full_upre(
    f: &GsvdFactors,
    b: &DVector<f64>,
    r: &DMatrix<f64>,
    lambda: f64,
    eta2: f64,
) -> f64 {
    assert!(eta2 >= 0.0, "noise variance must be nonnegative");
    let n = f.ncols();
    let g = f.data_coefficients(b, r);
    let lam_sq = lambda * lambda;
    let mut residual_sq = 0.0;
    let mut trace = 0.0;
    for j in 0..n {
        let s_sq = f.sigma_hat[j] * f.sigma_hat[j];
        let denom = s_sq + lam_sq;
        if denom == 0.0 {
            residual_sq += g[j] * g[j];
        } else {
            let miss = lam_sq * g[j] / denom;
            residual_sq += miss * miss;
            trace += s_sq / denom;
        }
    }
    for j in n..g.len() {
        residual_sq += g[j] * g[j];
    }
    residual_sq / n as f64 + 2.0 * eta2 * trace / n as f64 - eta2
}

/// Conjugate gradients on the shifted weighted normal equations
/// `(A^T R^{-1} A Q + lambda^2 I) x = A^T R^{-1} b`, with every inner
/// product taken against `Q`. Each new residual gets one full
/// reorthogonalization pass against its predecessors, keeping the exact
/// conjugacy visible over long iteration counts. Returns the first `k`
/// iterates; stops early once the residual vanishes.
pub fn cg_q_inner(
    a: &dyn LinearOperator,
    r: &NoiseModel,
    q: &DMatrix<f64>,
    b: &DVector<f64>,
    lambda: f64,
    k: usize,
) -> Result<Vec<DVector<f64>>, ReferenceError> {
    let n = a.ncols();
    if n > DENSE_LIMIT {
        return Err(ReferenceError::AboveDenseLimit(n));
    }
    let apply_m = |x: &DVector<f64>| -> DVector<f64> {
        let qx = q * x;
        let mut out = a
            .apply_transpose(&r.apply_inv(&a.apply(&qx).expect("dimensions checked")))
            .expect("dimensions checked");
        out.axpy(lambda * lambda, x, 1.0);
        out
    };
    let rhs = a.apply_transpose(&r.apply_inv(b)).expect("dimensions checked");

    let mut x = DVector::zeros(n);
    let mut resid = rhs.clone();
    let mut p = resid.clone();
    let mut gamma = resid.dot(&(q * &resid));
    let scale = gamma;
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(k);
    if gamma > 0.0 {
        basis.push(&resid / gamma.sqrt());
    }
    let mut iterates = Vec::with_capacity(k);
    for _ in 0..k {
        if gamma <= 1e-30 * scale {
            break;
        }
        let w = apply_m(&p);
        let denom = p.dot(&(q * &w));
        if denom <= 0.0 {
            return Err(ReferenceError::NotPositiveDefinite(denom));
        }
        let alpha = gamma / denom;
        x.axpy(alpha, &p, 1.0);
        resid.axpy(-alpha, &w, 1.0);
        for rb in &basis {
            let coef = resid.dot(&(q * rb));
            resid.axpy(-coef, rb, 1.0);
        }
        let gamma_new = resid.dot(&(q * &resid));
        let beta = gamma_new / gamma;
        p = &resid + &p * beta;
        gamma = gamma_new;
        if gamma > 0.0 {
            basis.push(&resid / gamma.sqrt());
        }
        iterates.push(x.clone());
    }
    Ok(iterates)
}

/// MINRES on the damped system in the same inner product as
/// [`cg_q_inner`]: a `Q`-weighted Lanczos recurrence on the unshifted
/// operator plus a small damped least-squares solve, so iterate `k` is
/// `V_k (T_k^T T_k + lambda^2 I)^{-1} T_k^T beta_1 e_1`. Returns the first
/// `k` iterates.
pub fn minres_q_inner(
    a: &dyn LinearOperator,
    r: &NoiseModel,
    q: &DMatrix<f64>,
    b: &DVector<f64>,
    lambda: f64,
    k: usize,
) -> Result<Vec<DVector<f64>>, ReferenceError> {
    let n = a.ncols();
    if n > DENSE_LIMIT {
        return Err(ReferenceError::AboveDenseLimit(n));
    }
    let apply_m0 = |x: &DVector<f64>| -> DVector<f64> {
        let qx = q * x;
        a.apply_transpose(&r.apply_inv(&a.apply(&qx).expect("dimensions checked")))
            .expect("dimensions checked")
    };
    let rhs = a.apply_transpose(&r.apply_inv(b)).expect("dimensions checked");
    let beta0 = rhs.dot(&(q * &rhs)).max(0.0).sqrt();
    if beta0 == 0.0 {
        return Ok(Vec::new());
    }

    let mut vs = vec![&rhs / beta0];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut iterates = Vec::with_capacity(k);
    for j in 0..k {
        let mut w = apply_m0(&vs[j]);
        if j > 0 {
            w.axpy(-betas[j - 1], &vs[j - 1], 1.0);
        }
        let alpha = w.dot(&(q * &vs[j]));
        w.axpy(-alpha, &vs[j], 1.0);
        for v in &vs {
            let coef = w.dot(&(q * v));
            w.axpy(-coef, v, 1.0);
        }
        alphas.push(alpha);
        let beta = w.dot(&(q * &w)).max(0.0).sqrt();
        betas.push(beta);

        // Damped tridiagonal least-squares problem: the Lanczos factor
        // stacked on top of lambda times the identity.
        let cols = j + 1;
        let mut t = DMatrix::zeros(2 * cols + 1, cols);
        for c in 0..cols {
            t[(c, c)] = alphas[c];
            t[(c + 1, c)] = betas[c];
            if c + 1 < cols {
                t[(c, c + 1)] = betas[c];
            }
            t[(cols + 1 + c, c)] = lambda;
        }
        let mut e1 = DVector::zeros(2 * cols + 1);
        e1[0] = beta0;
        let y = t
            .svd(true, true)
            .solve(&e1, 1e-14 * beta0.max(1.0))
            .expect("least-squares solve of a small dense system");
        let mut x = DVector::zeros(n);
        for (c, v) in vs.iter().take(cols).enumerate() {
            x.axpy(y[c], v, 1.0);
        }
        iterates.push(x);

        if beta <= 1e-14 * beta0 {
            break;
        }
        vs.push(&w / beta);
    }
    Ok(iterates)
}

/// LSQR on the priorconditioned Tikhonov system
/// `min ||L_R A L_Q^{-1} w - L_R b||^2 + lambda^2 ||w||^2`, mapped back as
/// `mu + L_Q^{-1} w_j` per iterate.
pub fn priorconditioned_lsqr(
    a: &DMatrix<f64>,
    r: &NoiseModel,
    q: &DMatrix<f64>,
    b: &DVector<f64>,
    lambda: f64,
    k: usize,
    mu: Option<&DVector<f64>>,
) -> Result<Vec<DVector<f64>>, ReferenceError> {
    let (m, n) = a.shape();
    if m.max(n) > DENSE_LIMIT {
        return Err(ReferenceError::AboveDenseLimit(m.max(n)));
    }
    let (_, l_q_inv) = inverse_sqrt_factor(q)?;
    let mut a_hat = a * &l_q_inv;
    for c in 0..n {
        let col = r.whiten(&a_hat.column(c).clone_owned());
        a_hat.set_column(c, &col);
    }

    // Damped least squares as one stacked operator, so plain Golub-Kahan
    // bidiagonalization of the stack is exactly LSQR with damping.
    let mut stacked = DMatrix::zeros(m + n, n);
    stacked.view_mut((0, 0), (m, n)).copy_from(&a_hat);
    for i in 0..n {
        stacked[(m + i, i)] = lambda;
    }
    let mut rhs = DVector::zeros(m + n);
    rhs.rows_mut(0, m).copy_from(&r.whiten(b));

    let op = DenseOperator::new(stacked).expect("nonempty stacked system");
    let identity_q = DiagonalOperator::identity(n);
    let identity_r = NoiseModel::identity(m + n);
    let mut state = GenGkState::init(&op, &identity_r, &identity_q, &rhs, true)
        .expect("nonzero whitened data");
    let mut iterates = Vec::with_capacity(k);
    for _ in 0..k {
        let outcome = state.step().expect("stepping a healthy state");
        let pp = ProjectedProblem::build(&state, SolverVariant::Lsqr);
        let sol = pp.solve_for_lambda(0.0);
        let mut w = DVector::zeros(n);
        for (c, v) in state.vs().iter().take(sol.z.len()).enumerate() {
            w.axpy(sol.z[c], v, 1.0);
        }
        let mut s = &l_q_inv * w;
        if let Some(shift) = mu {
            s += shift;
        }
        iterates.push(s);
        if matches!(outcome, StepOutcome::Breakdown(_)) {
            break;
        }
    }
    Ok(iterates)
}

/// Recovers the per-mode filter values of an iterate from its generalized
/// singular expansion `s = mu + V_Q Phi Sigma^dagger g`. Modes with a
/// negligible singular value or data coefficient are reported as `None`.
pub fn genlsqr_filter_factors(
    f: &GsvdFactors,
    iterate: &DVector<f64>,
    mu: Option<&DVector<f64>>,
    b: &DVector<f64>,
    r: &DMatrix<f64>,
) -> Vec<Option<f64>> {
    let shifted = match mu {
        Some(shift) => iterate - shift,
        None => iterate.clone(),
    };
    let c = f
        .v_q
        .clone()
        .lu()
        .solve(&shifted)
        .expect("solution-space factor is invertible");
    let g = f.data_coefficients(b, r);
    let sigma1 = f.sigma_hat.max();
    let g_scale = g.amax();
    (0..f.ncols())
        .map(|j| {
            let sigma = f.sigma_hat[j];
            if sigma <= SIGMA_REL_FLOOR * sigma1 || g[j].abs() <= SIGMA_REL_FLOOR * g_scale {
                None
            } else {
                Some(c[j] * sigma / g[j])
            }
        })
        .collect()
}

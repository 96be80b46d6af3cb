//! Generalized Golub-Kahan bidiagonalization with covariance-weighted
//! orthogonality.
//!
//! Starting from `beta_1 u_1 = b` and `alpha_1 v_1 = A^T R^{-1} u_1`, each
//! step extends
//!
//! ```text
//! beta_{i+1} u_{i+1} = A Q v_i       - alpha_i u_i
//! alpha_{i+1} v_{i+1} = A^T R^{-1} u_{i+1} - beta_{i+1} v_i
//! ```
//!
//! with `u_i` normalized in the `R^{-1}` norm and `v_i` in the `Q` norm, so
//! that `U^T R^{-1} U = I` and `V^T Q V = I`. The recurrence touches `Q` only
//! through products and `R` only through inverse applications: two of each
//! per step, with or without reorthogonalization, because the products
//! `Q v_i` are cached and candidate norms are computed from the candidate's
//! own weighted product. The regularization parameter never enters the
//! recurrence, so one basis serves every `lambda` downstream.
//!
//! The cached `Q v_i` double as the solution-recovery factors: iterates are
//! `mu + sum_i z_i (Q v_i)`, which is how downstream solvers avoid any
//! factorization of `Q`.

use crate::linop::{check_len, LinearOperator, NoiseModel, OperatorError};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative factor under which a candidate norm counts as a breakdown; the
/// scale reference is the first normalization constant of the same sequence.
const BREAKDOWN_REL_TOL: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum GenGkError {
    #[error("zero data vector")]
    ZeroDataVector,
    #[error("data orthogonal to range")]
    DataOrthogonalToRange,
    #[error("bidiagonalization broke down after {completed} steps; no further steps are possible")]
    AfterBreakdown { completed: usize },
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

/// Which normalization hit zero: `Beta` ends the data-space sequence `u_i`,
/// `Alpha` ends the solution-space sequence `v_i`. Either way the Krylov
/// subspace is exhausted and the projected problem at [`GenGkState::available_k`]
/// is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BreakdownKind {
    Beta,
    Alpha,
}

#[derive(Debug, Clone, Copy)]
pub struct Breakdown {
    pub kind: BreakdownKind,
    /// The step (1-based) whose candidate vanished.
    pub step: usize,
    /// The candidate norm that fell below the breakdown tolerance.
    pub norm: f64,
}

/// Running tally of operator work, exposed for diagnostics and cost asserts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub a_products: usize,
    pub a_transpose_products: usize,
    pub q_products: usize,
    pub r_inverse_applies: usize,
}

/// Lower bidiagonal `(k+1) x k` factor: `alphas` on the diagonal, `betas` on
/// the subdiagonal. Entries are normalization constants, hence nonnegative.
#[derive(Debug, Clone)]
pub struct Bidiagonal {
    alphas: Vec<f64>,
    betas: Vec<f64>,
}

impl Bidiagonal {
    pub fn k(&self) -> usize {
        self.alphas.len()
    }

    pub fn nrows(&self) -> usize {
        self.k() + 1
    }

    pub fn ncols(&self) -> usize {
        self.k()
    }

    /// Diagonal entries `alpha_1 .. alpha_k`.
    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Subdiagonal entries `beta_2 .. beta_{k+1}`.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// The first `j` columns as a `(j+1) x j` bidiagonal.
    pub fn truncated(&self, j: usize) -> Bidiagonal {
        assert!(j >= 1 && j <= self.k(), "truncation size out of range");
        Bidiagonal {
            alphas: self.alphas[..j].to_vec(),
            betas: self.betas[..j].to_vec(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut m = DMatrix::zeros(k + 1, k);
        for j in 0..k {
            m[(j, j)] = self.alphas[j];
            m[(j + 1, j)] = self.betas[j];
        }
        m
    }
}

/// State of the bidiagonalization: weighted-orthonormal bases, the scalar
/// recurrence coefficients, and the cached products `Q v_i`.
pub struct GenGkState<'a> {
    a: &'a dyn LinearOperator,
    r: &'a NoiseModel,
    q: &'a dyn LinearOperator,
    reorth: bool,
    us: Vec<DVector<f64>>,
    vs: Vec<DVector<f64>>,
    qvs: Vec<DVector<f64>>,
    alphas: Vec<f64>,
    betas: Vec<f64>,
    completed: usize,
    breakdown: Option<Breakdown>,
    ops: OpCounts,
}

impl std::fmt::Debug for GenGkState<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GenGkState")
            .field("completed", &self.completed)
            .field("reorth", &self.reorth)
            .field("breakdown", &self.breakdown)
            .field("ops", &self.ops)
            .finish_non_exhaustive()
    }
}

/// Result of one successful call to [`GenGkState::step`].
#[derive(Debug, Clone, Copy)]
pub enum StepOutcome {
    Advanced,
    Breakdown(Breakdown),
}

impl<'a> GenGkState<'a> {
    /// Runs the initialization lines of the recurrence: `u_1 = b / beta_1`
    /// with `beta_1 = ||b||_{R^{-1}}`, then `alpha_1 v_1 = A^T R^{-1} u_1`.
    ///
    /// With `reorth` set, every later candidate gets one full classical
    /// Gram-Schmidt pass against its basis in the matching weighted inner
    /// product before normalization.
    pub fn init(
        a: &'a dyn LinearOperator,
        r: &'a NoiseModel,
        q: &'a dyn LinearOperator,
        b: &DVector<f64>,
        reorth: bool,
    ) -> Result<Self, GenGkError> {
        check_len("bidiagonalization data", a.nrows(), b.len())?;
        check_len("bidiagonalization noise model", a.nrows(), r.len())?;
        check_len("bidiagonalization covariance rows", a.ncols(), q.nrows())?;
        check_len("bidiagonalization covariance cols", a.ncols(), q.ncols())?;

        let mut ops = OpCounts::default();
        ops.r_inverse_applies += 1;
        let rb = r.apply_inv(b);
        let beta1 = b.dot(&rb).max(0.0).sqrt();
        if !(beta1 > 0.0) {
            return Err(GenGkError::ZeroDataVector);
        }
        let u1 = b / beta1;
        let ru1 = rb / beta1;

        ops.a_transpose_products += 1;
        let vcand = a.apply_transpose(&ru1)?;
        ops.q_products += 1;
        let qcand = q.apply(&vcand)?;
        let alpha1 = vcand.dot(&qcand).max(0.0).sqrt();
        if !(alpha1 > 0.0) {
            return Err(GenGkError::DataOrthogonalToRange);
        }
        let v1 = vcand / alpha1;
        ops.q_products += 1;
        let qv1 = q.apply(&v1)?;

        Ok(Self {
            a,
            r,
            q,
            reorth,
            us: vec![u1],
            vs: vec![v1],
            qvs: vec![qv1],
            alphas: vec![alpha1],
            betas: vec![beta1],
            completed: 0,
            breakdown: None,
            ops,
        })
    }

    /// Extends both sequences by one vector each. A vanishing candidate norm
    /// flags a breakdown instead: the state keeps whatever half-step data
    /// remains valid and later calls return
    /// [`GenGkError::AfterBreakdown`].
    pub fn step(&mut self) -> Result<StepOutcome, GenGkError> {
        if self.breakdown.is_some() {
            return Err(GenGkError::AfterBreakdown {
                completed: self.completed,
            });
        }
        let step = self.completed + 1;
        let last = self.completed;

        self.ops.a_products += 1;
        let mut ucand = self.a.apply(&self.qvs[last])?;
        ucand.axpy(-self.alphas[last], &self.us[last], 1.0);
        self.ops.r_inverse_applies += 1;
        let mut rcand = self.r.apply_inv(&ucand);
        if self.reorth {
            for u in &self.us {
                let coef = u.dot(&rcand);
                ucand.axpy(-coef, u, 1.0);
            }
            self.ops.r_inverse_applies += 1;
            rcand = self.r.apply_inv(&ucand);
        }
        let beta = ucand.dot(&rcand).max(0.0).sqrt();
        if beta < BREAKDOWN_REL_TOL * self.betas[0] {
            let info = Breakdown {
                kind: BreakdownKind::Beta,
                step,
                norm: beta,
            };
            self.betas.push(beta);
            self.breakdown = Some(info);
            return Ok(StepOutcome::Breakdown(info));
        }
        let u_new = &ucand / beta;
        let ru_new = if self.reorth {
            rcand / beta
        } else {
            self.ops.r_inverse_applies += 1;
            self.r.apply_inv(&u_new)
        };

        self.ops.a_transpose_products += 1;
        let mut vcand = self.a.apply_transpose(&ru_new)?;
        vcand.axpy(-beta, &self.vs[last], 1.0);
        self.ops.q_products += 1;
        let mut qcand = self.q.apply(&vcand)?;
        if self.reorth {
            for (v, qv) in self.vs.iter().zip(&self.qvs) {
                let coef = v.dot(&qcand);
                vcand.axpy(-coef, v, 1.0);
                qcand.axpy(-coef, qv, 1.0);
            }
            self.ops.q_products += 1;
            qcand = self.q.apply(&vcand)?;
        }
        let alpha = vcand.dot(&qcand).max(0.0).sqrt();
        if alpha < BREAKDOWN_REL_TOL * self.alphas[0] {
            let info = Breakdown {
                kind: BreakdownKind::Alpha,
                step,
                norm: alpha,
            };
            self.us.push(u_new);
            self.betas.push(beta);
            self.alphas.push(alpha);
            self.breakdown = Some(info);
            return Ok(StepOutcome::Breakdown(info));
        }
        let v_new = &vcand / alpha;
        let qv_new = if self.reorth {
            qcand / alpha
        } else {
            self.ops.q_products += 1;
            self.q.apply(&v_new)?
        };

        self.us.push(u_new);
        self.vs.push(v_new);
        self.qvs.push(qv_new);
        self.alphas.push(alpha);
        self.betas.push(beta);
        self.completed += 1;
        Ok(StepOutcome::Advanced)
    }

    /// Number of fully completed steps.
    pub fn completed_steps(&self) -> usize {
        self.completed
    }

    /// Largest `k` for which the projected problem exists: `B_k`, `V_k`, and
    /// the cached `Q V_k` are all available. Equals
    /// [`completed_steps`](Self::completed_steps) on a healthy state and may
    /// exceed it by one after a breakdown, where the final half-step still
    /// yields a usable column.
    pub fn available_k(&self) -> usize {
        (self.betas.len() - 1).min(self.alphas.len()).min(self.vs.len())
    }

    pub fn breakdown(&self) -> Option<Breakdown> {
        self.breakdown
    }

    pub fn reorth(&self) -> bool {
        self.reorth
    }

    pub fn op_counts(&self) -> OpCounts {
        self.ops
    }

    /// `beta_1 = ||b||_{R^{-1}}`, the projected right-hand side scale.
    pub fn beta1(&self) -> f64 {
        self.betas[0]
    }

    /// `alpha_1`, the first solution-space normalization.
    pub fn alpha1(&self) -> f64 {
        self.alphas[0]
    }

    /// Normalization constants `alpha_1 .. alpha_{k+1}` recorded so far.
    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Normalization constants `beta_1 .. beta_{k+1}` recorded so far.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn u(&self, i: usize) -> &DVector<f64> {
        &self.us[i]
    }

    pub fn v(&self, i: usize) -> &DVector<f64> {
        &self.vs[i]
    }

    /// Cached product `Q v_i`.
    pub fn qv(&self, i: usize) -> &DVector<f64> {
        &self.qvs[i]
    }

    pub fn us(&self) -> &[DVector<f64>] {
        &self.us
    }

    pub fn vs(&self) -> &[DVector<f64>] {
        &self.vs
    }

    pub fn qvs(&self) -> &[DVector<f64>] {
        &self.qvs
    }

    /// The factor `B_k` at `k = available_k()`.
    pub fn bidiagonal(&self) -> Bidiagonal {
        let k = self.available_k();
        assert!(k >= 1, "bidiagonal factor needs at least one step");
        Bidiagonal {
            alphas: self.alphas[..k].to_vec(),
            betas: self.betas[1..k + 1].to_vec(),
        }
    }

    /// The `(k+1) x k` augmented factor stacking `B_k^T B_k` over
    /// `beta_{k+1} alpha_{k+1} e_k^T`, at `k = available_k()`. Satisfies
    /// `(A^T R^{-1} A Q) V_k = V_{k+1} Baug_k` alongside the base relations.
    pub fn augmented(&self) -> DMatrix<f64> {
        let k = self.available_k();
        assert!(k >= 1, "augmented factor needs at least one step");
        let b = self.bidiagonal().to_dense();
        let top = b.transpose() * &b;
        let mut out = DMatrix::zeros(k + 1, k);
        out.view_mut((0, 0), (k, k)).copy_from(&top);
        // After a beta breakdown alpha_{k+1} was never formed; the matching
        // subdiagonal weight beta_{k+1} is negligible, so the product is zero.
        let alpha_next = self.alphas.get(k).copied().unwrap_or(0.0);
        out[(k, k - 1)] = self.betas[k] * alpha_next;
        out
    }
}

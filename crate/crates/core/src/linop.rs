//! Matrix-free linear operators and the diagonal noise model.
//!
//! Solvers in this crate touch `A`, `R`, and `Q` only through products, so
//! the operator contract is deliberately small: report dimensions, apply,
//! apply the transpose. Concrete implementations cover dense matrices,
//! diagonal scalings, compressed sparse rows, products of operators, and
//! vertically stacked blocks. [`adjoint_check`] and [`dense_from_operator`]
//! give every structured implementation a brute-force cross-check; the dense
//! fallback is intended for tests at `n <= 4096`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use std::sync::Arc;
use thiserror::Error;

/// Errors from operator construction or application.
#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("{context}: expected vector of length {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("operator must have positive dimensions, got {nrows}x{ncols}")]
    EmptyOperator { nrows: usize, ncols: usize },
    #[error("noise variance must be strictly positive; entry {index} is {value}")]
    NonpositiveVariance { index: usize, value: f64 },
    #[error(
        "composition factors {left} and {right} do not conform: \
         {left_rows}x{left_cols} cannot be applied after {right_rows}x{right_cols}"
    )]
    NonconformingFactors {
        left: usize,
        right: usize,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("stacked block {index} has {actual} columns, expected {expected}")]
    MismatchedBlockWidth {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("operator list must be nonempty")]
    EmptyList,
    #[error("sparse entry ({row}, {col}) is outside a {nrows}x{ncols} operator")]
    SparseEntryOutOfBounds {
        row: usize,
        col: usize,
        nrows: usize,
        ncols: usize,
    },
}

/// A real linear map accessed only through matrix-vector products.
///
/// Implementations must be immutable after construction and reentrant, so a
/// single operator can be shared across threads. `apply` and
/// `apply_transpose` must be consistent: `<A x, y> = <x, A^T y>` to round-off
/// for all `x`, `y` (see [`adjoint_check`]).
pub trait LinearOperator: Send + Sync {
    /// Output dimension of [`LinearOperator::apply`].
    fn nrows(&self) -> usize;
    /// Input dimension of [`LinearOperator::apply`].
    fn ncols(&self) -> usize;
    /// Computes `A x`.
    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>, OperatorError>;
    /// Computes `A^T y`.
    fn apply_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>, OperatorError>;
}

pub(crate) fn check_len(
    context: &'static str,
    expected: usize,
    actual: usize,
) -> Result<(), OperatorError> {
    if expected == actual {
        Ok(())
    } else {
        Err(OperatorError::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}

/// Diagonal Gaussian noise covariance `R` with precomputed inverse and
/// inverse-square-root diagonals.
///
/// All solver-side uses of the noise model are `R^{-1}` products and
/// `R^{-1}`-weighted inner products, so those are what the type exposes.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    diag: DVector<f64>,
    inv: DVector<f64>,
    inv_sqrt: DVector<f64>,
}

impl NoiseModel {
    /// Builds the model from the diagonal of `R`. Every entry must be
    /// strictly positive and finite.
    pub fn new(diag: DVector<f64>) -> Result<Self, OperatorError> {
        if diag.is_empty() {
            return Err(OperatorError::EmptyOperator { nrows: 0, ncols: 0 });
        }
        for (i, &r) in diag.iter().enumerate() {
            if !(r > 0.0) || !r.is_finite() {
                return Err(OperatorError::NonpositiveVariance { index: i, value: r });
            }
        }
        let inv = diag.map(|r| 1.0 / r);
        let inv_sqrt = diag.map(|r| 1.0 / r.sqrt());
        Ok(Self {
            diag,
            inv,
            inv_sqrt,
        })
    }

    /// White noise of unit variance: `R = I_m`.
    pub fn identity(m: usize) -> Self {
        Self::new(DVector::from_element(m, 1.0)).expect("unit variances are positive")
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// The diagonal of `R` itself.
    pub fn diag(&self) -> &DVector<f64> {
        &self.diag
    }

    /// Computes `R^{-1} x`.
    ///
    /// Panics if `x` has the wrong length; lengths are fixed at construction
    /// and all callers in this crate pass conforming vectors.
    pub fn apply_inv(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.len(), "noise model length mismatch");
        x.component_mul(&self.inv)
    }

    /// Computes the whitened vector `R^{-1/2} x`.
    pub fn whiten(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.len(), "noise model length mismatch");
        x.component_mul(&self.inv_sqrt)
    }

    /// Computes `x^T R^{-1} y`.
    pub fn weighted_dot(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        assert_eq!(x.len(), self.len(), "noise model length mismatch");
        assert_eq!(y.len(), self.len(), "noise model length mismatch");
        x.iter()
            .zip(y.iter())
            .zip(self.inv.iter())
            .map(|((&a, &b), &w)| a * b * w)
            .sum()
    }

    /// Computes `||x||_{R^{-1}} = sqrt(x^T R^{-1} x)`.
    pub fn weighted_norm(&self, x: &DVector<f64>) -> f64 {
        self.weighted_dot(x, x).max(0.0).sqrt()
    }
}

/// Dense matrix wrapped as an operator.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    matrix: DMatrix<f64>,
}

impl DenseOperator {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self, OperatorError> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(OperatorError::EmptyOperator {
                nrows: matrix.nrows(),
                ncols: matrix.ncols(),
            });
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>, OperatorError> {
        check_len("dense apply", self.ncols(), x.len())?;
        Ok(&self.matrix * x)
    }

    fn apply_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>, OperatorError> {
        check_len("dense apply_transpose", self.nrows(), y.len())?;
        Ok(self.matrix.tr_mul(y))
    }
}

/// Diagonal operator `diag(d)`; the identity is the special case `d = 1`.
#[derive(Debug, Clone)]
pub struct DiagonalOperator {
    diag: DVector<f64>,
}

impl DiagonalOperator {
    pub fn new(diag: DVector<f64>) -> Result<Self, OperatorError> {
        if diag.is_empty() {
            return Err(OperatorError::EmptyOperator { nrows: 0, ncols: 0 });
        }
        Ok(Self { diag })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DVector::from_element(n, 1.0)).expect("identity diagonal is nonempty")
    }
}

impl LinearOperator for DiagonalOperator {
    fn nrows(&self) -> usize {
        self.diag.len()
    }

    fn ncols(&self) -> usize {
        self.diag.len()
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>, OperatorError> {
        check_len("diagonal apply", self.ncols(), x.len())?;
        Ok(x.component_mul(&self.diag))
    }

    fn apply_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>, OperatorError> {
        check_len("diagonal apply_transpose", self.nrows(), y.len())?;
        Ok(y.component_mul(&self.diag))
    }
}

/// Compressed-sparse-row operator.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseOperator {
    /// Builds CSR storage from `(row, col, value)` triplets. Duplicate
    /// positions are summed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, OperatorError> {
        if nrows == 0 || ncols == 0 {
            return Err(OperatorError::EmptyOperator { nrows, ncols });
        }
        for &(r, c, _) in triplets {
            if r >= nrows || c >= ncols {
                return Err(OperatorError::SparseEntryOutOfBounds {
                    row: r,
                    col: c,
                    nrows,
                    ncols,
                });
            }
        }
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            if last == Some((r, c)) {
                *values.last_mut().expect("entry was just pushed") += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Nonzero entries of row `i` as `(column, value)` pairs.
    pub fn row_entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .iter()
            .zip(self.values[lo..hi].iter())
            .map(|(&c, &v)| (c, v))
    }
}

impl LinearOperator for SparseOperator {
    fn nrows(&self) -> usize {
        self.nrows
    }

    fn ncols(&self) -> usize {
        self.ncols
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>, OperatorError> {
        check_len("sparse apply", self.ncols, x.len())?;
        let mut y = DVector::zeros(self.nrows);
        for i in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
        Ok(y)
    }

    fn apply_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>, OperatorError> {
        check_len("sparse apply_transpose", self.nrows, y.len())?;
        let mut x = DVector::zeros(self.ncols);
        for i in 0..self.nrows {
            let yi = y[i];
            if yi == 0.0 {
                continue;
            }
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                x[self.col_idx[k]] += self.values[k] * yi;
            }
        }
        Ok(x)
    }
}

/// Product of operators, applied right to left: `factors[0] * ... * factors[p-1] * x`.
#[derive(Clone)]
pub struct ComposedOperator {
    factors: Vec<Arc<dyn LinearOperator>>,
}

impl ComposedOperator {
    pub fn new(factors: Vec<Arc<dyn LinearOperator>>) -> Result<Self, OperatorError> {
        if factors.is_empty() {
            return Err(OperatorError::EmptyList);
        }
        for i in 0..factors.len() - 1 {
            let (left, right) = (&factors[i], &factors[i + 1]);
            if left.ncols() != right.nrows() {
                return Err(OperatorError::NonconformingFactors {
                    left: i,
                    right: i + 1,
                    left_rows: left.nrows(),
                    left_cols: left.ncols(),
                    right_rows: right.nrows(),
                    right_cols: right.ncols(),
                });
            }
        }
        Ok(Self { factors })
    }
}

impl LinearOperator for ComposedOperator {
    fn nrows(&self) -> usize {
        self.factors.first().map(|f| f.nrows()).unwrap_or(0)
    }

    fn ncols(&self) -> usize {
        self.factors.last().map(|f| f.ncols()).unwrap_or(0)
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>, OperatorError> {
        check_len("composed apply", self.ncols(), x.len())?;
        let mut v = x.clone();
        for f in self.factors.iter().rev() {
            v = f.apply(&v)?;
        }
        Ok(v)
    }

    fn apply_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>, OperatorError> {
        check_len("composed apply_transpose", self.nrows(), y.len())?;
        let mut v = y.clone();
        for f in self.factors.iter() {
            v = f.apply_transpose(&v)?;
        }
        Ok(v)
    }
}

/// Vertical stack `[A_1; ...; A_K]` of operators sharing a column dimension,
/// as used by multi-frame forward models.
#[derive(Clone)]
pub struct StackedOperator {
    blocks: Vec<Arc<dyn LinearOperator>>,
    nrows: usize,
}

impl StackedOperator {
    pub fn new(blocks: Vec<Arc<dyn LinearOperator>>) -> Result<Self, OperatorError> {
        if blocks.is_empty() {
            return Err(OperatorError::EmptyList);
        }
        let ncols = blocks[0].ncols();
        for (i, b) in blocks.iter().enumerate() {
            if b.ncols() != ncols {
                return Err(OperatorError::MismatchedBlockWidth {
                    index: i,
                    expected: ncols,
                    actual: b.ncols(),
                });
            }
        }
        let nrows = blocks.iter().map(|b| b.nrows()).sum();
        Ok(Self { blocks, nrows })
    }
}

impl LinearOperator for StackedOperator {
    fn nrows(&self) -> usize {
        self.nrows
    }

    fn ncols(&self) -> usize {
        self.blocks[0].ncols()
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>, OperatorError> {
        check_len("stacked apply", self.ncols(), x.len())?;
        let mut y = DVector::zeros(self.nrows);
        let mut offset = 0;
        for b in &self.blocks {
            let yb = b.apply(x)?;
            y.rows_mut(offset, b.nrows()).copy_from(&yb);
            offset += b.nrows();
        }
        Ok(y)
    }

    fn apply_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>, OperatorError> {
        check_len("stacked apply_transpose", self.nrows(), y.len())?;
        let mut x = DVector::zeros(self.ncols());
        let mut offset = 0;
        for b in &self.blocks {
            let yb = DVector::from(y.rows(offset, b.nrows()).clone_owned());
            x += b.apply_transpose(&yb)?;
            offset += b.nrows();
        }
        Ok(x)
    }
}

/// Standard normal vector drawn from a seeded generator.
pub(crate) fn standard_normal_vector(n: usize, rng: &mut ChaCha20Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Stochastic adjoint consistency test: the maximum over `trials` random
/// pairs of `|<Ax, y> - <x, A^T y>| / (||Ax|| ||y|| + tiny)`. Deterministic
/// for a given seed.
pub fn adjoint_check(
    op: &dyn LinearOperator,
    trials: usize,
    seed: u64,
) -> Result<f64, OperatorError> {
    assert!(trials >= 1, "adjoint_check needs at least one trial");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let x = standard_normal_vector(op.ncols(), &mut rng);
        let y = standard_normal_vector(op.nrows(), &mut rng);
        let ax = op.apply(&x)?;
        let aty = op.apply_transpose(&y)?;
        let lhs = ax.dot(&y);
        let rhs = x.dot(&aty);
        let scale = ax.norm() * y.norm() + 1e-300;
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    Ok(worst)
}

/// Materializes an operator column by column by applying it to the canonical
/// basis. Brute-force oracle for tests; cost is `ncols` full applies.
pub fn dense_from_operator(op: &dyn LinearOperator) -> Result<DMatrix<f64>, OperatorError> {
    let mut dense = DMatrix::zeros(op.nrows(), op.ncols());
    let mut e = DVector::zeros(op.ncols());
    for j in 0..op.ncols() {
        e[j] = 1.0;
        let col = op.apply(&e)?;
        dense.set_column(j, &col);
        e[j] = 0.0;
    }
    Ok(dense)
}

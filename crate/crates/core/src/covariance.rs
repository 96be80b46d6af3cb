//! Stationary prior covariance kernels and fast matrix-vector products.
//!
//! Kernels come in three families: Matern with smoothness `nu` and scale
//! `alpha` (closed forms for `nu` in {1/2, 3/2, 5/2}, Bessel evaluation
//! otherwise), gamma-exponential `exp(-(r/ell)^gamma)`, and the Gaussian
//! squared-exponential `exp(-(alpha r)^2)`, which is also where
//! `Matern(nu = infinity)` is mapped. All kernels carry a marginal-variance
//! `amplitude` factor.
//!
//! On a regular grid a stationary covariance matrix is Toeplitz (1D) or
//! block-Toeplitz (2D), so it embeds into a circulant matrix diagonalized by
//! the FFT. [`StationaryCovarianceOperator`] precomputes that embedded
//! spectrum once and then applies `Q` in `O(n log n)` per product; the same
//! spectrum provides a square-root factor for drawing Gaussian random fields.
//! Dense assembly on arbitrary point sets is kept for small problems and as
//! the brute-force oracle the FFT path is tested against.

mod bessel;

use crate::linop::{check_len, standard_normal_vector, LinearOperator, OperatorError};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;
use thiserror::Error;

/// Largest point count accepted by dense assembly.
pub const DENSE_ASSEMBLY_LIMIT: usize = 4096;

/// Relative tolerance for negative embedded-spectrum values: eigenvalues in
/// `[-PSD_TOL * max, 0)` are clamped to zero, anything lower is an error.
const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum CovarianceError {
    #[error("matern smoothness nu must be positive, got {0}")]
    InvalidNu(f64),
    #[error("kernel scale alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("length scale ell must be positive and finite, got {0}")]
    InvalidEll(f64),
    #[error("gamma-exponential exponent must lie in (0, 2], got {0}")]
    InvalidGamma(f64),
    #[error("kernel amplitude must be positive and finite, got {0}")]
    InvalidAmplitude(f64),
    #[error("grid axis {axis} must have positive size and spacing (size {size}, spacing {spacing})")]
    InvalidGrid {
        axis: usize,
        size: usize,
        spacing: f64,
    },
    #[error("dense assembly limited to {limit} points, got {n}")]
    AboveDenseLimit { n: usize, limit: usize },
    #[error(
        "embedding not PSD; increase padding (min spectrum {min:.3e} vs max {max:.3e})"
    )]
    EmbeddingNotPsd { min: f64, max: f64 },
    #[error("covariance matrix is indefinite beyond tolerance (min eigenvalue {min:.3e}, max {max:.3e})")]
    IndefiniteMatrix { min: f64, max: f64 },
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

/// Kernel family tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Matern,
    GammaExponential,
    Gaussian,
}

/// A validated stationary kernel: family plus its parameters and an overall
/// amplitude (marginal variance).
#[derive(Debug, Clone)]
pub struct KernelSpec {
    family: KernelFamily,
    nu: f64,
    alpha: f64,
    ell: f64,
    gamma: f64,
    amplitude: f64,
}

impl KernelSpec {
    /// Matern kernel with smoothness `nu` and scale `alpha` (units 1/length).
    /// `nu = infinity` is mapped to the Gaussian family member
    /// `exp(-(alpha r)^2)`.
    pub fn matern(nu: f64, alpha: f64) -> Result<Self, CovarianceError> {
        if !(nu > 0.0) {
            return Err(CovarianceError::InvalidNu(nu));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(CovarianceError::InvalidAlpha(alpha));
        }
        if nu.is_infinite() {
            return Self::gaussian(alpha);
        }
        Ok(Self {
            family: KernelFamily::Matern,
            nu,
            alpha,
            ell: 1.0,
            gamma: 1.0,
            amplitude: 1.0,
        })
    }

    /// Gamma-exponential kernel `exp(-(r/ell)^gamma)` with `0 < gamma <= 2`.
    pub fn gamma_exponential(ell: f64, gamma: f64) -> Result<Self, CovarianceError> {
        if !(ell > 0.0) || !ell.is_finite() {
            return Err(CovarianceError::InvalidEll(ell));
        }
        if !(gamma > 0.0 && gamma <= 2.0) {
            return Err(CovarianceError::InvalidGamma(gamma));
        }
        Ok(Self {
            family: KernelFamily::GammaExponential,
            nu: 0.5,
            alpha: 1.0,
            ell,
            gamma,
            amplitude: 1.0,
        })
    }

    /// Gaussian (squared-exponential) kernel `exp(-(alpha r)^2)`.
    pub fn gaussian(alpha: f64) -> Result<Self, CovarianceError> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(CovarianceError::InvalidAlpha(alpha));
        }
        Ok(Self {
            family: KernelFamily::Gaussian,
            nu: f64::INFINITY,
            alpha,
            ell: 1.0,
            gamma: 2.0,
            amplitude: 1.0,
        })
    }

    /// Returns the same kernel scaled to marginal variance `amplitude`.
    pub fn with_amplitude(mut self, amplitude: f64) -> Result<Self, CovarianceError> {
        if !(amplitude > 0.0) || !amplitude.is_finite() {
            return Err(CovarianceError::InvalidAmplitude(amplitude));
        }
        self.amplitude = amplitude;
        Ok(self)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// Kernel value at distance `r >= 0`; `value(0) = amplitude` by the
    /// continuous limit.
    pub fn value(&self, r: f64) -> f64 {
        assert!(
            r >= 0.0 && r.is_finite(),
            "kernel distance must be finite and nonnegative, got {r}"
        );
        if r == 0.0 {
            return self.amplitude;
        }
        let normalized = match self.family {
            KernelFamily::Matern => matern_normalized(self.nu, self.alpha, r),
            KernelFamily::Gaussian => {
                let z = self.alpha * r;
                (-z * z).exp()
            }
            KernelFamily::GammaExponential => (-(r / self.ell).powf(self.gamma)).exp(),
        };
        self.amplitude * normalized
    }
}

/// Matern correlation (unit amplitude) at distance `r > 0`; dispatches to the
/// half-integer closed forms where they exist.
fn matern_normalized(nu: f64, alpha: f64, r: f64) -> f64 {
    if nu == 0.5 {
        (-alpha * r).exp()
    } else if nu == 1.5 {
        let z = 3.0_f64.sqrt() * alpha * r;
        (1.0 + z) * (-z).exp()
    } else if nu == 2.5 {
        let z = 5.0_f64.sqrt() * alpha * r;
        (1.0 + z + z * z / 3.0) * (-z).exp()
    } else {
        matern_general(nu, alpha, r)
    }
}

/// Matern correlation `2^{1-nu}/Gamma(nu) z^nu K_nu(z)` with
/// `z = sqrt(2 nu) alpha r`, evaluated in log space for any `nu > 0`.
pub(crate) fn matern_general(nu: f64, alpha: f64, r: f64) -> f64 {
    let z = (2.0 * nu).sqrt() * alpha * r;
    if z < 1e-6 {
        // Small-argument expansion of the correlation; the direct product
        // z^nu K_nu(z) loses accuracy as both factors diverge.
        if nu >= 1.0 {
            1.0
        } else {
            let head = bessel::gamma(1.0 - nu) / bessel::gamma(1.0 + nu);
            1.0 - head * (0.5 * z).powf(2.0 * nu) + z * z / (4.0 * (1.0 - nu))
        }
    } else {
        let ln_val = (1.0 - nu) * std::f64::consts::LN_2 - bessel::ln_gamma(nu)
            + nu * z.ln()
            + bessel::ln_besselk(z, nu);
        ln_val.exp()
    }
}

/// A regular equispaced grid in one or two dimensions with physical spacing
/// per axis. Points are ordered row-major (the last axis varies fastest).
#[derive(Debug, Clone)]
pub struct GridGeometry {
    shape: Vec<usize>,
    spacing: Vec<f64>,
}

impl GridGeometry {
    pub fn new_1d(n: usize, spacing: f64) -> Result<Self, CovarianceError> {
        Self::new(vec![n], vec![spacing])
    }

    pub fn new_2d(
        n1: usize,
        n2: usize,
        spacing1: f64,
        spacing2: f64,
    ) -> Result<Self, CovarianceError> {
        Self::new(vec![n1, n2], vec![spacing1, spacing2])
    }

    fn new(shape: Vec<usize>, spacing: Vec<f64>) -> Result<Self, CovarianceError> {
        assert!(
            shape.len() == 1 || shape.len() == 2,
            "grids are one- or two-dimensional"
        );
        for axis in 0..shape.len() {
            if shape[axis] == 0 || !(spacing[axis] > 0.0) || !spacing[axis].is_finite() {
                return Err(CovarianceError::InvalidGrid {
                    axis,
                    size: shape[axis],
                    spacing: spacing[axis],
                });
            }
        }
        Ok(Self { shape, spacing })
    }

    pub fn dims(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn num_points(&self) -> usize {
        self.shape.iter().product()
    }

    /// Physical coordinates of point `idx`; 1D grids report a zero second
    /// coordinate.
    pub fn coords(&self, idx: usize) -> [f64; 2] {
        assert!(idx < self.num_points(), "grid index out of range");
        match self.shape.len() {
            1 => [idx as f64 * self.spacing[0], 0.0],
            _ => {
                let n2 = self.shape[1];
                let i1 = idx / n2;
                let i2 = idx % n2;
                [i1 as f64 * self.spacing[0], i2 as f64 * self.spacing[1]]
            }
        }
    }

    /// All grid points in index order.
    pub fn grid_points(&self) -> Vec<[f64; 2]> {
        (0..self.num_points()).map(|i| self.coords(i)).collect()
    }
}

/// Dense covariance matrix `Q_ij = kernel(||x_i - x_j||)` on an arbitrary
/// point set; exactly symmetric by construction. Refuses point sets larger
/// than [`DENSE_ASSEMBLY_LIMIT`].
pub fn assemble_dense(
    spec: &KernelSpec,
    points: &[[f64; 2]],
) -> Result<DMatrix<f64>, CovarianceError> {
    assemble_dense_with_limit(spec, points, DENSE_ASSEMBLY_LIMIT)
}

pub fn assemble_dense_with_limit(
    spec: &KernelSpec,
    points: &[[f64; 2]],
    limit: usize,
) -> Result<DMatrix<f64>, CovarianceError> {
    let n = points.len();
    if n > limit {
        return Err(CovarianceError::AboveDenseLimit { n, limit });
    }
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        q[(i, i)] = spec.amplitude();
        for j in 0..i {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            let v = spec.value(dx.hypot(dy));
            q[(i, j)] = v;
            q[(j, i)] = v;
        }
    }
    Ok(q)
}

/// Smallest 2-3-5-smooth integer `>= n`, used for FFT-friendly padding.
fn next_fast_size(n: usize) -> usize {
    fn is_smooth(mut v: usize) -> bool {
        for p in [2, 3, 5] {
            while v % p == 0 {
                v /= p;
            }
        }
        v == 1
    }
    let mut v = n.max(1);
    while !is_smooth(v) {
        v += 1;
    }
    v
}

/// Stationary covariance operator on a regular grid, applied via circulant
/// embedding: each axis is padded to at least `2 n - 1` (rounded up to an
/// FFT-friendly size), the kernel symbol is transformed once at build time,
/// and every product is two FFTs plus a diagonal scaling.
pub struct StationaryCovarianceOperator {
    kernel: KernelSpec,
    grid: GridGeometry,
    padded: Vec<usize>,
    spectrum: Vec<f64>,
    forward_plans: Vec<Arc<dyn Fft<f64>>>,
    inverse_plans: Vec<Arc<dyn Fft<f64>>>,
}

impl StationaryCovarianceOperator {
    /// Builds the operator with the default minimum padding of `2 n - 1` per
    /// axis.
    pub fn build(spec: &KernelSpec, grid: &GridGeometry) -> Result<Self, CovarianceError> {
        Self::build_padded(spec, grid, 2)
    }

    /// Builds with per-axis padding of at least `pad_factor * n - 1`; larger
    /// factors can rescue embeddings that are not PSD at the minimum size.
    pub fn build_padded(
        spec: &KernelSpec,
        grid: &GridGeometry,
        pad_factor: usize,
    ) -> Result<Self, CovarianceError> {
        assert!(pad_factor >= 2, "padding below 2n-1 cannot embed the grid");
        let padded: Vec<usize> = grid
            .shape()
            .iter()
            .map(|&n| next_fast_size(pad_factor * n - 1))
            .collect();
        let total: usize = padded.iter().product();

        let mut planner = FftPlanner::new();
        let forward_plans: Vec<_> = padded
            .iter()
            .map(|&p| planner.plan_fft_forward(p))
            .collect();
        let inverse_plans: Vec<_> = padded
            .iter()
            .map(|&p| planner.plan_fft_inverse(p))
            .collect();

        // Kernel symbol on the embedding torus: offset o along an axis of
        // padded size p corresponds to physical lag min(o, p - o) * h.
        let mut buf = vec![Complex::new(0.0, 0.0); total];
        let wrapped = |o: usize, p: usize, h: f64| -> f64 { o.min(p - o) as f64 * h };
        match padded.len() {
            1 => {
                let h = grid.spacing()[0];
                for (o, slot) in buf.iter_mut().enumerate() {
                    *slot = Complex::new(spec.value(wrapped(o, padded[0], h)), 0.0);
                }
            }
            _ => {
                let (p1, p2) = (padded[0], padded[1]);
                let (h1, h2) = (grid.spacing()[0], grid.spacing()[1]);
                for o1 in 0..p1 {
                    let d1 = wrapped(o1, p1, h1);
                    for o2 in 0..p2 {
                        let d2 = wrapped(o2, p2, h2);
                        buf[o1 * p2 + o2] = Complex::new(spec.value(d1.hypot(d2)), 0.0);
                    }
                }
            }
        }

        fft_all_axes(&mut buf, &padded, &forward_plans);

        let raw: Vec<f64> = buf.iter().map(|c| c.re).collect();
        let max = raw.iter().cloned().fold(f64::MIN, f64::max);
        let min = raw.iter().cloned().fold(f64::MAX, f64::min);
        if min < -PSD_TOL * max {
            return Err(CovarianceError::EmbeddingNotPsd { min, max });
        }
        let clamped = raw.iter().filter(|&&v| v < 0.0).count();
        if clamped > 0 {
            log::warn!(
                "clamped {clamped} slightly negative embedding eigenvalues (min {min:.3e})"
            );
        }
        let spectrum = raw.into_iter().map(|v| v.max(0.0)).collect();

        Ok(Self {
            kernel: spec.clone(),
            grid: grid.clone(),
            padded,
            spectrum,
            forward_plans,
            inverse_plans,
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn grid(&self) -> &GridGeometry {
        &self.grid
    }

    /// Eigenvalues of the embedding circulant (already clamped at zero).
    pub fn embedded_spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    fn padded_total(&self) -> usize {
        self.padded.iter().product()
    }

    /// Scatters grid values into the padded buffer.
    fn embed(&self, x: &DVector<f64>) -> Vec<Complex<f64>> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.padded_total()];
        match self.grid.dims() {
            1 => {
                for i in 0..self.grid.shape()[0] {
                    buf[i] = Complex::new(x[i], 0.0);
                }
            }
            _ => {
                let (n1, n2) = (self.grid.shape()[0], self.grid.shape()[1]);
                let p2 = self.padded[1];
                for i1 in 0..n1 {
                    for i2 in 0..n2 {
                        buf[i1 * p2 + i2] = Complex::new(x[i1 * n2 + i2], 0.0);
                    }
                }
            }
        }
        buf
    }

    /// Gathers the original-grid block back out of the padded buffer,
    /// applying `scale`.
    fn extract(&self, buf: &[Complex<f64>], scale: f64) -> DVector<f64> {
        match self.grid.dims() {
            1 => DVector::from_fn(self.grid.shape()[0], |i, _| buf[i].re * scale),
            _ => {
                let (n1, n2) = (self.grid.shape()[0], self.grid.shape()[1]);
                let p2 = self.padded[1];
                DVector::from_fn(n1 * n2, |i, _| {
                    let (i1, i2) = (i / n2, i % n2);
                    buf[i1 * p2 + i2].re * scale
                })
            }
        }
    }

    /// Shared product core: embed, transform, scale the spectrum through
    /// `weight`, transform back.
    fn circulant_apply(&self, x: &DVector<f64>, weight: impl Fn(f64) -> f64) -> DVector<f64> {
        let mut buf = self.embed(x);
        fft_all_axes(&mut buf, &self.padded, &self.forward_plans);
        for (c, &lam) in buf.iter_mut().zip(self.spectrum.iter()) {
            *c *= weight(lam);
        }
        fft_all_axes(&mut buf, &self.padded, &self.inverse_plans);
        self.extract(&buf, 1.0 / self.padded_total() as f64)
    }

    /// Draws a zero-mean Gaussian field with covariance `Q` using the
    /// circulant spectral square root; deterministic for a given seed.
    pub fn sample_field(&self, seed: u64) -> DVector<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let total = self.padded_total();
        let mut buf: Vec<Complex<f64>> = (0..total)
            .map(|_| {
                Complex::new(
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng),
                    0.0,
                )
            })
            .collect();
        fft_all_axes(&mut buf, &self.padded, &self.forward_plans);
        for (c, &lam) in buf.iter_mut().zip(self.spectrum.iter()) {
            *c *= lam.sqrt();
        }
        fft_all_axes(&mut buf, &self.padded, &self.inverse_plans);
        self.extract(&buf, 1.0 / total as f64)
    }
}

impl LinearOperator for StationaryCovarianceOperator {
    fn nrows(&self) -> usize {
        self.grid.num_points()
    }

    fn ncols(&self) -> usize {
        self.grid.num_points()
    }

    fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>, OperatorError> {
        check_len("covariance apply", self.ncols(), x.len())?;
        Ok(self.circulant_apply(x, |lam| lam))
    }

    fn apply_transpose(&self, y: &DVector<f64>) -> Result<DVector<f64>, OperatorError> {
        // Q is symmetric.
        check_len("covariance apply_transpose", self.nrows(), y.len())?;
        Ok(self.circulant_apply(y, |lam| lam))
    }
}

/// In-place unnormalized FFT along every axis of a row-major buffer with the
/// given per-axis sizes (1 or 2 axes).
fn fft_all_axes(buf: &mut [Complex<f64>], sizes: &[usize], plans: &[Arc<dyn Fft<f64>>]) {
    match sizes.len() {
        1 => plans[0].process(buf),
        _ => {
            let (p1, p2) = (sizes[0], sizes[1]);
            // Axis 1 (contiguous rows).
            for row in buf.chunks_exact_mut(p2) {
                plans[1].process(row);
            }
            // Axis 0 (strided columns, gathered into scratch).
            let mut col = vec![Complex::new(0.0, 0.0); p1];
            for j in 0..p2 {
                for i in 0..p1 {
                    col[i] = buf[i * p2 + j];
                }
                plans[0].process(&mut col);
                for i in 0..p1 {
                    buf[i * p2 + j] = col[i];
                }
            }
        }
    }
}

/// Draws a zero-mean Gaussian sample with covariance `q` via a symmetric
/// eigendecomposition; eigenvalues slightly below zero are clamped, anything
/// beyond tolerance is an error.
pub fn sample_field_dense(q: &DMatrix<f64>, seed: u64) -> Result<DVector<f64>, CovarianceError> {
    assert_eq!(q.nrows(), q.ncols(), "covariance matrix must be square");
    let eig = q.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if min < -PSD_TOL * max.max(0.0) {
        return Err(CovarianceError::IndefiniteMatrix { min, max });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let z = standard_normal_vector(q.nrows(), &mut rng);
    let scaled = DVector::from_fn(q.nrows(), |i, _| eig.eigenvalues[i].max(0.0).sqrt() * z[i]);
    Ok(&eig.eigenvectors * scaled)
}

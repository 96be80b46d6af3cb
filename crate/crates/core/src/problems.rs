//! Synthetic test problems: 1D inverse heat conduction, 2D cross-well
//! traveltime tomography, and multi-frame super-resolution imaging.
//!
//! Every generator returns a [`ProblemInstance`] bundling the forward
//! operator, the ground truth, clean and noisy data, and the noise model.
//! Noise is white Gaussian rescaled so the realized level matches the
//! requested one exactly, and all randomness is driven by a single seed, so
//! identical inputs reproduce identical instances bit for bit.

use crate::covariance::{CovarianceError, GridGeometry, KernelFamily, KernelSpec};
use crate::linop::{
    standard_normal_vector, ComposedOperator, DenseOperator, LinearOperator, NoiseModel,
    OperatorError, SparseOperator, StackedOperator,
};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

/// Physical side length, in meters, of the square tomography domain. The
/// cross-well layout puts sources on its left edge and receivers on its
/// right edge.
pub const SEISMIC_EXTENT: f64 = 1000.0;

const MAGIC: [u8; 8] = *b"GENHYPRB";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("problem parameter {name} = {value} violates: {constraint}")]
    InvalidParameter {
        name: &'static str,
        value: String,
        constraint: &'static str,
    },
    #[error("source {source_index} and receiver {receiver_index} coincide at ({x}, {y}); the ray is degenerate")]
    DegenerateRay {
        source_index: usize,
        receiver_index: usize,
        x: f64,
        y: f64,
    },
    #[error("point ({x}, {y}) lies outside the domain [0, {extent}]^2")]
    PointOutsideDomain { x: f64, y: f64, extent: f64 },
    #[error("problem file is malformed: {0}")]
    Format(String),
    #[error(transparent)]
    Covariance(#[from] CovarianceError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A fully assembled synthetic inverse problem `d = A s_true + noise`.
pub struct ProblemInstance {
    pub a: Arc<dyn LinearOperator>,
    pub s_true: DVector<f64>,
    pub d_clean: DVector<f64>,
    pub d: DVector<f64>,
    pub r: NoiseModel,
    /// Requested (and realized) value of `||noise|| / ||d_clean||`.
    pub noise_level: f64,
    pub geometry: GridGeometry,
    pub seed: u64,
}

impl std::fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("nrows", &self.nrows())
            .field("ncols", &self.ncols())
            .field("noise_level", &self.noise_level)
            .field("seed", &self.seed)
            .finish_non_exhaustive()
    }
}

impl ProblemInstance {
    pub fn nrows(&self) -> usize {
        self.a.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.a.ncols()
    }

    /// Squared noise norm `||d - d_clean||^2`, the natural discrepancy
    /// target.
    pub fn noise_norm_squared(&self) -> f64 {
        (&self.d - &self.d_clean).norm_squared()
    }

    /// Per-component noise variance estimate `||d - d_clean||^2 / m`.
    pub fn noise_variance(&self) -> f64 {
        self.noise_norm_squared() / self.nrows() as f64
    }

    /// Writes truth, data, and noise diagonal as flat little-endian binary
    /// with an eight-byte magic, a version word, and the dimensions up front.
    pub fn write_binary(&self, path: &Path) -> Result<(), ProblemError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.nrows() as u64).to_le_bytes())?;
        w.write_all(&(self.ncols() as u64).to_le_bytes())?;
        w.write_all(&self.noise_level.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for v in [&self.s_true, &self.d_clean, &self.d, self.r.diag()] {
            for &x in v.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a file written by [`write_binary`](Self::write_binary). The
    /// forward operator is not stored, so the result holds vectors and
    /// metadata only.
    pub fn read_binary(path: &Path) -> Result<StoredProblem, ProblemError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(ProblemError::Format("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(ProblemError::Format(format!(
                "unsupported version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let m = read_u64(&mut r)? as usize;
        let n = read_u64(&mut r)? as usize;
        let noise_level = read_f64(&mut r)?;
        let mut seed_buf = [0u8; 8];
        r.read_exact(&mut seed_buf)?;
        let seed = u64::from_le_bytes(seed_buf);
        let s_true = read_vector(&mut r, n)?;
        let d_clean = read_vector(&mut r, m)?;
        let d = read_vector(&mut r, m)?;
        let r_diag = read_vector(&mut r, m)?;
        Ok(StoredProblem {
            m,
            n,
            noise_level,
            seed,
            s_true,
            d_clean,
            d,
            r_diag,
        })
    }

    /// Writes `truth.csv` (index, value) and `data.csv` (index, clean, noisy,
    /// noise variance) into `dir` for offline inspection.
    pub fn write_csv(&self, dir: &Path) -> Result<(), ProblemError> {
        let mut truth = BufWriter::new(File::create(dir.join("truth.csv"))?);
        writeln!(truth, "index,s_true")?;
        for (i, &x) in self.s_true.iter().enumerate() {
            writeln!(truth, "{i},{x:.17e}")?;
        }
        truth.flush()?;

        let mut data = BufWriter::new(File::create(dir.join("data.csv"))?);
        writeln!(data, "index,d_clean,d,noise_variance")?;
        for i in 0..self.nrows() {
            writeln!(
                data,
                "{i},{:.17e},{:.17e},{:.17e}",
                self.d_clean[i],
                self.d[i],
                self.r.diag()[i]
            )?;
        }
        data.flush()?;
        Ok(())
    }
}

/// Vectors and metadata recovered from a serialized problem file.
#[derive(Debug)]
pub struct StoredProblem {
    pub m: usize,
    pub n: usize,
    pub noise_level: f64,
    pub seed: u64,
    pub s_true: DVector<f64>,
    pub d_clean: DVector<f64>,
    pub d: DVector<f64>,
    pub r_diag: DVector<f64>,
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ProblemError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ProblemError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, ProblemError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_vector<R: Read>(r: &mut R, len: usize) -> Result<DVector<f64>, ProblemError> {
    let mut out = DVector::zeros(len);
    let mut buf = [0u8; 8];
    for i in 0..len {
        r.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                ProblemError::Format("file truncated".into())
            } else {
                ProblemError::Io(e)
            }
        })?;
        out[i] = f64::from_le_bytes(buf);
    }
    Ok(out)
}

fn check_noise_level(noise_level: f64) -> Result<(), ProblemError> {
    if !(noise_level >= 0.0) || !noise_level.is_finite() {
        return Err(ProblemError::InvalidParameter {
            name: "noise_level",
            value: format!("{noise_level}"),
            constraint: "must be finite and nonnegative",
        });
    }
    Ok(())
}

/// Draws white Gaussian noise and rescales it so the realized relative level
/// `||noise|| / ||d_clean||` equals the request exactly.
fn add_noise(d_clean: &DVector<f64>, noise_level: f64, rng: &mut ChaCha20Rng) -> DVector<f64> {
    if noise_level == 0.0 {
        return d_clean.clone();
    }
    let mut noise = standard_normal_vector(d_clean.len(), rng);
    let norm = noise.norm();
    assert!(norm > 0.0, "a nonempty Gaussian draw is nonzero");
    noise *= noise_level * d_clean.norm() / norm;
    d_clean + noise
}

/// Inverse heat conduction on `(0, 1]`: a first-kind Volterra equation with
/// kernel `t^{-3/2} / (2 sqrt(pi)) * exp(-1 / (4 t))`, discretized by midpoint
/// quadrature into a lower-triangular Toeplitz matrix. The truth is the
/// standard piecewise hump supported on the first half of the interval.
pub fn heat_problem(n: usize, noise_level: f64, seed: u64) -> Result<ProblemInstance, ProblemError> {
    if n < 8 {
        return Err(ProblemError::InvalidParameter {
            name: "n",
            value: n.to_string(),
            constraint: "must be at least 8",
        });
    }
    check_noise_level(noise_level)?;

    let h = 1.0 / n as f64;
    let c = h / (2.0 * std::f64::consts::PI.sqrt());
    let kernel: Vec<f64> = (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) * h;
            c * t.powf(-1.5) * (-0.25 / t).exp()
        })
        .collect();
    let matrix = DMatrix::from_fn(n, n, |i, j| if j <= i { kernel[i - j] } else { 0.0 });

    let mut s_true = DVector::zeros(n);
    for idx in 0..n / 2 {
        let t = (idx + 1) as f64 * 20.0 / n as f64;
        s_true[idx] = if t < 2.0 {
            0.75 * t * t / 4.0
        } else if t < 3.0 {
            0.75 + (t - 2.0) * (3.0 - t)
        } else {
            0.75 * (-2.0 * (t - 3.0)).exp()
        };
    }

    let a = Arc::new(DenseOperator::new(matrix)?);
    let d_clean = a.apply(&s_true)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = add_noise(&d_clean, noise_level, &mut rng);
    Ok(ProblemInstance {
        a,
        s_true,
        d_clean,
        r: NoiseModel::identity(n),
        d,
        noise_level,
        geometry: GridGeometry::new_1d(n, h)?,
        seed,
    })
}

/// Source and receiver layout for straight-ray traveltime tomography on an
/// `n_side` x `n_side` cell grid covering `[0, extent]^2`. One ray per
/// source-receiver pair, row-indexed as `source * n_rec + receiver`.
#[derive(Debug, Clone)]
pub struct RayGeometry {
    n_side: usize,
    extent: f64,
    sources: Vec<[f64; 2]>,
    receivers: Vec<[f64; 2]>,
}

impl RayGeometry {
    /// Arbitrary source and receiver points inside the domain. Rejects
    /// coincident source-receiver pairs and points outside `[0, extent]^2`.
    pub fn new(
        n_side: usize,
        extent: f64,
        sources: Vec<[f64; 2]>,
        receivers: Vec<[f64; 2]>,
    ) -> Result<Self, ProblemError> {
        if n_side == 0 {
            return Err(ProblemError::InvalidParameter {
                name: "n_side",
                value: "0".into(),
                constraint: "must be positive",
            });
        }
        if !(extent > 0.0) || !extent.is_finite() {
            return Err(ProblemError::InvalidParameter {
                name: "extent",
                value: format!("{extent}"),
                constraint: "must be finite and positive",
            });
        }
        if sources.is_empty() || receivers.is_empty() {
            return Err(ProblemError::InvalidParameter {
                name: "sources/receivers",
                value: format!("{}/{}", sources.len(), receivers.len()),
                constraint: "need at least one source and one receiver",
            });
        }
        for p in sources.iter().chain(receivers.iter()) {
            let inside = (0.0..=extent).contains(&p[0]) && (0.0..=extent).contains(&p[1]);
            if !inside {
                return Err(ProblemError::PointOutsideDomain {
                    x: p[0],
                    y: p[1],
                    extent,
                });
            }
        }
        for (i, s) in sources.iter().enumerate() {
            for (j, r) in receivers.iter().enumerate() {
                if s == r {
                    return Err(ProblemError::DegenerateRay {
                        source_index: i,
                        receiver_index: j,
                        x: s[0],
                        y: s[1],
                    });
                }
            }
        }
        Ok(Self {
            n_side,
            extent,
            sources,
            receivers,
        })
    }

    /// Cross-well layout: `n_sou` sources equispaced on the left edge and
    /// `n_rec` receivers on the right edge, both at midpoint positions so no
    /// ray hugs a domain boundary.
    pub fn cross_well(
        n_side: usize,
        extent: f64,
        n_sou: usize,
        n_rec: usize,
    ) -> Result<Self, ProblemError> {
        let spread = |count: usize, x: f64| -> Vec<[f64; 2]> {
            (0..count)
                .map(|k| [x, (k as f64 + 0.5) * extent / count as f64])
                .collect()
        };
        Self::new(n_side, extent, spread(n_sou, 0.0), spread(n_rec, extent))
    }

    pub fn n_sou(&self) -> usize {
        self.sources.len()
    }

    pub fn n_rec(&self) -> usize {
        self.receivers.len()
    }

    pub fn n_rays(&self) -> usize {
        self.n_sou() * self.n_rec()
    }

    pub fn n_cells(&self) -> usize {
        self.n_side * self.n_side
    }

    /// The cell grid as a covariance-ready geometry with physical spacing.
    pub fn grid(&self) -> GridGeometry {
        let h = self.extent / self.n_side as f64;
        GridGeometry::new_2d(self.n_side, self.n_side, h, h)
            .expect("validated dimensions form a grid")
    }

    /// Exact intersection lengths of the segment from `s` to `r` with every
    /// cell it crosses, as `(cell index, length)` pairs. Cells are indexed
    /// `ix * n_side + iy`.
    fn trace(&self, s: [f64; 2], r: [f64; 2]) -> Vec<(usize, f64)> {
        let h = self.extent / self.n_side as f64;
        let diff = [r[0] - s[0], r[1] - s[1]];
        let length = diff[0].hypot(diff[1]);

        let mut breaks = vec![0.0, 1.0];
        for axis in 0..2 {
            if diff[axis] == 0.0 {
                continue;
            }
            for k in 1..self.n_side {
                let t = (k as f64 * h - s[axis]) / diff[axis];
                if t > 0.0 && t < 1.0 {
                    breaks.push(t);
                }
            }
        }
        breaks.sort_unstable_by(|a, b| a.partial_cmp(b).expect("break points are finite"));

        let clamp = |x: f64| -> usize {
            ((x / h).floor() as isize).clamp(0, self.n_side as isize - 1) as usize
        };
        let mut out = Vec::with_capacity(breaks.len());
        for w in breaks.windows(2) {
            let dt = w[1] - w[0];
            if dt <= 0.0 {
                continue;
            }
            let tm = 0.5 * (w[0] + w[1]);
            let ix = clamp(s[0] + tm * diff[0]);
            let iy = clamp(s[1] + tm * diff[1]);
            out.push((ix * self.n_side + iy, dt * length));
        }
        out
    }

    /// Sparse traveltime operator: entry `(ray, cell)` is the length of that
    /// ray inside that cell, so each row sums to the ray's total length.
    pub fn ray_matrix(&self) -> Result<SparseOperator, ProblemError> {
        let mut triplets = Vec::new();
        for (i, s) in self.sources.iter().enumerate() {
            for (j, r) in self.receivers.iter().enumerate() {
                let row = i * self.n_rec() + j;
                for (cell, len) in self.trace(*s, *r) {
                    triplets.push((row, cell, len));
                }
            }
        }
        Ok(SparseOperator::from_triplets(
            self.n_rays(),
            self.n_cells(),
            &triplets,
        )?)
    }
}

/// Truncated Karhunen-Loeve description of a random field: a Gaussian
/// covariance kernel, a constant mean, and the number of retained modes.
#[derive(Debug, Clone)]
pub struct KlSpec {
    kernel: KernelSpec,
    mean: f64,
    n_terms: usize,
}

impl KlSpec {
    /// The kernel must belong to the Gaussian family; its separable structure
    /// is what makes the eigenpair computation cheap on tensor grids.
    pub fn new(kernel: KernelSpec, mean: f64, n_terms: usize) -> Result<Self, ProblemError> {
        if kernel.family() != KernelFamily::Gaussian {
            return Err(ProblemError::InvalidParameter {
                name: "kl_spec.kernel",
                value: format!("{:?}", kernel.family()),
                constraint: "truncated expansions require the Gaussian kernel family",
            });
        }
        if n_terms == 0 {
            return Err(ProblemError::InvalidParameter {
                name: "kl_spec.n_terms",
                value: "0".into(),
                constraint: "must retain at least one mode",
            });
        }
        if !mean.is_finite() {
            return Err(ProblemError::InvalidParameter {
                name: "kl_spec.mean",
                value: format!("{mean}"),
                constraint: "must be finite",
            });
        }
        Ok(Self {
            kernel,
            mean,
            n_terms,
        })
    }

    pub fn paper_defaults() -> Self {
        let kernel = KernelSpec::gaussian(1.0 / 100.0)
            .and_then(|k| k.with_amplitude(1e-3))
            .expect("fixed parameters are valid");
        Self::new(kernel, 0.08, 20).expect("fixed parameters are valid")
    }
}

/// Eigenpairs of the symmetric kernel matrix `K[i, j] = g(|c_i - c_j|)` on
/// the 1D point set `c`, sorted by descending eigenvalue with a fixed sign
/// convention (largest-magnitude component positive).
fn sorted_eigenpairs_1d(spec: &KernelSpec, coords: &[f64]) -> (Vec<f64>, Vec<DVector<f64>>) {
    let n = coords.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        spec.value((coords[i] - coords[j]).abs()) / spec.amplitude()
    });
    let eig = k.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("kernel eigenvalues are finite")
            .then(a.cmp(&b))
    });
    let mut values = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n);
    for &idx in &order {
        let mut v = eig.eigenvectors.column(idx).clone_owned();
        let lead = v
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.abs().partial_cmp(&b.abs()).expect("components are finite"))
            .map(|(i, _)| i)
            .expect("eigenvector is nonempty");
        if v[lead] < 0.0 {
            v.neg_mut();
        }
        values.push(eig.eigenvalues[idx]);
        vectors.push(v);
    }
    (values, vectors)
}

/// Top `n_terms` eigenpairs of the Gaussian kernel matrix on an `n1 x n2`
/// grid of cell centers. The kernel separates across axes, so the 2D
/// eigenpairs are products of two small 1D eigendecompositions instead of one
/// dense `n x n` one.
fn kl_eigenpairs(
    spec: &KernelSpec,
    n1: usize,
    n2: usize,
    h1: f64,
    h2: f64,
    n_terms: usize,
) -> Vec<(f64, DVector<f64>)> {
    let centers = |n: usize, h: f64| -> Vec<f64> {
        (0..n).map(|i| (i as f64 + 0.5) * h).collect()
    };
    let (vals1, vecs1) = sorted_eigenpairs_1d(spec, &centers(n1, h1));
    let (vals2, vecs2) = sorted_eigenpairs_1d(spec, &centers(n2, h2));

    // Factor eigenvalues are positive, so the top products can only involve
    // the top n_terms factors of each axis.
    let b1 = n_terms.min(n1);
    let b2 = n_terms.min(n2);
    let mut products = Vec::with_capacity(b1 * b2);
    for i in 0..b1 {
        for j in 0..b2 {
            products.push((spec.amplitude() * vals1[i] * vals2[j], i, j));
        }
    }
    products.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("products are finite").then((a.1, a.2).cmp(&(b.1, b.2))));
    products.truncate(n_terms.min(n1 * n2));

    products
        .into_iter()
        .map(|(val, i, j)| {
            assert!(val > 0.0, "covariance eigenvalues must be positive");
            let mut mode = DVector::zeros(n1 * n2);
            for p in 0..n1 {
                for q in 0..n2 {
                    mode[p * n2 + q] = vecs1[i][p] * vecs2[j][q];
                }
            }
            (val, mode)
        })
        .collect()
}

/// Cross-well straight-ray traveltime tomography with a random smooth truth.
///
/// Sources sit on the left edge and receivers on the right edge of a
/// [`SEISMIC_EXTENT`]-sized square split into `n_side^2` constant-slowness
/// cells; each measurement is the ray length in each cell times the cell
/// slowness. The truth is a truncated expansion in the leading
/// eigenfunctions of `kl_spec`'s kernel with standard normal coefficients.
pub fn seismic_problem(
    n_side: usize,
    n_sou: usize,
    n_rec: usize,
    noise_level: f64,
    kl_spec: &KlSpec,
    seed: u64,
) -> Result<ProblemInstance, ProblemError> {
    if n_side < 8 {
        return Err(ProblemError::InvalidParameter {
            name: "n_side",
            value: n_side.to_string(),
            constraint: "must be at least 8",
        });
    }
    check_noise_level(noise_level)?;

    let rays = RayGeometry::cross_well(n_side, SEISMIC_EXTENT, n_sou, n_rec)?;
    let a = Arc::new(rays.ray_matrix()?);
    let grid = rays.grid();
    let h = grid.spacing()[0];

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let pairs = kl_eigenpairs(
        &kl_spec.kernel,
        n_side,
        n_side,
        h,
        h,
        kl_spec.n_terms,
    );
    let xi = standard_normal_vector(pairs.len(), &mut rng);
    let mut s_true = DVector::from_element(grid.num_points(), kl_spec.mean);
    for (k, (val, mode)) in pairs.iter().enumerate() {
        s_true.axpy(val.sqrt() * xi[k], mode, 1.0);
    }

    let d_clean = a.apply(&s_true)?;
    let d = add_noise(&d_clean, noise_level, &mut rng);
    Ok(ProblemInstance {
        r: NoiseModel::identity(a.nrows()),
        a,
        s_true,
        d_clean,
        d,
        noise_level,
        geometry: grid,
        seed,
    })
}

/// One frame's rigid motion: rotation about the image center, in degrees,
/// followed by a translation in pixel units.
#[derive(Debug, Clone, Copy)]
pub struct RigidMotion {
    pub angle_deg: f64,
    pub shift: [f64; 2],
}

/// Frame layout for super-resolution: `K` rigid motions of a `hi_side`-pixel
/// square image, each followed by a `lo_factor`-fold block-mean reduction.
pub struct SuperResGeometry {
    hi_side: usize,
    lo_factor: usize,
    motions: Vec<RigidMotion>,
}

impl SuperResGeometry {
    pub fn new(
        hi_side: usize,
        lo_factor: usize,
        motions: Vec<RigidMotion>,
    ) -> Result<Self, ProblemError> {
        if hi_side == 0 || lo_factor == 0 || hi_side % lo_factor != 0 {
            return Err(ProblemError::InvalidParameter {
                name: "hi_side/lo_factor",
                value: format!("{hi_side}/{lo_factor}"),
                constraint: "hi_side must be a positive multiple of lo_factor",
            });
        }
        if motions.is_empty() {
            return Err(ProblemError::InvalidParameter {
                name: "motions",
                value: "0 frames".into(),
                constraint: "need at least one frame",
            });
        }
        for m in &motions {
            if !m.angle_deg.is_finite() || !m.shift[0].is_finite() || !m.shift[1].is_finite() {
                return Err(ProblemError::InvalidParameter {
                    name: "motions",
                    value: format!("{m:?}"),
                    constraint: "angles and shifts must be finite",
                });
            }
        }
        Ok(Self {
            hi_side,
            lo_factor,
            motions,
        })
    }

    /// Default motion set: `k` rotations equispaced in [-2, 2] degrees with
    /// no translation.
    pub fn default_motions(k: usize) -> Vec<RigidMotion> {
        (0..k)
            .map(|i| {
                let angle_deg = if k == 1 {
                    0.0
                } else {
                    -2.0 + 4.0 * i as f64 / (k - 1) as f64
                };
                RigidMotion {
                    angle_deg,
                    shift: [0.0, 0.0],
                }
            })
            .collect()
    }

    pub fn frames(&self) -> usize {
        self.motions.len()
    }

    pub fn hi_side(&self) -> usize {
        self.hi_side
    }

    pub fn lo_side(&self) -> usize {
        self.hi_side / self.lo_factor
    }

    pub fn motions(&self) -> &[RigidMotion] {
        &self.motions
    }

    /// Sparse resampling matrix for frame `i`: row `p` holds the bilinear
    /// weights of the motion's inverse image of pixel `p`. Weights of
    /// out-of-domain neighbors are dropped and the row renormalized; rows
    /// whose sample point lies fully outside stay zero.
    pub fn interpolation_operator(&self, i: usize) -> Result<SparseOperator, ProblemError> {
        assert!(i < self.frames(), "frame index out of range");
        let n = self.hi_side;
        let motion = &self.motions[i];
        let center = (n as f64 - 1.0) / 2.0;
        let (sin, cos) = motion.angle_deg.to_radians().sin_cos();

        let mut triplets = Vec::with_capacity(4 * n * n);
        for out_r in 0..n {
            for out_c in 0..n {
                let pr = out_r as f64 - center - motion.shift[0];
                let pc = out_c as f64 - center - motion.shift[1];
                let src_r = cos * pr + sin * pc + center;
                let src_c = -sin * pr + cos * pc + center;

                let r0 = src_r.floor();
                let c0 = src_c.floor();
                let fr = src_r - r0;
                let fc = src_c - c0;
                let mut entries = [(0usize, 0.0f64); 4];
                let mut count = 0;
                let mut total = 0.0;
                for (dr, dc, w) in [
                    (0.0, 0.0, (1.0 - fr) * (1.0 - fc)),
                    (1.0, 0.0, fr * (1.0 - fc)),
                    (0.0, 1.0, (1.0 - fr) * fc),
                    (1.0, 1.0, fr * fc),
                ] {
                    let rr = r0 + dr;
                    let cc = c0 + dc;
                    let inside =
                        rr >= 0.0 && cc >= 0.0 && rr <= (n - 1) as f64 && cc <= (n - 1) as f64;
                    if inside && w > 0.0 {
                        entries[count] = (rr as usize * n + cc as usize, w);
                        count += 1;
                        total += w;
                    }
                }
                if total > 0.0 {
                    let row = out_r * n + out_c;
                    for &(col, w) in &entries[..count] {
                        triplets.push((row, col, w / total));
                    }
                }
            }
        }
        Ok(SparseOperator::from_triplets(n * n, n * n, &triplets)?)
    }

    /// Block-mean restriction from `hi_side^2` to `lo_side^2` pixels: each
    /// low-resolution pixel averages its `lo_factor^2` block.
    pub fn restriction_operator(&self) -> Result<SparseOperator, ProblemError> {
        let lo = self.lo_side();
        let f = self.lo_factor;
        let weight = 1.0 / (f * f) as f64;
        let mut triplets = Vec::with_capacity(lo * lo * f * f);
        for big_r in 0..lo {
            for big_c in 0..lo {
                let row = big_r * lo + big_c;
                for dr in 0..f {
                    for dc in 0..f {
                        let col = (big_r * f + dr) * self.hi_side + (big_c * f + dc);
                        triplets.push((row, col, weight));
                    }
                }
            }
        }
        Ok(SparseOperator::from_triplets(
            lo * lo,
            self.hi_side * self.hi_side,
            &triplets,
        )?)
    }

    /// Stacked forward operator `[D S_1; ...; D S_K]`.
    pub fn forward_operator(&self) -> Result<StackedOperator, ProblemError> {
        let d: Arc<dyn LinearOperator> = Arc::new(self.restriction_operator()?);
        let mut blocks: Vec<Arc<dyn LinearOperator>> = Vec::with_capacity(self.frames());
        for i in 0..self.frames() {
            let s: Arc<dyn LinearOperator> = Arc::new(self.interpolation_operator(i)?);
            blocks.push(Arc::new(ComposedOperator::new(vec![d.clone(), s])?));
        }
        Ok(StackedOperator::new(blocks)?)
    }
}

/// Smooth synthetic grayscale phantom in [0, 1]-normalized coordinates: a
/// gentle ramp plus Gaussian blobs and a diagonal ridge.
fn smooth_phantom(side: usize) -> DVector<f64> {
    let bump = |u: f64, v: f64, cu: f64, cv: f64, w: f64| -> f64 {
        let du = u - cu;
        let dv = v - cv;
        (-(du * du + dv * dv) / (2.0 * w * w)).exp()
    };
    DVector::from_fn(side * side, |idx, _| {
        let u = (idx / side) as f64 / side as f64;
        let v = (idx % side) as f64 / side as f64;
        let mut val = 0.08 + 0.2 * u;
        val += 0.55 * bump(u, v, 0.38, 0.34, 0.13);
        val += 0.45 * bump(u, v, 0.64, 0.62, 0.17);
        val -= 0.25 * bump(u, v, 0.5, 0.76, 0.08);
        let ridge = u + v - 1.15;
        val += 0.2 * (-(ridge * ridge) / (2.0 * 0.05 * 0.05)).exp();
        val
    })
}

/// Multi-frame super-resolution: `k_frames` low-resolution views of one
/// high-resolution image, each a rigid motion followed by block-mean
/// downsampling. `motions = None` uses [`SuperResGeometry::default_motions`].
pub fn superres_problem(
    hi_side: usize,
    k_frames: usize,
    lo_factor: usize,
    motions: Option<&[RigidMotion]>,
    noise_level: f64,
    seed: u64,
) -> Result<ProblemInstance, ProblemError> {
    if k_frames == 0 {
        return Err(ProblemError::InvalidParameter {
            name: "k_frames",
            value: "0".into(),
            constraint: "need at least one frame",
        });
    }
    check_noise_level(noise_level)?;
    let motions = match motions {
        Some(list) => {
            if list.len() != k_frames {
                return Err(ProblemError::InvalidParameter {
                    name: "motions",
                    value: format!("{} entries for {k_frames} frames", list.len()),
                    constraint: "must supply exactly one motion per frame",
                });
            }
            list.to_vec()
        }
        None => SuperResGeometry::default_motions(k_frames),
    };
    let frames = SuperResGeometry::new(hi_side, lo_factor, motions)?;

    let a = Arc::new(frames.forward_operator()?);
    let s_true = smooth_phantom(hi_side);
    let d_clean = a.apply(&s_true)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = add_noise(&d_clean, noise_level, &mut rng);
    Ok(ProblemInstance {
        r: NoiseModel::identity(a.nrows()),
        a,
        s_true,
        d_clean,
        d,
        noise_level,
        geometry: GridGeometry::new_2d(hi_side, hi_side, 1.0, 1.0)?,
        seed,
    })
}

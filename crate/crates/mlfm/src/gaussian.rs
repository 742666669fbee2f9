//! Multivariate Gaussian primitives: density, sampling, conditioning, PSD
//! matrix square roots and the Wasserstein-2 distance between Gaussians.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{MlfmError, Result};

/// Relative tolerance for the symmetry check on covariance matrices.
const SYMMETRY_RTOL: f64 = 1e-12;

/// Eigenvalues below `-EIG_FLOOR_RTOL * lambda_max` make a covariance invalid;
/// eigenvalues in `[-floor, 0]` are treated as zero.
const EIG_FLOOR_RTOL: f64 = 1e-10;

/// Relative clip applied when taking PSD matrix square roots.
const SQRT_CLIP_RTOL: f64 = 1e-12;

/// A multivariate Gaussian `N(mean, cov)` with symmetric PSD covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianDist {
    /// Validates symmetry (1e-12 relative) and the eigenvalue floor
    /// (no eigenvalue below `-1e-10 * lambda_max`) before accepting `cov`.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(MlfmError::DimensionMismatch {
                context: "GaussianDist covariance",
                expected: d,
                got: cov.nrows().max(cov.ncols()),
            });
        }
        let scale = cov.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for i in 0..d {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > SYMMETRY_RTOL * scale {
                    return Err(MlfmError::InvalidCovariance(format!(
                        "asymmetric entry at ({i}, {j})"
                    )));
                }
            }
        }
        if d > 0 {
            let eigs = symmetric_eigenvalues(&cov);
            let max_eig = eigs.iter().fold(0.0_f64, |m, &v| m.max(v));
            let min_eig = eigs.iter().fold(f64::INFINITY, |m, &v| m.min(v));
            if min_eig < -EIG_FLOOR_RTOL * max_eig.max(0.0) {
                return Err(MlfmError::InvalidCovariance(format!(
                    "eigenvalue {min_eig:.3e} below floor for max eigenvalue {max_eig:.3e}"
                )));
            }
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Log-density `log N(x | mean, cov)` via a symmetric factorization; the
    /// covariance inverse is never materialized.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let d = self.dim();
        if x.len() != d {
            return Err(MlfmError::DimensionMismatch {
                context: "log_density point",
                expected: d,
                got: x.len(),
            });
        }
        let chol = jittered_cholesky(&self.cov, "log_density")?;
        let centered = x - &self.mean;
        let z = chol.l_dirty().solve_lower_triangular(&centered).ok_or(
            MlfmError::FactorizationFailed {
                context: "log_density triangular solve",
            },
        )?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(-0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared()))
    }

    /// `n` draws from the distribution, one per row. Identical RNG state gives
    /// bit-identical output.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<DMatrix<f64>> {
        if n == 0 {
            return Err(MlfmError::InvalidArgument("sample count must be >= 1".into()));
        }
        let d = self.dim();
        let factor = psd_sqrt(&self.cov)?;
        let mut out = DMatrix::zeros(n, d);
        let mut z = DVector::zeros(d);
        for i in 0..n {
            for k in 0..d {
                z[k] = rng.sample(StandardNormal);
            }
            let draw = &self.mean + &factor * &z;
            out.row_mut(i).copy_from(&draw.transpose());
        }
        Ok(out)
    }

    /// Gaussian conditional of the unobserved coordinates given
    /// `observed_indices = observed_values`, by the Schur-complement formulas.
    ///
    /// An empty index list returns the distribution unchanged.
    pub fn condition(
        &self,
        observed_indices: &[usize],
        observed_values: &DVector<f64>,
    ) -> Result<GaussianDist> {
        let d = self.dim();
        if observed_values.len() != observed_indices.len() {
            return Err(MlfmError::DimensionMismatch {
                context: "condition observed values",
                expected: observed_indices.len(),
                got: observed_values.len(),
            });
        }
        if observed_indices.is_empty() {
            return Ok(self.clone());
        }
        let mut seen = vec![false; d];
        for &idx in observed_indices {
            if idx >= d {
                return Err(MlfmError::InvalidArgument(format!(
                    "observed index {idx} out of range for dimension {d}"
                )));
            }
            if seen[idx] {
                return Err(MlfmError::InvalidArgument(format!(
                    "observed index {idx} repeated"
                )));
            }
            seen[idx] = true;
        }
        let free: Vec<usize> = (0..d).filter(|i| !seen[*i]).collect();
        let obs = observed_indices;

        let cov_ff = gather(&self.cov, &free, &free);
        let cov_fo = gather(&self.cov, &free, obs);
        let cov_oo = gather(&self.cov, obs, obs);
        let mean_f = DVector::from_iterator(free.len(), free.iter().map(|&i| self.mean[i]));
        let mean_o = DVector::from_iterator(obs.len(), obs.iter().map(|&i| self.mean[i]));

        let chol = jittered_cholesky(&cov_oo, "condition observed block")?;
        let innovation = observed_values - &mean_o;
        // Sigma_oo^{-1} applied through the factorization.
        let solved_innovation = chol.solve(&innovation);
        let solved_cross = chol.solve(&cov_fo.transpose());

        let mean_post = mean_f + &cov_fo * solved_innovation;
        let cov_post = symmetrize(&(cov_ff - &cov_fo * solved_cross));
        // A Schur complement of a PSD joint is PSD; severe conditioning can
        // still leave rounding negatives, which are projected away.
        let eig = cov_post.symmetric_eigen();
        let clipped: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
        let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&DVector::from_vec(clipped));
        let cov_post = symmetrize(&(scaled * eig.eigenvectors.transpose()));
        GaussianDist::new(mean_post, cov_post)
    }
}

/// Wasserstein-2 distance between two Gaussians:
/// `W^2 = |m1 - m2|^2 + tr(C1 + C2 - 2 (C2^{1/2} C1 C2^{1/2})^{1/2})`.
pub fn wasserstein2(d1: &GaussianDist, d2: &GaussianDist) -> Result<f64> {
    if d1.dim() != d2.dim() {
        return Err(MlfmError::DimensionMismatch {
            context: "wasserstein2 operands",
            expected: d1.dim(),
            got: d2.dim(),
        });
    }
    // Identity of indiscernibles, exactly; for ill-conditioned covariances
    // the eigenvalue clipping below cannot resolve distances under ~1e-5.
    if d1.mean() == d2.mean() && d1.cov() == d2.cov() {
        return Ok(0.0);
    }
    let sqrt_c2 = psd_sqrt(d2.cov())?;
    let inner = &sqrt_c2 * d1.cov() * &sqrt_c2;
    let cross = psd_sqrt(&symmetrize(&inner))?;
    let mean_term = (d1.mean() - d2.mean()).norm_squared();
    let trace_term = d1.cov().trace() + d2.cov().trace() - 2.0 * cross.trace();
    // The trace term is a difference of like-sized numbers; below the rounding
    // floor of that cancellation the distance is indistinguishable from zero.
    let scale = d1.cov().trace() + d2.cov().trace() + mean_term;
    let floor = 64.0 * f64::EPSILON * scale;
    let squared = mean_term + trace_term;
    if squared < floor {
        return Ok(0.0);
    }
    Ok(squared.sqrt())
}

/// Symmetric PSD square root via eigendecomposition, clipping eigenvalues
/// below `max(lambda) * 1e-12` to zero.
pub fn psd_sqrt(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if matrix.nrows() != matrix.ncols() {
        return Err(MlfmError::InvalidArgument("psd_sqrt needs a square matrix".into()));
    }
    if matrix.nrows() == 0 {
        return Ok(matrix.clone());
    }
    let eig = symmetrize(matrix).symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().fold(0.0_f64, |m, &v| m.max(v));
    let clip = max_eig * SQRT_CLIP_RTOL;
    let sqrt_eigs: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&v| if v > clip { v.sqrt() } else { 0.0 })
        .collect();
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&DVector::from_vec(sqrt_eigs));
    Ok(symmetrize(&(scaled * eig.eigenvectors.transpose())))
}

/// Cholesky with the additive jitter policy: the plain factorization is
/// tried first (keeping well-posed covariances and their gradients exact),
/// then `eps * trace(C)/d` is added to the diagonal starting at
/// `eps = 1e-10` and escalated tenfold at most 3 times.
pub fn jittered_cholesky(matrix: &DMatrix<f64>, context: &'static str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if let Some(chol) = Cholesky::new(matrix.clone()) {
        return Ok(chol);
    }
    let d = matrix.nrows();
    let base = matrix.trace().max(0.0) / d.max(1) as f64;
    let mut eps = 1e-10;
    for _ in 0..4 {
        let mut attempt = matrix.clone();
        for i in 0..d {
            attempt[(i, i)] += eps * base;
        }
        if let Some(chol) = Cholesky::new(attempt) {
            return Ok(chol);
        }
        eps *= 10.0;
    }
    Err(MlfmError::FactorizationFailed { context })
}

/// `(A + A^T) / 2`.
pub fn symmetrize(matrix: &DMatrix<f64>) -> DMatrix<f64> {
    (matrix + matrix.transpose()) * 0.5
}

fn symmetric_eigenvalues(matrix: &DMatrix<f64>) -> Vec<f64> {
    symmetrize(matrix).symmetric_eigen().eigenvalues.iter().copied().collect()
}

fn gather(matrix: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| matrix[(rows[i], cols[j])])
}

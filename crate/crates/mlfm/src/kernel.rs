//! RBF kernel evaluation, Gram matrices and exact covariances between a GP
//! and its definite integrals.
//!
//! The integral covariances are what make exact simulation of the rotation
//! oscillator possible: `Cov(g(s), int_a^b g)` and `Cov(int_a^b g, int_c^d g)`
//! have closed forms in terms of `erf` for the RBF kernel, so joint draws of
//! force values and force integrals carry no discretization error.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MlfmError, Result};
use crate::gaussian::GaussianDist;

const SQRT_HALF_PI: f64 = 1.253_314_137_315_500_3;

/// Radial basis function kernel `k(s, t) = variance * exp(-(s-t)^2 / (2 lengthscale^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfKernel {
    pub variance: f64,
    pub lengthscale: f64,
}

impl RbfKernel {
    pub fn new(variance: f64, lengthscale: f64) -> Result<Self> {
        if !(variance > 0.0) || !(lengthscale > 0.0) {
            return Err(MlfmError::InvalidArgument(format!(
                "RBF parameters must be positive, got ({variance}, {lengthscale})"
            )));
        }
        Ok(Self { variance, lengthscale })
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        let z = (s - t) / self.lengthscale;
        self.variance * (-0.5 * z * z).exp()
    }

    /// Gram matrix over `times`; PSD up to rounding, consumers apply jitter
    /// before any factorization.
    pub fn gram(&self, times: &[f64]) -> DMatrix<f64> {
        let n = times.len();
        DMatrix::from_fn(n, n, |i, j| self.eval(times[i], times[j]))
    }

    /// `Cov(g(s), int_a^b g(tau) dtau)`, exact to `erf` precision.
    pub fn integral_cov(&self, s: f64, a: f64, b: f64) -> Result<f64> {
        if a > b {
            return Err(MlfmError::InvalidArgument(format!(
                "interval [{a}, {b}] is reversed"
            )));
        }
        let scale = std::f64::consts::SQRT_2 * self.lengthscale;
        Ok(self.variance
            * self.lengthscale
            * SQRT_HALF_PI
            * (libm::erf((b - s) / scale) - libm::erf((a - s) / scale)))
    }

    /// `Cov(int_a^b g, int_c^d g)`, the exact double integral of the kernel
    /// over `[a, b] x [c, d]`.
    pub fn double_integral_cov(&self, a: f64, b: f64, c: f64, d: f64) -> Result<f64> {
        if a > b || c > d {
            return Err(MlfmError::InvalidArgument(format!(
                "malformed intervals [{a}, {b}] x [{c}, {d}]"
            )));
        }
        let h = |z: f64| {
            let ell = self.lengthscale;
            let u = z / (std::f64::consts::SQRT_2 * ell);
            ell * SQRT_HALF_PI * z * libm::erf(u) + ell * ell * (-u * u).exp()
        };
        Ok(self.variance * (h(b - c) + h(a - d) - h(a - c) - h(b - d)))
    }

    /// Mean-zero joint Gaussian over `(g(nodes), G_1..G_N)` where
    /// `G_i = int g` over `intervals[i]`. Intervals must be ordered with
    /// non-overlapping interiors.
    pub fn joint_force_integral_dist(
        &self,
        nodes: &[f64],
        intervals: &[(f64, f64)],
    ) -> Result<GaussianDist> {
        for window in intervals.windows(2) {
            if window[0].1 > window[1].0 + 1e-12 {
                return Err(MlfmError::InvalidArgument(format!(
                    "intervals [{}, {}] and [{}, {}] overlap or are unordered",
                    window[0].0, window[0].1, window[1].0, window[1].1
                )));
            }
        }
        let n = nodes.len();
        let m = intervals.len();
        let dim = n + m;
        let mut cov = DMatrix::zeros(dim, dim);
        cov.view_mut((0, 0), (n, n)).copy_from(&self.gram(nodes));
        for (i, &(a, b)) in intervals.iter().enumerate() {
            for (j, &s) in nodes.iter().enumerate() {
                let value = self.integral_cov(s, a, b)?;
                cov[(j, n + i)] = value;
                cov[(n + i, j)] = value;
            }
            for (j, &(c, d)) in intervals.iter().enumerate().take(i + 1) {
                let value = self.double_integral_cov(a, b, c, d)?;
                cov[(n + i, n + j)] = value;
                cov[(n + j, n + i)] = value;
            }
        }
        GaussianDist::new(DVector::zeros(dim), cov)
    }
}

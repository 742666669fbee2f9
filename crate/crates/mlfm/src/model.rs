//! The multiplicative latent force model: a linear ODE whose coefficient
//! matrix is an affine combination of structure matrices weighted by latent
//! forces. Trajectory likelihoods come from truncating the successive
//! approximations (Picard) map after `M` steps: one discrete Picard step is a
//! square matrix over all grid nodes, and propagating a Gaussian initial
//! approximation through it `M` times with additive regularization yields a
//! mean-zero Gaussian with covariance `Sigma_M(g)` whose entries are degree
//! `2M` polynomials in the forces.

use nalgebra::{DMatrix, DVector};

use crate::error::{MlfmError, Result};
use crate::gaussian::{jittered_cholesky, symmetrize};
use crate::grid::{build_rule, QuadratureRule, TimeGrid};
use crate::kernel::RbfKernel;

/// The matrices `A_0..A_R` spanning the space the coefficient matrix lives in.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureBasis {
    offset: DMatrix<f64>,
    force_mats: Vec<DMatrix<f64>>,
}

impl StructureBasis {
    pub fn new(offset: DMatrix<f64>, force_mats: Vec<DMatrix<f64>>) -> Result<Self> {
        let k = offset.nrows();
        if offset.ncols() != k {
            return Err(MlfmError::InvalidArgument("offset matrix must be square".into()));
        }
        if force_mats.is_empty() {
            return Err(MlfmError::InvalidArgument("need at least one force matrix".into()));
        }
        for m in &force_mats {
            if m.nrows() != k || m.ncols() != k {
                return Err(MlfmError::DimensionMismatch {
                    context: "structure basis force matrix",
                    expected: k,
                    got: m.nrows().max(m.ncols()),
                });
            }
        }
        Ok(Self { offset, force_mats })
    }

    /// State dimension `K`.
    pub fn state_dim(&self) -> usize {
        self.offset.nrows()
    }

    /// Number of latent forces `R`.
    pub fn n_forces(&self) -> usize {
        self.force_mats.len()
    }

    pub fn offset(&self) -> &DMatrix<f64> {
        &self.offset
    }

    pub fn force_mat(&self, r: usize) -> &DMatrix<f64> {
        &self.force_mats[r]
    }

    /// Coefficient matrix `A_0 + sum_r A_r g_r` at one set of force values.
    pub fn coefficient_at(&self, g_col: &[f64]) -> Result<DMatrix<f64>> {
        if g_col.len() != self.n_forces() {
            return Err(MlfmError::DimensionMismatch {
                context: "coefficient_at force values",
                expected: self.n_forces(),
                got: g_col.len(),
            });
        }
        let mut out = self.offset.clone();
        for (mat, &g) in self.force_mats.iter().zip(g_col.iter()) {
            out += mat * g;
        }
        Ok(out)
    }
}

/// Latent force values at every grid node, one row per force.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceRealisation {
    values: DMatrix<f64>,
}

impl ForceRealisation {
    pub fn new(values: DMatrix<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(n_forces: usize, n_nodes: usize) -> Self {
        Self { values: DMatrix::zeros(n_forces, n_nodes) }
    }

    /// Reconstructs from a force-major flat vector (all nodes of force 0,
    /// then force 1, ...).
    pub fn from_flat(flat: &DVector<f64>, n_forces: usize, n_nodes: usize) -> Result<Self> {
        if flat.len() != n_forces * n_nodes {
            return Err(MlfmError::DimensionMismatch {
                context: "force realisation flat vector",
                expected: n_forces * n_nodes,
                got: flat.len(),
            });
        }
        let values = DMatrix::from_fn(n_forces, n_nodes, |r, q| flat[r * n_nodes + q]);
        Ok(Self { values })
    }

    pub fn n_forces(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.values
    }

    /// Force-major flattening, the ordering used by posteriors over `g`.
    pub fn flat(&self) -> DVector<f64> {
        let (r_count, p_count) = (self.n_forces(), self.n_nodes());
        DVector::from_fn(r_count * p_count, |i, _| {
            self.values[(i / p_count, i % p_count)]
        })
    }

    pub fn column(&self, q: usize) -> Vec<f64> {
        self.values.column(q).iter().copied().collect()
    }
}

/// Truncation order, regularization scale and initial-approximation kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct PicardConfig {
    pub order: usize,
    pub gamma_scale: f64,
    pub sigma0_kernels: Vec<RbfKernel>,
}

impl PicardConfig {
    pub fn new(order: usize, gamma_scale: f64, sigma0_kernels: Vec<RbfKernel>) -> Result<Self> {
        if order < 1 {
            return Err(MlfmError::InvalidArgument("truncation order must be >= 1".into()));
        }
        if !(gamma_scale >= 0.0) {
            return Err(MlfmError::InvalidArgument("gamma_scale must be >= 0".into()));
        }
        Ok(Self { order, gamma_scale, sigma0_kernels })
    }
}

/// Structure basis, grid, quadrature rule and Picard configuration bundled
/// for likelihood evaluations. States are stored component-major: entry
/// `k * n_nodes + p` is component `k` at node `p`.
#[derive(Debug, Clone)]
pub struct MlfmModel {
    basis: StructureBasis,
    grid: TimeGrid,
    rule: QuadratureRule,
    config: PicardConfig,
}

impl MlfmModel {
    pub fn new(basis: StructureBasis, grid: TimeGrid, config: PicardConfig) -> Result<Self> {
        if config.sigma0_kernels.len() != basis.state_dim() {
            return Err(MlfmError::DimensionMismatch {
                context: "sigma0 kernels per state component",
                expected: basis.state_dim(),
                got: config.sigma0_kernels.len(),
            });
        }
        let rule = build_rule(&grid);
        Ok(Self { basis, grid, rule, config })
    }

    pub fn basis(&self) -> &StructureBasis {
        &self.basis
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn rule(&self) -> &QuadratureRule {
        &self.rule
    }

    pub fn config(&self) -> &PicardConfig {
        &self.config
    }

    /// Same model with a different truncation order.
    pub fn with_order(&self, order: usize) -> Result<Self> {
        if order < 1 {
            return Err(MlfmError::InvalidArgument("truncation order must be >= 1".into()));
        }
        let mut out = self.clone();
        out.config.order = order;
        Ok(out)
    }

    /// Same model with a different regularization scale.
    pub fn with_gamma_scale(&self, gamma_scale: f64) -> Result<Self> {
        if !(gamma_scale >= 0.0) {
            return Err(MlfmError::InvalidArgument("gamma_scale must be >= 0".into()));
        }
        let mut out = self.clone();
        out.config.gamma_scale = gamma_scale;
        Ok(out)
    }

    /// Same model with replacement initial-approximation kernels.
    pub fn with_sigma0_kernels(&self, kernels: Vec<RbfKernel>) -> Result<Self> {
        let mut out = self.clone();
        if kernels.len() != self.basis.state_dim() {
            return Err(MlfmError::DimensionMismatch {
                context: "sigma0 kernels per state component",
                expected: self.basis.state_dim(),
                got: kernels.len(),
            });
        }
        out.config.sigma0_kernels = kernels;
        Ok(out)
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    /// Dimension of the stacked state vector, `K * n_nodes`.
    pub fn state_len(&self) -> usize {
        self.basis.state_dim() * self.grid.n_nodes()
    }

    pub fn state_index(&self, component: usize, node: usize) -> usize {
        component * self.grid.n_nodes() + node
    }

    /// The discrete Picard operator `K[g]`: block row `p` adds the
    /// initial-state selector to the quadrature of the coefficient matrix
    /// against the state, so entries are affine in `g`.
    pub fn picard_operator(&self, g: &ForceRealisation) -> Result<DMatrix<f64>> {
        let p_count = self.grid.n_nodes();
        if g.n_forces() != self.basis.n_forces() || g.n_nodes() != p_count {
            return Err(MlfmError::DimensionMismatch {
                context: "force realisation shape",
                expected: self.basis.n_forces() * p_count,
                got: g.n_forces() * g.n_nodes(),
            });
        }
        let k_dim = self.basis.state_dim();
        let n = k_dim * p_count;
        let mut op = DMatrix::zeros(n, n);

        // Initial-state selector: copy node 0 of every component.
        for k in 0..k_dim {
            for p in 0..p_count {
                op[(k * p_count + p, k * p_count)] += 1.0;
            }
        }
        // Quadrature part: w_{pq} * A(tau_q) acting on the state block at q.
        for q in 0..p_count {
            let coeff = self.basis.coefficient_at(&g.column(q))?;
            for p in 0..p_count {
                let row = self.rule.row(p);
                if q >= row.len() {
                    continue;
                }
                let w = row[q];
                if w == 0.0 {
                    continue;
                }
                for k in 0..k_dim {
                    for kp in 0..k_dim {
                        op[(k * p_count + p, kp * p_count + q)] += w * coeff[(k, kp)];
                    }
                }
            }
        }
        Ok(op)
    }

    /// One successive approximation: `op * x`.
    pub fn picard_iterate(op: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
        op * x
    }

    /// Block-diagonal initial covariance: component `k` gets the Gram matrix
    /// of its kernel over all nodes.
    pub fn build_sigma0(&self) -> DMatrix<f64> {
        let p_count = self.grid.n_nodes();
        let k_dim = self.basis.state_dim();
        let mut sigma0 = DMatrix::zeros(k_dim * p_count, k_dim * p_count);
        for (k, kernel) in self.config.sigma0_kernels.iter().enumerate() {
            let gram = kernel.gram(self.grid.nodes());
            sigma0
                .view_mut((k * p_count, k * p_count), (p_count, p_count))
                .copy_from(&gram);
        }
        sigma0
    }

    /// Log-likelihood `log N(x | 0, Sigma_M(g))`.
    pub fn marginal_loglik(&self, x: &DVector<f64>, g: &ForceRealisation) -> Result<f64> {
        if x.len() != self.state_len() {
            return Err(MlfmError::DimensionMismatch {
                context: "marginal_loglik state vector",
                expected: self.state_len(),
                got: x.len(),
            });
        }
        let op = self.picard_operator(g)?;
        let sigma = sa_covariance(&op, self.config.order, self.config.gamma_scale, &self.build_sigma0());
        log_density_zero_mean(&sigma, x)
    }

    /// Analytic gradient of [`Self::marginal_loglik`] in every force value,
    /// propagated through the covariance recursion by its adjoint; returns an
    /// `R x n_nodes` matrix.
    pub fn loglik_gradient(&self, x: &DVector<f64>, g: &ForceRealisation) -> Result<DMatrix<f64>> {
        self.loglik_with_gradient(x, g).map(|(_, grad)| grad)
    }

    /// Component-major indices of the observation-node coordinates.
    pub fn obs_state_indices(&self) -> Vec<usize> {
        let p_count = self.grid.n_nodes();
        let mut indices = Vec::new();
        for k in 0..self.basis.state_dim() {
            for i in 0..self.grid.obs_times().len() {
                indices.push(k * p_count + self.grid.obs_node(i));
            }
        }
        indices
    }

    /// Log-likelihood of the observed data alone: the augmented midpoint
    /// states are latent, so they are marginalized out of `Sigma_M` (a
    /// row/column selection for a Gaussian). `x` is still the full state
    /// vector; only its observation-node coordinates are read.
    pub fn obs_marginal_loglik(&self, x: &DVector<f64>, g: &ForceRealisation) -> Result<f64> {
        self.restricted_loglik_with_gradient(x, g, Some(self.obs_state_indices()))
            .map(|(value, _)| value)
    }

    /// [`Self::obs_marginal_loglik`] together with its gradient in the forces.
    pub fn obs_loglik_with_gradient(
        &self,
        x: &DVector<f64>,
        g: &ForceRealisation,
    ) -> Result<(f64, DMatrix<f64>)> {
        self.restricted_loglik_with_gradient(x, g, Some(self.obs_state_indices()))
    }

    /// Log-likelihood and its gradient in one pass; the gradient path already
    /// factors `Sigma_M` so the value is a byproduct.
    pub fn loglik_with_gradient(
        &self,
        x: &DVector<f64>,
        g: &ForceRealisation,
    ) -> Result<(f64, DMatrix<f64>)> {
        self.restricted_loglik_with_gradient(x, g, None)
    }

    /// Shared value-plus-adjoint path. With a coordinate restriction the
    /// density is that of the selected sub-vector under the selected
    /// sub-covariance; the adjoint seed is scattered back into the full
    /// matrix before the reverse sweep.
    fn restricted_loglik_with_gradient(
        &self,
        x: &DVector<f64>,
        g: &ForceRealisation,
        restriction: Option<Vec<usize>>,
    ) -> Result<(f64, DMatrix<f64>)> {
        if x.len() != self.state_len() {
            return Err(MlfmError::DimensionMismatch {
                context: "loglik state vector",
                expected: self.state_len(),
                got: x.len(),
            });
        }
        let p_count = self.grid.n_nodes();
        let k_dim = self.basis.state_dim();
        let r_count = self.basis.n_forces();
        let order = self.config.order;
        let op = self.picard_operator(g)?;

        // Forward pass, keeping every Sigma_m.
        let mut sigmas = Vec::with_capacity(order + 1);
        sigmas.push(self.build_sigma0());
        for _ in 0..order {
            let last = sigmas.last().unwrap();
            let mut next = &op * last * op.transpose();
            for i in 0..next.nrows() {
                next[(i, i)] += self.config.gamma_scale;
            }
            sigmas.push(symmetrize(&next));
        }

        let indices: Vec<usize> = match &restriction {
            Some(indices) => indices.clone(),
            None => (0..x.len()).collect(),
        };
        let sub_x = DVector::from_iterator(indices.len(), indices.iter().map(|&i| x[i]));
        let sub_sigma = DMatrix::from_fn(indices.len(), indices.len(), |a, b| {
            sigmas[order][(indices[a], indices[b])]
        });

        // Seed: d loglik / d Sigma_sub = (alpha alpha' - Sigma_sub^{-1}) / 2.
        let chol = jittered_cholesky(&sub_sigma, "loglik covariance")?;
        let alpha = chol.solve(&sub_x);
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        // The quadratic form through the triangular solve is backward stable;
        // alpha.dot(x) would carry condition-amplified noise into line searches.
        let z = chol
            .l_dirty()
            .solve_lower_triangular(&sub_x)
            .ok_or(MlfmError::FactorizationFailed { context: "loglik quadratic form" })?;
        let value = -0.5
            * (sub_x.len() as f64 * (2.0 * std::f64::consts::PI).ln()
                + log_det
                + z.norm_squared());
        let inv = chol.inverse();
        let w_sub = (&alpha * alpha.transpose() - inv) * 0.5;
        let mut w = DMatrix::zeros(x.len(), x.len());
        for (a, &ia) in indices.iter().enumerate() {
            for (b, &ib) in indices.iter().enumerate() {
                w[(ia, ib)] = w_sub[(a, b)];
            }
        }

        // Reverse sweep accumulating d loglik / d K.
        let mut op_bar = DMatrix::zeros(op.nrows(), op.ncols());
        for m in (1..=order).rev() {
            op_bar += 2.0 * &w * &op * &sigmas[m - 1];
            if m > 1 {
                w = op.transpose() * w * &op;
            }
        }

        // Contract with the constant blocks dK/dg_{r,q}.
        let mut grad = DMatrix::zeros(r_count, p_count);
        for q in 0..p_count {
            for r in 0..r_count {
                let a_r = self.basis.force_mat(r);
                let mut acc = 0.0;
                for p in 0..p_count {
                    let row = self.rule.row(p);
                    if q >= row.len() {
                        continue;
                    }
                    let wgt = row[q];
                    if wgt == 0.0 {
                        continue;
                    }
                    for k in 0..k_dim {
                        for kp in 0..k_dim {
                            acc += op_bar[(k * p_count + p, kp * p_count + q)] * wgt * a_r[(k, kp)];
                        }
                    }
                }
                grad[(r, q)] = acc;
            }
        }
        Ok((value, grad))
    }
}

/// The covariance recursion `Sigma_m = K Sigma_{m-1} K' + gamma I`,
/// re-symmetrized each step; `order = 0` returns `sigma0` unchanged.
pub fn sa_covariance(
    op: &DMatrix<f64>,
    order: usize,
    gamma_scale: f64,
    sigma0: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mut sigma = sigma0.clone();
    for _ in 0..order {
        let mut next = op * sigma * op.transpose();
        for i in 0..next.nrows() {
            next[(i, i)] += gamma_scale;
        }
        sigma = symmetrize(&next);
    }
    sigma
}

/// `log N(x | 0, cov)` without constructing a validated distribution;
/// used on covariances that are symmetric PSD by construction.
pub fn log_density_zero_mean(cov: &DMatrix<f64>, x: &DVector<f64>) -> Result<f64> {
    let chol = jittered_cholesky(cov, "log_density_zero_mean")?;
    let z = chol
        .l_dirty()
        .solve_lower_triangular(x)
        .ok_or(MlfmError::FactorizationFailed {
            context: "log_density_zero_mean solve",
        })?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let d = x.len() as f64;
    Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared()))
}

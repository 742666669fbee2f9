//! MAP estimation of the latent forces under prior times likelihood, the
//! Laplace approximation of their posterior, and alternating optimization of
//! the initial-approximation kernel hyperparameters.
//!
//! The force prior Gram matrix is severely ill-conditioned for smooth
//! kernels, so the mode search runs in prior-whitened coordinates `u` with
//! `g_r = L u_r` (`L L'` the jittered prior Gram): the prior term becomes
//! `|u|^2 / 2` and quasi-Newton steps are well scaled. Objective values and
//! the returned mode are identical to the unwhitened problem.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MlfmError, Result};
use crate::gaussian::{jittered_cholesky, symmetrize, GaussianDist};
use crate::grid::TimeGrid;
use crate::kernel::RbfKernel;
use crate::model::{ForceRealisation, MlfmModel};
use crate::optimize::{minimize, BfgsOptions, BfgsOutcome, Objective};

/// Optimizer tolerances and fit protocol knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Relative objective-change tolerance.
    pub obj_tol: f64,
    /// Gradient sup-norm tolerance (whitened coordinates).
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Number of optimization starts; the first uses the caller's
    /// initialization, the rest draw from the prior.
    pub restarts: usize,
    /// Relative step scale for the finite-difference Hessian.
    pub hessian_step: f64,
    /// Alternating MAP / hyperparameter cycles.
    pub hyper_cycles: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            obj_tol: 1e-8,
            grad_tol: 1e-6,
            max_iters: 500,
            restarts: 3,
            hessian_step: 1e-4,
            hyper_cycles: 5,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.obj_tol > 0.0) || !(self.grad_tol > 0.0) || !(self.hessian_step > 0.0) {
            return Err(MlfmError::Config("fit tolerances must be positive".into()));
        }
        if self.max_iters < 1 || self.restarts < 1 || self.hyper_cycles < 1 {
            return Err(MlfmError::Config("fit iteration counts must be >= 1".into()));
        }
        Ok(())
    }

    fn bfgs_options(&self) -> BfgsOptions {
        BfgsOptions {
            obj_tol: self.obj_tol,
            grad_tol: self.grad_tol,
            max_iters: self.max_iters,
        }
    }
}

/// MAP force values with the Gaussian posterior approximation around them.
#[derive(Debug, Clone)]
pub struct LaplaceResult {
    pub map: ForceRealisation,
    /// Posterior over the force-major flattened `g`.
    pub posterior: GaussianDist,
    pub log_posterior_at_map: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Whitened-gradient sup-norm at the mode.
    pub grad_norm: f64,
}

/// The negative log posterior as a function of the forces, with the prior
/// factorization cached.
struct ForcePosterior<'a> {
    model: &'a MlfmModel,
    x: &'a DVector<f64>,
    prior_factor: DMatrix<f64>,
    prior_const: f64,
    n_forces: usize,
    n_nodes: usize,
}

impl<'a> ForcePosterior<'a> {
    fn new(model: &'a MlfmModel, x: &'a DVector<f64>, force_kernel: &RbfKernel) -> Result<Self> {
        let nodes = model.grid().nodes();
        let n_nodes = nodes.len();
        let n_forces = model.basis().n_forces();
        let gram = force_kernel.gram(nodes);
        let chol = jittered_cholesky(&gram, "force prior gram")?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let prior_const = 0.5
            * n_forces as f64
            * (log_det + n_nodes as f64 * (2.0 * std::f64::consts::PI).ln());
        Ok(Self {
            model,
            x,
            prior_factor: chol.l(),
            prior_const,
            n_forces,
            n_nodes,
        })
    }

    fn dim(&self) -> usize {
        self.n_forces * self.n_nodes
    }

    /// Largest prior variance, an upper bound for any posterior direction.
    fn prior_scale(&self) -> f64 {
        // L L' has its largest eigenvalue bounded by the squared Frobenius
        // norm of L; the Gram diagonal gives the tighter natural scale.
        let mut scale = 0.0f64;
        for i in 0..self.n_nodes {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.prior_factor[(i, j)] * self.prior_factor[(i, j)];
            }
            scale = scale.max(acc);
        }
        scale.max(1e-12)
    }

    /// `g_r = L u_r` for every force block.
    fn forces_from_whitened(&self, u: &DVector<f64>) -> ForceRealisation {
        let mut values = DMatrix::zeros(self.n_forces, self.n_nodes);
        for r in 0..self.n_forces {
            let block = u.rows(r * self.n_nodes, self.n_nodes);
            let g_r = &self.prior_factor * block;
            for q in 0..self.n_nodes {
                values[(r, q)] = g_r[q];
            }
        }
        ForceRealisation::new(values)
    }

    /// `u_r = L^{-1} g_r` for every force block.
    fn whiten(&self, g: &ForceRealisation) -> Result<DVector<f64>> {
        let mut u = DVector::zeros(self.dim());
        for r in 0..self.n_forces {
            let g_r = DVector::from_fn(self.n_nodes, |q, _| g.values()[(r, q)]);
            let u_r = self
                .prior_factor
                .solve_lower_triangular(&g_r)
                .ok_or(MlfmError::FactorizationFailed { context: "prior whitening" })?;
            u.rows_mut(r * self.n_nodes, self.n_nodes).copy_from(&u_r);
        }
        Ok(u)
    }

    /// Negative log posterior at a force realisation. The likelihood term is
    /// that of the observed data: midpoint states are latent and integrated
    /// out of `Sigma_M`.
    fn neg_log_posterior(&self, g: &ForceRealisation) -> Result<f64> {
        let u = self.whiten(g)?;
        let loglik = self.model.obs_marginal_loglik(self.x, g)?;
        Ok(0.5 * u.norm_squared() + self.prior_const - loglik)
    }

    /// Gradient of the negative log posterior in the raw force coordinates.
    fn gradient_g(&self, g: &ForceRealisation) -> Result<DVector<f64>> {
        let (_, loglik_grad) = self.model.obs_loglik_with_gradient(self.x, g)?;
        let mut out = DVector::zeros(self.dim());
        for r in 0..self.n_forces {
            let g_r = DVector::from_fn(self.n_nodes, |q, _| g.values()[(r, q)]);
            // (Gram + jitter)^{-1} g_r through the cached factor.
            let z = self
                .prior_factor
                .solve_lower_triangular(&g_r)
                .ok_or(MlfmError::FactorizationFailed { context: "prior gradient" })?;
            let w = self
                .prior_factor
                .transpose()
                .solve_upper_triangular(&z)
                .ok_or(MlfmError::FactorizationFailed { context: "prior gradient" })?;
            for q in 0..self.n_nodes {
                out[r * self.n_nodes + q] = w[q] - loglik_grad[(r, q)];
            }
        }
        Ok(out)
    }
}

/// The whitened objective handed to the quasi-Newton optimizer.
struct WhitenedPosterior<'a, 'b> {
    problem: &'b ForcePosterior<'a>,
}

impl Objective for WhitenedPosterior<'_, '_> {
    fn value(&mut self, u: &DVector<f64>) -> f64 {
        let g = self.problem.forces_from_whitened(u);
        match self.problem.model.obs_marginal_loglik(self.problem.x, &g) {
            Ok(loglik) => 0.5 * u.norm_squared() + self.problem.prior_const - loglik,
            Err(_) => f64::INFINITY,
        }
    }

    fn value_grad(&mut self, u: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let g = self.problem.forces_from_whitened(u);
        let (loglik, loglik_grad) =
            self.problem.model.obs_loglik_with_gradient(self.problem.x, &g)?;
        let value = 0.5 * u.norm_squared() + self.problem.prior_const - loglik;
        let mut grad = u.clone();
        for r in 0..self.problem.n_forces {
            let block = DVector::from_fn(self.problem.n_nodes, |q, _| loglik_grad[(r, q)]);
            let pulled = self.problem.prior_factor.transpose() * block;
            for q in 0..self.problem.n_nodes {
                grad[r * self.problem.n_nodes + q] -= pulled[q];
            }
        }
        Ok((value, grad))
    }
}

/// Negative log posterior `-(log prior(g) + log N(x | 0, Sigma_M(g)))`.
pub fn neg_log_posterior(
    g: &ForceRealisation,
    x: &DVector<f64>,
    model: &MlfmModel,
    force_kernel: &RbfKernel,
) -> Result<f64> {
    ForcePosterior::new(model, x, force_kernel)?.neg_log_posterior(g)
}

/// Cold starts cannot descend the full objective directly: the tight
/// regularization scale makes the likelihood stiff (curvature ~1/gamma^2)
/// and high truncation orders make it a wild polynomial. Continuation fixes
/// both: fit truncation order 1 first with the regularization annealed from
/// a loose scale, then warm-start through increasing orders up to the
/// target. The returned outcome is always from the final stage at the
/// model's own order and scale.
fn continuation_schedule(target_order: usize, target_gamma: f64, anneal: bool) -> Vec<(usize, f64)> {
    if !anneal {
        return vec![(target_order, target_gamma)];
    }
    let mut stages = Vec::new();
    if target_gamma < 0.1 {
        let floor = target_gamma.max(1e-8);
        let mut gamma = 0.1;
        while gamma > floor * 3.0 && stages.len() < 8 {
            stages.push((1, gamma));
            gamma /= 10.0;
        }
    }
    stages.push((1, target_gamma));
    let mut order = 2;
    while order < target_order {
        stages.push((order, target_gamma));
        order *= 2;
    }
    if target_order > 1 {
        stages.push((target_order, target_gamma));
    }
    stages
}

fn map_fit<R: Rng + ?Sized>(
    model: &MlfmModel,
    x: &DVector<f64>,
    force_kernel: &RbfKernel,
    init_g: Option<&ForceRealisation>,
    config: &FitConfig,
    rng: &mut R,
    anneal: bool,
) -> Result<(ForceRealisation, BfgsOutcome)> {
    config.validate()?;
    let options = config.bfgs_options();
    let schedule =
        continuation_schedule(model.config().order, model.config().gamma_scale, anneal);
    let final_problem = ForcePosterior::new(model, x, force_kernel)?;

    let mut best: Option<BfgsOutcome> = None;
    let mut last_err = None;
    let init_u = match init_g {
        Some(g) => Some(final_problem.whiten(g)?),
        None => None,
    };
    for start in 0..config.restarts {
        // Whitened prior draws are standard normal. With a caller-supplied
        // initialization, restarts perturb around it at half prior scale so
        // the exploration stays within the same posterior branch.
        let draw = DVector::from_fn(final_problem.dim(), |_, _| rng.sample(StandardNormal));
        let u0 = match (&init_u, start) {
            (Some(u), 0) => u.clone(),
            (Some(u), _) => u + draw * 0.5,
            (None, _) => draw,
        };

        let run = || -> Result<BfgsOutcome> {
            let mut u = u0.clone();
            let mut iterations = 0;
            let mut outcome = None;
            for &(order, gamma) in &schedule {
                let stage_model = model.with_order(order)?.with_gamma_scale(gamma)?;
                let problem = ForcePosterior::new(&stage_model, x, force_kernel)?;
                let stage = minimize(&mut WhitenedPosterior { problem: &problem }, &u, &options)?;
                iterations += stage.iterations;
                u = stage.x.clone();
                outcome = Some(stage);
            }
            let mut outcome = outcome.expect("schedule is never empty");
            outcome.iterations = iterations;
            Ok(outcome)
        };
        match run() {
            Ok(outcome) => {
                if best.as_ref().map_or(true, |b| outcome.value < b.value) {
                    best = Some(outcome);
                }
            }
            Err(err) => last_err = Some(err),
        }
    }
    match best {
        Some(outcome) => Ok((final_problem.forces_from_whitened(&outcome.x), outcome)),
        None => Err(last_err.unwrap_or_else(|| {
            MlfmError::OptimizationFailed("no restart produced a finite objective".into())
        })),
    }
}

/// Best-of-restarts MAP estimate of the forces; the first start uses
/// `init_g`, the remaining ones draw from the prior.
pub fn map_estimate<R: Rng + ?Sized>(
    x: &DVector<f64>,
    init_g: &ForceRealisation,
    config: &FitConfig,
    model: &MlfmModel,
    force_kernel: &RbfKernel,
    rng: &mut R,
) -> Result<ForceRealisation> {
    map_fit(model, x, force_kernel, Some(init_g), config, rng, true).map(|(g, _)| g)
}

fn laplace_from_mode(
    problem: &ForcePosterior<'_>,
    config: &FitConfig,
    map_g: ForceRealisation,
    outcome: &BfgsOutcome,
) -> Result<LaplaceResult> {
    let dim = problem.dim();
    let flat = map_g.flat();
    let mut hessian = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let h = config.hessian_step * (1.0 + flat[j].abs());
        let mut plus = flat.clone();
        plus[j] += h;
        let mut minus = flat.clone();
        minus[j] -= h;
        let grad_plus = problem.gradient_g(&ForceRealisation::from_flat(
            &plus,
            problem.n_forces,
            problem.n_nodes,
        )?)?;
        let grad_minus = problem.gradient_g(&ForceRealisation::from_flat(
            &minus,
            problem.n_forces,
            problem.n_nodes,
        )?)?;
        let column = (grad_plus - grad_minus) / (2.0 * h);
        hessian.column_mut(j).copy_from(&column);
    }
    let hessian = symmetrize(&hessian);
    let cov = match jittered_cholesky(&hessian, "laplace hessian") {
        Ok(chol) => symmetrize(&chol.inverse()),
        Err(_) => {
            // At a mode located only to the objective's noise floor the
            // curvature can be indefinite along weakly determined directions.
            // Floor the spectrum at the prior's weakest precision: those
            // directions revert to prior-scale uncertainty.
            let eig = hessian.symmetric_eigen();
            let prior_floor = 1.0 / problem.prior_scale();
            let inv_eigs: Vec<f64> = eig
                .eigenvalues
                .iter()
                .map(|&v| 1.0 / v.max(prior_floor))
                .collect();
            let scaled = &eig.eigenvectors
                * DMatrix::from_diagonal(&DVector::from_vec(inv_eigs));
            symmetrize(&(scaled * eig.eigenvectors.transpose()))
        }
    };
    let posterior = GaussianDist::new(flat, cov)?;
    let log_posterior_at_map = -problem.neg_log_posterior(&map_g)?;
    Ok(LaplaceResult {
        map: map_g,
        posterior,
        log_posterior_at_map,
        iterations: outcome.iterations,
        converged: outcome.converged,
        grad_norm: outcome.grad_norm,
    })
}

/// MAP search from prior-drawn starts followed by a Gaussian approximation
/// at the mode, with covariance from the inverse finite-difference Hessian
/// of the negative log posterior.
pub fn laplace_approx<R: Rng + ?Sized>(
    x: &DVector<f64>,
    config: &FitConfig,
    model: &MlfmModel,
    force_kernel: &RbfKernel,
    rng: &mut R,
) -> Result<LaplaceResult> {
    let (map_g, outcome) = map_fit(model, x, force_kernel, None, config, rng, true)?;
    let problem = ForcePosterior::new(model, x, force_kernel)?;
    laplace_from_mode(&problem, config, map_g, &outcome)
}

/// Objective in the log of the initial-approximation kernel parameters at
/// fixed forces.
struct HyperObjective<'a> {
    base_model: &'a MlfmModel,
    x: &'a DVector<f64>,
    g: &'a ForceRealisation,
    prior_value: f64,
    fd_step: f64,
}

/// Box for the log kernel parameters of the initial approximation. The
/// variance stays within amplitude scales the trajectories can realize, and
/// the lengthscale is kept above typical node spacing: below it the kernel
/// degenerates to white noise and the joint search can absorb arbitrary
/// misfit into the initial covariance.
const LOG_VARIANCE_BOUND: (f64, f64) = (-3.0, 3.0);
const LOG_LENGTHSCALE_BOUND: (f64, f64) = (-1.4, 1.6);

impl HyperObjective<'_> {
    fn kernels_from(&self, v: &DVector<f64>) -> Result<Vec<RbfKernel>> {
        v.as_slice()
            .chunks(2)
            .map(|pair| RbfKernel::new(pair[0].exp(), pair[1].exp()))
            .collect()
    }

    fn raw_value(&self, v: &DVector<f64>) -> f64 {
        for pair in v.as_slice().chunks(2) {
            if pair[0] < LOG_VARIANCE_BOUND.0
                || pair[0] > LOG_VARIANCE_BOUND.1
                || pair[1] < LOG_LENGTHSCALE_BOUND.0
                || pair[1] > LOG_LENGTHSCALE_BOUND.1
            {
                return f64::INFINITY;
            }
        }
        let Ok(kernels) = self.kernels_from(v) else {
            return f64::INFINITY;
        };
        let Ok(model) = self.base_model.with_sigma0_kernels(kernels) else {
            return f64::INFINITY;
        };
        match model.obs_marginal_loglik(self.x, self.g) {
            Ok(loglik) => self.prior_value - loglik,
            Err(_) => f64::INFINITY,
        }
    }
}

impl Objective for HyperObjective<'_> {
    fn value(&mut self, v: &DVector<f64>) -> f64 {
        self.raw_value(v)
    }

    fn value_grad(&mut self, v: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let value = self.raw_value(v);
        if !value.is_finite() {
            return Err(MlfmError::OptimizationFailed(
                "hyperparameter objective not finite".into(),
            ));
        }
        let mut grad = DVector::zeros(v.len());
        for j in 0..v.len() {
            let mut plus = v.clone();
            plus[j] += self.fd_step;
            let mut minus = v.clone();
            minus[j] -= self.fd_step;
            let (fp, fm) = (self.raw_value(&plus), self.raw_value(&minus));
            if !fp.is_finite() || !fm.is_finite() {
                return Err(MlfmError::OptimizationFailed(
                    "hyperparameter gradient hit an infeasible point".into(),
                ));
            }
            grad[j] = (fp - fm) / (2.0 * self.fd_step);
        }
        Ok((value, grad))
    }
}

/// Alternates MAP steps over the forces with quasi-Newton steps over the
/// log kernel parameters of the initial approximation; the regularization
/// scale is never touched. Returns the final kernels and the Laplace
/// approximation at the final mode.
pub fn optimize_hyper<R: Rng + ?Sized>(
    x: &DVector<f64>,
    config: &FitConfig,
    model: &MlfmModel,
    force_kernel: &RbfKernel,
    rng: &mut R,
) -> Result<(Vec<RbfKernel>, LaplaceResult)> {
    optimize_hyper_from(x, None, config, model, force_kernel, rng)
}

/// [`optimize_hyper`] with a caller-chosen first start; the remaining
/// restarts still draw from the prior.
pub fn optimize_hyper_from<R: Rng + ?Sized>(
    x: &DVector<f64>,
    init_g: Option<&ForceRealisation>,
    config: &FitConfig,
    model: &MlfmModel,
    force_kernel: &RbfKernel,
    rng: &mut R,
) -> Result<(Vec<RbfKernel>, LaplaceResult)> {
    config.validate()?;
    let mut kernels = model.config().sigma0_kernels.clone();
    let mut current_model = model.with_sigma0_kernels(kernels.clone())?;

    // Initial MAP, annealed, with restarts.
    let (mut g, mut outcome) =
        map_fit(&current_model, x, force_kernel, init_g, config, rng, true)?;
    let mut best_value = outcome.value;

    let warm_config = FitConfig { restarts: 1, ..*config };
    for _cycle in 0..config.hyper_cycles {
        // Hyperparameter step at fixed forces.
        let v0 = DVector::from_iterator(
            2 * kernels.len(),
            kernels.iter().flat_map(|k| [k.variance.ln(), k.lengthscale.ln()]),
        );
        let prior_value = {
            let problem = ForcePosterior::new(&current_model, x, force_kernel)?;
            0.5 * problem.whiten(&g)?.norm_squared() + problem.prior_const
        };
        let mut hyper = HyperObjective {
            base_model: &current_model,
            x,
            g: &g,
            prior_value,
            fd_step: 1e-5,
        };
        let hyper_options = BfgsOptions {
            obj_tol: config.obj_tol,
            grad_tol: config.grad_tol,
            max_iters: 60,
        };
        if let Ok(hyper_outcome) = minimize(&mut hyper, &v0, &hyper_options) {
            if hyper_outcome.value < best_value {
                kernels = hyper.kernels_from(&hyper_outcome.x)?;
                current_model = model.with_sigma0_kernels(kernels.clone())?;
                best_value = hyper_outcome.value;
            }
        }

        // Warm MAP step under the (possibly) updated kernels.
        let (new_g, new_outcome) =
            map_fit(&current_model, x, force_kernel, Some(&g), &warm_config, rng, false)?;
        if new_outcome.value <= best_value {
            best_value = new_outcome.value;
            g = new_g;
            outcome = new_outcome;
        }
    }

    // The joint path can drift while the kernels move: if the original
    // initialization beats the chain under the final kernels, re-descend
    // from it.
    if let Some(init) = init_g {
        let problem = ForcePosterior::new(&current_model, x, force_kernel)?;
        if let Ok(init_value) = problem.neg_log_posterior(init) {
            if init_value < best_value {
                let (new_g, new_outcome) =
                    map_fit(&current_model, x, force_kernel, Some(init), &warm_config, rng, false)?;
                if new_outcome.value <= best_value {
                    best_value = new_outcome.value;
                    g = new_g;
                    outcome = new_outcome;
                }
            }
        }
    }
    let _ = best_value;

    let problem = ForcePosterior::new(&current_model, x, force_kernel)?;
    let result = laplace_from_mode(&problem, config, g, &outcome)?;
    Ok((kernels, result))
}

/// Gaussian marginal of the Laplace posterior restricted to the
/// observation-node coordinates of every force.
pub fn marginal_at_obs(result: &LaplaceResult, grid: &TimeGrid) -> Result<GaussianDist> {
    let p = grid.n_nodes();
    let r_count = result.map.n_forces();
    if result.map.n_nodes() != p {
        return Err(MlfmError::DimensionMismatch {
            context: "marginal_at_obs grid nodes",
            expected: result.map.n_nodes(),
            got: p,
        });
    }
    let mut indices = Vec::new();
    for r in 0..r_count {
        for i in 0..grid.obs_times().len() {
            indices.push(r * p + grid.obs_node(i));
        }
    }
    let mean = DVector::from_iterator(
        indices.len(),
        indices.iter().map(|&i| result.posterior.mean()[i]),
    );
    let cov = DMatrix::from_fn(indices.len(), indices.len(), |a, b| {
        result.posterior.cov()[(indices[a], indices[b])]
    });
    GaussianDist::new(mean, cov)
}

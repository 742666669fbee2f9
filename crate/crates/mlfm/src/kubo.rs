//! Exactly solvable benchmark: a planar oscillator whose angular velocity is
//! a latent GP force. The state rotates by the cumulative force integral, so
//! joint draws of `(g at nodes, interval integrals)` from their closed-form
//! covariance give trajectories with no discretization error, and the true
//! conditional of the force given the observed rotation angles is Gaussian.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;

use crate::error::{MlfmError, Result};
use crate::gaussian::GaussianDist;
use crate::grid::TimeGrid;
use crate::kernel::RbfKernel;
use crate::model::StructureBasis;

/// Anticlockwise rotation by `theta` radians.
pub fn rotation(theta: f64) -> Matrix2<f64> {
    let (sin, cos) = theta.sin_cos();
    Matrix2::new(cos, -sin, sin, cos)
}

/// Structure basis of the oscillator: zero offset and the generator of
/// planar rotations.
pub fn kubo_structure_basis() -> StructureBasis {
    StructureBasis::new(
        DMatrix::zeros(2, 2),
        vec![DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])],
    )
    .expect("fixed 2x2 basis is valid")
}

/// One simulated trajectory, with the latent force values and per-interval
/// force integrals that generated it.
#[derive(Debug, Clone)]
pub struct KuboTrajectory {
    grid: TimeGrid,
    states: Vec<Vector2<f64>>,
    true_forces: Option<DVector<f64>>,
    true_integrals: Option<DVector<f64>>,
}

impl KuboTrajectory {
    /// Assembles a trajectory from externally supplied states at all nodes.
    pub fn from_states(grid: TimeGrid, states: Vec<Vector2<f64>>) -> Result<Self> {
        if states.len() != grid.n_nodes() {
            return Err(MlfmError::DimensionMismatch {
                context: "trajectory states per node",
                expected: grid.n_nodes(),
                got: states.len(),
            });
        }
        Ok(Self { grid, states, true_forces: None, true_integrals: None })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// States at every grid node.
    pub fn states(&self) -> &[Vector2<f64>] {
        &self.states
    }

    /// States at observation nodes only.
    pub fn obs_states(&self) -> Vec<Vector2<f64>> {
        (0..self.grid.obs_times().len())
            .map(|i| self.states[self.grid.obs_node(i)])
            .collect()
    }

    /// Force values at every grid node, when simulated.
    pub fn true_forces(&self) -> Option<&DVector<f64>> {
        self.true_forces.as_ref()
    }

    /// Force integrals over the observation intervals, when simulated.
    pub fn true_integrals(&self) -> Option<&DVector<f64>> {
        self.true_integrals.as_ref()
    }

    /// Whether any observation-interval integral leaves `(-pi, pi)`, i.e.
    /// the extracted angle wraps around.
    pub fn wrapped(&self) -> bool {
        self.true_integrals
            .as_ref()
            .map(|g| g.iter().any(|v| v.abs() >= std::f64::consts::PI))
            .unwrap_or(false)
    }

    /// Component-major stacked state vector over all nodes.
    pub fn flat_state(&self) -> DVector<f64> {
        let p = self.grid.n_nodes();
        let mut x = DVector::zeros(2 * p);
        for (node, state) in self.states.iter().enumerate() {
            x[node] = state.x;
            x[p + node] = state.y;
        }
        x
    }
}

/// Draws `(g(nodes), per-node-interval integrals)` jointly from their exact
/// covariance and rotates `x0` by the cumulative integrals, so the states at
/// all nodes carry no path-discretization error.
pub fn simulate_exact<R: Rng + ?Sized>(
    kernel: &RbfKernel,
    grid: &TimeGrid,
    x0: Vector2<f64>,
    rng: &mut R,
) -> Result<KuboTrajectory> {
    if x0.norm() == 0.0 {
        return Err(MlfmError::InvalidArgument("initial state must be nonzero".into()));
    }
    let p_count = grid.n_nodes();
    let steps = grid.node_intervals();
    let joint = kernel.joint_force_integral_dist(grid.nodes(), &steps)?;
    let draw = joint.sample(rng, 1)?;

    let forces = DVector::from_fn(p_count, |q, _| draw[(0, q)]);
    let mut states = Vec::with_capacity(p_count);
    let mut angle = 0.0;
    states.push(x0);
    for (h, _) in steps.iter().enumerate() {
        angle += draw[(0, p_count + h)];
        states.push(rotation(angle) * x0);
    }

    // Interval integrals are sums of the per-step draws inside each interval.
    let s = grid.subdivisions();
    let n = grid.n_intervals();
    let integrals = DVector::from_fn(n, |i, _| {
        (i * s..(i + 1) * s).map(|h| draw[(0, p_count + h)]).sum()
    });

    Ok(KuboTrajectory {
        grid: grid.clone(),
        states,
        true_forces: Some(forces),
        true_integrals: Some(integrals),
    })
}

/// Rotation angles between consecutive observation states, each in
/// `(-pi, pi]`: `gamma_i = atan2(cross(x_{i-1}, x_i), dot(x_{i-1}, x_i))`.
pub fn extract_angles(traj: &KuboTrajectory) -> Result<DVector<f64>> {
    let obs = traj.obs_states();
    for state in &obs {
        if state.norm() == 0.0 {
            return Err(MlfmError::InvalidArgument(
                "zero-norm state has no rotation angle".into(),
            ));
        }
    }
    Ok(DVector::from_fn(obs.len() - 1, |i, _| {
        let a = obs[i];
        let b = obs[i + 1];
        (a.x * b.y - a.y * b.x).atan2(a.dot(&b))
    }))
}

/// Smooth force estimate on the principal angle branch: the conditional
/// mean of `g` at every grid node given the observed per-interval integrals.
/// A deterministic, prior-consistent starting point for mode searches.
pub fn conditional_mean_forces(
    kernel: &RbfKernel,
    grid: &TimeGrid,
    gamma: &DVector<f64>,
) -> Result<crate::model::ForceRealisation> {
    let n = grid.n_intervals();
    if gamma.len() != n {
        return Err(MlfmError::DimensionMismatch {
            context: "angles per observation interval",
            expected: n,
            got: gamma.len(),
        });
    }
    let p = grid.n_nodes();
    let joint = kernel.joint_force_integral_dist(grid.nodes(), &grid.obs_intervals())?;
    let integral_indices: Vec<usize> = (p..p + n).collect();
    let conditional = joint.condition(&integral_indices, gamma)?;
    let values = DMatrix::from_fn(1, p, |_, q| conditional.mean()[q]);
    Ok(crate::model::ForceRealisation::new(values))
}

/// The exact Gaussian conditional of `g` at the observation times given the
/// observed per-interval integrals `gamma`. An empty `gamma` returns the
/// prior over the observation times.
pub fn ground_truth_conditional(
    kernel: &RbfKernel,
    grid: &TimeGrid,
    gamma: &DVector<f64>,
) -> Result<GaussianDist> {
    let obs_times = grid.obs_times();
    if gamma.len() == 0 {
        return GaussianDist::new(
            DVector::zeros(obs_times.len()),
            kernel.gram(obs_times),
        );
    }
    let n = grid.n_intervals();
    if gamma.len() != n {
        return Err(MlfmError::DimensionMismatch {
            context: "ground truth angles per interval",
            expected: n,
            got: gamma.len(),
        });
    }
    let joint = kernel.joint_force_integral_dist(obs_times, &grid.obs_intervals())?;
    let integral_indices: Vec<usize> = (obs_times.len()..obs_times.len() + n).collect();
    joint.condition(&integral_indices, gamma)
}

//! File formats used by the command line driver: the trajectory CSV and the
//! `{mean, cov}` JSON encoding of Gaussian distributions.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{MlfmError, Result};
use crate::gaussian::GaussianDist;
use crate::grid::{build_grid, TimeGrid};
use crate::kubo::KuboTrajectory;

/// JSON form of a Gaussian: mean vector plus row-major covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionJson {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl DistributionJson {
    pub fn from_dist(dist: &GaussianDist) -> Self {
        let d = dist.dim();
        Self {
            mean: dist.mean().iter().copied().collect(),
            cov: (0..d)
                .map(|i| (0..d).map(|j| dist.cov()[(i, j)]).collect())
                .collect(),
        }
    }

    pub fn to_dist(&self) -> Result<GaussianDist> {
        let d = self.mean.len();
        if self.cov.len() != d || self.cov.iter().any(|row| row.len() != d) {
            return Err(MlfmError::InvalidCovariance(
                "covariance rows do not match the mean length".into(),
            ));
        }
        GaussianDist::new(
            DVector::from_row_slice(&self.mean),
            DMatrix::from_fn(d, d, |i, j| self.cov[i][j]),
        )
    }
}

/// Writes one trajectory with its generating forces: node time, observation
/// flag, both state components, the force value, and (on the closing node of
/// each observation interval) the interval force integral.
pub fn trajectory_csv(traj: &KuboTrajectory) -> String {
    let grid = traj.grid();
    let mut out = String::from("t,is_obs,x,y,g_true,G_true\n");
    for (node, state) in traj.states().iter().enumerate() {
        let g = traj
            .true_forces()
            .map(|f| f[node].to_string())
            .unwrap_or_default();
        let integral = match traj.true_integrals() {
            Some(values) if grid.is_observation(node) && node > 0 => {
                let interval = grid.interval_of_node(node);
                values[interval].to_string()
            }
            _ => String::new(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            grid.nodes()[node],
            grid.is_observation(node) as u8,
            state.x,
            state.y,
            g,
            integral
        ));
    }
    out
}

/// Parses [`trajectory_csv`] output back into a trajectory. The grid is
/// rebuilt from the observation rows and must reproduce the node times.
pub fn parse_trajectory_csv(text: &str) -> Result<KuboTrajectory> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| {
        MlfmError::InvalidArgument("empty trajectory file".into())
    })?;
    if header.trim() != "t,is_obs,x,y,g_true,G_true" {
        return Err(MlfmError::InvalidArgument(format!(
            "unexpected trajectory header: {header}"
        )));
    }
    let mut nodes = Vec::new();
    let mut obs_times = Vec::new();
    let mut states = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(MlfmError::InvalidArgument(format!(
                "trajectory row {idx} has {} fields",
                fields.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                MlfmError::InvalidArgument(format!("bad {what} in trajectory row {idx}: {s}"))
            })
        };
        let t = parse(fields[0], "time")?;
        let is_obs = fields[1] == "1";
        nodes.push(t);
        if is_obs {
            obs_times.push(t);
        }
        states.push(Vector2::new(parse(fields[2], "x")?, parse(fields[3], "y")?));
    }
    let grid = build_grid(&obs_times)?;
    if grid.n_nodes() != nodes.len() {
        return Err(MlfmError::InvalidArgument(format!(
            "trajectory has {} rows but the observation times imply {} nodes",
            nodes.len(),
            grid.n_nodes()
        )));
    }
    for (a, b) in grid.nodes().iter().zip(nodes.iter()) {
        if (a - b).abs() > 1e-9 * (1.0 + a.abs()) {
            return Err(MlfmError::InvalidArgument(format!(
                "trajectory node {b} does not sit on the midpoint grid (expected {a})"
            )));
        }
    }
    KuboTrajectory::from_states(grid, states)
}

/// Reconstructs a [`TimeGrid`] from a trajectory file without copying states.
pub fn grid_from_trajectory(traj: &KuboTrajectory) -> &TimeGrid {
    traj.grid()
}

//! Replication-study driver: simulate the rotation oscillator over a grid of
//! interval lengths, spacings and truncation orders, fit every order to each
//! simulated trajectory, and score the fitted posterior against the exact
//! ground-truth conditional with the Wasserstein-2 distance.
//!
//! Per-replication RNG streams are a pure function of the master seed and
//! the cell coordinates, so adding grid cells never changes existing rows
//! and replications can run concurrently.

use nalgebra::Vector2;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MlfmError, Result};
use crate::gaussian::wasserstein2;
use crate::grid::build_grid;
use crate::inference::{marginal_at_obs, optimize_hyper_from, FitConfig};
use crate::kernel::RbfKernel;
use crate::kubo::{conditional_mean_forces, extract_angles, ground_truth_conditional, kubo_structure_basis, simulate_exact};
use crate::model::{MlfmModel, PicardConfig};

/// Declarative description of a replication study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub t_values: Vec<f64>,
    pub dt_values: Vec<f64>,
    pub orders: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    /// Force kernel parameters `(variance, lengthscale)`.
    pub force_kernel: (f64, f64),
    pub gamma_scale: f64,
    pub x0: [f64; 2],
    pub fit: FitConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            t_values: vec![3.0, 6.0, 9.0],
            dt_values: vec![0.5, 1.0],
            orders: vec![3, 10],
            replications: 20,
            seed: 42,
            force_kernel: (1.0, 1.0),
            gamma_scale: 1e-4,
            x0: [1.0, 0.0],
            fit: FitConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Number of observation intervals for one `(T, dt)` cell; every pair in
    /// the config must divide evenly.
    pub fn n_intervals(t: f64, dt: f64) -> Result<usize> {
        if !(t > 0.0) || !(dt > 0.0) {
            return Err(MlfmError::Config(format!(
                "interval length and spacing must be positive, got T={t}, dt={dt}"
            )));
        }
        let ratio = t / dt;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 {
            return Err(MlfmError::Config(format!(
                "T/dt must be a positive integer, got {t}/{dt} = {ratio}"
            )));
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_values.is_empty() || self.dt_values.is_empty() {
            return Err(MlfmError::Config("need at least one T and one dt".into()));
        }
        for &t in &self.t_values {
            for &dt in &self.dt_values {
                Self::n_intervals(t, dt)?;
            }
        }
        for &order in &self.orders {
            if order < 1 {
                return Err(MlfmError::Config("orders must be >= 1".into()));
            }
        }
        if self.replications < 1 {
            return Err(MlfmError::Config("replications must be >= 1".into()));
        }
        RbfKernel::new(self.force_kernel.0, self.force_kernel.1)?;
        if !(self.gamma_scale >= 0.0) {
            return Err(MlfmError::Config("gamma_scale must be >= 0".into()));
        }
        if self.x0[0] == 0.0 && self.x0[1] == 0.0 {
            return Err(MlfmError::Config("x0 must be nonzero".into()));
        }
        self.fit.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| MlfmError::Config(format!("bad experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One fitted order within one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub t: f64,
    pub dt: f64,
    pub order: usize,
    pub replication: usize,
    /// Absent when the fit failed outright.
    pub wasserstein: Option<f64>,
    pub converged: bool,
    /// True when any observation-interval force integral left `(-pi, pi)`.
    pub wrapped: bool,
    pub wall_time_s: f64,
}

/// Per-cell aggregate over converged replications.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub t: f64,
    pub dt: f64,
    pub order: usize,
    pub n_converged: usize,
    pub mean_wasserstein: Option<f64>,
    pub sd_wasserstein: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-replication stream seed; a pure function of the master
/// seed and the cell coordinates.
pub fn replication_seed(master: u64, t: f64, dt: f64, replication: usize) -> u64 {
    let mut s = splitmix64(master);
    for part in [t.to_bits(), dt.to_bits(), replication as u64] {
        s = splitmix64(s ^ part);
    }
    s
}

/// One simulated trajectory fitted at every requested order; rows share the
/// same simulated data and differ only in the truncation order.
pub fn run_replication(
    config: &ExperimentConfig,
    t: f64,
    dt: f64,
    replication: usize,
) -> Result<Vec<ResultRow>> {
    let n = ExperimentConfig::n_intervals(t, dt)?;
    let obs: Vec<f64> = (0..=n).map(|i| i as f64 * dt).collect();
    let grid = build_grid(&obs)?;
    let force_kernel = RbfKernel::new(config.force_kernel.0, config.force_kernel.1)?;
    let x0 = Vector2::new(config.x0[0], config.x0[1]);

    let sim_seed = replication_seed(config.seed, t, dt, replication);
    let mut sim_rng = ChaCha8Rng::seed_from_u64(sim_seed);
    let traj = simulate_exact(&force_kernel, &grid, x0, &mut sim_rng)?;
    let wrapped = traj.wrapped();
    let gamma = extract_angles(&traj)?;
    let truth = ground_truth_conditional(&force_kernel, &grid, &gamma)?;
    let x = traj.flat_state();
    // Deterministic smooth first start on the principal angle branch.
    let init = conditional_mean_forces(&force_kernel, &grid, &gamma)?;

    let mut rows = Vec::with_capacity(config.orders.len());
    for &order in &config.orders {
        let start = std::time::Instant::now();
        let fit_result = (|| -> Result<(f64, bool)> {
            let picard = PicardConfig::new(
                order,
                config.gamma_scale,
                vec![RbfKernel::new(1.0, 1.0)?, RbfKernel::new(1.0, 1.0)?],
            )?;
            let model = MlfmModel::new(kubo_structure_basis(), grid.clone(), picard)?;
            let mut fit_rng =
                ChaCha8Rng::seed_from_u64(splitmix64(sim_seed ^ order as u64));
            let (_, laplace) = optimize_hyper_from(
                &x,
                Some(&init),
                &config.fit,
                &model,
                &force_kernel,
                &mut fit_rng,
            )?;
            let marginal = marginal_at_obs(&laplace, &grid)?;
            let distance = wasserstein2(&marginal, &truth)?;
            Ok((distance, laplace.converged))
        })();
        let wall_time_s = start.elapsed().as_secs_f64();
        let row = match fit_result {
            Ok((distance, converged)) => ResultRow {
                t,
                dt,
                order,
                replication,
                wasserstein: Some(distance),
                converged,
                wrapped,
                wall_time_s,
            },
            Err(_) => ResultRow {
                t,
                dt,
                order,
                replication,
                wasserstein: None,
                converged: false,
                wrapped,
                wall_time_s,
            },
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Runs the full `(T, dt, order, replication)` grid; replications execute in
/// parallel with independent streams, and row order is deterministic.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let mut tasks = Vec::new();
    for &t in &config.t_values {
        for &dt in &config.dt_values {
            for rep in 0..config.replications {
                tasks.push((t, dt, rep));
            }
        }
    }
    let nested: Vec<Result<Vec<ResultRow>>> = tasks
        .par_iter()
        .map(|&(t, dt, rep)| run_replication(config, t, dt, rep))
        .collect();
    let mut rows = Vec::new();
    for block in nested {
        rows.extend(block?);
    }
    let summary = summarize(config, &rows);
    Ok(ExperimentOutcome { rows, summary })
}

fn summarize(config: &ExperimentConfig, rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut summary = Vec::new();
    for &t in &config.t_values {
        for &dt in &config.dt_values {
            for &order in &config.orders {
                let values: Vec<f64> = rows
                    .iter()
                    .filter(|r| {
                        r.t == t && r.dt == dt && r.order == order && r.converged
                    })
                    .filter_map(|r| r.wasserstein)
                    .collect();
                let n = values.len();
                let (mean, sd) = if n == 0 {
                    (None, None)
                } else {
                    let mean = values.iter().sum::<f64>() / n as f64;
                    let sd = if n == 1 {
                        0.0
                    } else {
                        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                            / (n - 1) as f64)
                            .sqrt()
                    };
                    (Some(mean), Some(sd))
                };
                summary.push(SummaryRow {
                    t,
                    dt,
                    order,
                    n_converged: n,
                    mean_wasserstein: mean,
                    sd_wasserstein: sd,
                });
            }
        }
    }
    summary
}

/// Raw CSV with the fixed column set, one row per `(T, dt, M, replication)`.
pub fn raw_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("T,dt,M,rep,wasserstein,converged,wrapped_flag,wall_time_s\n");
    for row in rows {
        let w = row.wasserstein.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.3}\n",
            row.t, row.dt, row.order, row.replication, w, row.converged, row.wrapped, row.wall_time_s
        ));
    }
    out
}

/// Summary CSV, one row per `(T, dt, M)` cell.
pub fn summary_csv(summary: &[SummaryRow]) -> String {
    let mut out = String::from("T,dt,M,n_converged,mean_wasserstein,sd_wasserstein\n");
    for row in summary {
        let mean = row.mean_wasserstein.map(|v| v.to_string()).unwrap_or_default();
        let sd = row.sd_wasserstein.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.t, row.dt, row.order, row.n_converged, mean, sd
        ));
    }
    out
}

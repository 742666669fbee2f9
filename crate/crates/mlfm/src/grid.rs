//! Observation grids augmented with interval midpoints, and the cumulative
//! Simpson weights that realize one row of the discrete integral operator.
//!
//! Each observation interval is subdivided (default: one midpoint, so a grid
//! of `N` intervals carries `2N + 1` nodes). Rows at observation nodes are
//! composite Simpson rules accumulated from `t_0`; rows at interior nodes
//! finish with Simpson pairs plus a trapezoid on an unpaired half step, which
//! keeps the operator square over all nodes, second order at interior nodes
//! and fourth order at observation nodes.

use crate::error::{MlfmError, Result};

/// Observation times plus augmented quadrature nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    obs_times: Vec<f64>,
    nodes: Vec<f64>,
    interval_of_node: Vec<usize>,
    is_observation: Vec<bool>,
    subdivisions: usize,
}

impl TimeGrid {
    pub fn obs_times(&self) -> &[f64] {
        &self.obs_times
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Number of observation intervals `N`.
    pub fn n_intervals(&self) -> usize {
        self.obs_times.len() - 1
    }

    pub fn subdivisions(&self) -> usize {
        self.subdivisions
    }

    pub fn interval_of_node(&self, node: usize) -> usize {
        self.interval_of_node[node]
    }

    pub fn is_observation(&self, node: usize) -> bool {
        self.is_observation[node]
    }

    /// Node index of observation `i`.
    pub fn obs_node(&self, i: usize) -> usize {
        i * self.subdivisions
    }

    pub fn obs_node_indices(&self) -> Vec<usize> {
        (0..self.obs_times.len()).map(|i| self.obs_node(i)).collect()
    }

    /// The `(t_{i-1}, t_i)` observation intervals.
    pub fn obs_intervals(&self) -> Vec<(f64, f64)> {
        self.obs_times.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Consecutive node pairs, the finest intervals the grid resolves.
    pub fn node_intervals(&self) -> Vec<(f64, f64)> {
        self.nodes.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Cumulative quadrature weights: `rows[p]` has length `p + 1` and
/// approximates the integral from `nodes[0]` to `nodes[p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    rows: Vec<Vec<f64>>,
}

impl QuadratureRule {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Weights over nodes `0..=p` for the integral up to node `p`.
    pub fn row(&self, p: usize) -> &[f64] {
        &self.rows[p]
    }

    /// Applies row `p` to integrand values given at all nodes.
    pub fn integrate(&self, p: usize, values: &[f64]) -> f64 {
        self.rows[p]
            .iter()
            .zip(values.iter())
            .map(|(w, v)| w * v)
            .sum()
    }
}

/// Inserts the midpoint of every observation interval.
pub fn build_grid(obs_times: &[f64]) -> Result<TimeGrid> {
    build_grid_subdivided(obs_times, 2)
}

/// Like [`build_grid`] with `subdivisions` sub-steps per observation interval
/// (must be even so Simpson pairs fit; 2 reproduces the midpoint grid).
pub fn build_grid_subdivided(obs_times: &[f64], subdivisions: usize) -> Result<TimeGrid> {
    if obs_times.len() < 2 {
        return Err(MlfmError::InvalidArgument(
            "need at least 2 observation times".into(),
        ));
    }
    if subdivisions < 2 || subdivisions % 2 != 0 {
        return Err(MlfmError::InvalidArgument(format!(
            "subdivisions must be even and >= 2, got {subdivisions}"
        )));
    }
    for pair in obs_times.windows(2) {
        if !(pair[1] > pair[0]) {
            return Err(MlfmError::InvalidArgument(format!(
                "observation times must be strictly increasing, got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    if obs_times.iter().any(|t| !t.is_finite()) {
        return Err(MlfmError::InvalidArgument("non-finite observation time".into()));
    }

    let n_intervals = obs_times.len() - 1;
    let mut nodes = Vec::with_capacity(n_intervals * subdivisions + 1);
    let mut interval_of_node = Vec::with_capacity(nodes.capacity());
    let mut is_observation = Vec::with_capacity(nodes.capacity());
    nodes.push(obs_times[0]);
    interval_of_node.push(0);
    is_observation.push(true);
    for j in 0..n_intervals {
        let (lo, hi) = (obs_times[j], obs_times[j + 1]);
        for k in 1..=subdivisions {
            // The endpoint is taken exactly so observation times survive.
            let t = if k == subdivisions {
                hi
            } else {
                lo + (hi - lo) * k as f64 / subdivisions as f64
            };
            nodes.push(t);
            interval_of_node.push(j);
            is_observation.push(k == subdivisions);
        }
    }
    Ok(TimeGrid {
        obs_times: obs_times.to_vec(),
        nodes,
        interval_of_node,
        is_observation,
        subdivisions,
    })
}

/// Cumulative composite Simpson weights for every grid node.
pub fn build_rule(grid: &TimeGrid) -> QuadratureRule {
    let s = grid.subdivisions();
    let n_nodes = grid.n_nodes();
    let mut rows = Vec::with_capacity(n_nodes);
    rows.push(vec![0.0]);
    for p in 1..n_nodes {
        let mut row = vec![0.0; p + 1];
        let interval = (p - 1) / s;
        let offset = p - interval * s;
        for j in 0..interval {
            add_segment_weights(&mut row, j * s, grid.obs_times()[j + 1] - grid.obs_times()[j], s, s);
        }
        add_segment_weights(
            &mut row,
            interval * s,
            grid.obs_times()[interval + 1] - grid.obs_times()[interval],
            s,
            offset,
        );
        rows.push(row);
    }
    QuadratureRule { rows }
}

/// Adds weights approximating the integral over the first `k` of `s` equal
/// sub-steps of an interval of width `width`, starting at node `base`:
/// Simpson on each complete pair of sub-steps, a trapezoid on a trailing
/// unpaired one.
fn add_segment_weights(row: &mut [f64], base: usize, width: f64, s: usize, k: usize) {
    let h = width / s as f64;
    let pairs = k / 2;
    for q in 0..pairs {
        row[base + 2 * q] += h / 3.0;
        row[base + 2 * q + 1] += 4.0 * h / 3.0;
        row[base + 2 * q + 2] += h / 3.0;
    }
    if k % 2 == 1 {
        row[base + k - 1] += 0.5 * h;
        row[base + k] += 0.5 * h;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_interval_grid() {
        let grid = build_grid(&[0.0, 1.0]).unwrap();
        assert_eq!(grid.nodes(), &[0.0, 0.5, 1.0]);
        assert_eq!(grid.n_nodes(), 3);
        assert!(grid.is_observation(0));
        assert!(!grid.is_observation(1));
        assert!(grid.is_observation(2));
    }

    #[test]
    fn augmented_size_is_twice_plus_one() {
        let grid = build_grid(&[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(grid.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(grid.n_nodes(), 2 * grid.n_intervals() + 1);
    }

    #[test]
    fn non_uniform_midpoints() {
        let grid = build_grid(&[0.0, 1.0, 4.0]).unwrap();
        assert_eq!(grid.nodes(), &[0.0, 0.5, 1.0, 2.5, 4.0]);
        assert_eq!(grid.interval_of_node(1), 0);
        assert_eq!(grid.interval_of_node(3), 1);
        assert_eq!(grid.obs_node_indices(), vec![0, 2, 4]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_grid(&[0.0]).is_err());
        assert!(build_grid(&[0.0, 0.0]).is_err());
        assert!(build_grid(&[1.0, 0.5]).is_err());
        assert!(build_grid_subdivided(&[0.0, 1.0], 3).is_err());
        assert!(build_grid_subdivided(&[0.0, 1.0], 0).is_err());
    }

    #[test]
    fn single_interval_simpson_row() {
        let grid = build_grid(&[0.0, 1.0]).unwrap();
        let rule = build_rule(&grid);
        assert_eq!(rule.row(0), &[0.0]);
        let row = rule.row(2);
        assert_relative_eq!(row[0], 1.0 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(row[1], 4.0 / 6.0, epsilon = 1e-15);
        assert_relative_eq!(row[2], 1.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn midpoint_row_is_half_interval_trapezoid() {
        let grid = build_grid(&[0.0, 1.0]).unwrap();
        let rule = build_rule(&grid);
        assert_eq!(rule.row(1), &[0.25, 0.25]);
    }

    #[test]
    fn constant_integrand_exact() {
        let grid = build_grid(&[0.0, 0.7, 1.1, 2.9, 3.4]).unwrap();
        let rule = build_rule(&grid);
        let ones = vec![1.0; grid.n_nodes()];
        for p in 0..grid.n_nodes() {
            let got = rule.integrate(p, &ones);
            assert!(
                (got - (grid.nodes()[p] - grid.nodes()[0])).abs() < 1e-14,
                "row {p}: {got}"
            );
        }
    }

    #[test]
    fn quadratic_exact_at_observation_nodes() {
        let grids = [
            vec![0.0, 0.5, 1.0, 1.5, 2.0],
            vec![-1.0, -0.2, 0.9, 1.3, 2.7],
            vec![0.0, 1.0, 4.0],
        ];
        for obs in &grids {
            let grid = build_grid(obs).unwrap();
            let rule = build_rule(&grid);
            let values: Vec<f64> = grid.nodes().iter().map(|t| t * t).collect();
            for (i, &t) in obs.iter().enumerate() {
                let exact = (t.powi(3) - obs[0].powi(3)) / 3.0;
                let got = rule.integrate(grid.obs_node(i), &values);
                assert!((got - exact).abs() < 1e-12, "t = {t}: {got} vs {exact}");
            }
        }
    }

    #[test]
    fn fourth_order_convergence_on_sine() {
        let max_err = |dt: f64| -> f64 {
            let n = (3.0 / dt).round() as usize;
            let obs: Vec<f64> = (0..=n).map(|i| i as f64 * dt).collect();
            let grid = build_grid(&obs).unwrap();
            let rule = build_rule(&grid);
            let values: Vec<f64> = grid.nodes().iter().map(|t| t.sin()).collect();
            obs.iter()
                .enumerate()
                .map(|(i, &t)| {
                    let exact = 1.0 - t.cos();
                    (rule.integrate(grid.obs_node(i), &values) - exact).abs()
                })
                .fold(0.0, f64::max)
        };
        let errs = [max_err(0.5), max_err(0.25), max_err(0.125)];
        let order1 = (errs[0] / errs[1]).log2();
        let order2 = (errs[1] / errs[2]).log2();
        assert!(order1 >= 3.8, "observed order {order1}");
        assert!(order2 >= 3.8, "observed order {order2}");
    }

    #[test]
    fn finer_subdivision_grid() {
        let grid = build_grid_subdivided(&[0.0, 1.0, 2.0], 4).unwrap();
        assert_eq!(grid.n_nodes(), 4 * 2 + 1);
        assert_eq!(grid.obs_node_indices(), vec![0, 4, 8]);
        let rule = build_rule(&grid);
        let values: Vec<f64> = grid.nodes().iter().map(|t| t * t).collect();
        let got = rule.integrate(8, &values);
        assert_relative_eq!(got, 8.0 / 3.0, epsilon = 1e-13);
        // Interior node with an unpaired sub-step.
        let ones = vec![1.0; grid.n_nodes()];
        assert_relative_eq!(rule.integrate(3, &ones), 0.75, epsilon = 1e-14);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

            #[test]
            fn weights_nonnegative_and_constant_exact(
                gaps in proptest::collection::vec(0.05f64..2.0, 1..8),
                start in -1.0f64..1.0,
            ) {
                let mut obs = vec![start];
                for g in &gaps {
                    obs.push(obs.last().unwrap() + g);
                }
                let grid = build_grid(&obs).unwrap();
                let rule = build_rule(&grid);
                let ones = vec![1.0; grid.n_nodes()];
                for p in 0..grid.n_nodes() {
                    for &w in rule.row(p) {
                        prop_assert!(w >= 0.0);
                    }
                    let got = rule.integrate(p, &ones);
                    prop_assert!((got - (grid.nodes()[p] - grid.nodes()[0])).abs() < 1e-12);
                }
            }
        }
    }
}

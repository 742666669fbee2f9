use nalgebra::{DMatrix, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mlfm::experiment::{replication_seed, ExperimentConfig};
use mlfm::gaussian::wasserstein2;
use mlfm::grid::build_grid;
use mlfm::inference::{marginal_at_obs, neg_log_posterior, optimize_hyper, FitConfig};
use mlfm::kernel::RbfKernel;
use mlfm::kubo::{extract_angles, ground_truth_conditional, kubo_structure_basis, simulate_exact};
use mlfm::model::{ForceRealisation, MlfmModel, PicardConfig};

#[test]
fn probe_hard_cells() {
    let unit = RbfKernel::new(1.0, 1.0).unwrap();
    for (t, dt) in [(9.0f64, 1.0f64), (3.0, 1.0)] {
        let n = (t / dt).round() as usize;
        let obs: Vec<f64> = (0..=n).map(|i| i as f64 * dt).collect();
        let grid = build_grid(&obs).unwrap();
        for rep in 0..5usize {
            let seed = replication_seed(42, t, dt, rep);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let traj = simulate_exact(&unit, &grid, Vector2::new(1.0, 0.0), &mut rng).unwrap();
            let gamma = extract_angles(&traj).unwrap();
            let truth = ground_truth_conditional(&unit, &grid, &gamma).unwrap();
            let x = traj.flat_state();
            let g_true = traj.true_forces().unwrap();

            let order = 10usize;
            let picard = PicardConfig::new(order, 1e-4, vec![unit, unit]).unwrap();
            let model = MlfmModel::new(kubo_structure_basis(), grid.clone(), picard).unwrap();
            let mut fit_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let result = optimize_hyper(&x, &FitConfig::default(), &model, &unit, &mut fit_rng);
            match result {
                Ok((kernels, laplace)) => {
                    let marginal = marginal_at_obs(&laplace, &grid).unwrap();
                    let w = wasserstein2(&marginal, &truth).unwrap();
                    let fitted = model.with_sigma0_kernels(kernels.clone()).unwrap();
                    let gval = ForceRealisation::new(DMatrix::from_fn(1, grid.n_nodes(), |_, q| g_true[q]));
                    let obj_truth = neg_log_posterior(&gval, &x, &fitted, &unit).unwrap();
                    let obj_map = -laplace.log_posterior_at_map;
                    // compare map mean vs truth mean at obs nodes
                    let mut map_rmse = 0.0;
                    for i in 0..obs.len() {
                        let node = grid.obs_node(i);
                        map_rmse += (laplace.map.values()[(0, node)] - g_true[node]).powi(2);
                    }
                    map_rmse = (map_rmse / obs.len() as f64).sqrt();
                    eprintln!(
                        "T={t} dt={dt} rep={rep}: W={w:.3} conv={} it={} grad={:.1e} obj_map={obj_map:.1} obj_truth={obj_truth:.1} rmse={map_rmse:.2} wrapped={} phi=({:.2},{:.2})",
                        laplace.converged, laplace.iterations, laplace.grad_norm,
                        traj.wrapped(), kernels[0].variance, kernels[1].variance,
                    );
                }
                Err(e) => eprintln!("T={t} dt={dt} rep={rep}: ERROR {e}"),
            }
        }
    }
}

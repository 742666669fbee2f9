use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mlfm::experiment::replication_seed;
use mlfm::gaussian::wasserstein2;
use mlfm::grid::build_grid;
use mlfm::inference::{marginal_at_obs, neg_log_posterior, optimize_hyper_from, FitConfig};
use mlfm::kernel::RbfKernel;
use mlfm::kubo::{conditional_mean_forces, extract_angles, ground_truth_conditional, kubo_structure_basis, simulate_exact};
use mlfm::model::{ForceRealisation, MlfmModel, PicardConfig};

#[test]
fn probe_t3_m3_outlier() {
    let unit = RbfKernel::new(1.0, 1.0).unwrap();
    let (t, dt, rep) = (3.0f64, 0.5f64, 1usize);
    let n = (t / dt).round() as usize;
    let obs: Vec<f64> = (0..=n).map(|i| i as f64 * dt).collect();
    let grid = build_grid(&obs).unwrap();
    let seed = replication_seed(42, t, dt, rep);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traj = simulate_exact(&unit, &grid, Vector2::new(1.0, 0.0), &mut rng).unwrap();
    let gamma = extract_angles(&traj).unwrap();
    let truth = ground_truth_conditional(&unit, &grid, &gamma).unwrap();
    let x = traj.flat_state();
    let init = conditional_mean_forces(&unit, &grid, &gamma).unwrap();
    let g_true = traj.true_forces().unwrap();
    eprintln!("gamma = {:?}", gamma.as_slice());
    eprintln!("g_true at obs = {:?}", (0..obs.len()).map(|i| g_true[grid.obs_node(i)]).collect::<Vec<_>>());

    let picard = PicardConfig::new(3, 1e-4, vec![unit, unit]).unwrap();
    let model = MlfmModel::new(kubo_structure_basis(), grid.clone(), picard).unwrap();
    let sim_seed = seed;
    let mut fit_rng = ChaCha8Rng::seed_from_u64({
        // same as harness: splitmix64(sim_seed ^ order)
        let mut z = sim_seed ^ 3u64;
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    });
    let (kernels, laplace) = optimize_hyper_from(&x, Some(&init), &FitConfig::default(), &model, &unit, &mut fit_rng).unwrap();
    let marginal = marginal_at_obs(&laplace, &grid).unwrap();
    let w = wasserstein2(&marginal, &truth).unwrap();
    let fitted = model.with_sigma0_kernels(kernels.clone()).unwrap();
    let obj_map = -laplace.log_posterior_at_map;
    let obj_init = neg_log_posterior(&init, &x, &fitted, &unit).unwrap();
    let true_fr = ForceRealisation::new(nalgebra::DMatrix::from_fn(1, grid.n_nodes(), |_, q| g_true[q]));
    let obj_true = neg_log_posterior(&true_fr, &x, &fitted, &unit).unwrap();
    eprintln!("W={w:.3} conv={} obj_map={obj_map:.2} obj(init)={obj_init:.2} obj(true)={obj_true:.2} phi=({:?})",
        laplace.converged, kernels.iter().map(|k| (k.variance, k.lengthscale)).collect::<Vec<_>>());
    eprintln!("map mean at obs = {:?}", (0..obs.len()).map(|i| laplace.map.values()[(0, grid.obs_node(i))]).collect::<Vec<_>>());
    eprintln!("truth mean      = {:?}", truth.mean().as_slice());
    eprintln!("marginal diag   = {:?}", (0..truth.dim()).map(|i| marginal.cov()[(i,i)]).collect::<Vec<_>>());
    eprintln!("truth diag      = {:?}", (0..truth.dim()).map(|i| truth.cov()[(i,i)]).collect::<Vec<_>>());
}

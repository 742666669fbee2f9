use nalgebra::{DMatrix, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mlfm::experiment::replication_seed;
use mlfm::gaussian::wasserstein2;
use mlfm::grid::build_grid;
use mlfm::inference::{marginal_at_obs, optimize_hyper_from, FitConfig};
use mlfm::kernel::RbfKernel;
use mlfm::kubo::{conditional_mean_forces, extract_angles, ground_truth_conditional, kubo_structure_basis, simulate_exact};
use mlfm::model::{MlfmModel, PicardConfig};

#[test]
fn probe_fixed_phi() {
    let unit = RbfKernel::new(1.0, 1.0).unwrap();
    for (t, dt) in [(9.0f64, 1.0f64), (9.0, 0.5), (3.0, 1.0)] {
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

            let picard = PicardConfig::new(10, 1e-4, vec![unit, unit]).unwrap();
            let model = MlfmModel::new(kubo_structure_basis(), grid.clone(), picard).unwrap();
            let mut fit_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let init = conditional_mean_forces(&unit, &grid, &gamma).unwrap();
            match optimize_hyper_from(&x, Some(&init), &FitConfig::default(), &model, &unit, &mut fit_rng) {
                Ok((_, laplace)) => {
                    let marginal = marginal_at_obs(&laplace, &grid).unwrap();
                    let w = wasserstein2(&marginal, &truth).unwrap();
                    // diag of posterior at obs nodes vs truth diag
                    let pd: Vec<f64> = (0..truth.dim()).map(|i| marginal.cov()[(i,i)]).collect();
                    let td: Vec<f64> = (0..truth.dim()).map(|i| truth.cov()[(i,i)]).collect();
                    let dmean: f64 = (0..truth.dim()).map(|i| (marginal.mean()[i]-truth.mean()[i]).powi(2)).sum::<f64>().sqrt();
                    eprintln!("T={t} dt={dt} rep={rep}: W={w:.3} conv={} |dmean|={dmean:.3} post_diag[0..3]={:.3?} truth_diag[0..3]={:.3?}",
                        laplace.converged,
                        &pd[..3.min(pd.len())], &td[..3.min(td.len())]);
                    let _ = DMatrix::<f64>::zeros(1,1);
                }
                Err(e) => eprintln!("T={t} dt={dt} rep={rep}: ERROR {e}"),
            }
        }
    }
}

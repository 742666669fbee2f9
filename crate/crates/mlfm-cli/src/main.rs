//! Command line driver: simulate exact oscillator trajectories, compute the
//! ground-truth force conditional, fit the successive-approximations model,
//! compare Gaussians by Wasserstein-2 distance, and run replication studies.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use mlfm::experiment::{raw_csv, run_experiment, summary_csv, ExperimentConfig};
use mlfm::gaussian::wasserstein2;
use mlfm::inference::{marginal_at_obs, optimize_hyper};
use mlfm::io::{parse_trajectory_csv, trajectory_csv, DistributionJson};
use mlfm::kernel::RbfKernel;
use mlfm::kubo::{extract_angles, ground_truth_conditional, kubo_structure_basis, simulate_exact};
use mlfm::model::{MlfmModel, PicardConfig};
use mlfm::{MlfmError, Result};

#[derive(Parser)]
#[command(
    name = "mlfm",
    version,
    about = "Multiplicative latent force models: exact oscillator benchmark and truncated successive-approximations inference"
)]
struct Cli {
    /// Override the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print progress details.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one exact trajectory plus its true forces.
    Simulate {
        /// Experiment config; the first T and dt entries define the grid.
        #[arg(long)]
        config: PathBuf,
        /// Output trajectory CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact Gaussian conditional of the force given a trajectory's angles.
    Truth {
        #[arg(long)]
        traj: PathBuf,
        /// Output distribution JSON ({mean, cov}).
        #[arg(long)]
        out: PathBuf,
        /// Optional config for the force kernel (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// MAP and Laplace fit at one truncation order.
    Fit {
        #[arg(long)]
        traj: PathBuf,
        /// Truncation order M.
        #[arg(long)]
        order: usize,
        /// Output JSON: observation-node marginal plus diagnostics.
        #[arg(long)]
        out: PathBuf,
        /// Optional config for kernel, regularization and fit settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Wasserstein-2 distance between two distribution JSON files.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Replication study over the full (T, dt, order) grid.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Directory for raw.csv and summary.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Serialize)]
struct FitDiagnostics {
    order: usize,
    iterations: usize,
    converged: bool,
    grad_norm: f64,
    log_posterior_at_map: f64,
    /// Fitted initial-approximation kernels as (variance, lengthscale).
    sigma0_kernels: Vec<(f64, f64)>,
    /// MAP force values at every grid node.
    map_forces: Vec<f64>,
}

#[derive(Serialize)]
struct FitJson {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
    diagnostics: FitDiagnostics,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => ExperimentConfig::from_json(&std::fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn force_kernel(config: &ExperimentConfig) -> Result<RbfKernel> {
    RbfKernel::new(config.force_kernel.0, config.force_kernel.1)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out } => {
            let config = load_config(Some(&config), cli.seed)?;
            let t = config.t_values[0];
            let dt = config.dt_values[0];
            let n = ExperimentConfig::n_intervals(t, dt)?;
            let obs: Vec<f64> = (0..=n).map(|i| i as f64 * dt).collect();
            let grid = mlfm::grid::build_grid(&obs)?;
            let kernel = force_kernel(&config)?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let traj = simulate_exact(
                &kernel,
                &grid,
                Vector2::new(config.x0[0], config.x0[1]),
                &mut rng,
            )?;
            std::fs::write(&out, trajectory_csv(&traj))?;
            if cli.verbose {
                eprintln!(
                    "simulated T={t} dt={dt} ({} nodes, wrapped={}) -> {}",
                    grid.n_nodes(),
                    traj.wrapped(),
                    out.display()
                );
            }
            Ok(())
        }
        Command::Truth { traj, out, config } => {
            let config = load_config(config.as_deref(), cli.seed)?;
            let traj = parse_trajectory_csv(&std::fs::read_to_string(&traj)?)?;
            let gamma = extract_angles(&traj)?;
            let kernel = force_kernel(&config)?;
            let truth = ground_truth_conditional(&kernel, traj.grid(), &gamma)?;
            let json = serde_json::to_string_pretty(&DistributionJson::from_dist(&truth))?;
            std::fs::write(&out, json + "\n")?;
            if cli.verbose {
                eprintln!("ground truth over {} observation times -> {}", truth.dim(), out.display());
            }
            Ok(())
        }
        Command::Fit { traj, order, out, config } => {
            let config = load_config(config.as_deref(), cli.seed)?;
            if order < 1 {
                return Err(MlfmError::InvalidArgument("order must be >= 1".into()));
            }
            let traj = parse_trajectory_csv(&std::fs::read_to_string(&traj)?)?;
            let kernel = force_kernel(&config)?;
            let picard = PicardConfig::new(
                order,
                config.gamma_scale,
                vec![RbfKernel::new(1.0, 1.0)?, RbfKernel::new(1.0, 1.0)?],
            )?;
            let model = MlfmModel::new(kubo_structure_basis(), traj.grid().clone(), picard)?;
            let x = traj.flat_state();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(order as u64));
            let (kernels, laplace) = optimize_hyper(&x, &config.fit, &model, &kernel, &mut rng)?;
            let marginal = marginal_at_obs(&laplace, traj.grid())?;
            let dist = DistributionJson::from_dist(&marginal);
            let payload = FitJson {
                mean: dist.mean,
                cov: dist.cov,
                diagnostics: FitDiagnostics {
                    order,
                    iterations: laplace.iterations,
                    converged: laplace.converged,
                    grad_norm: laplace.grad_norm,
                    log_posterior_at_map: laplace.log_posterior_at_map,
                    sigma0_kernels: kernels.iter().map(|k| (k.variance, k.lengthscale)).collect(),
                    map_forces: laplace.map.flat().iter().copied().collect(),
                },
            };
            std::fs::write(&out, serde_json::to_string_pretty(&payload)? + "\n")?;
            if cli.verbose {
                eprintln!(
                    "fit order {order}: converged={} iterations={} -> {}",
                    laplace.converged,
                    laplace.iterations,
                    out.display()
                );
            }
            Ok(())
        }
        Command::Compare { a, b } => {
            let load = |p: &Path| -> Result<_> {
                let text = std::fs::read_to_string(p)?;
                let dist: DistributionJson = serde_json::from_str(&text)?;
                dist.to_dist()
            };
            let distance = wasserstein2(&load(&a)?, &load(&b)?)?;
            println!("{distance}");
            Ok(())
        }
        Command::Experiment { config, out_dir } => {
            let config = load_config(Some(&config), cli.seed)?;
            let outcome = run_experiment(&config)?;
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("raw.csv"), raw_csv(&outcome.rows))?;
            std::fs::write(out_dir.join("summary.csv"), summary_csv(&outcome.summary))?;
            if cli.verbose {
                for row in &outcome.summary {
                    eprintln!(
                        "T={} dt={} M={}: n={} mean W={:?} sd={:?}",
                        row.t, row.dt, row.order, row.n_converged,
                        row.mean_wasserstein, row.sd_wasserstein
                    );
                }
            }
            Ok(())
        }
    }
}

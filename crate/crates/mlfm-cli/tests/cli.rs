//! Command line surface tests: the simulate -> truth -> fit -> compare
//! pipeline, config handling and exit codes.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mlfm"))
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mlfm-cli-{name}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const SMALL_CONFIG: &str = r#"{
  "t_values": [2.0],
  "dt_values": [0.5],
  "orders": [2],
  "replications": 2,
  "seed": 13,
  "fit": {"hyper_cycles": 1, "restarts": 1}
}"#;

#[test]
fn pipeline_simulate_truth_fit_compare() {
    let dir = workdir("pipeline");
    let config = dir.join("config.json");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    let traj = dir.join("traj.csv");
    let truth = dir.join("truth.json");
    let fit = dir.join("fit.json");

    let status = bin()
        .args(["simulate", "--config", config.to_str().unwrap(), "--out", traj.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&traj).unwrap();
    assert!(text.starts_with("t,is_obs,x,y,g_true,G_true\n"));
    assert_eq!(text.lines().count(), 1 + 2 * 4 + 1);

    let status = bin()
        .args([
            "truth",
            "--traj",
            traj.to_str().unwrap(),
            "--out",
            truth.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&truth).unwrap()).unwrap();
    assert_eq!(parsed["mean"].as_array().unwrap().len(), 5);
    assert_eq!(parsed["cov"].as_array().unwrap().len(), 5);

    let status = bin()
        .args([
            "fit",
            "--traj",
            traj.to_str().unwrap(),
            "--order",
            "2",
            "--out",
            fit.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&fit).unwrap()).unwrap();
    assert_eq!(parsed["mean"].as_array().unwrap().len(), 5);
    assert!(parsed["diagnostics"]["converged"].is_boolean());
    assert_eq!(parsed["diagnostics"]["order"], 2);

    let output = bin()
        .args(["compare", "--a", fit.to_str().unwrap(), "--b", truth.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(output.status.success());
    let distance: f64 = String::from_utf8_lossy(&output.stdout).trim().parse().unwrap();
    assert!(distance.is_finite() && distance >= 0.0);

    // A distribution compared against its own file is at distance zero.
    let output = bin()
        .args(["compare", "--a", truth.to_str().unwrap(), "--b", truth.to_str().unwrap()])
        .output()
        .unwrap();
    let self_distance: f64 = String::from_utf8_lossy(&output.stdout).trim().parse().unwrap();
    assert_eq!(self_distance, 0.0);

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn experiment_writes_both_csvs() {
    let dir = workdir("experiment");
    let config = dir.join("config.json");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    let out = dir.join("results");
    let status = bin()
        .args([
            "experiment",
            "--config",
            config.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let raw = std::fs::read_to_string(out.join("raw.csv")).unwrap();
    assert!(raw.starts_with("T,dt,M,rep,wasserstein,converged,wrapped_flag,wall_time_s\n"));
    assert_eq!(raw.lines().count(), 1 + 2);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("T,dt,M,n_converged,mean_wasserstein,sd_wasserstein\n"));
    assert_eq!(summary.lines().count(), 1 + 1);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn seed_flag_overrides_config() {
    let dir = workdir("seed");
    let config = dir.join("config.json");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    let run = |seed: Option<&str>, out: &str| -> String {
        let out_path = dir.join(out);
        let mut cmd = bin();
        cmd.args(["simulate", "--config", config.to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
        if let Some(seed) = seed {
            cmd.args(["--seed", seed]);
        }
        assert!(cmd.status().unwrap().success());
        std::fs::read_to_string(out_path).unwrap()
    };
    let default = run(None, "a.csv");
    let same = run(Some("13"), "b.csv");
    let different = run(Some("14"), "c.csv");
    assert_eq!(default, same);
    assert_ne!(default, different);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn bad_inputs_exit_nonzero_with_diagnostics() {
    let dir = workdir("errors");

    // Unknown config key.
    let bad_config = dir.join("bad.json");
    std::fs::write(&bad_config, r#"{"t_values": [1.0], "nope": 3}"#).unwrap();
    let out = bin()
        .args(["simulate", "--config", bad_config.to_str().unwrap(), "--out", dir.join("x.csv").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    // T/dt not an integer is rejected before any work.
    let bad_ratio = dir.join("ratio.json");
    std::fs::write(&bad_ratio, r#"{"t_values": [1.0], "dt_values": [0.3]}"#).unwrap();
    let out = bin()
        .args(["experiment", "--config", bad_ratio.to_str().unwrap(), "--out-dir", dir.join("r").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("positive integer"));

    // Missing trajectory file.
    let out = bin()
        .args(["truth", "--traj", dir.join("missing.csv").to_str().unwrap(), "--out", dir.join("t.json").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());

    std::fs::remove_dir_all(&dir).ok();
}

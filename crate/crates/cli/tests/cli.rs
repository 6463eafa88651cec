//! End-to-end checks of the binary: artifact contents, reproducibility,
//! and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stochinf"))
}

fn workspace_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("stochinf_cli_{tag}_{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    dir
}

fn run_ok(mut cmd: Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn solve_recovers_scalar_closed_form() {
    let out_dir = temp_dir("solve");
    let mut cmd = bin();
    cmd.args(["solve", "--config"])
        .arg(workspace_config("scalar_deterministic.json"))
        .arg("--out")
        .arg(&out_dir);
    run_ok(cmd);
    let artifact = std::fs::read_to_string(out_dir.join("P_star.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&artifact).unwrap();
    let p = parsed["p"][0][0].as_f64().unwrap();
    assert!(
        (p - (2.0_f64.sqrt() - 1.0)).abs() < 1e-10,
        "P* = {p}, artifact {artifact}"
    );
    let trace = std::fs::read_to_string(out_dir.join("spu_trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,residual_norm,error_to_ref\n"));
    std::fs::remove_dir_all(&out_dir).ok();
}

#[test]
fn malformed_dimensions_exit_2_naming_the_field() {
    let bad = temp_dir("badcfg");
    std::fs::create_dir_all(&bad).unwrap();
    let cfg_path = bad.join("bad.json");
    let mut cfg: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(workspace_config("scalar_deterministic.json")).unwrap(),
    )
    .unwrap();
    cfg["model"]["b"] = serde_json::json!([[1.0], [2.0]]); // 2 rows for a 1-state model
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();

    let out = bin()
        .args(["solve", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("model.b"), "stderr: {stderr}");
    std::fs::remove_dir_all(&bad).ok();
}

#[test]
fn exact_learning_matches_solve() {
    let solve_dir = temp_dir("xsolve");
    run_ok({
        let mut c = bin();
        c.args(["solve", "--config"])
            .arg(workspace_config("synthetic_n3.json"))
            .arg("--out")
            .arg(&solve_dir);
        c
    });
    let learn_dir = temp_dir("xlearn");
    run_ok({
        let mut c = bin();
        c.args(["learn", "--mode", "exact", "--config"])
            .arg(workspace_config("synthetic_n3.json"))
            .arg("--out")
            .arg(&learn_dir);
        c
    });
    let read_p = |dir: &Path, name: &str| -> Vec<Vec<f64>> {
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join(name)).unwrap()).unwrap();
        serde_json::from_value(v["p"].clone()).unwrap()
    };
    let p_star = read_p(&solve_dir, "P_star.json");
    let p_hat = read_p(&learn_dir, "P_hat.json");
    let mut max_dev = 0.0_f64;
    for (row_s, row_h) in p_star.iter().zip(p_hat.iter()) {
        for (a, b) in row_s.iter().zip(row_h.iter()) {
            max_dev = max_dev.max((a - b).abs());
        }
    }
    assert!(max_dev < 1e-7, "max deviation {max_dev}");
    std::fs::remove_dir_all(&solve_dir).ok();
    std::fs::remove_dir_all(&learn_dir).ok();
}

#[test]
fn monte_carlo_outputs_are_byte_identical_across_reruns() {
    let dir_a = temp_dir("mc_a");
    let dir_b = temp_dir("mc_b");
    for dir in [&dir_a, &dir_b] {
        run_ok({
            let mut c = bin();
            c.args(["learn", "--mode", "montecarlo", "--seed", "12345", "--config"])
                .arg(workspace_config("scalar_stochastic.json"))
                .arg("--out")
                .arg(dir);
            c
        });
    }
    for name in ["learn_trace.csv", "P_hat.json", "batch/states.csv", "batch/meta.json"] {
        let a = std::fs::read(dir_a.join(name)).unwrap();
        let b = std::fs::read(dir_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs across reruns");
    }
    std::fs::remove_dir_all(&dir_a).ok();
    std::fs::remove_dir_all(&dir_b).ok();
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir_a = temp_dir("seed_a");
    let dir_b = temp_dir("seed_b");
    for (dir, seed) in [(&dir_a, "1"), (&dir_b, "2")] {
        run_ok({
            let mut c = bin();
            c.args(["simulate", "--seed", seed, "--config"])
                .arg(workspace_config("scalar_stochastic.json"))
                .arg("--out")
                .arg(dir);
            c
        });
    }
    let a = std::fs::read(dir_a.join("batch/states.csv")).unwrap();
    let b = std::fs::read(dir_b.join("batch/states.csv")).unwrap();
    assert_ne!(a, b, "different seeds must change the paths");
    std::fs::remove_dir_all(&dir_a).ok();
    std::fs::remove_dir_all(&dir_b).ok();
}

#[test]
fn rank_deficient_pipeline_exits_3() {
    let bad = temp_dir("ranklow");
    std::fs::create_dir_all(&bad).unwrap();
    let cfg_path = bad.join("cfg.json");
    let mut cfg: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(workspace_config("scalar_stochastic.json")).unwrap(),
    )
    .unwrap();
    cfg["sim"]["n_paths"] = serde_json::json!(1);
    cfg["sim"]["exploration"] = serde_json::json!({"kind": "sinusoids", "amplitude": 0.0});
    cfg["learn"]["num_intervals"] = serde_json::json!(3);
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();

    let out = bin()
        .args(["learn", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(bad.join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("rank"), "stderr: {stderr}");
    std::fs::remove_dir_all(&bad).ok();
}

#[test]
fn robust_zero_sweep_plateaus_at_solver_accuracy() {
    let dir = temp_dir("rob0");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("cfg.json");
    let mut cfg: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(workspace_config("synthetic_n3.json")).unwrap(),
    )
    .unwrap();
    cfg["robust"]["deltas"] = serde_json::json!([0.0]);
    cfg["robust"]["seeds"] = serde_json::json!([0, 1]);
    cfg["robust"]["rho"] = serde_json::json!(0.02);
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    run_ok({
        let mut c = bin();
        c.args(["robust", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(dir.join("out"));
        c
    });
    let sweep = std::fs::read_to_string(dir.join("out/iss_sweep.csv")).unwrap();
    let mut lines = sweep.lines();
    assert_eq!(lines.next().unwrap(), "delta,seed,iteration,error_norm");
    let last_errors: Vec<f64> = sweep
        .lines()
        .skip(1)
        .filter_map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            (cols[2] == "30").then(|| cols[3].parse::<f64>().unwrap())
        })
        .collect();
    assert_eq!(last_errors.len(), 2);
    for e in last_errors {
        assert!(e < 1e-10, "plateau error {e}");
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn robust_three_decade_sweep_orders_plateaus() {
    let dir = temp_dir("rob3");
    run_ok({
        let mut c = bin();
        c.args(["robust", "--config"])
            .arg(workspace_config("synthetic_n3.json"))
            .arg("--out")
            .arg(&dir);
        c
    });
    let sweep = std::fs::read_to_string(dir.join("iss_sweep.csv")).unwrap();
    // plateau per delta: median of the final-iteration errors over seeds
    let mut per_delta: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for line in sweep.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols[2] == "30" {
            per_delta
                .entry(cols[0].to_string())
                .or_default()
                .push(cols[3].parse().unwrap());
        }
    }
    let mut plateaus: Vec<(f64, f64)> = per_delta
        .into_iter()
        .map(|(delta, mut errs)| {
            errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (delta.parse::<f64>().unwrap(), errs[errs.len() / 2])
        })
        .collect();
    plateaus.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    assert_eq!(plateaus.len(), 3);
    assert!(
        plateaus[0].1 <= plateaus[1].1 && plateaus[1].1 <= plateaus[2].1,
        "plateaus not ordered by delta: {plateaus:?}"
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn missing_robust_block_exits_2() {
    let out = bin()
        .args(["robust", "--config"])
        .arg(workspace_config("scalar_deterministic.json"))
        .arg("--out")
        .arg(temp_dir("norobust"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("robust"));
}

#[test]
fn simulate_writes_a_bundle() {
    let dir = temp_dir("sim");
    run_ok({
        let mut c = bin();
        c.args(["simulate", "--config"])
            .arg(workspace_config("scalar_deterministic.json"))
            .arg("--out")
            .arg(&dir);
        c
    });
    for name in ["times.csv", "states.csv", "controls.csv", "disturbances.csv", "meta.json"] {
        assert!(dir.join("batch").join(name).exists(), "{name} missing");
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn print_schema_lists_every_artifact() {
    let out = run_ok({
        let mut c = bin();
        c.arg("print-schema");
        c
    });
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "iteration,residual_norm,error_to_ref",
        "iteration,p_err,l_err,f_err,ls_residual",
        "delta,seed,iteration,error_norm",
        "path,step,component,value",
    ] {
        assert!(text.contains(needle), "schema missing {needle}");
    }
}

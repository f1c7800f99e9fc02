use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn ldm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldm")).args(args).output().expect("binary runs")
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    ldm(&args)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

fn chain() -> Value {
    json!({
        "system": {"kind": "chain", "h": 3, "k": 32, "epsilon": 0.0625},
        "density": {"source": {"kind": "analytic", "law": {"kind": "chain-table"}}}
    })
}

fn spiral_b() -> Value {
    json!({
        "system": {"kind": "spiral"},
        "density": {"source": {"kind": "analytic", "law": {"kind": "lqr-mean-gaussian", "sigma": 1.0}}}
    })
}

fn with(mut base: Value, key: &str, v: Value) -> Value {
    base.as_object_mut().unwrap().insert(key.into(), v);
    base
}

/// Every output file except the config echo (which records the output
/// directory) and wall-clock timings.
fn assert_same_outputs(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 2);
    for name in names {
        let n = name.to_str().unwrap();
        if n == "config.resolved.json" || n == "timing.json" {
            continue;
        }
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs");
    }
    let strip = |p: &Path| {
        let mut v = read_json(&p.join("config.resolved.json"));
        v.as_object_mut().unwrap().remove("out");
        v
    };
    assert_eq!(strip(a), strip(b));
}

#[test]
fn chain_comparison_reproduces_the_cliff() {
    let dir = tempfile::tempdir().unwrap();
    let threshold = 8f64.ln();
    let cfg = with(
        chain(),
        "mpc",
        json!({"constraints": [
            {"kind": "density", "threshold": {"value": threshold}},
            {"kind": "ldm", "threshold": {"value": threshold}},
            {"kind": "none"}
        ]}),
    );
    let path = write_config(dir.path(), "chain.json", &cfg);
    let out = dir.path().join("out");
    let o = run("mpc", &path, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // Density-constrained MPC walks right to the end of the arm and then
    // only has the cliff's low-density actions left.
    let dens = csv_rows(&out.join("rollout_0_density_seed0.csv"));
    let states: Vec<&str> = dens.iter().take(4).map(|r| r[1].as_str()).collect();
    assert_eq!(states, ["0", "1", "2", "3"]);
    assert_eq!(dens[3][4], (1.0f64 / 256.0).to_string());

    // LDM-constrained MPC never leaves the high-density arm.
    let summary = read_json(&out.join("rollouts.json"));
    let ldm = &summary[1];
    assert_eq!(ldm["kind"], "ldm");
    assert_eq!(ldm["steps"], 100);
    assert_eq!(ldm["min_density"], 0.125);
    assert_eq!(ldm["fallback_steps"], 0);
    assert_eq!(ldm["final_state"], json!([-3.0]));

    let free = &summary[2];
    assert_eq!(free["termination"], "failure");
}

#[test]
fn rerunning_the_config_echo_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with(
        with(chain(), "sweep", json!({"percentiles": [30, 90], "seeds": [0, 1]})),
        "control",
        json!({"steps": 30}),
    );
    let path = write_config(dir.path(), "run.json", &cfg);
    for cmd in ["solve", "mpc", "sweep"] {
        let first = dir.path().join(format!("{cmd}1"));
        let o = run(cmd, &path, &first, &[]);
        assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
        let second = dir.path().join(format!("{cmd}2"));
        let o = run(cmd, &first.join("config.resolved.json"), &second, &[]);
        assert_eq!(code(&o), 0, "{cmd} rerun: {}", stderr(&o));
        assert_same_outputs(&first, &second);
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with(
        spiral_b(),
        "grid",
        json!({"state_lo": [-10, -10], "state_hi": [10, 10], "state_counts": [21, 21],
               "action_lo": [-5], "action_hi": [5], "action_counts": [11]}),
    );
    let path = write_config(dir.path(), "s.json", &cfg);
    let (a, b) = (dir.path().join("one"), dir.path().join("four"));
    assert_eq!(code(&run("solve", &path, &a, &["--jobs", "1"])), 0);
    assert_eq!(code(&run("solve", &path, &b, &["--jobs", "4"])), 0);
    assert_same_outputs(&a, &b);
}

#[test]
fn spiral_case_b_solves_monotonically() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "b.json", &spiral_b());
    let out = dir.path().join("out");
    let o = run("solve", &path, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&out.join("solve_report.json"));
    assert_eq!(report["converged"], true);
    assert_eq!(report["monotone"], true);
    assert!(report["final_residual"].as_f64().unwrap() < 1e-9);
    for f in ["density", "energy", "ldm"] {
        assert!(out.join(format!("{f}.csv")).is_file());
        let side = read_json(&out.join(format!("{f}.json")));
        assert_eq!(side["metadata"]["config"]["system"]["kind"], "spiral");
        assert!(side["metadata"]["notes"][0].as_str().unwrap().contains("defaults"));
    }
    // The LQR gain is materialized in the echo.
    let echo = read_json(&out.join("config.resolved.json"));
    assert!(echo["density"]["source"]["law"]["gain"][0].as_array().unwrap().len() == 2);
    assert_eq!(echo["grid"]["state_counts"], json!([41, 41]));
}

#[test]
fn uniform_density_converges_in_one_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "system": {"kind": "tabular", "n_states": 6, "n_actions": 3},
        "density": {"source": {"kind": "uniform"}},
        "seed": 7
    });
    let path = write_config(dir.path(), "u.json", &cfg);
    let out = dir.path().join("out");
    let o = run("solve", &path, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_json(&out.join("solve_report.json"))["sweeps"], 1);
    let echo = read_json(&out.join("config.resolved.json"));
    assert_eq!(echo["system"]["next"].as_array().unwrap().len(), 18);
}

#[test]
fn gamma_above_one_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "g.json", &with(chain(), "solver", json!({"gamma": 1.5})));
    let o = run("solve", &path, &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gamma"), "{}", stderr(&o));
}

#[test]
fn malformed_configs_name_the_field_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(
        &path,
        "{\"system\": {\"kind\": \"chain\", \"h\": 3, \"k\": 32, \"epsilon\": 0.0625},\n\
         \"density\": {\"source\": {\"kind\": \"uniform\"}},\n\
         \"solver\": {\"gama\": 0.5}}",
    )
    .unwrap();
    let o = run("solve", &path, &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("solver.gama") && err.contains("line 3"), "{err}");

    fs::write(&path, "{\"system\": {\"kind\": \"pendulum\"}}").unwrap();
    let o = run("solve", &path, &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("system"), "{}", stderr(&o));

    let o = run("solve", &dir.path().join("absent.json"), &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("absent.json"));
}

#[test]
fn config_out_is_relative_to_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("configs");
    fs::create_dir(&sub).unwrap();
    let path = write_config(&sub, "c.json", &with(chain(), "out", json!("run")));
    let o = Command::new(env!("CARGO_BIN_EXE_ldm"))
        .args(["solve", "--config", path.to_str().unwrap()])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(sub.join("run/ldm.csv").is_file());
    assert!(!dir.path().join("run").exists());
}

#[test]
fn missing_artifacts_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with(chain(), "artifacts", json!("nowhere"));
    let path = write_config(dir.path(), "a.json", &cfg);
    for cmd in ["mpc", "verify", "export"] {
        let o = run(cmd, &path, &dir.path().join("out"), &[]);
        assert_eq!(code(&o), 2, "{cmd}");
        assert!(stderr(&o).contains("nowhere"), "{cmd}: {}", stderr(&o));
    }
}

#[test]
fn non_convergence_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "n.json", &with(chain(), "solver", json!({"max_sweeps": 2})));
    let out = dir.path().join("out");
    let o = run("solve", &path, &out, &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let report = read_json(&out.join("solve_report.json"));
    assert_eq!(report["converged"], false);
    assert_eq!(report["sweeps"], 2);
    assert!(out.join("config.resolved.json").is_file());
}

#[test]
fn verify_reports_conditions_and_invariance() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "b.json", &spiral_b());
    let solved = dir.path().join("solved");
    assert_eq!(code(&run("solve", &path, &solved, &[])), 0);

    // The converged LDM passes at every threshold.
    let cfg = with(
        with(spiral_b(), "artifacts", json!(solved)),
        "verify",
        json!({"thresholds": [3.0, 6.0, 10.0, 20.0, 60.0]}),
    );
    let path = write_config(dir.path(), "v.json", &cfg);
    let out = dir.path().join("v");
    let o = run("verify", &path, &out, &["--strict"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&out.join("verify.json"));
    assert_eq!(report["passed"], true);
    assert_eq!(report["invariance"].as_array().unwrap().len(), 5);

    // The energy is not an LDM: condition 1 fails. Without thresholds the
    // report has conditions only.
    let cfg = with(
        with(spiral_b(), "artifacts", json!(solved)),
        "verify",
        json!({"ldm": solved.join("energy.csv")}),
    );
    let path = write_config(dir.path(), "e.json", &cfg);
    let out = dir.path().join("e");
    let o = run("verify", &path, &out, &[]);
    assert_eq!(code(&o), 0);
    let report = read_json(&out.join("verify.json"));
    assert_eq!(report["passed"], false);
    assert!(!report["conditions"]["condition1_violations"].as_array().unwrap().is_empty());
    assert!(report["conditions"]["condition2_violations"].as_array().unwrap().is_empty());
    assert!(report["invariance"].as_array().unwrap().is_empty());
    assert_eq!(code(&run("verify", &path, &dir.path().join("e2"), &["--strict"])), 4);
}

#[test]
fn verify_rejects_fields_on_different_grids() {
    let dir = tempfile::tempdir().unwrap();
    let small = with(
        json!({"system": {"kind": "chain", "h": 2, "k": 4, "epsilon": 0.125},
               "density": {"source": {"kind": "analytic", "law": {"kind": "chain-table"}}}}),
        "solver",
        json!({}),
    );
    let small_path = write_config(dir.path(), "small.json", &small);
    let small_out = dir.path().join("small");
    assert_eq!(code(&run("solve", &small_path, &small_out, &[])), 0);
    let cfg = with(chain(), "verify", json!({"ldm": small_out.join("ldm.csv")}));
    let path = write_config(dir.path(), "mix.json", &cfg);
    let o = run("verify", &path, &dir.path().join("out"), &[]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("grid"), "{}", stderr(&o));
}

#[test]
fn unconstrained_sweep_has_one_row_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with(
        with(chain(), "sweep", json!({"kinds": ["none"], "percentiles": [50], "seeds": [3, 4, 5, 6]})),
        "control",
        json!({"steps": 10}),
    );
    let path = write_config(dir.path(), "s.json", &cfg);
    let out = dir.path().join("out");
    let o = run("sweep", &path, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(&out.join("sweep_rows.csv"));
    assert_eq!(rows.len(), 4);
    let seeds: Vec<&str> = rows.iter().map(|r| r[3].as_str()).collect();
    assert_eq!(seeds, ["3", "4", "5", "6"]);
    assert_eq!(csv_rows(&out.join("sweep_aggregates.csv")).len(), 1);
}

#[test]
fn exact_audits_on_tabular_runs_are_tight() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "system": {"kind": "tabular", "n_states": 6, "n_actions": 3},
        "density": {"source": {"kind": "uniform"}},
        "seed": 7,
        "audit": {"gammas": [0.9, 0.99, 1.0]}
    });
    let path = write_config(dir.path(), "t.json", &cfg);
    let out = dir.path().join("out");
    let o = run("audit", &path, &out, &["--strict"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&out.join("audit.json"));
    let audits: Vec<&Value> = report["runs"].as_array().unwrap().iter().flat_map(|r| r["audits"].as_array().unwrap()).collect();
    assert_eq!(audits.len(), 5);
    assert!(audits.iter().all(|a| a["lhs"] == 0.0));
    assert_eq!(report["satisfied"], true);
}

#[test]
fn fitted_audit_on_the_chain_holds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with(chain(), "audit", json!({"gammas": [0.9], "iterations": 5, "fitted": {"basis": "one-hot"}}));
    let path = write_config(dir.path(), "f.json", &cfg);
    let out = dir.path().join("out");
    let o = run("audit", &path, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&out.join("audit.json"));
    let run0 = &report["runs"][0];
    assert_eq!(run0["fitted"], true);
    assert_eq!(run0["audits"][0]["name"], "fqi_discounted");
    assert_eq!(run0["audits"][0]["satisfied"], true);
    let echo = read_json(&out.join("config.resolved.json"));
    assert!(echo["audit"]["fitted"]["prior"].as_f64().unwrap() > 100.0);
}

#[test]
fn export_writes_level_sets_and_a_clf() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "system": {"kind": "spiral"},
        "grid": {"state_lo": [-10, -10], "state_hi": [10, 10], "state_counts": [21, 21],
                 "action_lo": [-5], "action_hi": [5], "action_counts": [11]},
        "density": {"source": {"kind": "analytic",
                    "law": {"kind": "lqr-mean-gaussian", "sigma": 1.0, "state_sigma": 3.0}}},
        "export": {"clf": {"state": [0, 0], "action": [0]}}
    });
    let path = write_config(dir.path(), "x.json", &cfg);
    let out = dir.path().join("out");
    let o = run("export", &path, &out, &["--strict"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let levels = csv_rows(&out.join("level_sets.csv"));
    assert_eq!(levels.len(), 10);
    // LDM sublevel sets are contained in the energy's.
    for row in &levels {
        assert!(row[1].parse::<usize>().unwrap() <= row[3].parse::<usize>().unwrap());
    }
    assert_eq!(csv_rows(&out.join("state_values.csv")).len(), 21 * 21);
    assert_eq!(csv_rows(&out.join("clf.csv")).len(), 21 * 21);
    assert_eq!(read_json(&out.join("clf_report.json"))["value_at_equilibrium"], 0.0);
}

#[test]
fn estimated_densities_write_their_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "system": {"kind": "spiral"},
        "grid": {"state_lo": [-10, -10], "state_hi": [10, 10], "state_counts": [11, 11],
                 "action_lo": [-5], "action_hi": [5], "action_counts": [6]},
        "density": {"source": {"kind": "histogram",
                    "data": {"kind": "sample", "law": {"kind": "zero-mean-gaussian", "sigma": 1.0}, "n_samples": 5000}}},
        "solver": {"interpolation": "nearest"}
    });
    let path = write_config(dir.path(), "h.json", &cfg);
    let out = dir.path().join("out");
    let o = run("solve", &path, &out, &["--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let data = fs::read_to_string(out.join("dataset.csv")).unwrap();
    assert_eq!(data.lines().next().unwrap(), "s0,s1,a0,sp0,sp1");
    assert_eq!(data.lines().count(), 5001);
    assert_eq!(read_json(&out.join("config.resolved.json"))["seed"], 3);

    // The same dataset, read back from file, gives the same fields.
    let from_file = json!({
        "system": {"kind": "spiral"},
        "grid": cfg["grid"],
        "density": {"source": {"kind": "histogram", "data": {"kind": "file", "path": "out/dataset.csv"}}},
        "solver": {"interpolation": "nearest"}
    });
    let path = write_config(dir.path(), "f.json", &from_file);
    let again = dir.path().join("again");
    assert_eq!(code(&run("solve", &path, &again, &[])), 0);
    assert_eq!(
        fs::read_to_string(out.join("density.csv")).unwrap(),
        fs::read_to_string(again.join("density.csv")).unwrap()
    );
}

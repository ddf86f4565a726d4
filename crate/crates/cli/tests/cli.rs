//! End-to-end runs of the `hybridhj` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hybridhj(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridhj"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn number(v: &Value) -> f64 {
    v.as_f64().unwrap_or_else(|| v.to_string().parse().unwrap())
}

/// Rim-impact count of the unit-disk billiard, by direct reflection.
fn billiard_impacts(mut q: [f64; 2], mut p: [f64; 2], horizon: f64) -> usize {
    let (mut t, mut n) = (0.0, 0);
    loop {
        let (qp, pp, qq) = (q[0] * p[0] + q[1] * p[1], p[0] * p[0] + p[1] * p[1], q[0] * q[0] + q[1] * q[1]);
        let dt = (-qp + (qp * qp + pp * (1.0 - qq)).sqrt()) / pp;
        if t + dt > horizon {
            return n;
        }
        t += dt;
        n += 1;
        q = [q[0] + p[0] * dt, q[1] + p[1] * dt];
        let d = 2.0 * (q[0] * p[0] + q[1] * p[1]);
        p = [p[0] - d * q[0], p[1] - d * q[1]];
    }
}

#[test]
fn simulate_billiard_writes_files_and_counts_impacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = hybridhj(dir.path(), &["simulate", "--scenario", "billiard", "--horizon", "10", "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let expected = billiard_impacts([0.1, -0.5], [0.6, 0.8], 10.0);
    assert!(stdout(&o).contains(&format!("impacts: {expected}\n")), "{}", stdout(&o));
    let events = json(&dir.path().join("run/events.json"));
    assert_eq!(events["events"].as_array().unwrap().len(), expected);
    assert_eq!(events["termination"]["kind"], "horizon_reached");

    let csv = fs::read_to_string(dir.path().join("run/trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,q0,q1,p0,p1,segment");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    // 17 significant digits: one leading digit and sixteen decimals.
    let mantissa = row[1].split('e').next().unwrap();
    assert_eq!(mantissa.len(), 18, "{}", row[1]);
    assert_eq!(row[1].parse::<f64>().unwrap(), 0.1);
}

#[test]
fn unknown_scenario_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hybridhj(dir.path(), &["simulate", "--scenario", "pendulum"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("billiard") && stderr(&o).contains("nh_particle"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[scenario]\nname = \"billiard\"\n[run]\nstepsize = 0.1\n").unwrap();
    let o = hybridhj(dir.path(), &["simulate", "--config", "bad.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stepsize"), "{}", stderr(&o));
    let o = hybridhj(dir.path(), &["simulate", "--scenario", "billiard", "--set", "spin=2"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn duplicate_flags_use_the_last_value_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let o = hybridhj(
        dir.path(),
        &["simulate", "--scenario", "billiard", "--horizon", "1", "--h", "1e-2", "--h", "1e-3", "--out", "run"],
    );
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("--h given 2 times"), "{}", stderr(&o));
    let cfg = fs::read_to_string(dir.path().join("run/config.toml")).unwrap();
    assert!(cfg.contains("h = 0.001"), "{cfg}");
}

#[test]
fn verify_billiard_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = hybridhj(dir.path(), &["verify-hj", "--scenario", "billiard", "--out", "v"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let report = json(&dir.path().join("v/residuals.json"));
    assert_eq!(report["passed"], true);
}

#[test]
fn verify_rigid_body_without_transfer_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = hybridhj(
        dir.path(),
        &["verify-hj", "--scenario", "rigid_body", "--set", "mu3=2", "--set", "eps=2", "--out", "v"],
    );
    assert_eq!(code(&o), 1);
    let report = json(&dir.path().join("v/residuals.json"));
    assert_eq!(report["passed"], false);
    assert!(report["transfer_error"].as_str().unwrap().contains("undefined"));
}

#[test]
fn verify_perturbed_forced_disk_reports_the_residual() {
    let dir = tempfile::tempdir().unwrap();
    let o = hybridhj(
        dir.path(),
        &["verify-hj", "--scenario", "rolling_disk_forced", "--set", "slope_perturbation=0.05", "--out", "v"],
    );
    assert_eq!(code(&o), 1);
    let report = json(&dir.path().join("v/residuals.json"));
    let channels = report["residuals"][0]["channels"].as_array().unwrap();
    let forced = channels.iter().find(|c| c["name"] == "forced_hamilton_jacobi").unwrap();
    assert!(number(&forced["max"]) > 1e-3);
}

#[test]
fn verify_without_family_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hybridhj(dir.path(), &["verify-hj", "--scenario", "bouncing_ball"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn compare_particle_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = hybridhj(dir.path(), &["compare", "--scenario", "nh_particle", "--out", "c"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let report = json(&dir.path().join("c/comparison.json"));
    assert!(number(&report["sup_discrepancy"]) <= 1e-6);
    assert!(report["direct_impacts"].as_u64().unwrap() >= 2);
    assert!(dir.path().join("c/transfer_log.json").exists());
}

#[test]
fn compare_with_zero_horizon_reports_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let o = hybridhj(dir.path(), &["compare", "--scenario", "billiard", "--horizon", "0", "--out", "c"]);
    assert_eq!(code(&o), 0);
    let report = json(&dir.path().join("c/comparison.json"));
    assert_eq!(number(&report["sup_discrepancy"]), 0.0);
    assert_eq!(report["direct_impacts"], 0);
}

#[test]
fn billiard_comparison_sits_at_round_off_for_both_steps() {
    // Reconstruction and direct flow integrate the same linear motion, so the
    // discrepancy does not carry a truncation error to shrink.
    let dir = tempfile::tempdir().unwrap();
    for (h, out) in [("2e-3", "c1"), ("1e-3", "c2")] {
        let o = hybridhj(dir.path(), &["compare", "--scenario", "billiard", "--h", h, "--out", out]);
        assert_eq!(code(&o), 0);
        let sup = number(&json(&dir.path().join(out).join("comparison.json"))["sup_discrepancy"]);
        assert!(sup <= 1e-12, "h = {h}: {sup}");
    }
}

#[test]
fn reconstruct_writes_the_transfer_log() {
    let dir = tempfile::tempdir().unwrap();
    let o = hybridhj(dir.path(), &["reconstruct", "--scenario", "rolling_disk", "--out", "r"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = json(&dir.path().join("r/transfer_log.json"));
    let events = json(&dir.path().join("r/events.json"));
    assert_eq!(log.as_array().unwrap().len(), events["events"].as_array().unwrap().len());
    assert!(log.as_array().unwrap().iter().all(|r| r["within_tol"] == true));
}

#[test]
fn zeno_termination_is_a_success() {
    let dir = tempfile::tempdir().unwrap();
    let o = hybridhj(dir.path(), &["simulate", "--scenario", "bouncing_ball", "--out", "z"]);
    assert_eq!(code(&o), 0);
    let events = json(&dir.path().join("z/events.json"));
    assert_eq!(events["termination"]["kind"], "zeno_guard");
    let o = hybridhj(
        dir.path(),
        &["simulate", "--scenario", "bouncing_ball", "--set", "tolerances.max_impacts=4", "--out", "z4"],
    );
    assert_eq!(code(&o), 0);
    let events = json(&dir.path().join("z4/events.json"));
    assert!(events["events"].as_array().unwrap().len() <= 5);
}

#[test]
fn reset_leaving_the_constraint_set_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hybridhj(dir.path(), &["simulate", "--scenario", "rigid_body", "--out", "r"]);
    assert_eq!(code(&o), 3);
    let events = json(&dir.path().join("r/events.json"));
    assert_eq!(events["termination"]["kind"], "error");
}

#[test]
fn identical_configs_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = hybridhj(
            dir.path(),
            &["simulate", "--scenario", "rolling_disk_forced", "--horizon", "3", "--out", out],
        );
        assert_eq!(code(&o), 0);
    }
    for file in ["trajectory.csv", "events.json"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn batch_runs_get_isolated_outputs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("ok.toml"),
        "[scenario]\nname = \"billiard\"\n[run]\nhorizon = 2.0\n[output]\ndir = \"batch\"\n",
    )
    .unwrap();
    fs::write(
        dir.path().join("fails.toml"),
        "[scenario]\nname = \"rigid_body\"\nparams = { mu3 = 2.0, eps = 2.0 }\n[tolerances]\nsamples = 20\n[output]\ndir = \"batch\"\n",
    )
    .unwrap();
    let o = hybridhj(
        dir.path(),
        &["verify-hj", "--config", "ok.toml", "--config", "fails.toml", "--jobs", "2"],
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(dir.path().join("batch/ok/residuals.json").exists());
    assert!(dir.path().join("batch/fails/residuals.json").exists());
    let text = stdout(&o);
    assert!(text.find("== billiard").unwrap() < text.find("== rigid_body").unwrap());
}

#[test]
fn config_file_and_set_combine() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("particle.toml"),
        "[scenario]\nname = \"nh_particle\"\n[scenario.params]\ne = 1.0\n[run]\nhorizon = 2.0\n",
    )
    .unwrap();
    let o = hybridhj(
        dir.path(),
        &["compare", "--config", "particle.toml", "--set", "family.lambda=[0.5, 1.0]", "--out", "c"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = fs::read_to_string(dir.path().join("c/config.toml")).unwrap();
    assert!(cfg.contains("lambda = [0.5, 1.0]"), "{cfg}");
}

#[test]
fn list_scenarios_json_names_every_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let o = hybridhj(dir.path(), &["list-scenarios", "--json"]);
    assert_eq!(code(&o), 0);
    let list: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let names: Vec<&str> = list.as_array().unwrap().iter().map(|d| d["name"].as_str().unwrap()).collect();
    for name in ["billiard", "rolling_disk", "rolling_disk_forced", "nh_particle", "rigid_body", "bouncing_ball"] {
        assert!(names.contains(&name), "{name}");
    }
}

#[test]
fn bad_usage_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&hybridhj(dir.path(), &["simulate", "--h", "abc"])), 2);
    assert_eq!(code(&hybridhj(dir.path(), &["frobnicate"])), 2);
}

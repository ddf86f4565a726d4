//! The five subcommands. Each returns a rendered summary instead of printing
//! so batch runs can emit their reports in input order.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use hybrid_hj::export::{self, events_json, termination_label, to_json_value, write_trajectory_csv};
use hybrid_hj::hybrid::{check_hybrid_constant, simulate_hybrid_partial, HybridTrajectory, Termination};
use hybrid_hj::reconstruct::{compare, reconstruct, ReconstructOptions, ReconstructionRun};
use hybrid_hj::scenarios::{self, Scenario};
use hybrid_hj::{Error, PhasePoint, Vector};
use log::{info, warn};
use serde_json::{json, Value};

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Exit {
    Success = 0,
    /// A verification or comparison did not meet its tolerance.
    Failure = 1,
    Config = 2,
    Runtime = 3,
}

#[derive(Debug)]
pub struct Report {
    pub exit: Exit,
    pub text: String,
}

#[derive(Debug)]
pub struct Failed {
    pub exit: Exit,
    pub message: String,
}

type Outcome = Result<Report, Failed>;

fn config_err(message: impl ToString) -> Failed {
    Failed {
        exit: Exit::Config,
        message: message.to_string(),
    }
}

fn runtime_err(message: impl ToString) -> Failed {
    Failed {
        exit: Exit::Runtime,
        message: message.to_string(),
    }
}

/// Errors raised before any integration step are input problems.
fn classify(e: Error) -> Failed {
    match e {
        Error::BadParameters(_)
        | Error::UnknownScenario { .. }
        | Error::InvalidArgument(_)
        | Error::DimensionMismatch { .. }
        | Error::RegionViolation { .. }
        | Error::ConstraintViolation { .. }
        | Error::InvalidModel(_) => config_err(e),
        other => runtime_err(other),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Simulate,
    VerifyHj,
    Reconstruct,
    Compare,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::VerifyHj => "verify-hj",
            Command::Reconstruct => "reconstruct",
            Command::Compare => "compare",
        }
    }
}

pub fn execute(command: Command, cfg: &RunConfig) -> Outcome {
    let setup = Setup::new(cfg)?;
    let out = &cfg.output.dir;
    fs::create_dir_all(out).map_err(|e| runtime_err(format!("cannot create {}: {e}", out.display())))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    info!("{} {} -> {}", command.name(), cfg.scenario.name, out.display());
    match command {
        Command::Simulate => simulate(&setup, out),
        Command::VerifyHj => verify_hj(&setup, out),
        Command::Reconstruct => reconstruct_cmd(&setup, out),
        Command::Compare => compare_cmd(&setup, out),
    }
}

/// Scenario with the configuration's tolerances, horizon and initial data.
struct Setup<'a> {
    cfg: &'a RunConfig,
    scenario: Scenario,
    horizon: f64,
}

impl<'a> Setup<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self, Failed> {
        let mut scenario = scenarios::build(&cfg.scenario.name, &cfg.scenario.params).map_err(classify)?;
        scenario.system.tolerances = cfg.hybrid_tolerances();
        scenario.system.zeno = cfg.zeno_policy();
        let horizon = cfg.run.horizon.unwrap_or(scenario.horizon);
        let n = scenario.system.model.dim();
        for (name, v) in [("run.q0", &cfg.run.q0), ("run.p0", &cfg.run.p0)] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(config_err(format!(
                        "{name} has {} entries, scenario '{}' has dimension {n}",
                        v.len(),
                        scenario.name
                    )));
                }
            }
        }
        if let Some(q0) = &cfg.run.q0 {
            scenario.q0 = Vector::from_column_slice(q0);
        }
        if let Some(p) = scenario.params0.as_mut() {
            if let Some(lambda) = &cfg.family.lambda {
                if lambda.len() != p.values.len() {
                    return Err(config_err(format!(
                        "family.lambda has {} entries, the family has {} parameters",
                        lambda.len(),
                        p.values.len()
                    )));
                }
                p.values = lambda.clone();
            }
            if let Some(b) = cfg.family.branch {
                p.branch = b;
            }
        } else if cfg.family != Default::default() {
            return Err(config_err(format!(
                "scenario '{}' ships no solution family; remove the [family] section",
                scenario.name
            )));
        }
        scenario.region0 = match (cfg.family.region, &scenario.family) {
            (Some(r), _) => r,
            (None, Some(f)) if cfg.run.q0.is_some() => {
                let hits: Vec<usize> = f
                    .regions()
                    .into_iter()
                    .map(|r| r.id)
                    .filter(|&id| f.contains(id, &scenario.q0))
                    .collect();
                match hits.as_slice() {
                    [only] => *only,
                    _ => scenario.region0,
                }
            }
            _ => scenario.region0,
        };
        Ok(Self {
            cfg,
            scenario,
            horizon,
        })
    }

    /// Initial phase point: explicit momentum, else the family lift, else the
    /// scenario default.
    fn initial_state(&self) -> Result<PhasePoint, Failed> {
        let s = &self.scenario;
        let p = match (&self.cfg.run.p0, &s.family, &s.params0) {
            (Some(p0), _, _) => Vector::from_column_slice(p0),
            (None, Some(f), Some(params)) if self.cfg.run.q0.is_some() || self.cfg.family != Default::default() => {
                f.gamma(s.region0, &s.q0, params).map_err(classify)?
            }
            _ if self.cfg.run.q0.is_none() => s.x0.p.clone(),
            _ => {
                return Err(config_err(format!(
                    "scenario '{}' needs run.p0 together with run.q0",
                    s.name
                )))
            }
        };
        PhasePoint::new(s.q0.clone(), p).map_err(classify)
    }

    fn family_run(&self) -> Result<ReconstructionRun, Failed> {
        let s = &self.scenario;
        let (Some(family), Some(transfer), Some(params)) = (&s.family, &s.transfer, &s.params0) else {
            return Err(config_err(format!("scenario '{}' ships no solution family", s.name)));
        };
        let opts = ReconstructOptions {
            policy: self.cfg.step_policy(),
            lift_tol: self.cfg.tolerances.lift_tol,
            ..ReconstructOptions::default()
        };
        reconstruct(
            &s.system,
            family.as_ref(),
            transfer.as_ref(),
            &s.q0,
            params,
            s.region0,
            self.horizon,
            &opts,
        )
        .map_err(classify)
    }

    fn angles(&self) -> &[usize] {
        self.scenario.system.model.angle_coords()
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failed> {
    fs::write(path, text).map_err(|e| runtime_err(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failed> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime_err)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_csv(path: &Path, traj: &HybridTrajectory, angles: &[usize]) -> Result<(), Failed> {
    let io = |e: std::io::Error| runtime_err(format!("cannot write {}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write_trajectory_csv(&mut w, traj, angles).map_err(io)?;
    w.flush().map_err(io)
}

fn trajectory_summary(text: &mut String, traj: &HybridTrajectory) {
    let _ = writeln!(text, "impacts: {}", traj.events.len());
    let _ = writeln!(text, "t_end: {}", export::format_f64(traj.t_end()));
    let _ = writeln!(text, "termination: {}", termination_label(&traj.termination));
    match &traj.termination {
        Termination::ZenoGuard { reason } => {
            let _ = writeln!(text, "zeno: {reason}");
        }
        Termination::Error { message } => {
            let _ = writeln!(text, "error: {message}");
        }
        Termination::HorizonReached => {}
    }
}

fn simulate(setup: &Setup, out: &Path) -> Outcome {
    let s = &setup.scenario;
    let x0 = setup.initial_state()?;
    let traj =
        simulate_hybrid_partial(&s.system, &x0, setup.horizon, &setup.cfg.step_policy()).map_err(classify)?;
    write_csv(&out.join("trajectory.csv"), &traj, setup.angles())?;
    write_json(&out.join("events.json"), &events_json(&traj, setup.angles()))?;

    let mut text = format!("scenario: {}\n", s.name);
    trajectory_summary(&mut text, &traj);
    for obs in s.observables.iter().filter(|o| o.hybrid_constant) {
        let f = obs.f.clone();
        let report = check_hybrid_constant(&traj, move |x| f(x));
        let _ = writeln!(
            text,
            "drift {}: {} (at t = {})",
            obs.name,
            export::format_f64(report.max_drift),
            export::format_f64(report.t_at_max)
        );
    }
    let exit = match traj.termination {
        Termination::Error { .. } => Exit::Runtime,
        _ => Exit::Success,
    };
    Ok(Report { exit, text })
}

fn verify_hj(setup: &Setup, out: &Path) -> Outcome {
    let s = &setup.scenario;
    if s.family.is_none() {
        return Err(config_err(format!("scenario '{}' ships no solution family", s.name)));
    }
    let suite = s
        .verification_suite(setup.cfg.tolerances.samples, &setup.cfg.verify_options())
        .map_err(classify)?;
    write_json(&out.join("residuals.json"), &to_json_value(&suite).map_err(runtime_err)?)?;

    let mut text = format!("scenario: {}\n", s.name);
    for r in &suite.residuals {
        for c in &r.channels {
            let _ = writeln!(
                text,
                "region {} {}: {} (tol {}) {}",
                r.region.map_or_else(|| "-".to_string(), |v| v.to_string()),
                c.name,
                export::format_f64(c.max),
                export::format_f64(c.tolerance),
                if c.passed { "pass" } else { "FAIL" }
            );
        }
    }
    let c = &suite.completeness;
    let _ = writeln!(
        text,
        "local_diffeomorphism: min |det| {} {}",
        export::format_f64(c.min_abs_det),
        if c.diffeo.passed { "pass" } else { "FAIL" }
    );
    match (&suite.delta_relatedness, &suite.transfer_error) {
        (_, Some(err)) => {
            let _ = writeln!(text, "delta_related: undefined ({err})");
        }
        (Some(r), None) => {
            let _ = writeln!(
                text,
                "delta_related: {} {}",
                export::format_f64(r.max_residual),
                if r.passed { "pass" } else { "FAIL" }
            );
        }
        (None, None) => {}
    }
    let _ = writeln!(text, "verdict: {}", if suite.passed { "pass" } else { "FAIL" });
    Ok(Report {
        exit: if suite.passed { Exit::Success } else { Exit::Failure },
        text,
    })
}

fn transfer_log_json(run: &ReconstructionRun) -> Result<Value, Failed> {
    to_json_value(&run.transfer_log).map_err(runtime_err)
}

fn reconstruct_cmd(setup: &Setup, out: &Path) -> Outcome {
    let run = setup.family_run()?;
    write_csv(&out.join("trajectory.csv"), &run.lifted, setup.angles())?;
    write_json(&out.join("events.json"), &events_json(&run.lifted, setup.angles()))?;
    write_json(&out.join("transfer_log.json"), &transfer_log_json(&run)?)?;
    let mut text = format!("scenario: {}\n", setup.scenario.name);
    trajectory_summary(&mut text, &run.lifted);
    let worst = run.transfer_log.iter().map(|r| r.lift_mismatch).fold(0.0, f64::max);
    let _ = writeln!(text, "transfers: {}", run.transfer_log.len());
    let _ = writeln!(text, "max lift mismatch: {}", export::format_f64(worst));
    if run.transfer_log.iter().any(|r| !r.within_tol) {
        warn!("some transfers exceed lift_tol; see transfer_log.json");
    }
    let exit = match run.lifted.termination {
        Termination::Error { .. } => Exit::Runtime,
        _ => Exit::Success,
    };
    Ok(Report { exit, text })
}

fn compare_cmd(setup: &Setup, out: &Path) -> Outcome {
    let s = &setup.scenario;
    let run = setup.family_run()?;
    let (family, params) = match (&s.family, &s.params0) {
        (Some(f), Some(p)) => (f, p),
        _ => unreachable!("family_run checked the family"),
    };
    let x0 = PhasePoint::new(s.q0.clone(), family.gamma(s.region0, &s.q0, params).map_err(classify)?)
        .map_err(classify)?;
    let direct =
        simulate_hybrid_partial(&s.system, &x0, setup.horizon, &setup.cfg.step_policy()).map_err(classify)?;
    if let Termination::Error { message } = &direct.termination {
        return Err(runtime_err(format!("direct simulation failed: {message}")));
    }
    let report = compare(&direct, &run.lifted).map_err(runtime_err)?;
    let tol = setup.cfg.tolerances.compare_tol;
    let passed = report.sup_discrepancy <= tol && !report.impact_count_mismatch;
    let mut value = to_json_value(&report).map_err(runtime_err)?;
    if let Value::Object(m) = &mut value {
        m.insert("compare_tol".into(), export::json_f64(tol));
        m.insert("passed".into(), json!(passed));
        m.insert("scenario".into(), json!(s.name));
    }
    write_json(&out.join("comparison.json"), &value)?;
    write_json(&out.join("transfer_log.json"), &transfer_log_json(&run)?)?;
    let mut text = format!("scenario: {}\n", s.name);
    let _ = writeln!(
        text,
        "impacts: direct {}, reconstructed {}",
        report.direct_impacts, report.reconstructed_impacts
    );
    let _ = writeln!(text, "sup discrepancy: {}", export::format_f64(report.sup_discrepancy));
    let _ = writeln!(
        text,
        "max impact-time difference: {}",
        export::format_f64(report.max_impact_time_diff)
    );
    let _ = writeln!(
        text,
        "verdict: {} (compare_tol {})",
        if passed { "pass" } else { "FAIL" },
        export::format_f64(tol)
    );
    Ok(Report {
        exit: if passed { Exit::Success } else { Exit::Failure },
        text,
    })
}

/// Scenario names with their parameter schema.
pub fn list_scenarios(as_json: bool) -> String {
    let descriptors = scenarios::descriptors();
    if as_json {
        let value = to_json_value(&descriptors).expect("descriptors serialize");
        return serde_json::to_string_pretty(&value).expect("JSON value renders") + "\n";
    }
    let mut text = String::new();
    for d in descriptors {
        let _ = writeln!(text, "{}: {}", d.name, d.summary);
        for p in d.params {
            let _ = writeln!(text, "    {:<22} {:<12} {}", p.name, p.default, p.doc);
        }
    }
    text
}


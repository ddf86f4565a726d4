//! Run configuration: a TOML file with the sections `[scenario]`, `[run]`,
//! `[tolerances]`, `[family]` and `[output]`, plus command-line overrides.
//!
//! Overrides are merged into the parsed TOML table before it is checked
//! against the strict schema, so a `--set` key is validated exactly like a
//! key written in the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hybrid_hj::hybrid::{HybridTolerances, ZenoPolicy};
use hybrid_hj::integrate::StepPolicy;
use hybrid_hj::verify::VerifyOptions;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

const SECTIONS: [&str; 5] = ["scenario", "run", "tolerances", "family", "output"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub tolerances: ToleranceSection,
    #[serde(default)]
    pub family: FamilySection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub name: String,
    /// Scenario parameter overrides; names are checked against the scenario.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Defaults to the scenario's own horizon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    pub h: f64,
    pub adaptive: bool,
    pub h_min: f64,
    pub step_tol: f64,
    /// Initial configuration; replaces the scenario's `q0`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q0: Option<Vec<f64>>,
    /// Initial momentum for `simulate`; ignored by family-based commands.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p0: Option<Vec<f64>>,
}

impl Default for RunSection {
    fn default() -> Self {
        let policy = StepPolicy::default();
        Self {
            horizon: None,
            h: policy.h,
            adaptive: policy.adaptive,
            h_min: policy.h_min,
            step_tol: policy.tol,
            q0: None,
            p0: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceSection {
    pub guard_tol: f64,
    pub time_tol: f64,
    pub adm_tol: f64,
    pub max_impacts: usize,
    pub zeno_dt: f64,
    pub pass_tol_analytic: f64,
    pub pass_tol_fd: f64,
    pub diffeo_tol: f64,
    pub fd_step: f64,
    pub finite_differences: bool,
    /// Quasi-random samples per region for `verify-hj`.
    pub samples: usize,
    pub lift_tol: f64,
    /// Largest sup discrepancy for which `compare` succeeds.
    pub compare_tol: f64,
}

impl Default for ToleranceSection {
    fn default() -> Self {
        let hybrid = HybridTolerances::default();
        let zeno = ZenoPolicy::default();
        let verify = VerifyOptions::default();
        Self {
            guard_tol: hybrid.guard_tol,
            time_tol: hybrid.time_tol,
            adm_tol: hybrid.adm_tol,
            max_impacts: zeno.max_impacts,
            zeno_dt: zeno.zeno_dt,
            pass_tol_analytic: verify.pass_tol_analytic,
            pass_tol_fd: verify.pass_tol_fd,
            diffeo_tol: verify.diffeo_tol,
            fd_step: verify.fd_step,
            finite_differences: verify.finite_differences,
            samples: 1000,
            lift_tol: 1e-8,
            compare_tol: 1e-6,
        }
    }
}

/// Initial family member for `reconstruct` and `compare`; unset fields come
/// from the scenario.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FamilySection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch: Option<i8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

/// Command-line values layered over the file, highest precedence last.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub scenario: Option<String>,
    pub h: Option<f64>,
    pub horizon: Option<f64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    #[cfg(test)]
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let table: Table = text.parse().map_err(|e| format!("invalid TOML: {e}"))?;
        Self::from_table(table)
    }

    fn from_table(table: Table) -> Result<Self, String> {
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| e.message().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse `path` (if any), then apply overrides.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, String> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?;
                text.parse::<Table>()
                    .map_err(|e| format!("{}: invalid TOML: {e}", p.display()))?
            }
            None => Table::new(),
        };
        for set in &overrides.sets {
            apply_set(&mut table, set)?;
        }
        if let Some(name) = &overrides.scenario {
            insert_path(&mut table, &["scenario", "name"], Value::String(name.clone()))?;
        }
        if let Some(h) = overrides.h {
            insert_path(&mut table, &["run", "h"], Value::Float(h))?;
        }
        if let Some(horizon) = overrides.horizon {
            insert_path(&mut table, &["run", "horizon"], Value::Float(horizon))?;
        }
        if let Some(out) = &overrides.out {
            insert_path(&mut table, &["output", "dir"], Value::String(out.display().to_string()))?;
        }
        if !table.contains_key("scenario") {
            return Err("no scenario given (use --scenario or a [scenario] section)".into());
        }
        Self::from_table(table).map_err(|e| match path {
            Some(p) => format!("{}: {e}", p.display()),
            None => e,
        })
    }

    /// Canonical TOML text; parsing it yields an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are all TOML-representable")
    }

    pub fn validate(&self) -> Result<(), String> {
        let t = &self.tolerances;
        let positive = [
            ("run.h", self.run.h),
            ("run.h_min", self.run.h_min),
            ("run.step_tol", self.run.step_tol),
            ("tolerances.guard_tol", t.guard_tol),
            ("tolerances.time_tol", t.time_tol),
            ("tolerances.adm_tol", t.adm_tol),
            ("tolerances.zeno_dt", t.zeno_dt),
            ("tolerances.pass_tol_analytic", t.pass_tol_analytic),
            ("tolerances.pass_tol_fd", t.pass_tol_fd),
            ("tolerances.diffeo_tol", t.diffeo_tol),
            ("tolerances.fd_step", t.fd_step),
            ("tolerances.lift_tol", t.lift_tol),
            ("tolerances.compare_tol", t.compare_tol),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if t.max_impacts == 0 || t.samples == 0 {
            return Err("tolerances.max_impacts and tolerances.samples must be at least 1".into());
        }
        if let Some(h) = self.run.horizon {
            if !(h.is_finite() && h >= 0.0) {
                return Err(format!("run.horizon must be finite and >= 0, got {h}"));
            }
        }
        if let Some(b) = self.family.branch {
            if b != 1 && b != -1 {
                return Err(format!("family.branch must be +1 or -1, got {b}"));
            }
        }
        Ok(())
    }

    pub fn step_policy(&self) -> StepPolicy {
        StepPolicy {
            h: self.run.h,
            adaptive: self.run.adaptive,
            h_min: self.run.h_min,
            tol: self.run.step_tol,
        }
    }

    pub fn hybrid_tolerances(&self) -> HybridTolerances {
        HybridTolerances {
            guard_tol: self.tolerances.guard_tol,
            time_tol: self.tolerances.time_tol,
            adm_tol: self.tolerances.adm_tol,
        }
    }

    pub fn zeno_policy(&self) -> ZenoPolicy {
        ZenoPolicy {
            max_impacts: self.tolerances.max_impacts,
            zeno_dt: self.tolerances.zeno_dt,
        }
    }

    pub fn verify_options(&self) -> VerifyOptions {
        let t = &self.tolerances;
        VerifyOptions {
            pass_tol_analytic: t.pass_tol_analytic,
            pass_tol_fd: t.pass_tol_fd,
            diffeo_tol: t.diffeo_tol,
            fd_step: t.fd_step,
            finite_differences: t.finite_differences,
        }
    }
}

/// `key=value` with a dotted key. A bare key that is not a section name is a
/// scenario parameter; bare `scenario` sets the scenario name.
fn apply_set(table: &mut Table, set: &str) -> Result<(), String> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| format!("--set expects key=value, got '{set}'"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(format!("--set has an empty key in '{set}'"));
    }
    let value = parse_value(raw.trim());
    let mut path: Vec<&str> = key.split('.').collect();
    if path.len() == 1 {
        path = match path[0] {
            "scenario" => vec!["scenario", "name"],
            s if SECTIONS.contains(&s) => return Err(format!("--set {s}=... needs a field, e.g. {s}.<field>=...")),
            s => vec!["scenario", "params", s],
        };
    }
    insert_path(table, &path, value)
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn insert_path(table: &mut Table, path: &[&str], value: Value) -> Result<(), String> {
    let (last, parents) = path.split_last().expect("path is non-empty");
    let mut cursor = table;
    for (depth, part) in parents.iter().enumerate() {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| format!("'{}' is not a table", path[..=depth].join(".")))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str, sets: &[&str]) -> Result<RunConfig, String> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, text).unwrap();
        let overrides = Overrides {
            sets: sets.iter().map(|s| s.to_string()).collect(),
            ..Overrides::default()
        };
        RunConfig::load(Some(&path), &overrides)
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_toml("[scenario]\nname = \"billiard\"\n").unwrap();
        assert_eq!(cfg.run, RunSection::default());
        assert_eq!(cfg.tolerances.compare_tol, 1e-6);
        assert_eq!(cfg.output.dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[scenario]\nname = \"billiard\"\n[run]\nstep = 1\n").unwrap_err();
        assert!(err.contains("step"), "{err}");
        assert!(RunConfig::from_toml("[scenario]\nname = \"x\"\n[extras]\n").is_err());
    }

    #[test]
    fn nonpositive_tolerances_are_rejected() {
        let err = RunConfig::from_toml("[scenario]\nname = \"billiard\"\n[tolerances]\nguard_tol = 0.0\n").unwrap_err();
        assert!(err.contains("guard_tol"));
    }

    #[test]
    fn set_overrides_file_values() {
        let cfg = load(
            "[scenario]\nname = \"billiard\"\n[run]\nh = 0.01\n",
            &["run.h=2e-3", "x0=0.3", "tolerances.max_impacts=7", "scenario.params.y0=-0.1"],
        )
        .unwrap();
        assert_eq!(cfg.run.h, 2e-3);
        assert_eq!(cfg.scenario.params["x0"], 0.3);
        assert_eq!(cfg.scenario.params["y0"], -0.1);
        assert_eq!(cfg.tolerances.max_impacts, 7);
    }

    #[test]
    fn integer_literals_fill_float_fields() {
        let cfg = load("[scenario]\nname = \"billiard\"\n[run]\nh = 0.01\n", &["run.h=1", "run.horizon=3"]).unwrap();
        assert_eq!(cfg.run.h, 1.0);
        assert_eq!(cfg.run.horizon, Some(3.0));
    }

    #[test]
    fn set_of_an_unknown_field_is_rejected() {
        assert!(load("[scenario]\nname = \"billiard\"\n", &["run.nope=1"]).is_err());
        assert!(load("[scenario]\nname = \"billiard\"\n", &["run=1"]).is_err());
        assert!(load("[scenario]\nname = \"billiard\"\n", &["novalue"]).is_err());
    }

    #[test]
    fn flags_outrank_sets() {
        let overrides = Overrides {
            sets: vec!["run.h=0.5".into(), "scenario=rolling_disk".into()],
            scenario: Some("billiard".into()),
            h: Some(1e-4),
            horizon: Some(2.0),
            out: Some(PathBuf::from("elsewhere")),
        };
        let cfg = RunConfig::load(None, &overrides).unwrap();
        assert_eq!(cfg.scenario.name, "billiard");
        assert_eq!(cfg.run.h, 1e-4);
        assert_eq!(cfg.run.horizon, Some(2.0));
        assert_eq!(cfg.output.dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn missing_scenario_is_an_error() {
        assert!(RunConfig::load(None, &Overrides::default()).unwrap_err().contains("scenario"));
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = load(
            "[scenario]\nname = \"nh_particle\"\nparams = { e = 0.5, lambda = 0.25 }\n[family]\nlambda = [1.0, 2.0]\nbranch = -1\n",
            &["run.q0=[0.1, 0.2, 0.3]"],
        )
        .unwrap();
        let text = cfg.to_toml();
        let again = RunConfig::from_toml(&text).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml(), text);
    }
}

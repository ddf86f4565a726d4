//! The shipped example systems: models, guards, resets, solution families,
//! transfer maps, closed-form oracles, and default initial data.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hybrid::HybridSystem;
use crate::phase::{PhasePoint, Vector};
use crate::sampling;
use crate::verify::{
    self, CompletenessGrid, CompletenessReport, FamilyParams, ImpactSample, ResidualReport, SolutionFamily,
    TransferMap, VerifyOptions,
};

pub mod billiard;
pub mod bouncing;
pub mod disk;
pub mod particle;
pub mod rigid_body;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: &'static str,
    pub default: f64,
    pub doc: &'static str,
}

const fn param(name: &'static str, default: f64, doc: &'static str) -> ParamSpec {
    ParamSpec { name, default, doc }
}

/// Machine-readable description of a scenario and its parameter schema.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioDescriptor {
    pub name: &'static str,
    pub summary: &'static str,
    pub params: Vec<ParamSpec>,
}

/// Parameter values after merging overrides into defaults.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolvedParams(BTreeMap<String, f64>);

impl ResolvedParams {
    fn resolve(desc: &ScenarioDescriptor, overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let mut values: BTreeMap<String, f64> = desc.params.iter().map(|p| (p.name.to_string(), p.default)).collect();
        for (key, value) in overrides {
            match values.get_mut(key) {
                Some(slot) if value.is_finite() => *slot = *value,
                Some(_) => return Err(Error::BadParameters(format!("parameter '{key}' must be finite"))),
                None => {
                    let known: Vec<&str> = desc.params.iter().map(|p| p.name).collect();
                    return Err(Error::BadParameters(format!(
                        "unknown parameter '{key}' for scenario '{}' (known: {})",
                        desc.name,
                        known.join(", ")
                    )));
                }
            }
        }
        Ok(Self(values))
    }

    /// Panics on a name missing from the descriptor, which is a programming error.
    pub fn get(&self, name: &str) -> f64 {
        self.0[name]
    }

    pub fn as_map(&self) -> &BTreeMap<String, f64> {
        &self.0
    }
}

/// A function of state tracked along trajectories.
#[derive(Clone)]
pub struct Observable {
    pub name: &'static str,
    pub f: Arc<dyn Fn(&PhasePoint) -> f64 + Send + Sync>,
    /// Whether this is expected to be a hybrid constant of motion.
    pub hybrid_constant: bool,
}

impl fmt::Debug for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Observable")
            .field("name", &self.name)
            .field("hybrid_constant", &self.hybrid_constant)
            .finish()
    }
}

/// Closed-form hybrid trajectory from the scenario's initial data.
pub trait Oracle: Send + Sync + fmt::Debug {
    fn impact_times(&self, horizon: f64) -> Vec<f64>;
    /// Hybrid flow value at `t` (post-impact value at impact times).
    fn state_at(&self, t: f64) -> PhasePoint;
}

/// Axis-aligned sampling box inside one region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionBox {
    pub region: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

pub type ImpactSampler = Arc<dyn Fn(usize) -> Vec<ImpactSample> + Send + Sync>;

#[derive(Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub params: ResolvedParams,
    pub system: HybridSystem,
    pub family: Option<Arc<dyn SolutionFamily>>,
    pub transfer: Option<Arc<dyn TransferMap>>,
    pub q0: Vector,
    pub params0: Option<FamilyParams>,
    pub region0: usize,
    pub x0: PhasePoint,
    pub horizon: f64,
    pub observables: Vec<Observable>,
    pub oracle: Option<Arc<dyn Oracle>>,
    pub region_boxes: Vec<RegionBox>,
    impact_sampler: Option<ImpactSampler>,
}

impl fmt::Debug for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("params", &self.params)
            .field("x0", &self.x0)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

/// Results of running every applicable check on a scenario's family.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationSuite {
    pub scenario: String,
    pub residuals: Vec<ResidualReport>,
    pub delta_relatedness: Option<ResidualReport>,
    pub transfer_error: Option<String>,
    pub completeness: CompletenessReport,
    pub passed: bool,
}

impl Scenario {
    pub fn descriptor(&self) -> ScenarioDescriptor {
        descriptor(self.name).expect("built scenarios are registered")
    }

    /// Quasi-random base points, `count` per region box.
    pub fn residual_samples(&self, count: usize) -> Vec<(usize, Vec<Vector>)> {
        self.region_boxes
            .iter()
            .map(|b| {
                let pts = sampling::halton_box(&b.lo, &b.hi, count)
                    .into_iter()
                    .map(Vector::from_vec)
                    .collect();
                (b.region, pts)
            })
            .collect()
    }

    pub fn impact_samples(&self, count: usize) -> Vec<ImpactSample> {
        self.impact_sampler.as_ref().map_or_else(Vec::new, |s| s(count))
    }

    fn require_family(&self) -> Result<(&dyn SolutionFamily, &dyn TransferMap, &FamilyParams)> {
        match (&self.family, &self.transfer, &self.params0) {
            (Some(f), Some(t), Some(p)) => Ok((f.as_ref(), t.as_ref(), p)),
            _ => Err(Error::InvalidArgument(format!(
                "scenario '{}' ships no solution family",
                self.name
            ))),
        }
    }

    /// Residuals per region at the initial family member, Δ-relatedness on
    /// sampled impact points, and the complete-solution channels.
    pub fn verification_suite(&self, samples: usize, opts: &VerifyOptions) -> Result<VerificationSuite> {
        let (family, transfer, params0) = self.require_family()?;
        let model = &self.system.model;
        let mut residuals = Vec::new();
        let mut interior = Vec::new();
        for (region, pts) in self.residual_samples(samples) {
            residuals.push(verify::residual_for_model(model, family, region, params0, &pts, opts)?);
            interior.extend(pts.into_iter().map(|q| (region, q, params0.clone())));
        }
        let impacts = self.impact_samples(samples);
        let completeness = verify::complete_solution_check(
            model,
            &self.system.reset,
            family,
            transfer,
            &CompletenessGrid { interior, impacts },
            opts,
        )?;
        let passed = residuals.iter().all(|r| r.passed) && completeness.passed;
        Ok(VerificationSuite {
            scenario: self.name.to_string(),
            residuals,
            delta_relatedness: completeness.transfer.clone(),
            transfer_error: completeness.transfer_error.clone(),
            completeness,
            passed,
        })
    }
}

type Builder = fn(&ResolvedParams) -> Result<Scenario>;

fn registry() -> Vec<(ScenarioDescriptor, Builder)> {
    vec![
        (billiard::descriptor(), billiard::build),
        (disk::descriptor(false), disk::build_unforced),
        (disk::descriptor(true), disk::build_forced),
        (particle::descriptor(), particle::build),
        (rigid_body::descriptor(), rigid_body::build),
        (bouncing::descriptor(), bouncing::build),
    ]
}

pub fn descriptors() -> Vec<ScenarioDescriptor> {
    registry().into_iter().map(|(d, _)| d).collect()
}

pub fn available() -> Vec<&'static str> {
    registry().into_iter().map(|(d, _)| d.name).collect()
}

pub fn descriptor(name: &str) -> Option<ScenarioDescriptor> {
    registry().into_iter().map(|(d, _)| d).find(|d| d.name == name)
}

/// Build a registered scenario with parameter overrides; unknown parameter
/// names are rejected.
pub fn build(name: &str, overrides: &BTreeMap<String, f64>) -> Result<Scenario> {
    let (desc, builder) = registry()
        .into_iter()
        .find(|(d, _)| d.name == name)
        .ok_or_else(|| Error::UnknownScenario {
            name: name.to_string(),
            available: available().join(", "),
        })?;
    builder(&ResolvedParams::resolve(&desc, overrides)?)
}

pub fn build_default(name: &str) -> Result<Scenario> {
    build(name, &BTreeMap::new())
}

fn branch_of(value: f64) -> Result<i8> {
    match value {
        1.0 => Ok(1),
        -1.0 => Ok(-1),
        v => Err(Error::BadParameters(format!("branch must be +1 or -1, got {v}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_names_are_unique() {
        let mut names = available();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), descriptors().len());
    }

    #[test]
    fn unknown_scenario_lists_available() {
        let err = build_default("pendulum").unwrap_err();
        match err {
            Error::UnknownScenario { available, .. } => assert!(available.contains("billiard")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_parameter_is_rejected() {
        let mut o = BTreeMap::new();
        o.insert("spin".to_string(), 1.0);
        assert!(matches!(build("billiard", &o), Err(Error::BadParameters(_))));
    }

    #[test]
    fn every_scenario_builds_with_defaults() {
        for name in available() {
            let s = build_default(name).unwrap();
            assert_eq!(s.name, name);
            assert_eq!(s.x0.dim(), s.system.model.dim());
        }
    }
}

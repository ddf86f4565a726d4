//! Ball bouncing on the floor `q = 0` under uniform gravity with restitution `e`.
//! For `e < 1` the impact times accumulate at a finite time.

use std::sync::Arc;

use super::{param, Observable, Oracle, ResolvedParams, Scenario, ScenarioDescriptor};
use crate::error::{Error, Result};
use crate::hybrid::{Direction, GuardSpec, HybridSystem, ResetMap};
use crate::phase::{DynamicsModel, MechanicalHamiltonian, PhasePoint, Potential, Vector};

pub const NAME: &str = "bouncing_ball";

pub fn descriptor() -> ScenarioDescriptor {
    ScenarioDescriptor {
        name: NAME,
        summary: "ball bouncing on a floor under gravity; impacts accumulate for e < 1",
        params: vec![
            param("gravity", 1.0, "gravitational acceleration"),
            param("e", 0.5, "coefficient of restitution"),
            param("q0", 0.5, "initial height"),
            param("p0", 0.0, "initial momentum"),
            param("horizon", 10.0, "default simulation horizon"),
        ],
    }
}

/// Exact parabolic flight between bounces.
#[derive(Debug, Clone, Copy)]
pub struct BallisticOracle {
    pub gravity: f64,
    pub e: f64,
    pub q0: f64,
    pub p0: f64,
}

impl BallisticOracle {
    /// Time of first floor contact.
    fn first_impact(&self) -> f64 {
        let (g, q, p) = (self.gravity, self.q0, self.p0);
        let disc = (p * p + 2.0 * g * q).sqrt();
        // Root of q + p t − g t²/2 = 0, written to avoid cancellation.
        if p >= 0.0 {
            (p + disc) / g
        } else {
            2.0 * q / (disc - p)
        }
    }

    /// Time at which the bounce sequence accumulates (infinite for `e = 1`).
    pub fn accumulation_time(&self) -> f64 {
        let t1 = self.first_impact();
        let v1 = self.p0 - self.gravity * t1;
        if self.e >= 1.0 {
            return f64::INFINITY;
        }
        t1 + 2.0 * self.e * v1.abs() / (self.gravity * (1.0 - self.e))
    }

    /// `(impact time, post-impact upward speed)` pairs before `horizon`.
    fn bounces(&self, horizon: f64) -> Vec<(f64, f64)> {
        let g = self.gravity;
        let mut t = self.first_impact();
        let mut v = self.e * (g * t - self.p0);
        let mut out = Vec::new();
        while t <= horizon && v > 0.0 && out.len() < 100_000 {
            out.push((t, v));
            t += 2.0 * v / g;
            v *= self.e;
        }
        out
    }
}

impl Oracle for BallisticOracle {
    fn impact_times(&self, horizon: f64) -> Vec<f64> {
        self.bounces(horizon).into_iter().map(|(t, _)| t).collect()
    }

    fn state_at(&self, t: f64) -> PhasePoint {
        let g = self.gravity;
        let (t0, q0, p0) = match self.bounces(t).last() {
            Some(&(ti, v)) => (ti, 0.0, v),
            None => (0.0, self.q0, self.p0),
        };
        if t >= self.accumulation_time() {
            return PhasePoint {
                q: Vector::from_element(1, 0.0),
                p: Vector::from_element(1, 0.0),
            };
        }
        let s = t - t0;
        PhasePoint {
            q: Vector::from_element(1, q0 + p0 * s - 0.5 * g * s * s),
            p: Vector::from_element(1, p0 - g * s),
        }
    }
}

pub fn build(params: &ResolvedParams) -> Result<Scenario> {
    let (gravity, e) = (params.get("gravity"), params.get("e"));
    let (q0, p0) = (params.get("q0"), params.get("p0"));
    if !(gravity > 0.0) {
        return Err(Error::BadParameters(format!("gravity must be positive, got {gravity}")));
    }
    if !(0.0..=1.0).contains(&e) {
        return Err(Error::BadParameters(format!("e must lie in [0, 1], got {e}")));
    }
    if !(q0 > 0.0) {
        return Err(Error::BadParameters(format!("initial height must be positive, got {q0}")));
    }
    let model = DynamicsModel::conservative(Arc::new(MechanicalHamiltonian::new(
        Vector::from_element(1, 1.0),
        Potential::Uniform {
            gradient: Vector::from_element(1, gravity),
        },
    )?));
    let guard = GuardSpec::new(0, "floor", Direction::Decreasing, |x: &PhasePoint| x.q[0]);
    let reset = ResetMap::new(move |x: &PhasePoint| x.with_momentum(-&x.p * e));
    let system = HybridSystem::new(model, vec![guard], reset);
    let x0 = PhasePoint::from_slices(&[q0], &[p0])?;
    Ok(Scenario {
        name: NAME,
        params: params.clone(),
        system,
        family: None,
        transfer: None,
        oracle: Some(Arc::new(BallisticOracle { gravity, e, q0, p0 })),
        q0: x0.q.clone(),
        params0: None,
        region0: 0,
        x0,
        horizon: params.get("horizon"),
        observables: vec![Observable {
            name: "energy",
            f: Arc::new(move |x: &PhasePoint| 0.5 * x.p[0] * x.p[0] + gravity * x.q[0]),
            hybrid_constant: e == 1.0,
        }],
        region_boxes: Vec::new(),
        impact_sampler: None,
    })
}

//! Unit-mass particle in space subject to `ż = y ẋ`, bouncing between the
//! planes `y = 0` and `y = a`.
//!
//! The family is
//! `γ = λ/√(1+y²) dx + σ√(2E − λ²) dy + λy/√(1+y²) dz` with parameters
//! `(λ, E)` and branch `σ = ±1`. Continuity of `γ_y` through the reset
//! `p_y ↦ −e p_y` requires `2E′ − λ² = e² (2E − λ²)`, i.e.
//! `E′ = e² E + (1 − e²) λ² / 2`, and flips the branch.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{branch_of, param, Observable, Oracle, RegionBox, ResolvedParams, Scenario, ScenarioDescriptor};
use crate::error::{Error, Result};
use crate::hybrid::{Direction, GuardSpec, HybridSystem, ResetMap};
use crate::phase::{ConstantMetric, ConstraintMap, DynamicsModel, Matrix, MechanicalHamiltonian, PhasePoint, Vector};
use crate::sampling;
use crate::verify::{FamilyParams, ImpactSample, RegionInfo, SolutionFamily, TransferMap};

pub const NAME: &str = "nh_particle";

pub fn descriptor() -> ScenarioDescriptor {
    ScenarioDescriptor {
        name: NAME,
        summary: "nonholonomic particle (dz = y dx) between the planes y = 0 and y = a",
        params: vec![
            param("a", 1.0, "position of the upper wall"),
            param("e", 0.8, "restitution coefficient"),
            param("lambda", 1.0, "family parameter"),
            param("E", 1.0, "family parameter: energy level (2E >= lambda^2)"),
            param("branch", 1.0, "sign of p_y on the initial segment (+1 or -1)"),
            param("x0", 0.0, "initial x"),
            param("y0", 0.5, "initial y"),
            param("z0", 0.0, "initial z"),
            param(
                "printed_energy_rule",
                0.0,
                "1 selects the energy transfer E' = e^2 E + (1 + e^2) lambda^2 / 2 instead of (1 - e^2)",
            ),
            param("horizon", 5.0, "default simulation horizon"),
        ],
    }
}

/// `μ(q) = (−y, 0, 1)`: annihilates `∂_x + y ∂_z` and `∂_y`.
#[derive(Debug, Clone, Copy)]
pub struct TiltedPlane;

impl ConstraintMap for TiltedPlane {
    fn rows(&self) -> usize {
        1
    }
    fn matrix(&self, q: &Vector) -> Matrix {
        Matrix::from_row_slice(1, 3, &[-q[1], 0.0, 1.0])
    }
    fn derivative_along(&self, _q: &Vector, v: &Vector, w: &Vector) -> Option<Vector> {
        Some(Vector::from_element(1, -v[0] * w[1]))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParticleFamily {
    pub a: f64,
}

fn root(params: &FamilyParams) -> Result<f64> {
    let (lambda, energy) = (params.values[0], params.values[1]);
    let s = 2.0 * energy - lambda * lambda;
    if s < 0.0 {
        return Err(Error::BadParameters(format!(
            "need 2E >= lambda^2, got E = {energy}, lambda = {lambda}"
        )));
    }
    Ok(s.sqrt())
}

impl SolutionFamily for ParticleFamily {
    fn dim(&self) -> usize {
        3
    }
    fn param_dim(&self) -> usize {
        2
    }
    fn regions(&self) -> Vec<RegionInfo> {
        vec![RegionInfo {
            id: 0,
            name: "between the planes".into(),
        }]
    }
    fn contains(&self, region: usize, q: &Vector) -> bool {
        region == 0 && q[1] > 0.0 && q[1] < self.a
    }
    fn gamma(&self, _region: usize, q: &Vector, params: &FamilyParams) -> Result<Vector> {
        let lambda = params.values[0];
        let s = (1.0 + q[1] * q[1]).sqrt();
        Ok(Vector::from_vec(vec![
            lambda / s,
            params.sign() * root(params)?,
            lambda * q[1] / s,
        ]))
    }
    fn jacobian_q(&self, _region: usize, q: &Vector, params: &FamilyParams) -> Option<Matrix> {
        let (lambda, y) = (params.values[0], q[1]);
        let s3 = (1.0 + y * y).powf(1.5);
        let mut j = Matrix::zeros(3, 3);
        j[(0, 1)] = -lambda * y / s3;
        j[(2, 1)] = lambda / s3;
        Some(j)
    }
    fn jacobian_params(&self, _region: usize, q: &Vector, params: &FamilyParams) -> Option<Matrix> {
        let lambda = params.values[0];
        let y = q[1];
        let s = (1.0 + y * y).sqrt();
        let r = root(params).ok()?;
        let sigma = params.sign();
        Some(Matrix::from_row_slice(
            3,
            2,
            &[1.0 / s, 0.0, -sigma * lambda / r, sigma / r, y / s, 0.0],
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyRule {
    /// `E′ = e² E + (1 − e²) λ² / 2`.
    Derived,
    /// `E′ = e² E + (1 + e²) λ² / 2`.
    Printed,
}

#[derive(Debug, Clone, Copy)]
pub struct ParticleTransfer {
    pub e: f64,
    pub rule: EnergyRule,
}

impl ParticleTransfer {
    pub fn next_energy(&self, energy: f64, lambda: f64) -> f64 {
        let e2 = self.e * self.e;
        let coeff = match self.rule {
            EnergyRule::Derived => 1.0 - e2,
            EnergyRule::Printed => 1.0 + e2,
        };
        e2 * energy + 0.5 * coeff * lambda * lambda
    }
}

impl TransferMap for ParticleTransfer {
    fn transfer(&self, _from: usize, _to: usize, _q: &Vector, params: &FamilyParams) -> Result<FamilyParams> {
        let (lambda, energy) = (params.values[0], params.values[1]);
        Ok(FamilyParams::with_branch(
            vec![lambda, self.next_energy(energy, lambda)],
            -params.branch,
        ))
    }
}

/// Closed-form hybrid trajectory: `y` moves at constant speed `A = σ√(2E − λ²)`
/// on each segment and
/// `x = (λ/A)[asinh(Aτ + y₀) − asinh(y₀)] + x₀`,
/// `z = (λ/A)[√((Aτ + y₀)² + 1) − √(y₀² + 1)] + z₀`
/// with `τ` the time since the segment started. For `A = 0` the particle
/// moves along `x` and `z` at the constant rates `λ/√(1+y₀²)` and
/// `λy₀/√(1+y₀²)`.
#[derive(Debug, Clone)]
pub struct ClosedFormOracle {
    pub a: f64,
    pub q0: Vector,
    pub params0: FamilyParams,
    pub transfer: ParticleTransfer,
}

struct Leg {
    t0: f64,
    q0: Vector,
    lambda: f64,
    speed: f64,
}

impl Leg {
    fn position(&self, t: f64) -> Vector {
        let tau = t - self.t0;
        let (lambda, a_i) = (self.lambda, self.speed);
        let (x0, y0, z0) = (self.q0[0], self.q0[1], self.q0[2]);
        if a_i == 0.0 {
            let s = (1.0 + y0 * y0).sqrt();
            return Vector::from_vec(vec![lambda * tau / s + x0, y0, lambda * y0 * tau / s + z0]);
        }
        let y = a_i * tau + y0;
        Vector::from_vec(vec![
            lambda / a_i * (y.asinh() - y0.asinh()) + x0,
            y,
            lambda / a_i * ((y * y + 1.0).sqrt() - (y0 * y0 + 1.0).sqrt()) + z0,
        ])
    }

    fn duration(&self, wall: f64) -> f64 {
        match self.speed {
            s if s > 0.0 => (wall - self.q0[1]) / s,
            s if s < 0.0 => -self.q0[1] / s,
            _ => f64::INFINITY,
        }
    }
}

impl ClosedFormOracle {
    /// Legs with the family parameters in force on each.
    fn legs(&self, horizon: f64) -> Vec<(Leg, FamilyParams)> {
        let mut params = self.params0.clone();
        let mut leg = Leg {
            t0: 0.0,
            q0: self.q0.clone(),
            lambda: params.values[0],
            speed: params.sign() * root(&params).unwrap_or(0.0),
        };
        let mut out = Vec::new();
        loop {
            let t_hit = leg.t0 + leg.duration(self.a);
            if t_hit > horizon || !t_hit.is_finite() {
                out.push((leg, params));
                return out;
            }
            let mut q_hit = leg.position(t_hit);
            // Snap onto the wall so round-off does not accumulate.
            q_hit[1] = if leg.speed > 0.0 { self.a } else { 0.0 };
            let next = self
                .transfer
                .transfer(0, 0, &q_hit, &params)
                .expect("particle transfer is total");
            let next_leg = Leg {
                t0: t_hit,
                q0: q_hit,
                lambda: next.values[0],
                speed: next.sign() * root(&next).unwrap_or(0.0),
            };
            out.push((leg, params));
            leg = next_leg;
            params = next;
        }
    }
}

impl Oracle for ClosedFormOracle {
    fn impact_times(&self, horizon: f64) -> Vec<f64> {
        self.legs(horizon).into_iter().skip(1).map(|(l, _)| l.t0).collect()
    }

    fn state_at(&self, t: f64) -> PhasePoint {
        let (leg, params) = self.legs(t).pop().expect("at least one leg");
        let q = leg.position(t);
        let p = ParticleFamily { a: self.a }
            .gamma(0, &q, &params)
            .expect("oracle parameters are admissible");
        PhasePoint { q, p }
    }
}

pub fn build(params: &ResolvedParams) -> Result<Scenario> {
    let a = params.get("a");
    let e = params.get("e");
    if !(a > 0.0) {
        return Err(Error::BadParameters(format!("wall position a must be positive, got {a}")));
    }
    if !(e > 0.0 && e <= 1.0) {
        return Err(Error::BadParameters(format!("restitution e must lie in (0, 1], got {e}")));
    }
    let rule = match params.get("printed_energy_rule") {
        0.0 => EnergyRule::Derived,
        1.0 => EnergyRule::Printed,
        v => return Err(Error::BadParameters(format!("printed_energy_rule must be 0 or 1, got {v}"))),
    };
    let model = DynamicsModel::nonholonomic(
        Arc::new(MechanicalHamiltonian::free(&[1.0, 1.0, 1.0])?),
        Arc::new(TiltedPlane),
        Arc::new(ConstantMetric(Matrix::identity(3, 3))),
    )?;
    let guards = vec![
        GuardSpec::new(0, "plane y = 0", Direction::Decreasing, |x: &PhasePoint| x.q[1]),
        GuardSpec::new(1, "plane y = a", Direction::Decreasing, move |x: &PhasePoint| a - x.q[1]),
    ];
    let reset = ResetMap::new(move |x: &PhasePoint| {
        x.with_momentum(Vector::from_vec(vec![x.p[0], -e * x.p[1], x.p[2]]))
    });
    let system = HybridSystem::new(model, guards, reset);

    let family = ParticleFamily { a };
    let transfer = ParticleTransfer { e, rule };
    let q0 = Vector::from_vec(vec![params.get("x0"), params.get("y0"), params.get("z0")]);
    if !family.contains(0, &q0) {
        return Err(Error::BadParameters(format!("initial y = {} must lie in (0, {a})", q0[1])));
    }
    let params0 = FamilyParams::with_branch(
        vec![params.get("lambda"), params.get("E")],
        branch_of(params.get("branch"))?,
    );
    let x0 = PhasePoint::new(q0.clone(), family.gamma(0, &q0, &params0)?)?;
    let margin = 1e-6 * a;
    Ok(Scenario {
        name: NAME,
        params: params.clone(),
        system,
        family: Some(Arc::new(family)),
        transfer: Some(Arc::new(transfer)),
        oracle: Some(Arc::new(ClosedFormOracle {
            a,
            q0: q0.clone(),
            params0: params0.clone(),
            transfer,
        })),
        q0,
        params0: Some(params0),
        region0: 0,
        x0,
        horizon: params.get("horizon"),
        observables: vec![
            Observable {
                name: "constraint_residual",
                f: Arc::new(|x: &PhasePoint| x.p[2] - x.q[1] * x.p[0]),
                hybrid_constant: true,
            },
            Observable {
                name: "p_x_sqrt_one_plus_y2",
                f: Arc::new(|x: &PhasePoint| x.p[0] * (1.0 + x.q[1] * x.q[1]).sqrt()),
                hybrid_constant: true,
            },
            Observable {
                name: "energy",
                f: Arc::new(|x: &PhasePoint| 0.5 * x.p.norm_squared()),
                hybrid_constant: e == 1.0,
            },
        ],
        region_boxes: vec![RegionBox {
            region: 0,
            lo: vec![-5.0, margin, -5.0],
            hi: vec![5.0, a - margin, 5.0],
        }],
        impact_sampler: Some(Arc::new(move |count| {
            sampling::halton_box(&[-5.0, 0.0, -5.0, -1.0, 0.05, 0.0], &[5.0, 1.0, 5.0, 1.0, 2.0, 1.0], count)
                .into_iter()
                .map(|s| {
                    let lambda = s[3];
                    ImpactSample {
                        q: Vector::from_vec(vec![s[0], if s[1] < 0.5 { 0.0 } else { a }, s[2]]),
                        from: 0,
                        to: 0,
                        params: FamilyParams::with_branch(
                            vec![lambda, 0.5 * lambda * lambda + s[4]],
                            if s[5] < 0.5 { 1 } else { -1 },
                        ),
                    }
                })
                .collect()
        })),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_is_preserved_and_branch_flips() {
        let t = ParticleTransfer {
            e: 0.8,
            rule: EnergyRule::Derived,
        };
        let out = t.transfer(0, 0, &Vector::zeros(3), &FamilyParams::with_branch(vec![1.0, 1.0], 1)).unwrap();
        assert_eq!(out.values[0], 1.0);
        assert_eq!(out.branch, -1);
        assert!((out.values[1] - 0.82).abs() < 1e-15);
    }

    #[test]
    fn printed_rule_differs() {
        let t = ParticleTransfer {
            e: 0.8,
            rule: EnergyRule::Printed,
        };
        assert!((t.next_energy(1.0, 1.0) - 1.46).abs() < 1e-15);
    }

    #[test]
    fn oracle_impact_times() {
        let s = super::super::build_default(NAME).unwrap();
        let times = s.oracle.unwrap().impact_times(5.0);
        let expected = [0.5, 1.75, 3.3125];
        assert_eq!(times.len(), 3);
        for (t, e) in times.iter().zip(expected) {
            assert!((t - e).abs() < 1e-14, "{t} vs {e}");
        }
    }

    #[test]
    fn degenerate_branch_moves_along_x() {
        let oracle = ClosedFormOracle {
            a: 1.0,
            q0: Vector::from_vec(vec![0.0, 0.5, 0.0]),
            params0: FamilyParams::new(vec![1.0, 0.5]),
            transfer: ParticleTransfer {
                e: 0.8,
                rule: EnergyRule::Derived,
            },
        };
        let x = oracle.state_at(2.0);
        let s = 1.25_f64.sqrt();
        assert!((x.q[0] - 2.0 / s).abs() < 1e-15);
        assert_eq!(x.q[1], 0.5);
        assert!((x.q[2] - 0.5 * 2.0 / s).abs() < 1e-15);
        assert!(oracle.impact_times(10.0).is_empty());
    }

    #[test]
    fn inadmissible_energy_is_rejected() {
        let fam = ParticleFamily { a: 1.0 };
        let err = fam.gamma(0, &Vector::from_vec(vec![0.0, 0.5, 0.0]), &FamilyParams::new(vec![2.0, 1.0]));
        assert!(matches!(err, Err(Error::BadParameters(_))));
    }

    #[test]
    fn closed_form_derivative_matches_projected_field() {
        // Central difference of the oracle position against γ at the same point.
        let s = super::super::build_default(NAME).unwrap();
        let oracle = s.oracle.unwrap();
        for &t in &[0.2, 1.0, 2.4] {
            let h = 1e-5;
            let v = (oracle.state_at(t + h).q - oracle.state_at(t - h).q) / (2.0 * h);
            let x = oracle.state_at(t);
            assert!((v - &x.p).amax() < 1e-8, "t = {t}");
        }
    }
}

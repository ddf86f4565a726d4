//! Free particle in the unit disk with specular reflection at the rim.

use std::f64::consts::TAU;
use std::sync::Arc;

use super::{param, Observable, Oracle, RegionBox, ResolvedParams, Scenario, ScenarioDescriptor};
use crate::error::Result;
use crate::hybrid::{Direction, GuardSpec, HybridSystem, ResetMap};
use crate::phase::{DynamicsModel, Matrix, MechanicalHamiltonian, PhasePoint, Vector};
use crate::sampling;
use crate::verify::{FamilyParams, ImpactSample, RegionInfo, SolutionFamily, TransferMap};

pub const NAME: &str = "billiard";

pub fn descriptor() -> ScenarioDescriptor {
    ScenarioDescriptor {
        name: NAME,
        summary: "circular billiard: free motion in the unit disk, specular reflection at the rim",
        params: vec![
            param("x0", 0.1, "initial x"),
            param("y0", -0.5, "initial y"),
            param("lambda1", 0.6, "family parameter: constant p_x"),
            param("lambda2", 0.8, "family parameter: constant p_y"),
            param("horizon", 10.0, "default simulation horizon"),
        ],
    }
}

/// `p⁺ = p⁻ − 2 q (q · p⁻)`.
pub fn reflect(q: &Vector, p: &Vector) -> Vector {
    p - q * (2.0 * q.dot(p))
}

pub fn reset() -> ResetMap {
    ResetMap::new(|x: &PhasePoint| x.with_momentum(reflect(&x.q, &x.p)))
}

/// `γ = λ₁ dx + λ₂ dy` on the open disk.
#[derive(Debug, Clone, Copy)]
pub struct ConstantCovector;

impl SolutionFamily for ConstantCovector {
    fn dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        2
    }
    fn regions(&self) -> Vec<RegionInfo> {
        vec![RegionInfo {
            id: 0,
            name: "open disk".into(),
        }]
    }
    fn contains(&self, region: usize, q: &Vector) -> bool {
        region == 0 && q.norm_squared() < 1.0
    }
    fn gamma(&self, _region: usize, _q: &Vector, params: &FamilyParams) -> Result<Vector> {
        Ok(Vector::from_column_slice(&params.values))
    }
    fn jacobian_q(&self, _region: usize, _q: &Vector, _params: &FamilyParams) -> Option<Matrix> {
        Some(Matrix::zeros(2, 2))
    }
    fn jacobian_params(&self, _region: usize, _q: &Vector, _params: &FamilyParams) -> Option<Matrix> {
        Some(Matrix::identity(2, 2))
    }
}

/// Reflection of `(λ₁, λ₂)` at the impact point.
#[derive(Debug, Clone, Copy)]
pub struct Reflection;

impl TransferMap for Reflection {
    fn transfer(&self, _from: usize, _to: usize, q: &Vector, params: &FamilyParams) -> Result<FamilyParams> {
        let lam = Vector::from_column_slice(&params.values);
        Ok(FamilyParams::new(reflect(q, &lam).iter().copied().collect()))
    }
}

/// Exact piecewise-linear reflective billiard.
#[derive(Debug, Clone)]
pub struct ReflectionOracle {
    pub x0: PhasePoint,
}

impl ReflectionOracle {
    /// Time until `|q + p s| = 1` from inside the disk.
    fn flight_time(x: &PhasePoint) -> f64 {
        let (qp, pp, qq) = (x.q.dot(&x.p), x.p.norm_squared(), x.q.norm_squared());
        let disc = (qp * qp + pp * (1.0 - qq)).max(0.0).sqrt();
        // Stable root selection: whichever form avoids cancellation.
        if qp <= 0.0 {
            (disc - qp) / pp
        } else {
            (1.0 - qq) / (qp + disc)
        }
    }

    /// `(impact time, post-impact state)` pairs up to `horizon`.
    fn walk(&self, horizon: f64) -> Vec<(f64, PhasePoint)> {
        let mut out = vec![(0.0, self.x0.clone())];
        let (mut t, mut x) = (0.0, self.x0.clone());
        if x.p.norm_squared() == 0.0 {
            return out;
        }
        loop {
            let dt = Self::flight_time(&x);
            if t + dt > horizon {
                return out;
            }
            t += dt;
            let q = &x.q + &x.p * dt;
            // Project onto the rim to stop round-off drift across bounces.
            let q = &q / q.norm();
            let p = reflect(&q, &x.p);
            x = PhasePoint { q, p };
            out.push((t, x.clone()));
        }
    }
}

impl Oracle for ReflectionOracle {
    fn impact_times(&self, horizon: f64) -> Vec<f64> {
        self.walk(horizon).into_iter().skip(1).map(|(t, _)| t).collect()
    }

    fn state_at(&self, t: f64) -> PhasePoint {
        let walk = self.walk(t);
        let (t0, x) = walk.last().expect("walk starts at t = 0");
        PhasePoint {
            q: &x.q + &x.p * (t - t0),
            p: x.p.clone(),
        }
    }
}

pub fn build(params: &ResolvedParams) -> Result<Scenario> {
    let model = DynamicsModel::conservative(Arc::new(MechanicalHamiltonian::free(&[1.0, 1.0])?));
    let guard = GuardSpec::new(0, "rim", Direction::Decreasing, |x: &PhasePoint| 1.0 - x.q.norm_squared());
    let system = HybridSystem::new(model, vec![guard], reset());
    let q0 = Vector::from_vec(vec![params.get("x0"), params.get("y0")]);
    let params0 = FamilyParams::new(vec![params.get("lambda1"), params.get("lambda2")]);
    if q0.norm_squared() >= 1.0 {
        return Err(crate::Error::BadParameters(format!(
            "initial point must lie inside the unit disk, got {:?}",
            q0.as_slice()
        )));
    }
    let x0 = PhasePoint::new(q0.clone(), ConstantCovector.gamma(0, &q0, &params0)?)?;
    let observables = vec![
        Observable {
            name: "energy",
            f: Arc::new(|x: &PhasePoint| 0.5 * x.p.norm_squared()),
            hybrid_constant: true,
        },
        Observable {
            name: "angular_momentum",
            f: Arc::new(|x: &PhasePoint| x.q[0] * x.p[1] - x.q[1] * x.p[0]),
            hybrid_constant: true,
        },
        Observable {
            name: "p_x",
            f: Arc::new(|x: &PhasePoint| x.p[0]),
            hybrid_constant: false,
        },
        Observable {
            name: "p_y",
            f: Arc::new(|x: &PhasePoint| x.p[1]),
            hybrid_constant: false,
        },
    ];
    let half = std::f64::consts::FRAC_1_SQRT_2 - 1e-3;
    Ok(Scenario {
        name: NAME,
        params: params.clone(),
        system,
        family: Some(Arc::new(ConstantCovector)),
        transfer: Some(Arc::new(Reflection)),
        oracle: Some(Arc::new(ReflectionOracle { x0: x0.clone() })),
        q0,
        params0: Some(params0),
        region0: 0,
        x0,
        horizon: params.get("horizon"),
        observables,
        region_boxes: vec![RegionBox {
            region: 0,
            lo: vec![-half, -half],
            hi: vec![half, half],
        }],
        impact_sampler: Some(Arc::new(|count| {
            sampling::halton_box(&[0.0, -2.0, -2.0], &[TAU, 2.0, 2.0], count)
                .into_iter()
                .map(|s| ImpactSample {
                    q: Vector::from_vec(vec![s[0].cos(), s[0].sin()]),
                    from: 0,
                    to: 0,
                    params: FamilyParams::new(vec![s[1], s[2]]),
                })
                .collect()
        })),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(a: f64, b: f64) -> Vector {
        Vector::from_vec(vec![a, b])
    }

    #[test]
    fn normal_incidence_reverses_momentum() {
        assert_eq!(reflect(&v(1.0, 0.0), &v(1.0, 0.0)), v(-1.0, 0.0));
    }

    #[test]
    fn tangential_momentum_is_unchanged() {
        assert_eq!(reflect(&v(1.0, 0.0), &v(0.0, 1.0)), v(0.0, 1.0));
    }

    #[test]
    fn radial_incidence_on_diagonal() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let p = reflect(&v(s, s), &v(1.0, 1.0));
        assert!((p - v(-1.0, -1.0)).amax() < 1e-15);
    }

    #[test]
    fn oracle_flight_from_center() {
        let oracle = ReflectionOracle {
            x0: PhasePoint::from_slices(&[0.0, 0.0], &[1.0, 0.0]).unwrap(),
        };
        assert_eq!(oracle.impact_times(3.5), vec![1.0, 3.0]);
        let x = oracle.state_at(1.5);
        assert!((x.q[0] - 0.5).abs() < 1e-15 && x.p[0] == -1.0);
    }

    #[test]
    fn transfer_reproduces_reset_formula() {
        let q = v(0.6, 0.8);
        let out = Reflection.transfer(0, 0, &q, &FamilyParams::new(vec![0.3, -0.2])).unwrap();
        let (a, b) = (0.3, -0.2);
        let dot = 0.6 * a + 0.8 * b;
        assert_eq!(out.values, vec![a - 2.0 * 0.6 * dot, b - 2.0 * 0.8 * dot]);
    }
}

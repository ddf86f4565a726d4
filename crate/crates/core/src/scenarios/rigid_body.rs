//! Rigid body on SO(3) with principal inertia `I = diag(I₁, I₂, I₃)` and the
//! left-invariant constraint `⟨μ, ξ⟩ = 0` on body angular velocity.
//!
//! Configuration uses Euler angles `(α, β, φ)` with `R = R_z(φ) R_y(β) R_x(α)`;
//! momenta are body-frame `η`. The energy `½ Σ η_i² / I_i` does not depend on
//! the configuration and the constraint multiplier vanishes, so `η` is
//! constant between impacts while the angles follow the kinematic map.
//!
//! The family is constant on the group:
//! `γ = λ₁ e¹ + I₂(μ₃λ₂ − μ₁μ₂λ₁/I₁)/S e² + I₃(−μ₂λ₂ − μ₁μ₃λ₁/I₁)/S e³`
//! with `S = μ₂² + μ₃²`, which satisfies `Σ μ_i γ_i / I_i = 0` identically.
//! The variant with `+μ₂λ₂` in the last component is available for comparison;
//! it does not lie in the constraint set unless `μ₂μ₃λ₂ = 0`.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{param, Observable, RegionBox, ResolvedParams, Scenario, ScenarioDescriptor};
use crate::error::{Error, Result};
use crate::hybrid::{Direction, GuardSpec, HybridSystem, ResetMap};
use crate::phase::{
    ChartKinematics, ConstantConstraint, ConstantMetric, DynamicsModel, Matrix, MechanicalHamiltonian, PhasePoint,
    Vector,
};
use crate::sampling;
use crate::verify::{FamilyParams, ImpactSample, RegionInfo, SolutionFamily, TransferMap};

pub const NAME: &str = "rigid_body";

/// Smallest allowed distance of `β` from `±π/2`.
pub const CHART_MARGIN: f64 = 1e-3;

/// Structural tolerance for the solvability conditions of the transfer.
const SOLVABILITY_TOL: f64 = 1e-12;

pub fn descriptor() -> ScenarioDescriptor {
    ScenarioDescriptor {
        name: NAME,
        summary: "constrained rigid body on SO(3) in Euler angles, impact at alpha = 0 scaling eta_1",
        params: vec![
            param("I1", 1.0, "principal moment of inertia"),
            param("I2", 2.0, "principal moment of inertia"),
            param("I3", 3.0, "principal moment of inertia"),
            param("mu1", 1.0, "constraint covector component"),
            param("mu2", 1.0, "constraint covector component"),
            param("mu3", 1.0, "constraint covector component"),
            param("eps", 0.9, "impact scaling of eta_1"),
            param("lambda1", -1.0, "family parameter: eta_1"),
            param("lambda2", -1.0, "family parameter (signed)"),
            param("alpha0", 0.5, "initial alpha"),
            param("beta0", 0.0, "initial beta"),
            param("phi0", 0.0, "initial phi"),
            param(
                "printed_family",
                0.0,
                "1 selects the variant with +mu2*lambda2 in the third component",
            ),
            param("horizon", 3.0, "default simulation horizon"),
        ],
    }
}

/// Euler-angle kinematics: body angular velocity to `(α̇, β̇, φ̇)`.
#[derive(Debug, Clone, Copy)]
pub struct EulerKinematics;

impl EulerKinematics {
    pub fn check_chart(beta: f64) -> Result<()> {
        if beta.cos().abs() <= CHART_MARGIN.sin() {
            return Err(Error::ChartSingularity {
                beta,
                margin: CHART_MARGIN,
            });
        }
        Ok(())
    }
}

impl ChartKinematics for EulerKinematics {
    fn velocity_map(&self, q: &Vector) -> Result<Matrix> {
        let (alpha, beta) = (q[0], q[1]);
        Self::check_chart(beta)?;
        let (sa, ca) = alpha.sin_cos();
        let (tb, cb) = (beta.tan(), beta.cos());
        Ok(Matrix::from_row_slice(
            3,
            3,
            &[1.0, sa * tb, ca * tb, 0.0, ca, -sa, 0.0, sa / cb, ca / cb],
        ))
    }
}

/// Body angular velocity of the chart path: inverse of [`EulerKinematics`].
pub fn body_velocity(q: &Vector, qdot: &Vector) -> Vector {
    let (sa, ca) = q[0].sin_cos();
    let (sb, cb) = q[1].sin_cos();
    let (ad, bd, fd) = (qdot[0], qdot[1], qdot[2]);
    Vector::from_vec(vec![
        ad - sb * fd,
        ca * bd + sa * cb * fd,
        -sa * bd + ca * cb * fd,
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub inertia: [f64; 3],
    pub mu: [f64; 3],
    pub eps: f64,
}

impl BodyParams {
    fn s(&self) -> f64 {
        self.mu[1] * self.mu[1] + self.mu[2] * self.mu[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyVariant {
    /// `−μ₂λ₂` in the third component; lies in the constraint set.
    Corrected,
    /// `+μ₂λ₂` in the third component.
    Printed,
}

#[derive(Debug, Clone, Copy)]
pub struct BodyFamily {
    pub body: BodyParams,
    pub variant: FamilyVariant,
}

impl BodyFamily {
    fn third_sign(&self) -> f64 {
        match self.variant {
            FamilyVariant::Corrected => -1.0,
            FamilyVariant::Printed => 1.0,
        }
    }

    /// `∂γ/∂λ`; the family is linear in `λ`.
    fn linear_map(&self) -> Matrix {
        let [i1, i2, i3] = self.body.inertia;
        let [m1, m2, m3] = self.body.mu;
        let s = self.body.s();
        Matrix::from_row_slice(
            3,
            2,
            &[
                1.0,
                0.0,
                -i2 * m1 * m2 / (i1 * s),
                i2 * m3 / s,
                -i3 * m1 * m3 / (i1 * s),
                self.third_sign() * i3 * m2 / s,
            ],
        )
    }
}

impl SolutionFamily for BodyFamily {
    fn dim(&self) -> usize {
        3
    }
    fn param_dim(&self) -> usize {
        2
    }
    fn regions(&self) -> Vec<RegionInfo> {
        vec![
            RegionInfo {
                id: 0,
                name: "alpha > 0".into(),
            },
            RegionInfo {
                id: 1,
                name: "alpha < 0".into(),
            },
        ]
    }
    fn contains(&self, region: usize, q: &Vector) -> bool {
        match region {
            0 => q[0] > 0.0,
            1 => q[0] < 0.0,
            _ => false,
        }
    }
    fn gamma(&self, _region: usize, _q: &Vector, params: &FamilyParams) -> Result<Vector> {
        Ok(self.linear_map() * Vector::from_column_slice(&params.values))
    }
    fn jacobian_q(&self, _region: usize, _q: &Vector, _params: &FamilyParams) -> Option<Matrix> {
        Some(Matrix::zeros(3, 3))
    }
    fn jacobian_params(&self, _region: usize, _q: &Vector, _params: &FamilyParams) -> Option<Matrix> {
        Some(self.linear_map())
    }
}

/// `λ₁′ = ελ₁`, with `λ₂′` fixed by the two remaining components of the
/// reset, which leave `η₂` and `η₃` unchanged. Those two equations agree only
/// under a solvability condition that depends on the family variant.
#[derive(Debug, Clone, Copy)]
pub struct BodyTransfer {
    pub family: BodyFamily,
}

impl BodyTransfer {
    /// Defect of the solvability condition; zero when the transfer exists.
    pub fn solvability_defect(&self) -> f64 {
        let b = self.family.body;
        let [_, m2, m3] = b.mu;
        let base = (b.eps - 1.0) * b.mu[0];
        match self.family.variant {
            FamilyVariant::Corrected => base.abs(),
            FamilyVariant::Printed => (base * (m2 * m2 - m3 * m3)).abs(),
        }
    }
}

impl TransferMap for BodyTransfer {
    fn transfer(&self, from: usize, to: usize, _q: &Vector, params: &FamilyParams) -> Result<FamilyParams> {
        let defect = self.solvability_defect();
        if defect > SOLVABILITY_TOL {
            let b = self.family.body;
            return Err(Error::TransferUndefined {
                from,
                to,
                reason: format!(
                    "eta_2 and eta_3 continuity give inconsistent lambda_2 (mu = {:?}, eps = {}, defect {defect:e})",
                    b.mu, b.eps
                ),
            });
        }
        let lin = self.family.linear_map();
        let target = lin.clone() * Vector::from_column_slice(&params.values);
        let lambda1 = self.family.body.eps * params.values[0];
        // Least squares over the η₂, η₃ rows; both equations agree here.
        let (a2, a3) = (lin[(1, 1)], lin[(2, 1)]);
        let r2 = target[1] - lin[(1, 0)] * lambda1;
        let r3 = target[2] - lin[(2, 0)] * lambda1;
        let lambda2 = (a2 * r2 + a3 * r3) / (a2 * a2 + a3 * a3);
        Ok(FamilyParams::new(vec![lambda1, lambda2]))
    }
}

pub fn build(params: &ResolvedParams) -> Result<Scenario> {
    let body = BodyParams {
        inertia: [params.get("I1"), params.get("I2"), params.get("I3")],
        mu: [params.get("mu1"), params.get("mu2"), params.get("mu3")],
        eps: params.get("eps"),
    };
    if body.inertia.iter().any(|&i| !(i > 0.0)) {
        return Err(Error::BadParameters(format!(
            "principal moments must be positive, got {:?}",
            body.inertia
        )));
    }
    if body.s() == 0.0 {
        return Err(Error::BadParameters("mu2 and mu3 cannot both vanish".into()));
    }
    let variant = match params.get("printed_family") {
        0.0 => FamilyVariant::Corrected,
        1.0 => FamilyVariant::Printed,
        v => return Err(Error::BadParameters(format!("printed_family must be 0 or 1, got {v}"))),
    };
    let [i1, i2, i3] = body.inertia;
    let model = DynamicsModel::nonholonomic(
        Arc::new(MechanicalHamiltonian::free(&[1.0 / i1, 1.0 / i2, 1.0 / i3])?),
        Arc::new(ConstantConstraint {
            matrix: Matrix::from_row_slice(1, 3, &body.mu),
        }),
        Arc::new(ConstantMetric(Matrix::from_diagonal(&Vector::from_column_slice(&body.inertia)))),
    )?
    .with_kinematics(Arc::new(EulerKinematics))
    .with_angle_coords(vec![0, 1, 2]);
    let eps = body.eps;
    let guard = GuardSpec::new(0, "alpha = 0", Direction::Decreasing, |x: &PhasePoint| x.q[0]);
    let reset = ResetMap::new(move |x: &PhasePoint| {
        let mut p = x.p.clone();
        p[0] *= eps;
        x.with_momentum(p)
    });
    let system = HybridSystem::new(model, vec![guard], reset);

    let family = BodyFamily { body, variant };
    let q0 = Vector::from_vec(vec![params.get("alpha0"), params.get("beta0"), params.get("phi0")]);
    EulerKinematics::check_chart(q0[1])?;
    let region0 = match q0[0] {
        a if a > 0.0 => 0,
        a if a < 0.0 => 1,
        _ => return Err(Error::BadParameters("initial alpha must be nonzero".into())),
    };
    let params0 = FamilyParams::new(vec![params.get("lambda1"), params.get("lambda2")]);
    let x0 = PhasePoint::new(q0.clone(), family.gamma(region0, &q0, &params0)?)?;

    let observables = (0..3)
        .map(|i| Observable {
            name: ["eta_1", "eta_2", "eta_3"][i],
            f: Arc::new(move |x: &PhasePoint| x.p[i]),
            hybrid_constant: i > 0 || eps == 1.0,
        })
        .collect();
    let beta_box = 1.2;
    Ok(Scenario {
        name: NAME,
        params: params.clone(),
        system,
        family: Some(Arc::new(family)),
        transfer: Some(Arc::new(BodyTransfer { family })),
        oracle: None,
        q0,
        params0: Some(params0),
        region0,
        x0,
        horizon: params.get("horizon"),
        observables,
        region_boxes: vec![
            RegionBox {
                region: 0,
                lo: vec![1e-6, -beta_box, -PI],
                hi: vec![PI, beta_box, PI],
            },
            RegionBox {
                region: 1,
                lo: vec![-PI, -beta_box, -PI],
                hi: vec![-1e-6, beta_box, PI],
            },
        ],
        impact_sampler: Some(Arc::new(move |count| {
            sampling::halton_box(&[-beta_box, -PI, -2.0, -2.0], &[beta_box, PI, 2.0, 2.0], count)
                .into_iter()
                .map(|s| ImpactSample {
                    q: Vector::from_vec(vec![0.0, s[0], s[1]]),
                    from: 0,
                    to: 1,
                    params: FamilyParams::new(vec![s[2], s[3]]),
                })
                .collect()
        })),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body(mu: [f64; 3], eps: f64) -> BodyParams {
        BodyParams {
            inertia: [1.0, 2.0, 3.0],
            mu,
            eps,
        }
    }

    #[test]
    fn corrected_family_satisfies_membership() {
        let b = body([0.3, -1.2, 0.7], 0.5);
        let fam = BodyFamily {
            body: b,
            variant: FamilyVariant::Corrected,
        };
        let g = fam.gamma(0, &Vector::zeros(3), &FamilyParams::new(vec![0.9, -1.7])).unwrap();
        let m: f64 = (0..3).map(|i| b.mu[i] * g[i] / b.inertia[i]).sum();
        assert!(m.abs() < 1e-15);
    }

    #[test]
    fn printed_family_misses_membership() {
        let b = body([1.0, 1.0, 1.0], 0.5);
        let fam = BodyFamily {
            body: b,
            variant: FamilyVariant::Printed,
        };
        let g = fam.gamma(0, &Vector::zeros(3), &FamilyParams::new(vec![1.0, 1.0])).unwrap();
        let m: f64 = (0..3).map(|i| b.mu[i] * g[i] / b.inertia[i]).sum();
        // 2 μ₂ μ₃ λ₂ / S = 1.
        assert!((m - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_reset_gives_identity_transfer() {
        let fam = BodyFamily {
            body: body([1.0, 1.0, 2.0], 1.0),
            variant: FamilyVariant::Corrected,
        };
        let p = FamilyParams::new(vec![0.4, -0.3]);
        let out = BodyTransfer { family: fam }.transfer(0, 1, &Vector::zeros(3), &p).unwrap();
        assert!((out.values[0] - 0.4).abs() < 1e-15 && (out.values[1] + 0.3).abs() < 1e-15);
    }

    #[test]
    fn inconsistent_transfer_is_undefined() {
        for variant in [FamilyVariant::Corrected, FamilyVariant::Printed] {
            let fam = BodyFamily {
                body: body([1.0, 1.0, 2.0], 2.0),
                variant,
            };
            let err = BodyTransfer { family: fam }.transfer(0, 1, &Vector::zeros(3), &FamilyParams::new(vec![1.0, 1.0]));
            assert!(matches!(err, Err(Error::TransferUndefined { .. })));
        }
    }

    #[test]
    fn printed_variant_transfer_with_equal_mu23() {
        // λ₂⁺ = λ₂ + (ε − 1) μ₁ / I₁ · λ₁ when μ₃ = μ₂.
        let fam = BodyFamily {
            body: body([0.7, 1.3, 1.3], 0.6),
            variant: FamilyVariant::Printed,
        };
        let out = BodyTransfer { family: fam }
            .transfer(0, 1, &Vector::zeros(3), &FamilyParams::new(vec![0.5, 0.2]))
            .unwrap();
        assert!((out.values[0] - 0.3).abs() < 1e-15);
        assert!((out.values[1] - (0.2 + (0.6 - 1.0) * 0.7 * 0.5)).abs() < 1e-14);
    }

    #[test]
    fn kinematics_inverts_body_velocity() {
        let q = Vector::from_vec(vec![0.3, -0.4, 1.1]);
        let omega = Vector::from_vec(vec![0.2, -1.0, 0.5]);
        let qdot = EulerKinematics.velocity_map(&q).unwrap() * &omega;
        assert!((body_velocity(&q, &qdot) - omega).amax() < 1e-14);
    }

    #[test]
    fn chart_singularity_is_reported() {
        let q = Vector::from_vec(vec![0.0, std::f64::consts::FRAC_PI_2 - 1e-4, 0.0]);
        assert!(matches!(EulerKinematics.velocity_map(&q), Err(Error::ChartSingularity { .. })));
    }
}

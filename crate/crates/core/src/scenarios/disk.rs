//! Vertical disk rolling on a plane strip between two walls, optionally with
//! a linear drag `F = B p_y dy` across the strip.
//!
//! Coordinates are `(x, y, θ)`. The walls sit where the rim touches them:
//! `y = R` and `y = h − R` with `h = αR`. A crossing is an impact only when the
//! rolling condition `p_x = R p_θ / k²` holds.
//!
//! The family is `γ = a dx + (b + s y) dy + c dθ` with slope `s = −B m`. The
//! transfer at an impact point `y*` keeps `γ_y` continuous up to the
//! restitution factor: `b′ + s y* = −e (b + s y*)`.

use std::f64::consts::PI;
use std::sync::Arc;

use super::{param, Observable, RegionBox, ResolvedParams, Scenario, ScenarioDescriptor};
use crate::error::{Error, Result};
use crate::hybrid::{Direction, GuardSpec, HybridSystem, ResetMap};
use crate::phase::{DynamicsModel, LinearDamping, Matrix, MechanicalHamiltonian, PhasePoint, Vector};
use crate::sampling;
use crate::verify::{FamilyParams, ImpactSample, RegionInfo, SolutionFamily, TransferMap};

pub const NAME: &str = "rolling_disk";
pub const FORCED_NAME: &str = "rolling_disk_forced";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiskParams {
    pub m: f64,
    pub k: f64,
    pub r: f64,
    pub alpha: f64,
    pub e: f64,
    pub b_drag: f64,
}

impl DiskParams {
    pub fn h(&self) -> f64 {
        self.alpha * self.r
    }

    pub fn low_wall(&self) -> f64 {
        self.r
    }

    pub fn high_wall(&self) -> f64 {
        self.h() - self.r
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) {
            return Err(Error::BadParameters(format!("alpha must exceed 1, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.e) {
            return Err(Error::BadParameters(format!("restitution e must lie in [0, 1], got {}", self.e)));
        }
        if !(self.m > 0.0 && self.k > 0.0 && self.r > 0.0) {
            return Err(Error::BadParameters("m, k, and R must be positive".into()));
        }
        if self.alpha <= 2.0 {
            return Err(Error::BadParameters(format!(
                "alpha = {} leaves no room between the walls (need alpha > 2)",
                self.alpha
            )));
        }
        Ok(())
    }
}

pub fn descriptor(forced: bool) -> ScenarioDescriptor {
    let mut params = vec![
        param("m", 1.0, "mass"),
        param("k", 1.0, "radius of gyration"),
        param("R", 1.0, "disk radius"),
        param("alpha", 3.0, "strip width h as a multiple of R"),
        param("e", 0.8, "restitution coefficient across the strip"),
        param("a", 1.0, "family parameter: p_x"),
        param("b", 1.0, "family parameter: offset of p_y"),
        param("c", 1.0, "family parameter: p_theta"),
        param("x0", 0.0, "initial x"),
        param("y0", 1.5, "initial y"),
        param("theta0", 0.0, "initial rolling angle"),
        param("horizon", 10.0, "default simulation horizon"),
    ];
    if forced {
        params.push(param("B", 0.1, "drag coefficient in F = B p_y dy"));
        params.push(param(
            "slope_perturbation",
            0.0,
            "added to the family's dy slope; nonzero values break the HJ equation",
        ));
    }
    ScenarioDescriptor {
        name: if forced { FORCED_NAME } else { NAME },
        summary: if forced {
            "rolling disk between two walls with linear drag across the strip"
        } else {
            "rolling disk between two walls"
        },
        params,
    }
}

/// Impact map on `(p_x, p_y, p_θ)`.
pub fn reset_momentum(dp: &DiskParams, p: &Vector) -> Vector {
    let (k2, r) = (dp.k * dp.k, dp.r);
    let den = k2 + r * r;
    Vector::from_vec(vec![
        (r * r * p[0] + k2 * r * p[2]) / den,
        -dp.e * p[1],
        (r * p[0] + k2 * p[2]) / den,
    ])
}

#[derive(Debug, Clone, Copy)]
pub struct DiskFamily {
    pub params: DiskParams,
    /// Coefficient `s` of `y` in `γ_y`.
    pub slope: f64,
}

impl SolutionFamily for DiskFamily {
    fn dim(&self) -> usize {
        3
    }
    fn param_dim(&self) -> usize {
        3
    }
    fn regions(&self) -> Vec<RegionInfo> {
        vec![RegionInfo {
            id: 0,
            name: "between the walls".into(),
        }]
    }
    fn contains(&self, region: usize, q: &Vector) -> bool {
        region == 0 && q[1] > self.params.low_wall() && q[1] < self.params.high_wall()
    }
    fn gamma(&self, _region: usize, q: &Vector, params: &FamilyParams) -> Result<Vector> {
        let v = &params.values;
        Ok(Vector::from_vec(vec![v[0], v[1] + self.slope * q[1], v[2]]))
    }
    fn jacobian_q(&self, _region: usize, _q: &Vector, _params: &FamilyParams) -> Option<Matrix> {
        let mut j = Matrix::zeros(3, 3);
        j[(1, 1)] = self.slope;
        Some(j)
    }
    fn jacobian_params(&self, _region: usize, _q: &Vector, _params: &FamilyParams) -> Option<Matrix> {
        Some(Matrix::identity(3, 3))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DiskTransfer {
    pub params: DiskParams,
    pub slope: f64,
}

impl TransferMap for DiskTransfer {
    fn transfer(&self, _from: usize, _to: usize, q: &Vector, params: &FamilyParams) -> Result<FamilyParams> {
        let v = &params.values;
        let ac = reset_momentum(&self.params, &Vector::from_vec(vec![v[0], 0.0, v[2]]));
        let (e, s, y) = (self.params.e, self.slope, q[1]);
        let b = -e * v[1] - (1.0 + e) * s * y;
        Ok(FamilyParams::new(vec![ac[0], b, ac[2]]))
    }
}

fn build_with(params: &ResolvedParams, forced: bool) -> Result<Scenario> {
    let dp = DiskParams {
        m: params.get("m"),
        k: params.get("k"),
        r: params.get("R"),
        alpha: params.get("alpha"),
        e: params.get("e"),
        b_drag: if forced { params.get("B") } else { 0.0 },
    };
    dp.validate()?;
    let (m, k, r) = (dp.m, dp.k, dp.r);
    let hamiltonian = Arc::new(MechanicalHamiltonian::free(&[1.0 / m, 1.0 / m, 1.0 / (m * k * k)])?);
    let model = if forced {
        DynamicsModel::forced(
            hamiltonian,
            Arc::new(LinearDamping {
                coefficients: Vector::from_vec(vec![0.0, dp.b_drag, 0.0]),
            }),
        )
    } else {
        DynamicsModel::conservative(hamiltonian)
    }
    .with_angle_coords(vec![2]);

    let rolling = move |x: &PhasePoint| (x.p[0] - r * x.p[2] / (k * k)).abs();
    let (low, high) = (dp.low_wall(), dp.high_wall());
    let guards = vec![
        GuardSpec::new(0, "wall y = R", Direction::Decreasing, move |x: &PhasePoint| x.q[1] - low)
            .with_admissibility(rolling),
        GuardSpec::new(1, "wall y = h - R", Direction::Decreasing, move |x: &PhasePoint| high - x.q[1])
            .with_admissibility(rolling),
    ];
    let reset = ResetMap::new(move |x: &PhasePoint| x.with_momentum(reset_momentum(&dp, &x.p)));
    let system = HybridSystem::new(model, guards, reset);

    let perturbation = if forced { params.get("slope_perturbation") } else { 0.0 };
    let slope = -dp.b_drag * m + perturbation;
    let family = DiskFamily { params: dp, slope };
    let q0 = Vector::from_vec(vec![params.get("x0"), params.get("y0"), params.get("theta0")]);
    if !family.contains(0, &q0) {
        return Err(Error::BadParameters(format!(
            "initial y = {} must lie strictly between the walls {low} and {high}",
            q0[1]
        )));
    }
    let params0 = FamilyParams::new(vec![params.get("a"), params.get("b"), params.get("c")]);
    let x0 = PhasePoint::new(q0.clone(), family.gamma(0, &q0, &params0)?)?;

    let energy = Observable {
        name: "energy",
        f: Arc::new(move |x: &PhasePoint| {
            (x.p[0] * x.p[0] + x.p[1] * x.p[1]) / (2.0 * m) + x.p[2] * x.p[2] / (2.0 * m * k * k)
        }),
        hybrid_constant: !forced && dp.e == 1.0 && k == r,
    };
    let margin = 1e-6 * (high - low);
    Ok(Scenario {
        name: if forced { FORCED_NAME } else { NAME },
        params: params.clone(),
        system,
        family: Some(Arc::new(family)),
        transfer: Some(Arc::new(DiskTransfer { params: dp, slope })),
        oracle: None,
        q0,
        params0: Some(params0),
        region0: 0,
        x0,
        horizon: params.get("horizon"),
        observables: vec![energy],
        region_boxes: vec![RegionBox {
            region: 0,
            lo: vec![-5.0, low + margin, -PI],
            hi: vec![5.0, high - margin, PI],
        }],
        impact_sampler: Some(Arc::new(move |count| {
            sampling::halton_box(&[-5.0, 0.0, -PI, -2.0, -2.0, -2.0], &[5.0, 1.0, PI, 2.0, 2.0, 2.0], count)
                .into_iter()
                .map(|s| ImpactSample {
                    q: Vector::from_vec(vec![s[0], if s[1] < 0.5 { low } else { high }, s[2]]),
                    from: 0,
                    to: 0,
                    params: FamilyParams::new(vec![s[3], s[4], s[5]]),
                })
                .collect()
        })),
    })
}

pub fn build_unforced(params: &ResolvedParams) -> Result<Scenario> {
    build_with(params, false)
}

pub fn build_forced(params: &ResolvedParams) -> Result<Scenario> {
    build_with(params, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn unit(e: f64) -> DiskParams {
        DiskParams {
            m: 1.0,
            k: 1.0,
            r: 1.0,
            alpha: 3.0,
            e,
            b_drag: 0.1,
        }
    }

    #[test]
    fn averaging_map_fixed_point() {
        let t = DiskTransfer { params: unit(0.8), slope: 0.0 };
        let out = t.transfer(0, 0, &Vector::from_vec(vec![0.0, 1.0, 0.0]), &FamilyParams::new(vec![1.0, 0.3, 1.0])).unwrap();
        assert_eq!(out.values[0], 1.0);
        assert_eq!(out.values[2], 1.0);
    }

    #[test]
    fn elastic_unforced_flips_b() {
        let t = DiskTransfer { params: unit(1.0), slope: 0.0 };
        let out = t.transfer(0, 0, &Vector::from_vec(vec![0.0, 1.0, 0.0]), &FamilyParams::new(vec![1.0, 0.7, 1.0])).unwrap();
        assert_eq!(out.values[1], -0.7);
    }

    #[test]
    fn transfer_with_printed_slope_reproduces_two_case_formula() {
        // With γ_y = B m y + b the transfer evaluated at the walls y = 0 and
        // y = h gives −e b and −(e + 1) B m h − e b.
        let dp = unit(0.8);
        let (bm, h, b) = (dp.b_drag * dp.m, dp.h(), 0.37);
        let t = DiskTransfer { params: dp, slope: bm };
        let at = |y: f64| t.transfer(0, 0, &Vector::from_vec(vec![0.0, y, 0.0]), &FamilyParams::new(vec![1.0, b, 1.0])).unwrap().values[1];
        assert!((at(0.0) - (-dp.e * b)).abs() < 1e-15);
        assert!((at(h) - (-(dp.e + 1.0) * bm * h - dp.e * b)).abs() < 1e-15);
    }

    #[test]
    fn bad_parameters_are_rejected() {
        for (key, value) in [("alpha", 0.5), ("e", 1.5), ("e", -0.1)] {
            let mut o = BTreeMap::new();
            o.insert(key.to_string(), value);
            assert!(matches!(super::super::build(NAME, &o), Err(Error::BadParameters(_))), "{key} = {value}");
        }
    }

    #[test]
    fn forced_family_slope_is_negative_drag() {
        let s = super::super::build_default(FORCED_NAME).unwrap();
        let fam = s.family.as_ref().unwrap();
        let g = fam.gamma(0, &Vector::from_vec(vec![0.0, 2.0, 0.0]), &FamilyParams::new(vec![1.0, 1.0, 1.0])).unwrap();
        assert!((g[1] - (1.0 - 0.1 * 2.0)).abs() < 1e-15);
    }
}

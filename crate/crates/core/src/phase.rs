//! Phase-space data model and the three vector fields (conservative, forced,
//! nonholonomic) in Darboux coordinates `(q, p)`.
//!
//! Hamilton's equations are hard-coded in the evaluators; the symplectic form
//! is never materialized. A model may carry a chart kinematic map `K(q)` so
//! that `q̇ = K(q) ∂H/∂p`; it is the identity unless a scenario supplies one
//! (the rigid body uses it to turn body angular velocity into Euler-angle
//! rates).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// A point `(q, p)` of the cotangent bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub q: Vector,
    pub p: Vector,
}

impl PhasePoint {
    pub fn new(q: Vector, p: Vector) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::InvalidArgument("configuration dimension must be >= 1".into()));
        }
        if q.len() != p.len() {
            return Err(Error::DimensionMismatch {
                expected: q.len(),
                got: p.len(),
                context: "momentum vs configuration",
            });
        }
        Ok(Self { q, p })
    }

    pub fn from_slices(q: &[f64], p: &[f64]) -> Result<Self> {
        Self::new(Vector::from_column_slice(q), Vector::from_column_slice(p))
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        linalg::all_finite(&self.q) && linalg::all_finite(&self.p)
    }

    /// `(q, p)` stacked into one vector of length `2n`.
    pub fn stacked(&self) -> Vector {
        let n = self.dim();
        let mut y = Vector::zeros(2 * n);
        y.rows_mut(0, n).copy_from(&self.q);
        y.rows_mut(n, n).copy_from(&self.p);
        y
    }

    pub fn from_stacked(y: &Vector) -> Self {
        let n = y.len() / 2;
        Self {
            q: y.rows(0, n).into_owned(),
            p: y.rows(n, n).into_owned(),
        }
    }

    pub fn with_momentum(&self, p: Vector) -> Self {
        Self { q: self.q.clone(), p }
    }
}

pub trait Hamiltonian: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn value(&self, x: &PhasePoint) -> f64;
    fn dh_dq(&self, x: &PhasePoint) -> Vector;
    fn dh_dp(&self, x: &PhasePoint) -> Vector;
}

/// Potential part of a [`MechanicalHamiltonian`].
#[derive(Clone, Debug, PartialEq)]
pub enum Potential {
    Free,
    /// `V = ½ Σ k_i q_i²`
    Harmonic { stiffness: Vector },
    /// `V = Σ g_i q_i` (uniform field, e.g. gravity)
    Uniform { gradient: Vector },
}

/// `H = ½ Σ w_i p_i² + V(q)` with a diagonal inverse mass `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct MechanicalHamiltonian {
    inverse_mass: Vector,
    potential: Potential,
}

impl MechanicalHamiltonian {
    pub fn new(inverse_mass: Vector, potential: Potential) -> Result<Self> {
        let n = inverse_mass.len();
        if n == 0 {
            return Err(Error::InvalidModel("empty inverse mass".into()));
        }
        if inverse_mass.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidModel("inverse mass entries must be positive".into()));
        }
        match &potential {
            Potential::Harmonic { stiffness: v } | Potential::Uniform { gradient: v } if v.len() != n => {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: v.len(),
                    context: "potential coefficients",
                })
            }
            _ => {}
        }
        Ok(Self { inverse_mass, potential })
    }

    pub fn free(inverse_mass: &[f64]) -> Result<Self> {
        Self::new(Vector::from_column_slice(inverse_mass), Potential::Free)
    }

    pub fn inverse_mass(&self) -> &Vector {
        &self.inverse_mass
    }
}

impl Hamiltonian for MechanicalHamiltonian {
    fn dim(&self) -> usize {
        self.inverse_mass.len()
    }

    fn value(&self, x: &PhasePoint) -> f64 {
        let kinetic: f64 = x
            .p
            .iter()
            .zip(self.inverse_mass.iter())
            .map(|(p, w)| 0.5 * w * p * p)
            .sum();
        let potential = match &self.potential {
            Potential::Free => 0.0,
            Potential::Harmonic { stiffness } => {
                x.q.iter().zip(stiffness.iter()).map(|(q, k)| 0.5 * k * q * q).sum()
            }
            Potential::Uniform { gradient } => gradient.dot(&x.q),
        };
        kinetic + potential
    }

    fn dh_dq(&self, x: &PhasePoint) -> Vector {
        match &self.potential {
            Potential::Free => Vector::zeros(x.dim()),
            Potential::Harmonic { stiffness } => stiffness.component_mul(&x.q),
            Potential::Uniform { gradient } => gradient.clone(),
        }
    }

    fn dh_dp(&self, x: &PhasePoint) -> Vector {
        self.inverse_mass.component_mul(&x.p)
    }
}

/// Semibasic force `F = F_i(q, p) dqⁱ`.
pub trait SemibasicForce: Send + Sync + fmt::Debug {
    fn components(&self, x: &PhasePoint) -> Vector;
}

/// `F_i = c_i p_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDamping {
    pub coefficients: Vector,
}

impl SemibasicForce for LinearDamping {
    fn components(&self, x: &PhasePoint) -> Vector {
        self.coefficients.component_mul(&x.p)
    }
}

/// `F = c_i dqⁱ` with constant components.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantForce {
    pub components: Vector,
}

impl SemibasicForce for ConstantForce {
    fn components(&self, _x: &PhasePoint) -> Vector {
        self.components.clone()
    }
}

/// Linear nonholonomic constraints `μᵃ_i(q) q̇ⁱ = 0`, one row per constraint.
pub trait ConstraintMap: Send + Sync + fmt::Debug {
    fn rows(&self) -> usize;
    fn matrix(&self, q: &Vector) -> Matrix;

    /// `(∂_q[μ(q) v]) w` for fixed `v`, when known in closed form.
    fn derivative_along(&self, _q: &Vector, _v: &Vector, _w: &Vector) -> Option<Vector> {
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstantConstraint {
    pub matrix: Matrix,
}

impl ConstraintMap for ConstantConstraint {
    fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    fn matrix(&self, _q: &Vector) -> Matrix {
        self.matrix.clone()
    }

    fn derivative_along(&self, _q: &Vector, _v: &Vector, _w: &Vector) -> Option<Vector> {
        Some(Vector::zeros(self.matrix.nrows()))
    }
}

/// Metric `g_ij(q)` of the mechanical Lagrangian (the Legendre map on fibers).
pub trait Metric: Send + Sync + fmt::Debug {
    fn matrix(&self, q: &Vector) -> Matrix;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstantMetric(pub Matrix);

impl Metric for ConstantMetric {
    fn matrix(&self, _q: &Vector) -> Matrix {
        self.0.clone()
    }
}

/// Map from `∂H/∂p` to chart velocities.
pub trait ChartKinematics: Send + Sync + fmt::Debug {
    fn velocity_map(&self, q: &Vector) -> Result<Matrix>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTolerances {
    pub constraint_tol: f64,
    pub cond_tol: f64,
    /// Rank threshold relative to the largest singular value.
    pub rank_tol: f64,
    /// Finite-difference step is `fd_step * (1 + |q|)`.
    pub fd_step: f64,
}

impl Default for PhaseTolerances {
    fn default() -> Self {
        Self {
            constraint_tol: 1e-9,
            cond_tol: 1e12,
            rank_tol: 1e-10,
            fd_step: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Hamiltonian,
    Forced,
    Nonholonomic,
}

impl FieldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::Hamiltonian => "hamiltonian",
            FieldKind::Forced => "forced",
            FieldKind::Nonholonomic => "nonholonomic",
        }
    }
}

#[derive(Clone)]
pub struct DynamicsModel {
    hamiltonian: Arc<dyn Hamiltonian>,
    force: Option<Arc<dyn SemibasicForce>>,
    constraints: Option<Arc<dyn ConstraintMap>>,
    mass_matrix: Option<Arc<dyn Metric>>,
    kinematics: Option<Arc<dyn ChartKinematics>>,
    angle_coords: Vec<usize>,
    pub tolerances: PhaseTolerances,
}

impl fmt::Debug for DynamicsModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicsModel")
            .field("kind", &self.kind())
            .field("dim", &self.dim())
            .field("hamiltonian", &self.hamiltonian)
            .field("angle_coords", &self.angle_coords)
            .finish_non_exhaustive()
    }
}

impl DynamicsModel {
    pub fn conservative(hamiltonian: Arc<dyn Hamiltonian>) -> Self {
        Self {
            hamiltonian,
            force: None,
            constraints: None,
            mass_matrix: None,
            kinematics: None,
            angle_coords: Vec::new(),
            tolerances: PhaseTolerances::default(),
        }
    }

    pub fn forced(hamiltonian: Arc<dyn Hamiltonian>, force: Arc<dyn SemibasicForce>) -> Self {
        Self {
            force: Some(force),
            ..Self::conservative(hamiltonian)
        }
    }

    pub fn nonholonomic(
        hamiltonian: Arc<dyn Hamiltonian>,
        constraints: Arc<dyn ConstraintMap>,
        mass_matrix: Arc<dyn Metric>,
    ) -> Result<Self> {
        let k = constraints.rows();
        let n = hamiltonian.dim();
        if k == 0 || k >= n {
            return Err(Error::InvalidModel(format!(
                "need 1 <= constraints < dimension, got {k} constraints in dimension {n}"
            )));
        }
        Ok(Self {
            constraints: Some(constraints),
            mass_matrix: Some(mass_matrix),
            ..Self::conservative(hamiltonian)
        })
    }

    pub fn with_kinematics(mut self, kinematics: Arc<dyn ChartKinematics>) -> Self {
        self.kinematics = Some(kinematics);
        self
    }

    pub fn with_angle_coords(mut self, coords: Vec<usize>) -> Self {
        self.angle_coords = coords;
        self
    }

    pub fn with_tolerances(mut self, tolerances: PhaseTolerances) -> Self {
        self.tolerances = tolerances;
        self
    }

    pub fn kind(&self) -> FieldKind {
        match (&self.force, &self.constraints) {
            (Some(_), _) => FieldKind::Forced,
            (None, Some(_)) => FieldKind::Nonholonomic,
            (None, None) => FieldKind::Hamiltonian,
        }
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian.dim()
    }

    pub fn hamiltonian(&self) -> &dyn Hamiltonian {
        self.hamiltonian.as_ref()
    }

    pub fn energy(&self, x: &PhasePoint) -> f64 {
        self.hamiltonian.value(x)
    }

    pub fn force(&self) -> Option<&dyn SemibasicForce> {
        self.force.as_deref()
    }

    pub fn constraints(&self) -> Option<&dyn ConstraintMap> {
        self.constraints.as_deref()
    }

    pub fn mass_matrix(&self) -> Option<&dyn Metric> {
        self.mass_matrix.as_deref()
    }

    pub fn angle_coords(&self) -> &[usize] {
        &self.angle_coords
    }

    pub(crate) fn check_dim(&self, x: &PhasePoint) -> Result<()> {
        if x.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.dim(),
                context: "phase point vs model",
            });
        }
        Ok(())
    }

    fn fd_step(&self, q: &Vector) -> f64 {
        self.tolerances.fd_step * (1.0 + q.norm())
    }
}

/// Value of one of the vector fields at a phase point.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldValue {
    pub qdot: Vector,
    pub pdot: Vector,
    /// Constraint multipliers, present for nonholonomic fields.
    pub multipliers: Option<Vector>,
}

impl FieldValue {
    pub fn stacked(&self) -> Vector {
        let n = self.qdot.len();
        let mut y = Vector::zeros(2 * n);
        y.rows_mut(0, n).copy_from(&self.qdot);
        y.rows_mut(n, n).copy_from(&self.pdot);
        y
    }
}

fn finite_or(v: Vector, what: &'static str, x: &PhasePoint) -> Result<Vector> {
    if linalg::all_finite(&v) {
        Ok(v)
    } else {
        Err(Error::NonFiniteDerivative {
            what,
            q: x.q.iter().copied().collect(),
        })
    }
}

/// `q̇ = K(q) ∂H/∂p`.
pub(crate) fn base_velocity(model: &DynamicsModel, x: &PhasePoint) -> Result<Vector> {
    let dh_dp = finite_or(model.hamiltonian.dh_dp(x), "dH/dp", x)?;
    match &model.kinematics {
        Some(k) => Ok(k.velocity_map(&x.q)? * dh_dp),
        None => Ok(dh_dp),
    }
}

fn require_kind(model: &DynamicsModel, kind: FieldKind) -> Result<()> {
    if model.kind() != kind {
        return Err(Error::FieldMismatch {
            requested: kind.as_str(),
            actual: model.kind().as_str(),
        });
    }
    Ok(())
}

pub fn hamiltonian_field(model: &DynamicsModel, x: &PhasePoint) -> Result<FieldValue> {
    require_kind(model, FieldKind::Hamiltonian)?;
    model.check_dim(x)?;
    conservative_unchecked(model, x)
}

fn conservative_unchecked(model: &DynamicsModel, x: &PhasePoint) -> Result<FieldValue> {
    let qdot = base_velocity(model, x)?;
    let pdot = -finite_or(model.hamiltonian.dh_dq(x), "dH/dq", x)?;
    Ok(FieldValue {
        qdot,
        pdot,
        multipliers: None,
    })
}

pub fn forced_field(model: &DynamicsModel, x: &PhasePoint) -> Result<FieldValue> {
    require_kind(model, FieldKind::Forced)?;
    model.check_dim(x)?;
    forced_unchecked(model, x)
}

fn forced_unchecked(model: &DynamicsModel, x: &PhasePoint) -> Result<FieldValue> {
    let mut value = conservative_unchecked(model, x)?;
    if let Some(force) = &model.force {
        let f = finite_or(force.components(x), "force", x)?;
        value.pdot -= f;
    }
    Ok(value)
}

/// Result of a membership test for `M = FL(D)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintCheck {
    pub on_manifold: bool,
    pub residual: f64,
}

fn constraint_parts(model: &DynamicsModel) -> Result<(&dyn ConstraintMap, &dyn Metric)> {
    match (&model.constraints, &model.mass_matrix) {
        (Some(c), Some(g)) => Ok((c.as_ref(), g.as_ref())),
        _ => Err(Error::FieldMismatch {
            requested: FieldKind::Nonholonomic.as_str(),
            actual: model.kind().as_str(),
        }),
    }
}

pub(crate) fn metric_inverse(metric: &dyn Metric, q: &Vector) -> Result<Matrix> {
    let g = metric.matrix(q);
    let sym_err = (&g - g.transpose()).amax();
    let chol = if sym_err <= 1e-12 * g.amax().max(1.0) {
        g.cholesky()
    } else {
        None
    };
    chol.map(|c| c.inverse())
        .ok_or_else(|| Error::MassMatrixNotPositiveDefinite {
            q: q.iter().copied().collect(),
        })
}

/// Residual `max_a |μᵃ_i gⁱʲ p_j|` of the momentum constraint.
pub fn is_on_constraint(model: &DynamicsModel, x: &PhasePoint) -> Result<ConstraintCheck> {
    model.check_dim(x)?;
    let (constraints, metric) = constraint_parts(model)?;
    let mu = constraints.matrix(&x.q);
    let g_inv = metric_inverse(metric, &x.q)?;
    let residual = linalg::max_abs(&(mu * g_inv * &x.p));
    Ok(ConstraintCheck {
        on_manifold: residual <= model.tolerances.constraint_tol,
        residual,
    })
}

pub fn nonholonomic_field(model: &DynamicsModel, x: &PhasePoint) -> Result<FieldValue> {
    require_kind(model, FieldKind::Nonholonomic)?;
    model.check_dim(x)?;
    let check = is_on_constraint(model, x)?;
    if !check.on_manifold {
        return Err(Error::ConstraintViolation {
            residual: check.residual,
            tol: model.tolerances.constraint_tol,
        });
    }
    nonholonomic_unchecked(model, x)
}

/// Multiplier solve without the on-manifold precondition. Runge-Kutta stage
/// states sit `O(h²)` off `M`, so the integrator needs this form.
fn nonholonomic_unchecked(model: &DynamicsModel, x: &PhasePoint) -> Result<FieldValue> {
    let (constraints, metric) = constraint_parts(model)?;
    let n = model.dim();
    let k = constraints.rows();
    let mu = constraints.matrix(&x.q);
    if mu.nrows() != k || mu.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: k * n,
            got: mu.nrows() * mu.ncols(),
            context: "constraint matrix shape",
        });
    }
    let rank = linalg::rank(&mu, model.tolerances.rank_tol);
    if rank < k {
        return Err(Error::RankDeficientConstraints {
            rank,
            rows: k,
            q: x.q.iter().copied().collect(),
        });
    }
    let g_inv = metric_inverse(metric, &x.q)?;
    let free = conservative_unchecked(model, x)?;
    let dh_dq = -free.pdot.clone();

    // d/dt[μ(q) ∂H/∂p] = J q̇ + μ ∂²H/∂p² ṗ, with J the q-derivative at fixed p.
    let v = finite_or(model.hamiltonian.dh_dp(x), "dH/dp", x)?;
    let j_qdot = constraint_rate(model, constraints, x, &v, &free.qdot);

    let a = &mu * &g_inv * mu.transpose();
    let condition = linalg::condition_number(&a);
    if !(condition <= model.tolerances.cond_tol) {
        return Err(Error::SingularMultiplierSystem { condition });
    }
    let b = j_qdot - &mu * &g_inv * &dh_dq;
    let lambda = a
        .lu()
        .solve(&b)
        .ok_or(Error::SingularMultiplierSystem { condition })?;
    let pdot = -dh_dq - mu.transpose() * &lambda;
    Ok(FieldValue {
        qdot: free.qdot,
        pdot: finite_or(pdot, "multiplier force", x)?,
        multipliers: Some(lambda),
    })
}

/// `∂_q[μ(q) ∂H/∂p(q, p)] w` at fixed `p`.
fn constraint_rate(
    model: &DynamicsModel,
    constraints: &dyn ConstraintMap,
    x: &PhasePoint,
    v: &Vector,
    w: &Vector,
) -> Vector {
    let w_norm = w.norm();
    if w_norm == 0.0 {
        return Vector::zeros(constraints.rows());
    }
    let eps = model.fd_step(&x.q) / w_norm;
    let shifted = |s: f64| &x.q + w * s;
    let dh_dp_at = |q: Vector| model.hamiltonian.dh_dp(&PhasePoint { q, p: x.p.clone() });
    // Variation of ∂H/∂p along w, projected by μ(q).
    let dv = (dh_dp_at(shifted(eps)) - dh_dp_at(shifted(-eps))) / (2.0 * eps);
    let metric_term = constraints.matrix(&x.q) * dv;
    match constraints.derivative_along(&x.q, v, w) {
        Some(analytic) => analytic + metric_term,
        None => {
            let plus = constraints.matrix(&shifted(eps)) * v;
            let minus = constraints.matrix(&shifted(-eps)) * v;
            (plus - minus) / (2.0 * eps) + metric_term
        }
    }
}

/// Field matching the model's kind.
pub fn evaluate_field(model: &DynamicsModel, x: &PhasePoint) -> Result<FieldValue> {
    match model.kind() {
        FieldKind::Hamiltonian => hamiltonian_field(model, x),
        FieldKind::Forced => forced_field(model, x),
        FieldKind::Nonholonomic => nonholonomic_field(model, x),
    }
}

/// Same as [`evaluate_field`] but skips the on-manifold precondition.
pub(crate) fn evaluate_field_unchecked(model: &DynamicsModel, x: &PhasePoint) -> Result<FieldValue> {
    model.check_dim(x)?;
    match model.kind() {
        FieldKind::Hamiltonian => conservative_unchecked(model, x),
        FieldKind::Forced => forced_unchecked(model, x),
        FieldKind::Nonholonomic => nonholonomic_unchecked(model, x),
    }
}

/// Projected base field `X_H^γ(q) = Tπ_Q(X_H(γ(q)))`.
///
/// Forcing and multiplier terms only touch `ṗ`, so the same formula serves
/// all three model kinds.
pub fn projected_field<G>(model: &DynamicsModel, gamma: G, q: &Vector) -> Result<Vector>
where
    G: Fn(&Vector) -> Result<Vector>,
{
    let p = gamma(q)?;
    let x = PhasePoint::new(q.clone(), p)?;
    model.check_dim(&x)?;
    if !x.is_finite() {
        return Err(Error::NonFiniteDerivative {
            what: "gamma(q)",
            q: q.iter().copied().collect(),
        });
    }
    base_velocity(model, &x)
}

/// Wrap angle coordinates into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut r = theta.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

/// Central-difference check of the supplied partial derivatives at `x`.
/// Returns the largest relative error over all `2n` partials.
pub fn partials_consistency(h: &dyn Hamiltonian, x: &PhasePoint, step: f64) -> f64 {
    let n = x.dim();
    let analytic_q = h.dh_dq(x);
    let analytic_p = h.dh_dp(x);
    let mut worst = 0.0_f64;
    for i in 0..2 * n {
        let mut plus = x.clone();
        let mut minus = x.clone();
        let (slot_plus, slot_minus, analytic) = if i < n {
            (&mut plus.q[i], &mut minus.q[i], analytic_q[i])
        } else {
            (&mut plus.p[i - n], &mut minus.p[i - n], analytic_p[i - n])
        };
        *slot_plus += step;
        *slot_minus -= step;
        let fd = (h.value(&plus) - h.value(&minus)) / (2.0 * step);
        let rel = (fd - analytic).abs() / analytic.abs().max(fd.abs()).max(1.0);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn billiard() -> DynamicsModel {
        DynamicsModel::conservative(Arc::new(MechanicalHamiltonian::free(&[1.0, 1.0]).unwrap()))
    }

    fn oscillator() -> DynamicsModel {
        let h = MechanicalHamiltonian::new(
            Vector::from_element(1, 1.0),
            Potential::Harmonic {
                stiffness: Vector::from_element(1, 1.0),
            },
        )
        .unwrap();
        DynamicsModel::conservative(Arc::new(h))
    }

    fn disk(m: f64, k: f64) -> Arc<MechanicalHamiltonian> {
        Arc::new(MechanicalHamiltonian::free(&[1.0 / m, 1.0 / m, 1.0 / (m * k * k)]).unwrap())
    }

    #[derive(Debug)]
    struct TiltedPlane;

    impl ConstraintMap for TiltedPlane {
        fn rows(&self) -> usize {
            1
        }
        fn matrix(&self, q: &Vector) -> Matrix {
            Matrix::from_row_slice(1, 3, &[-q[1], 0.0, 1.0])
        }
    }

    fn nh_particle() -> DynamicsModel {
        DynamicsModel::nonholonomic(
            Arc::new(MechanicalHamiltonian::free(&[1.0, 1.0, 1.0]).unwrap()),
            Arc::new(TiltedPlane),
            Arc::new(ConstantMetric(Matrix::identity(3, 3))),
        )
        .unwrap()
    }

    fn pt(q: &[f64], p: &[f64]) -> PhasePoint {
        PhasePoint::from_slices(q, p).unwrap()
    }

    #[test]
    fn hamiltonian_field_free_particle() {
        let f = hamiltonian_field(&billiard(), &pt(&[0.3, 0.1], &[1.0, 2.0])).unwrap();
        assert_eq!(f.qdot.as_slice(), &[1.0, 2.0]);
        assert_eq!(f.pdot.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn hamiltonian_field_oscillator() {
        let f = hamiltonian_field(&oscillator(), &pt(&[1.0], &[0.0])).unwrap();
        assert_eq!(f.qdot[0], 0.0);
        assert_eq!(f.pdot[0], -1.0);
    }

    #[test]
    fn hamiltonian_field_disk() {
        let model = DynamicsModel::conservative(disk(1.0, 2.0));
        let f = hamiltonian_field(&model, &pt(&[0.0, 0.0, 0.0], &[2.0, 0.0, 4.0])).unwrap();
        assert_eq!(f.qdot.as_slice(), &[2.0, 0.0, 1.0]);
        assert_eq!(f.pdot.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn field_kind_mismatch_is_rejected() {
        let x = pt(&[0.0, 0.0], &[1.0, 0.0]);
        assert!(matches!(forced_field(&billiard(), &x), Err(Error::FieldMismatch { .. })));
        assert!(matches!(nonholonomic_field(&billiard(), &x), Err(Error::FieldMismatch { .. })));
    }

    #[test]
    fn zero_force_matches_conservative_field() {
        let h = disk(1.0, 1.0);
        let forced = DynamicsModel::forced(
            h.clone(),
            Arc::new(ConstantForce {
                components: Vector::zeros(3),
            }),
        );
        let x = pt(&[0.1, 1.5, 0.3], &[1.0, -0.5, 2.0]);
        let a = forced_field(&forced, &x).unwrap();
        let b = hamiltonian_field(&DynamicsModel::conservative(h), &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn disk_damping_force() {
        let forced = DynamicsModel::forced(
            disk(1.0, 1.0),
            Arc::new(LinearDamping {
                coefficients: Vector::from_column_slice(&[0.0, 0.5, 0.0]),
            }),
        );
        let f = forced_field(&forced, &pt(&[0.0, 1.5, 0.0], &[1.0, 2.0, 1.0])).unwrap();
        assert_eq!(f.pdot.as_slice(), &[0.0, -1.0, 0.0]);
    }

    #[test]
    fn constant_force_one_dof() {
        let forced = DynamicsModel::forced(
            Arc::new(MechanicalHamiltonian::free(&[1.0]).unwrap()),
            Arc::new(ConstantForce {
                components: Vector::from_element(1, 3.0),
            }),
        );
        let f = forced_field(&forced, &pt(&[0.0], &[1.0])).unwrap();
        assert_eq!((f.qdot[0], f.pdot[0]), (1.0, -3.0));
    }

    #[test]
    fn nonholonomic_velocity_is_tangent() {
        let model = nh_particle();
        let y = 0.7;
        let x = pt(&[0.2, y, -0.1], &[1.3, -0.4, 1.3 * y]);
        let f = nonholonomic_field(&model, &x).unwrap();
        let mu = model.constraints().unwrap().matrix(&x.q);
        assert!((mu * &f.qdot)[0].abs() <= 1e-12);
    }

    #[test]
    fn nonholonomic_velocity_from_paper_gamma_at_y0() {
        // γ with λ = 1, E = 1 at y = 0 is (1, ±1, 0).
        let model = nh_particle();
        for sign in [1.0, -1.0] {
            let f = nonholonomic_field(&model, &pt(&[0.0, 0.0, 0.0], &[1.0, sign, 0.0])).unwrap();
            assert_eq!(f.qdot.as_slice(), &[1.0, sign, 0.0]);
        }
    }

    #[test]
    fn flat_constraint_keeps_pz_zero() {
        let model = DynamicsModel::nonholonomic(
            Arc::new(MechanicalHamiltonian::free(&[1.0, 1.0, 1.0]).unwrap()),
            Arc::new(ConstantConstraint {
                matrix: Matrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]),
            }),
            Arc::new(ConstantMetric(Matrix::identity(3, 3))),
        )
        .unwrap();
        let f = nonholonomic_field(&model, &pt(&[0.1, 0.2, 0.3], &[0.5, -1.0, 0.0])).unwrap();
        assert_eq!(f.pdot[2], 0.0);
        assert_eq!(f.multipliers.unwrap()[0], 0.0);
    }

    #[test]
    fn off_manifold_state_is_rejected() {
        let model = nh_particle();
        let err = nonholonomic_field(&model, &pt(&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::ConstraintViolation { .. }));
    }

    #[test]
    fn constraint_membership_residuals() {
        let model = nh_particle();
        let y = 1.7;
        let on = is_on_constraint(&model, &pt(&[0.0, y, 0.0], &[1.0, 0.0, y])).unwrap();
        assert!(on.on_manifold);
        assert_eq!(on.residual, 0.0);
        let off = is_on_constraint(&model, &pt(&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0])).unwrap();
        assert!(!off.on_manifold);
        assert_eq!(off.residual, 1.0);
        let zero = is_on_constraint(&model, &pt(&[3.0, -2.0, 1.0], &[0.0, 0.0, 0.0])).unwrap();
        assert!(zero.on_manifold && zero.residual == 0.0);
    }

    #[test]
    fn non_spd_mass_matrix_is_reported() {
        let model = DynamicsModel::nonholonomic(
            Arc::new(MechanicalHamiltonian::free(&[1.0, 1.0, 1.0]).unwrap()),
            Arc::new(TiltedPlane),
            Arc::new(ConstantMetric(Matrix::from_diagonal(&Vector::from_column_slice(&[1.0, -1.0, 1.0])))),
        )
        .unwrap();
        let err = is_on_constraint(&model, &pt(&[0.0; 3], &[0.0; 3])).unwrap_err();
        assert!(matches!(err, Error::MassMatrixNotPositiveDefinite { .. }));
    }

    #[test]
    fn rank_deficient_constraints_are_reported() {
        let model = DynamicsModel::nonholonomic(
            Arc::new(MechanicalHamiltonian::free(&[1.0, 1.0, 1.0]).unwrap()),
            Arc::new(ConstantConstraint {
                matrix: Matrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]),
            }),
            Arc::new(ConstantMetric(Matrix::identity(3, 3))),
        )
        .unwrap();
        let err = nonholonomic_field(&model, &pt(&[0.0; 3], &[0.0; 3])).unwrap_err();
        assert!(matches!(err, Error::RankDeficientConstraints { rank: 1, rows: 2, .. }));
    }

    #[test]
    fn projected_field_examples() {
        let (a, b) = (0.3, -1.2);
        let qdot = projected_field(
            &billiard(),
            |_q: &Vector| Ok(Vector::from_column_slice(&[a, b])),
            &Vector::from_column_slice(&[0.4, 0.1]),
        )
        .unwrap();
        assert_eq!(qdot.as_slice(), &[a, b]);

        let model = DynamicsModel::conservative(disk(1.0, 1.0));
        let qdot = projected_field(
            &model,
            |_q: &Vector| Ok(Vector::from_column_slice(&[0.5, 2.0, -1.0])),
            &Vector::from_column_slice(&[0.0, 1.5, 0.2]),
        )
        .unwrap();
        assert_eq!(qdot.as_slice(), &[0.5, 2.0, -1.0]);
    }

    #[test]
    fn projected_field_equals_full_field_projection() {
        let model = nh_particle();
        let (lambda, energy) = (0.8, 1.1);
        let gamma = |q: &Vector| {
            let s = (1.0 + q[1] * q[1]).sqrt();
            Ok(Vector::from_column_slice(&[
                lambda / s,
                (2.0 * energy - lambda * lambda).sqrt(),
                lambda * q[1] / s,
            ]))
        };
        for &y in &[-2.0, 0.0, 0.3, 4.0] {
            let q = Vector::from_column_slice(&[0.1, y, -0.2]);
            let projected = projected_field(&model, gamma, &q).unwrap();
            let full = nonholonomic_field(&model, &PhasePoint::new(q.clone(), gamma(&q).unwrap()).unwrap()).unwrap();
            assert_eq!(projected, full.qdot);
        }
    }

    #[test]
    fn non_finite_gamma_is_rejected() {
        let err = projected_field(
            &billiard(),
            |_q: &Vector| Ok(Vector::from_column_slice(&[f64::NAN, 0.0])),
            &Vector::from_column_slice(&[0.0, 0.0]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteDerivative { .. }));
    }

    #[test]
    fn wrap_angle_range() {
        use std::f64::consts::PI;
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn stacked_round_trip() {
        let x = pt(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]);
        assert_eq!(PhasePoint::from_stacked(&x.stacked()), x);
    }
}

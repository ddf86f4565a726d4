//! Residual checks for candidate Hamilton-Jacobi solution families.
//!
//! A family supplies one-forms `γ_k(q; λ)` on regions `U_k` of configuration
//! space. The checks here evaluate, on sample points, how far each `γ_k` is
//! from solving the conservative, forced, or nonholonomic HJ equation, how
//! well a parameter transfer matches the impact map, and whether the family
//! is a local diffeomorphism in its parameters.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::ResetMap;
use crate::linalg;
use crate::phase::{self, DynamicsModel, FieldKind, Matrix, PhasePoint, Vector};

/// Parameters `λ` of a family member plus a discrete branch sign (`±1`) for
/// families defined through a square root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyParams {
    pub values: Vec<f64>,
    pub branch: i8,
}

impl FamilyParams {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, branch: 1 }
    }

    pub fn with_branch(values: Vec<f64>, branch: i8) -> Self {
        Self { values, branch }
    }

    pub fn sign(&self) -> f64 {
        if self.branch < 0 {
            -1.0
        } else {
            1.0
        }
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        Self {
            values,
            branch: self.branch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionInfo {
    pub id: usize,
    pub name: String,
}

pub trait SolutionFamily: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn regions(&self) -> Vec<RegionInfo>;
    /// Membership predicate of the open set `U_region`.
    fn contains(&self, region: usize, q: &Vector) -> bool;
    fn gamma(&self, region: usize, q: &Vector, params: &FamilyParams) -> Result<Vector>;
    /// `J_ij = ∂γ_i/∂qʲ`, when available in closed form.
    fn jacobian_q(&self, _region: usize, _q: &Vector, _params: &FamilyParams) -> Option<Matrix> {
        None
    }
    /// `∂γ_i/∂λ_a` (`n × m`), when available in closed form.
    fn jacobian_params(&self, _region: usize, _q: &Vector, _params: &FamilyParams) -> Option<Matrix> {
        None
    }
}

/// Parameter update across an impact at base point `q`.
pub trait TransferMap: Send + Sync + fmt::Debug {
    fn transfer(&self, from: usize, to: usize, q: &Vector, params: &FamilyParams) -> Result<FamilyParams>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    Analytic,
    FiniteDifference,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyOptions {
    pub pass_tol_analytic: f64,
    pub pass_tol_fd: f64,
    pub diffeo_tol: f64,
    /// Central-difference step is `fd_step * (1 + |q|)`.
    pub fd_step: f64,
    /// Ignore closed-form jacobians and difference `γ` instead.
    pub finite_differences: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            pass_tol_analytic: 1e-8,
            pass_tol_fd: 1e-5,
            diffeo_tol: 1e-10,
            fd_step: 1e-6,
            finite_differences: false,
        }
    }
}

impl VerifyOptions {
    fn pass_tol(&self, mode: JacobianMode) -> f64 {
        match mode {
            JacobianMode::Analytic => self.pass_tol_analytic,
            JacobianMode::FiniteDifference => self.pass_tol_fd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub name: String,
    pub max: f64,
    pub argmax: Option<Vec<f64>>,
    pub tolerance: f64,
    pub passed: bool,
}

impl ChannelReport {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            max: 0.0,
            argmax: None,
            tolerance,
            passed: true,
        }
    }

    fn record(&mut self, value: f64, q: &Vector) {
        // NaN sticks once seen so the channel cannot pass.
        if self.argmax.is_none() || value > self.max || (value.is_nan() && !self.max.is_nan()) {
            self.max = value;
            self.argmax = Some(q.iter().copied().collect());
        }
    }

    fn finish(&mut self) {
        self.passed = !self.max.is_nan() && self.max <= self.tolerance;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub check: String,
    pub region: Option<usize>,
    pub mode: JacobianMode,
    pub sample_count: usize,
    pub channels: Vec<ChannelReport>,
    pub max_residual: f64,
    pub location: Option<Vec<f64>>,
    pub passed: bool,
}

impl ResidualReport {
    fn assemble(check: &str, region: Option<usize>, mode: JacobianMode, sample_count: usize, mut channels: Vec<ChannelReport>) -> Self {
        channels.iter_mut().for_each(ChannelReport::finish);
        let worst = channels
            .iter()
            .max_by(|a, b| a.max.total_cmp(&b.max));
        Self {
            check: check.to_string(),
            region,
            mode,
            sample_count,
            max_residual: worst.map_or(0.0, |c| c.max),
            location: worst.and_then(|c| c.argmax.clone()),
            passed: channels.iter().all(|c| c.passed),
            channels,
        }
    }

    pub fn channel(&self, name: &str) -> Option<&ChannelReport> {
        self.channels.iter().find(|c| c.name == name)
    }
}

/// `max_{i<j} |J_ij − J_ji|`.
pub fn closedness_defect(j: &Matrix) -> f64 {
    let n = j.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for k in i + 1..n {
            worst = worst.max((j[(i, k)] - j[(k, i)]).abs());
        }
    }
    worst
}

/// `dγ(v, w) = Σ (∂γ_j/∂qⁱ − ∂γ_i/∂qʲ) vⁱ wʲ`.
pub fn exterior_derivative(j: &Matrix, v: &Vector, w: &Vector) -> f64 {
    (j.transpose() * v).dot(w) - (j * v).dot(w)
}

fn fd_step(opts: &VerifyOptions, x: &Vector) -> f64 {
    opts.fd_step * (1.0 + x.norm())
}

/// Jacobian of `γ` in `q`, closed form unless `finite_differences` is set.
pub fn gamma_jacobian(
    family: &dyn SolutionFamily,
    region: usize,
    q: &Vector,
    params: &FamilyParams,
    opts: &VerifyOptions,
) -> Result<(Matrix, JacobianMode)> {
    if !opts.finite_differences {
        if let Some(j) = family.jacobian_q(region, q, params) {
            return Ok((j, JacobianMode::Analytic));
        }
    }
    let n = q.len();
    let h = fd_step(opts, q);
    let mut j = Matrix::zeros(n, n);
    for col in 0..n {
        let mut plus = q.clone();
        let mut minus = q.clone();
        plus[col] += h;
        minus[col] -= h;
        let d = (family.gamma(region, &plus, params)? - family.gamma(region, &minus, params)?) / (2.0 * h);
        j.set_column(col, &d);
    }
    Ok((j, JacobianMode::FiniteDifference))
}

/// Jacobian of `γ` in the continuous parameters `λ`.
pub fn params_jacobian(
    family: &dyn SolutionFamily,
    region: usize,
    q: &Vector,
    params: &FamilyParams,
    opts: &VerifyOptions,
) -> Result<(Matrix, JacobianMode)> {
    if !opts.finite_differences {
        if let Some(j) = family.jacobian_params(region, q, params) {
            return Ok((j, JacobianMode::Analytic));
        }
    }
    let lam = Vector::from_vec(params.values.clone());
    let h = fd_step(opts, &lam);
    let mut j = Matrix::zeros(family.dim(), lam.len());
    for col in 0..lam.len() {
        let mut plus = params.values.clone();
        let mut minus = params.values.clone();
        plus[col] += h;
        minus[col] -= h;
        let d = (family.gamma(region, q, &params.with_values(plus))?
            - family.gamma(region, q, &params.with_values(minus))?)
            / (2.0 * h);
        j.set_column(col, &d);
    }
    Ok((j, JacobianMode::FiniteDifference))
}

fn check_region(family: &dyn SolutionFamily, region: usize, q: &Vector) -> Result<()> {
    if family.contains(region, q) {
        Ok(())
    } else {
        Err(Error::RegionViolation {
            region,
            q: q.iter().copied().collect(),
        })
    }
}

fn check_family_dim(model: &DynamicsModel, family: &dyn SolutionFamily) -> Result<()> {
    if family.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: family.dim(),
            context: "solution family vs model",
        });
    }
    Ok(())
}

/// Gradient of `q ↦ H(q, γ(q)) (+ F(q, γ(q)))`, chain rule in analytic mode.
#[allow(clippy::too_many_arguments)]
fn hj_gradient(
    model: &DynamicsModel,
    family: &dyn SolutionFamily,
    region: usize,
    q: &Vector,
    params: &FamilyParams,
    j: &Matrix,
    mode: JacobianMode,
    opts: &VerifyOptions,
) -> Result<Vector> {
    let h = model.hamiltonian();
    let x = PhasePoint::new(q.clone(), family.gamma(region, q, params)?)?;
    let mut grad = match mode {
        JacobianMode::Analytic => h.dh_dq(&x) + j.transpose() * h.dh_dp(&x),
        JacobianMode::FiniteDifference => {
            let step = fd_step(opts, q);
            let mut g = Vector::zeros(q.len());
            for i in 0..q.len() {
                let mut plus = q.clone();
                let mut minus = q.clone();
                plus[i] += step;
                minus[i] -= step;
                let hp = h.value(&PhasePoint::new(plus.clone(), family.gamma(region, &plus, params)?)?);
                let hm = h.value(&PhasePoint::new(minus.clone(), family.gamma(region, &minus, params)?)?);
                g[i] = (hp - hm) / (2.0 * step);
            }
            g
        }
    };
    if let Some(force) = model.force() {
        grad += force.components(&x);
    }
    Ok(grad)
}

fn exact_residual(
    check: &str,
    model: &DynamicsModel,
    family: &dyn SolutionFamily,
    region: usize,
    params: &FamilyParams,
    samples: &[Vector],
    opts: &VerifyOptions,
) -> Result<ResidualReport> {
    check_family_dim(model, family)?;
    let mut mode = if opts.finite_differences {
        JacobianMode::FiniteDifference
    } else {
        JacobianMode::Analytic
    };
    let mut hj = ChannelReport::new(check, 0.0);
    let mut closed = ChannelReport::new("closedness", 0.0);
    for q in samples {
        check_region(family, region, q)?;
        let (j, m) = gamma_jacobian(family, region, q, params, opts)?;
        if m == JacobianMode::FiniteDifference {
            mode = m;
        }
        let grad = hj_gradient(model, family, region, q, params, &j, m, opts)?;
        hj.record(linalg::max_abs(&grad), q);
        closed.record(closedness_defect(&j), q);
    }
    let tol = opts.pass_tol(mode);
    hj.tolerance = tol;
    closed.tolerance = tol;
    Ok(ResidualReport::assemble(check, Some(region), mode, samples.len(), vec![hj, closed]))
}

/// Residual of `d(H∘γ) = 0` and closedness of `γ` on region samples.
pub fn residual_conservative(
    model: &DynamicsModel,
    family: &dyn SolutionFamily,
    region: usize,
    params: &FamilyParams,
    samples: &[Vector],
    opts: &VerifyOptions,
) -> Result<ResidualReport> {
    if model.kind() != FieldKind::Hamiltonian {
        return Err(Error::FieldMismatch {
            requested: FieldKind::Hamiltonian.as_str(),
            actual: model.kind().as_str(),
        });
    }
    exact_residual("hamilton_jacobi", model, family, region, params, samples, opts)
}

/// Residual of `d(H∘γ) + γ*F = 0` and closedness of `γ`.
pub fn residual_forced(
    model: &DynamicsModel,
    family: &dyn SolutionFamily,
    region: usize,
    params: &FamilyParams,
    samples: &[Vector],
    opts: &VerifyOptions,
) -> Result<ResidualReport> {
    if model.kind() != FieldKind::Forced {
        return Err(Error::FieldMismatch {
            requested: FieldKind::Forced.as_str(),
            actual: model.kind().as_str(),
        });
    }
    exact_residual("forced_hamilton_jacobi", model, family, region, params, samples, opts)
}

/// Energy level, constraint membership, and `dγ` on the constraint
/// distribution.
pub fn residual_nonholonomic(
    model: &DynamicsModel,
    family: &dyn SolutionFamily,
    region: usize,
    params: &FamilyParams,
    samples: &[Vector],
    opts: &VerifyOptions,
) -> Result<ResidualReport> {
    check_family_dim(model, family)?;
    let constraints = model.constraints().ok_or(Error::FieldMismatch {
        requested: FieldKind::Nonholonomic.as_str(),
        actual: model.kind().as_str(),
    })?;
    let mut mode = if opts.finite_differences {
        JacobianMode::FiniteDifference
    } else {
        JacobianMode::Analytic
    };
    let mut energies = Vec::with_capacity(samples.len());
    let mut membership = ChannelReport::new("membership", 0.0);
    let mut d_gamma = ChannelReport::new("d_gamma_on_distribution", 0.0);
    for q in samples {
        check_region(family, region, q)?;
        let x = PhasePoint::new(q.clone(), family.gamma(region, q, params)?)?;
        energies.push(model.energy(&x));
        membership.record(phase::is_on_constraint(model, &x)?.residual, q);
        let (j, m) = gamma_jacobian(family, region, q, params, opts)?;
        if m == JacobianMode::FiniteDifference {
            mode = m;
        }
        let basis = linalg::null_space(&constraints.matrix(q), model.tolerances.rank_tol);
        let mut worst = 0.0_f64;
        for a in 0..basis.ncols() {
            for b in a + 1..basis.ncols() {
                let v = basis.column(a).into_owned();
                let w = basis.column(b).into_owned();
                worst = worst.max(exterior_derivative(&j, &v, &w).abs());
            }
        }
        d_gamma.record(worst, q);
    }
    let mean = if energies.is_empty() {
        0.0
    } else {
        energies.iter().sum::<f64>() / energies.len() as f64
    };
    let mut energy = ChannelReport::new("energy", 0.0);
    for (q, e) in samples.iter().zip(&energies) {
        energy.record((e - mean).abs(), q);
    }
    let tol = opts.pass_tol(mode);
    for c in [&mut energy, &mut membership, &mut d_gamma] {
        c.tolerance = tol;
    }
    Ok(ResidualReport::assemble(
        "nonholonomic_hamilton_jacobi",
        Some(region),
        mode,
        samples.len(),
        vec![energy, membership, d_gamma],
    ))
}

/// Dispatch to the residual check matching the model kind.
pub fn residual_for_model(
    model: &DynamicsModel,
    family: &dyn SolutionFamily,
    region: usize,
    params: &FamilyParams,
    samples: &[Vector],
    opts: &VerifyOptions,
) -> Result<ResidualReport> {
    match model.kind() {
        FieldKind::Hamiltonian => residual_conservative(model, family, region, params, samples, opts),
        FieldKind::Forced => residual_forced(model, family, region, params, samples, opts),
        FieldKind::Nonholonomic => residual_nonholonomic(model, family, region, params, samples, opts),
    }
}

/// A point of the impact surface's base projection with the regions on
/// either side and the pre-impact parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpactSample {
    pub q: Vector,
    pub from: usize,
    pub to: usize,
    pub params: FamilyParams,
}

/// `max ‖γ_to(q; τ(λ)) − p(Δ(q, γ_from(q; λ)))‖_∞` over impact samples.
pub fn delta_relatedness_check(
    reset: &ResetMap,
    family: &dyn SolutionFamily,
    transfer: &dyn TransferMap,
    impacts: &[ImpactSample],
    tolerance: f64,
) -> Result<ResidualReport> {
    let mut channel = ChannelReport::new("delta_related", tolerance);
    for s in impacts {
        let before = PhasePoint::new(s.q.clone(), family.gamma(s.from, &s.q, &s.params)?)?;
        let expected = reset.apply(&before).p;
        let next = transfer.transfer(s.from, s.to, &s.q, &s.params)?;
        let after = family.gamma(s.to, &s.q, &next)?;
        channel.record(linalg::max_abs(&(after - expected)), &s.q);
    }
    Ok(ResidualReport::assemble(
        "delta_relatedness",
        None,
        JacobianMode::Analytic,
        impacts.len(),
        vec![channel],
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletenessGrid {
    /// `(region, q, λ)` points for the local-diffeomorphism channel.
    pub interior: Vec<(usize, Vector, FamilyParams)>,
    pub impacts: Vec<ImpactSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletenessReport {
    pub diffeo: ChannelReport,
    /// Smallest `|det ∂γ/∂λ|` seen; the channel fails when it is `<= diffeo_tol`.
    pub min_abs_det: f64,
    pub transfer: Option<ResidualReport>,
    /// Set when the transfer map has no value on some impact sample.
    pub transfer_error: Option<String>,
    pub passed: bool,
}

/// Rows of `∂γ/∂λ` restricted to independent coordinates of the momentum
/// constraint set (all rows for unconstrained models).
fn restricted_rows(model: &DynamicsModel, q: &Vector, m: usize) -> Result<Vec<usize>> {
    let n = model.dim();
    match (model.constraints(), model.mass_matrix()) {
        (Some(c), Some(g)) => {
            let g_inv = phase::metric_inverse(g, q)?;
            let basis = linalg::null_space(&(c.matrix(q) * g_inv), model.tolerances.rank_tol);
            if basis.ncols() != m {
                return Err(Error::InvalidModel(format!(
                    "family has {m} parameters but the momentum constraint set has fiber dimension {}",
                    basis.ncols()
                )));
            }
            Ok(linalg::pivot_rows(&basis))
        }
        _ if m == n => Ok((0..n).collect()),
        _ => Err(Error::InvalidModel(format!(
            "unconstrained family needs {n} parameters, has {m}"
        ))),
    }
}

/// Local-diffeomorphism and transfer channels of a complete solution.
pub fn complete_solution_check(
    model: &DynamicsModel,
    reset: &ResetMap,
    family: &dyn SolutionFamily,
    transfer: &dyn TransferMap,
    grid: &CompletenessGrid,
    opts: &VerifyOptions,
) -> Result<CompletenessReport> {
    check_family_dim(model, family)?;
    let m = family.param_dim();
    let mut diffeo = ChannelReport::new("local_diffeomorphism", opts.diffeo_tol);
    let mut min_abs_det = f64::INFINITY;
    let mut worst_q: Option<Vec<f64>> = None;
    for (region, q, params) in &grid.interior {
        let rows = restricted_rows(model, q, m)?;
        let (jl, _) = params_jacobian(family, *region, q, params, opts)?;
        let sub = Matrix::from_fn(m, m, |i, j| jl[(rows[i], j)]);
        let det = sub.determinant().abs();
        if det < min_abs_det || det.is_nan() {
            min_abs_det = det;
            worst_q = Some(q.iter().copied().collect());
        }
    }
    if grid.interior.is_empty() {
        min_abs_det = f64::NAN;
    }
    // The channel value is the smallest determinant; pass means it exceeds the floor.
    diffeo.max = min_abs_det;
    diffeo.argmax = worst_q;
    diffeo.passed = min_abs_det > opts.diffeo_tol;

    let tol = opts.pass_tol(JacobianMode::Analytic);
    let (transfer_report, transfer_error) = match delta_relatedness_check(reset, family, transfer, &grid.impacts, tol) {
        Ok(r) => (Some(r), None),
        Err(e @ Error::TransferUndefined { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let passed = diffeo.passed && transfer_report.as_ref().is_some_and(|r| r.passed);
    Ok(CompletenessReport {
        diffeo,
        min_abs_det,
        transfer: transfer_report,
        transfer_error,
        passed,
    })
}

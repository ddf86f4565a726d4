//! Event-driven execution of hybrid systems: integrate the continuous field,
//! locate guard crossings on the Hermite dense output, and apply the impact
//! map.
//!
//! At an impact time the hybrid flow takes the post-impact value `x⁺`; the
//! pre-impact state `x⁻` closes the previous segment and `x⁺` opens the next.
//!
//! Guard re-triggering is controlled per guard. Right after a guard fires, the
//! first step either finds the state departing from the surface (in which case
//! a return to the surface inside that same step is localized past the
//! excursion peak) or passing through it (the guard is then disarmed until it
//! clears the surface by more than `guard_tol`).

use std::fmt;
use std::sync::Arc;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrate::{DenseStep, StepPolicy, Stepper};
use crate::phase::{self, DynamicsModel, FieldKind, PhasePoint, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Triggers when `g` goes from positive to non-positive.
    Decreasing,
    /// Triggers when `g` goes from negative to non-negative.
    Increasing,
    Either,
}

pub type GuardFn = Arc<dyn Fn(&PhasePoint) -> f64 + Send + Sync>;
/// Returns a non-negative residual; the crossing is admissible when it is `<= adm_tol`.
pub type AdmissibilityFn = Arc<dyn Fn(&PhasePoint) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct GuardSpec {
    pub id: usize,
    pub name: String,
    pub direction: Direction,
    g: GuardFn,
    admissibility: Option<AdmissibilityFn>,
}

impl fmt::Debug for GuardSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GuardSpec")
            .field("id", &self.id)
            .field("name", &self.name)
            .field("direction", &self.direction)
            .field("has_admissibility", &self.admissibility.is_some())
            .finish()
    }
}

impl GuardSpec {
    pub fn new<G>(id: usize, name: impl Into<String>, direction: Direction, g: G) -> Self
    where
        G: Fn(&PhasePoint) -> f64 + Send + Sync + 'static,
    {
        Self {
            id,
            name: name.into(),
            direction,
            g: Arc::new(g),
            admissibility: None,
        }
    }

    pub fn with_admissibility<A>(mut self, residual: A) -> Self
    where
        A: Fn(&PhasePoint) -> f64 + Send + Sync + 'static,
    {
        self.admissibility = Some(Arc::new(residual));
        self
    }

    pub fn value(&self, x: &PhasePoint) -> f64 {
        (self.g)(x)
    }

    pub fn admissibility_residual(&self, x: &PhasePoint) -> f64 {
        self.admissibility.as_ref().map_or(0.0, |a| a(x))
    }

    /// Sign that marks the "safe" side of the surface for a directional guard.
    fn safe_sign(&self) -> Option<f64> {
        match self.direction {
            Direction::Decreasing => Some(1.0),
            Direction::Increasing => Some(-1.0),
            Direction::Either => None,
        }
    }
}

#[derive(Clone)]
pub struct ResetMap(Arc<dyn Fn(&PhasePoint) -> PhasePoint + Send + Sync>);

impl fmt::Debug for ResetMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ResetMap(..)")
    }
}

impl ResetMap {
    pub fn new<D>(delta: D) -> Self
    where
        D: Fn(&PhasePoint) -> PhasePoint + Send + Sync + 'static,
    {
        Self(Arc::new(delta))
    }

    pub fn identity() -> Self {
        Self::new(|x| x.clone())
    }

    pub fn apply(&self, x: &PhasePoint) -> PhasePoint {
        (self.0)(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridTolerances {
    pub guard_tol: f64,
    /// Event times are refined to `time_tol * (1 + |t|)`.
    pub time_tol: f64,
    pub adm_tol: f64,
}

impl Default for HybridTolerances {
    fn default() -> Self {
        Self {
            guard_tol: 1e-10,
            time_tol: 1e-12,
            adm_tol: 1e-8,
        }
    }
}

impl HybridTolerances {
    pub fn time_tol_at(&self, t: f64) -> f64 {
        self.time_tol * (1.0 + t.abs())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZenoPolicy {
    pub max_impacts: usize,
    pub zeno_dt: f64,
}

impl Default for ZenoPolicy {
    fn default() -> Self {
        Self {
            max_impacts: 10_000,
            zeno_dt: 1e-9,
        }
    }
}

/// Dynamics, impact surface, and reset map of a simple hybrid system.
#[derive(Clone, Debug)]
pub struct HybridSystem {
    pub model: DynamicsModel,
    pub guards: Vec<GuardSpec>,
    pub reset: ResetMap,
    pub zeno: ZenoPolicy,
    pub tolerances: HybridTolerances,
}

impl HybridSystem {
    pub fn new(model: DynamicsModel, guards: Vec<GuardSpec>, reset: ResetMap) -> Self {
        Self {
            model,
            guards,
            reset,
            zeno: ZenoPolicy::default(),
            tolerances: HybridTolerances::default(),
        }
    }

    pub fn guard(&self, id: usize) -> Option<&GuardSpec> {
        self.guards.iter().find(|g| g.id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpactEvent {
    pub t: f64,
    pub guard_id: usize,
    pub x_minus: PhasePoint,
    pub x_plus: PhasePoint,
    /// Whether the post-impact flow moves away from the surface.
    pub departs: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    HorizonReached,
    ZenoGuard { reason: String },
    Error { message: String },
}

/// Samples of one inter-impact interval with the field value at each sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySegment {
    pub index: usize,
    pub times: Vec<f64>,
    pub states: Vec<PhasePoint>,
    /// Stacked `(q̇, ṗ)` at each sample; drives Hermite resampling.
    pub rates: Vec<Vector>,
}

impl TrajectorySegment {
    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("non-empty segment")
    }

    /// Hermite evaluation; extrapolates from the nearest step outside the span.
    pub fn state_at(&self, t: f64) -> PhasePoint {
        if self.times.len() == 1 {
            return self.states[0].clone();
        }
        let last = self.times.len() - 2;
        let i = self.times.partition_point(|&s| s < t).saturating_sub(1).min(last);
        let step = DenseStep {
            t0: self.times[i],
            t1: self.times[i + 1],
            y0: self.states[i].stacked(),
            y1: self.states[i + 1].stacked(),
            f0: self.rates[i].clone(),
            f1: self.rates[i + 1].clone(),
        };
        PhasePoint::from_stacked(&step.eval(t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridTrajectory {
    pub dim: usize,
    pub segments: Vec<TrajectorySegment>,
    pub events: Vec<ImpactEvent>,
    pub termination: Termination,
}

impl HybridTrajectory {
    pub fn initial_state(&self) -> &PhasePoint {
        &self.segments[0].states[0]
    }

    pub fn final_state(&self) -> &PhasePoint {
        self.segments
            .last()
            .and_then(|s| s.states.last())
            .expect("trajectory has a sample")
    }

    pub fn t_end(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.t_end())
    }

    /// Every sample as `(t, segment index, state)`.
    pub fn samples(&self) -> impl Iterator<Item = (f64, usize, &PhasePoint)> {
        self.segments
            .iter()
            .flat_map(|s| s.times.iter().zip(s.states.iter()).map(move |(t, x)| (*t, s.index, x)))
    }

    pub fn sample_count(&self) -> usize {
        self.segments.iter().map(|s| s.times.len()).sum()
    }

    /// Hybrid flow value at `t`; at an impact time this is `x⁺`.
    pub fn state_at(&self, t: f64) -> Option<PhasePoint> {
        let first = self.segments.first()?;
        if t < first.t_start() || t > self.t_end() {
            return None;
        }
        let seg = self
            .segments
            .iter()
            .rev()
            .find(|s| s.t_start() <= t)
            .unwrap_or(first);
        Some(seg.state_at(t))
    }
}

/// How the integration of one segment ended.
#[derive(Clone, Debug)]
pub(crate) enum SegmentEnd {
    Horizon,
    Impact { guard_index: usize },
    /// The flow returned to the surface without ever clearing it.
    Chatter { guard_index: usize },
}

#[derive(Clone, Debug)]
pub(crate) struct SegmentRun {
    pub times: Vec<f64>,
    pub ys: Vec<Vector>,
    pub fs: Vec<Vector>,
    pub end: SegmentEnd,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum GuardState {
    Armed,
    /// Ignored until `sigma * g > guard_tol`.
    Disarmed { sigma: f64 },
    /// First step after this guard fired.
    JustFired { sigma: f64, departs: bool },
}

/// Per-guard arming state carried across segments.
#[derive(Clone, Debug)]
pub(crate) struct GuardMonitor {
    states: Vec<GuardState>,
}

impl GuardMonitor {
    pub fn new(count: usize) -> Self {
        Self {
            states: vec![GuardState::Armed; count],
        }
    }

    pub fn fired(&mut self, index: usize, sigma: f64, departs: bool) {
        self.states[index] = GuardState::JustFired { sigma, departs };
    }
}

/// Directional derivative of `g ∘ lift` along the flow at `y`.
pub(crate) fn guard_rate<L>(guard: &GuardSpec, lift: &L, y: &Vector, f: &Vector) -> Result<f64>
where
    L: Fn(&Vector) -> Result<PhasePoint>,
{
    let eps = 1e-7 / (1.0 + f.norm());
    let plus = guard.value(&lift(&(y + f * eps))?);
    let minus = guard.value(&lift(&(y - f * eps))?);
    Ok((plus - minus) / (2.0 * eps))
}

/// Safe-side sign and departure flag for a guard right after it fired.
pub(crate) fn departure(guard: &GuardSpec, rate: f64) -> (f64, bool) {
    let sigma = guard
        .safe_sign()
        .unwrap_or(if rate >= 0.0 { 1.0 } else { -1.0 });
    (sigma, sigma * rate > 0.0)
}

fn golden_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        if (b - a).abs() <= 1e-15 * (1.0 + a.abs()) {
            break;
        }
    }
    let t = 0.5 * (a + b);
    (t, f(t))
}

/// Bisection for the crossing of `sigma * g` from positive to non-positive on
/// `[t_lo, t_hi]`. Returns the last time on the untriggered side.
fn bisect_crossing<F>(phi: F, t_lo: f64, t_hi: f64, guard_tol: f64, time_tol: f64, guard_id: usize) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let (mut lo, mut hi) = (t_lo, t_hi);
    let phi_lo = phi(lo)?;
    if phi_lo.abs() <= guard_tol && phi_lo >= 0.0 {
        return Ok(lo);
    }
    if !(phi_lo > 0.0 && phi(hi)? <= 0.0) {
        return Err(Error::BracketLost {
            guard_id,
            t_a: t_lo,
            t_b: t_hi,
        });
    }
    while hi - lo > time_tol * (1.0 + lo.abs()) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Earliest directional crossing among `guards` on `bracket`, located on a
/// dense evaluator. `None` when no guard changes sign in the required sense.
pub fn locate_event<D>(
    dense: D,
    guards: &[GuardSpec],
    bracket: (f64, f64),
    tolerances: &HybridTolerances,
) -> Result<Option<(f64, usize)>>
where
    D: Fn(f64) -> PhasePoint,
{
    let (t_a, t_b) = bracket;
    let mut best: Option<(f64, usize)> = None;
    for guard in guards {
        let g_a = guard.value(&dense(t_a));
        let g_b = guard.value(&dense(t_b));
        let sigma = match guard.safe_sign() {
            Some(s) => s,
            None if g_a != 0.0 => g_a.signum(),
            None => continue,
        };
        let triggered_at_start = g_a.abs() <= tolerances.guard_tol;
        if !(triggered_at_start || (sigma * g_a > 0.0 && sigma * g_b <= 0.0)) {
            continue;
        }
        let t_star = if triggered_at_start {
            t_a
        } else {
            bisect_crossing(
                |t| Ok(sigma * guard.value(&dense(t))),
                t_a,
                t_b,
                tolerances.guard_tol,
                tolerances.time_tol,
                guard.id,
            )?
        };
        if best.is_none_or(|(t, _)| t_star < t) {
            best = Some((t_star, guard.id));
        }
    }
    Ok(best)
}

struct Candidate {
    t_star: f64,
    guard_index: usize,
    sigma: f64,
    bracket: (f64, f64),
}

/// Integrate from `(t0, y0)` until the first admissible impact or `horizon`.
///
/// `rhs` is the flow on the integration state `y`; `lift` turns `y` into the
/// phase point that guards are evaluated on.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_segment<F, L>(
    rhs: F,
    lift: &L,
    guards: &[GuardSpec],
    monitor: &mut GuardMonitor,
    y0: Vector,
    t0: f64,
    horizon: f64,
    policy: &StepPolicy,
    tol: &HybridTolerances,
) -> Result<SegmentRun>
where
    F: Fn(f64, &Vector) -> Result<Vector>,
    L: Fn(&Vector) -> Result<PhasePoint>,
{
    let mut stepper = Stepper::new(rhs, *policy);
    let mut t = t0;
    let mut y = y0;
    let mut f = stepper.rhs(t, &y)?;
    let mut run = SegmentRun {
        times: vec![t],
        ys: vec![y.clone()],
        fs: vec![f.clone()],
        end: SegmentEnd::Horizon,
    };
    let mut g_now: Vec<f64> = {
        let x = lift(&y)?;
        guards.iter().map(|g| g.value(&x)).collect()
    };

    while t < horizon {
        let acc = stepper.step(t, &y, &f, horizon)?;
        let step = DenseStep {
            t0: t,
            t1: acc.t,
            y0: y.clone(),
            y1: acc.y.clone(),
            f0: f.clone(),
            f1: acc.f.clone(),
        };
        let x_b = lift(&acc.y)?;
        let g_next: Vec<f64> = guards.iter().map(|g| g.value(&x_b)).collect();
        let dense_g = |i: usize, s: f64| -> Result<f64> { Ok(guards[i].value(&lift(&step.eval(s))?)) };

        let mut candidates = Vec::new();
        for (i, guard) in guards.iter().enumerate() {
            let (g_a, g_b) = (g_now[i], g_next[i]);
            match monitor.states[i] {
                GuardState::Armed => {
                    let sigma = match guard.safe_sign() {
                        Some(s) => s,
                        None if g_a != 0.0 => g_a.signum(),
                        None => continue,
                    };
                    if sigma * g_a > 0.0 && sigma * g_b <= 0.0 {
                        candidates.push((i, sigma, (t, acc.t)));
                    }
                }
                GuardState::Disarmed { .. } => {}
                GuardState::JustFired { sigma, departs } => {
                    if !departs || sigma * g_b > 0.0 {
                        continue;
                    }
                    let (t_peak, peak) = golden_max(|s| sigma * dense_g(i, s).unwrap_or(f64::NEG_INFINITY), t, acc.t);
                    if peak > 0.0 {
                        candidates.push((i, sigma, (t_peak, acc.t)));
                    } else {
                        debug!("guard {} chatter at t = {t_peak}", guard.id);
                        run.end = SegmentEnd::Chatter { guard_index: i };
                        return Ok(run);
                    }
                }
            }
        }

        let mut located = Vec::with_capacity(candidates.len());
        for (i, sigma, bracket) in candidates {
            let t_star = bisect_crossing(
                |s| Ok(sigma * dense_g(i, s)?),
                bracket.0,
                bracket.1,
                tol.guard_tol,
                tol.time_tol,
                guards[i].id,
            )?;
            located.push(Candidate {
                t_star,
                guard_index: i,
                sigma,
                bracket,
            });
        }
        located.sort_by(|a, b| a.t_star.total_cmp(&b.t_star).then(a.guard_index.cmp(&b.guard_index)));

        for cand in located {
            let i = cand.guard_index;
            let guard = &guards[i];
            let (y_minus, t_star) = impact_state(&stepper, lift, guard, &cand, t, &y, &f, tol)?;
            let x_minus = lift(&y_minus)?;
            let adm = guard.admissibility_residual(&x_minus);
            if adm > tol.adm_tol {
                warn!(
                    "guard {} crossed at t = {t_star} without admissibility (residual {adm:e}); continuing through",
                    guard.id
                );
                monitor.states[i] = GuardState::Disarmed { sigma: cand.sigma };
                continue;
            }
            let f_minus = stepper.rhs(t_star, &y_minus)?;
            run.times.push(t_star);
            run.ys.push(y_minus);
            run.fs.push(f_minus);
            run.end = SegmentEnd::Impact { guard_index: i };
            return Ok(run);
        }

        // No impact in this step: update arming state.
        for (i, state) in monitor.states.iter_mut().enumerate() {
            *state = match *state {
                GuardState::Armed => GuardState::Armed,
                GuardState::Disarmed { sigma } if sigma * g_next[i] > tol.guard_tol => GuardState::Armed,
                GuardState::Disarmed { sigma } => GuardState::Disarmed { sigma },
                GuardState::JustFired { sigma, departs } if departs && sigma * g_next[i] > 0.0 => GuardState::Armed,
                GuardState::JustFired { sigma, .. } => {
                    if sigma * g_next[i] > tol.guard_tol {
                        GuardState::Armed
                    } else {
                        GuardState::Disarmed { sigma }
                    }
                }
            };
        }
        t = acc.t;
        y = acc.y;
        f = acc.f;
        g_now = g_next;
        run.times.push(t);
        run.ys.push(y.clone());
        run.fs.push(f.clone());
    }
    Ok(run)
}

/// Integrator state at the located crossing, re-integrated from the step
/// start. Falls back to bisection on the RK4 substep map when the Hermite
/// estimate misses the guard tolerance.
#[allow(clippy::too_many_arguments)]
fn impact_state<F, L>(
    stepper: &Stepper<F>,
    lift: &L,
    guard: &GuardSpec,
    cand: &Candidate,
    t_a: f64,
    y_a: &Vector,
    f_a: &Vector,
    tol: &HybridTolerances,
) -> Result<(Vector, f64)>
where
    F: Fn(f64, &Vector) -> Result<Vector>,
    L: Fn(&Vector) -> Result<PhasePoint>,
{
    let y_star = stepper.substep(t_a, y_a, f_a, cand.t_star - t_a)?;
    let phi_star = cand.sigma * guard.value(&lift(&y_star)?);
    if phi_star >= 0.0 && phi_star <= tol.guard_tol {
        return Ok((y_star, cand.t_star));
    }
    let phi = |s: f64| -> Result<f64> { Ok(cand.sigma * guard.value(&lift(&stepper.substep(t_a, y_a, f_a, s - t_a)?)?)) };
    let t_star = bisect_crossing(phi, cand.bracket.0, cand.bracket.1, tol.guard_tol, tol.time_tol, guard.id)?;
    Ok((stepper.substep(t_a, y_a, f_a, t_star - t_a)?, t_star))
}

fn to_segment(index: usize, run: &SegmentRun) -> TrajectorySegment {
    TrajectorySegment {
        index,
        times: run.times.clone(),
        states: run.ys.iter().map(PhasePoint::from_stacked).collect(),
        rates: run.fs.clone(),
    }
}

/// Outcome of the Zeno checks after an impact.
pub(crate) fn zeno_check(events: &[f64], policy: &ZenoPolicy) -> Option<String> {
    if events.len() > policy.max_impacts {
        return Some(format!("impact count exceeded max_impacts = {}", policy.max_impacts));
    }
    if let [.., prev, last] = events {
        if last - prev < policy.zeno_dt {
            return Some(format!(
                "consecutive impacts {:e} apart (< zeno_dt = {:e})",
                last - prev,
                policy.zeno_dt
            ));
        }
    }
    None
}

/// Simulate from `x0` at `t = 0` up to `horizon`.
pub fn simulate_hybrid(
    system: &HybridSystem,
    x0: &PhasePoint,
    horizon: f64,
    policy: &StepPolicy,
) -> Result<HybridTrajectory> {
    let (traj, err) = simulate_inner(system, x0, horizon, policy)?;
    match err {
        Some(e) => Err(e),
        None => Ok(traj),
    }
}

/// Like [`simulate_hybrid`], but a runtime failure after the start is
/// reported through [`Termination::Error`] together with the partial
/// trajectory.
pub fn simulate_hybrid_partial(
    system: &HybridSystem,
    x0: &PhasePoint,
    horizon: f64,
    policy: &StepPolicy,
) -> Result<HybridTrajectory> {
    let (mut traj, err) = simulate_inner(system, x0, horizon, policy)?;
    if let Some(e) = err {
        traj.termination = Termination::Error { message: e.to_string() };
    }
    Ok(traj)
}

fn simulate_inner(
    system: &HybridSystem,
    x0: &PhasePoint,
    horizon: f64,
    policy: &StepPolicy,
) -> Result<(HybridTrajectory, Option<Error>)> {
    let model = &system.model;
    let tol = &system.tolerances;
    policy.validate()?;
    model.check_dim(x0)?;
    if !x0.is_finite() {
        return Err(Error::NonFiniteState { t: 0.0 });
    }
    if !(horizon >= 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be >= 0, got {horizon}")));
    }
    if model.kind() == FieldKind::Nonholonomic {
        let check = phase::is_on_constraint(model, x0)?;
        if !check.on_manifold {
            return Err(Error::ConstraintViolation {
                residual: check.residual,
                tol: model.tolerances.constraint_tol,
            });
        }
    }
    for guard in &system.guards {
        if guard.value(x0).abs() <= tol.guard_tol && guard.admissibility_residual(x0) <= tol.adm_tol {
            return Err(Error::InvalidArgument(format!(
                "initial state lies on the impact surface of guard {}",
                guard.id
            )));
        }
    }

    let rhs = |_t: f64, y: &Vector| {
        phase::evaluate_field_unchecked(model, &PhasePoint::from_stacked(y)).map(|f| f.stacked())
    };
    let lift = |y: &Vector| Ok(PhasePoint::from_stacked(y));
    let mut monitor = GuardMonitor::new(system.guards.len());
    let mut traj = HybridTrajectory {
        dim: model.dim(),
        segments: Vec::new(),
        events: Vec::new(),
        termination: Termination::HorizonReached,
    };
    let mut impact_times = Vec::new();
    let mut t = 0.0;
    let mut y = x0.stacked();

    loop {
        let run = match run_segment(rhs, &lift, &system.guards, &mut monitor, y.clone(), t, horizon, policy, tol) {
            Ok(run) => run,
            Err(e) if !traj.segments.is_empty() => return Ok((traj, Some(e))),
            Err(e) => return Err(e),
        };
        let index = traj.segments.len();
        traj.segments.push(to_segment(index, &run));
        let guard_index = match run.end {
            SegmentEnd::Horizon => break,
            SegmentEnd::Chatter { guard_index } => {
                traj.termination = Termination::ZenoGuard {
                    reason: format!(
                        "flow returned to guard {} without clearing it",
                        system.guards[guard_index].id
                    ),
                };
                break;
            }
            SegmentEnd::Impact { guard_index } => guard_index,
        };
        let guard = &system.guards[guard_index];
        let t_star = *run.times.last().expect("impact sample");
        let x_minus = PhasePoint::from_stacked(run.ys.last().expect("impact sample"));
        let x_plus = system.reset.apply(&x_minus);
        if model.kind() == FieldKind::Nonholonomic {
            let check = phase::is_on_constraint(model, &x_plus)?;
            if !check.on_manifold {
                return Ok((
                    traj,
                    Some(Error::ResetOffConstraint {
                        t: t_star,
                        residual: check.residual,
                    }),
                ));
            }
        }
        if !x_plus.is_finite() {
            return Ok((traj, Some(Error::NonFiniteState { t: t_star })));
        }
        let y_plus = x_plus.stacked();
        let f_plus = match rhs(t_star, &y_plus) {
            Ok(f) => f,
            Err(e) => return Ok((traj, Some(e))),
        };
        let (sigma, departs) = departure(guard, guard_rate(guard, &lift, &y_plus, &f_plus)?);
        monitor.fired(guard_index, sigma, departs);
        debug!("impact on guard {} at t = {t_star}", guard.id);
        traj.events.push(ImpactEvent {
            t: t_star,
            guard_id: guard.id,
            x_minus,
            x_plus,
            departs,
        });
        impact_times.push(t_star);
        if let Some(reason) = zeno_check(&impact_times, &system.zeno) {
            traj.termination = Termination::ZenoGuard { reason };
            break;
        }
        t = t_star;
        y = y_plus;
        if t >= horizon {
            traj.segments.push(TrajectorySegment {
                index: index + 1,
                times: vec![t],
                states: vec![PhasePoint::from_stacked(&y)],
                rates: vec![f_plus],
            });
            break;
        }
    }
    Ok((traj, None))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantReport {
    pub reference: f64,
    pub max_drift: f64,
    pub t_at_max: f64,
    pub samples: usize,
}

/// Largest deviation of `f` from its initial value over every sample,
/// including both sides of each impact.
pub fn check_hybrid_constant<F>(trajectory: &HybridTrajectory, f: F) -> ConstantReport
where
    F: Fn(&PhasePoint) -> f64,
{
    let reference = f(trajectory.initial_state());
    let mut report = ConstantReport {
        reference,
        max_drift: 0.0,
        t_at_max: trajectory.segments[0].t_start(),
        samples: 0,
    };
    for (t, _, x) in trajectory.samples() {
        let drift = (f(x) - reference).abs();
        report.samples += 1;
        if drift > report.max_drift || drift.is_nan() {
            report.max_drift = drift;
            report.t_at_max = t;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::{MechanicalHamiltonian, Potential};

    fn free_2d() -> DynamicsModel {
        DynamicsModel::conservative(Arc::new(MechanicalHamiltonian::free(&[1.0, 1.0]).unwrap()))
    }

    fn circle_guard() -> GuardSpec {
        GuardSpec::new(0, "wall", Direction::Decreasing, |x: &PhasePoint| {
            1.0 - x.q.norm_squared()
        })
    }

    fn reflect() -> ResetMap {
        ResetMap::new(|x: &PhasePoint| {
            let dot = x.q.dot(&x.p);
            x.with_momentum(&x.p - &x.q * (2.0 * dot))
        })
    }

    fn billiard() -> HybridSystem {
        HybridSystem::new(free_2d(), vec![circle_guard()], reflect())
    }

    #[test]
    fn locate_event_straight_line() {
        // From (0, -0.5) moving up at unit speed the wall is hit at t = 1.5.
        let dense = |t: f64| PhasePoint::from_slices(&[0.0, -0.5 + t], &[0.0, 1.0]).unwrap();
        let hit = locate_event(dense, &[circle_guard()], (1.0, 2.0), &HybridTolerances::default())
            .unwrap()
            .unwrap();
        assert!((hit.0 - 1.5).abs() <= 1e-10);
        assert_eq!(hit.1, 0);
    }

    #[test]
    fn locate_event_at_bracket_start() {
        let dense = |t: f64| PhasePoint::from_slices(&[0.0, 1.0 + t - 2.0], &[0.0, 1.0]).unwrap();
        let hit = locate_event(dense, &[circle_guard()], (2.0, 2.5), &HybridTolerances::default())
            .unwrap()
            .unwrap();
        assert_eq!(hit.0, 2.0);
    }

    #[test]
    fn locate_event_reports_earliest_guard() {
        let low = GuardSpec::new(1, "low", Direction::Decreasing, |x: &PhasePoint| x.q[0] - 0.2);
        let high = GuardSpec::new(2, "high", Direction::Decreasing, |x: &PhasePoint| 0.7 - x.q[0]);
        // Moving up: "high" is crossed at t = 0.7, "low" never.
        let up = |t: f64| PhasePoint::from_slices(&[t], &[1.0]).unwrap();
        let hit = locate_event(up, &[low.clone(), high.clone()], (0.5, 1.0), &HybridTolerances::default())
            .unwrap()
            .unwrap();
        assert_eq!(hit.1, 2);
        assert!((hit.0 - 0.7).abs() < 1e-11);
        // Both guards crossed within one bracket: earlier one wins.
        let both = GuardSpec::new(3, "mid", Direction::Decreasing, |x: &PhasePoint| 0.6 - x.q[0]);
        let hit = locate_event(up, &[high, both], (0.5, 1.0), &HybridTolerances::default())
            .unwrap()
            .unwrap();
        assert_eq!(hit.1, 3);
    }

    #[test]
    fn billiard_impacts_at_known_times() {
        let x0 = PhasePoint::from_slices(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        let traj = simulate_hybrid(&billiard(), &x0, 3.5, &StepPolicy::default()).unwrap();
        assert_eq!(traj.events.len(), 2);
        assert!((traj.events[0].t - 1.0).abs() < 1e-10);
        assert!((traj.events[1].t - 3.0).abs() < 1e-10);
        assert!((traj.events[0].x_minus.q[0] - 1.0).abs() < 1e-10);
        assert!((traj.events[1].x_minus.q[0] + 1.0).abs() < 1e-10);
        assert!((traj.events[0].x_plus.p[0] + 1.0).abs() < 1e-9);
        assert!((traj.events[1].x_plus.p[0] - 1.0).abs() < 1e-9);
        assert!(traj.events.iter().all(|e| e.departs));
        assert_eq!(traj.termination, Termination::HorizonReached);
        assert_eq!(traj.segments.len(), 3);
    }

    #[test]
    fn segments_start_at_post_impact_state() {
        let x0 = PhasePoint::from_slices(&[0.1, -0.2], &[0.6, 0.8]).unwrap();
        let traj = simulate_hybrid(&billiard(), &x0, 6.0, &StepPolicy::default()).unwrap();
        assert!(traj.events.len() >= 3);
        for (k, ev) in traj.events.iter().enumerate() {
            assert_eq!(traj.segments[k].states.last().unwrap(), &ev.x_minus);
            assert_eq!(traj.segments[k + 1].states[0], ev.x_plus);
            assert_eq!(traj.state_at(ev.t).unwrap(), ev.x_plus);
            assert!(circle_guard().value(&ev.x_minus).abs() <= 1e-10);
        }
        assert!(traj.events.windows(2).all(|w| w[0].t < w[1].t));
    }

    #[test]
    fn empty_guard_set_is_plain_ode_solve() {
        let system = HybridSystem::new(free_2d(), vec![], ResetMap::identity());
        let x0 = PhasePoint::from_slices(&[0.0, 0.0], &[1.0, 0.5]).unwrap();
        let traj = simulate_hybrid(&system, &x0, 2.0, &StepPolicy::default()).unwrap();
        assert_eq!(traj.segments.len(), 1);
        assert!(traj.events.is_empty());
        let xf = traj.final_state();
        assert!((xf.q[0] - 2.0).abs() < 1e-12 && (xf.q[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_horizon_gives_single_sample() {
        let x0 = PhasePoint::from_slices(&[0.0, 0.0], &[1.0, 0.5]).unwrap();
        let traj = simulate_hybrid(&billiard(), &x0, 0.0, &StepPolicy::default()).unwrap();
        assert_eq!(traj.sample_count(), 1);
    }

    #[test]
    fn initial_state_on_surface_is_rejected() {
        let x0 = PhasePoint::from_slices(&[1.0, 0.0], &[-1.0, 0.0]).unwrap();
        assert!(simulate_hybrid(&billiard(), &x0, 1.0, &StepPolicy::default()).is_err());
    }

    #[test]
    fn hybrid_constants_of_billiard() {
        let x0 = PhasePoint::from_slices(&[0.1, -0.2], &[0.6, 0.8]).unwrap();
        let traj = simulate_hybrid(&billiard(), &x0, 8.0, &StepPolicy::default()).unwrap();
        let energy = check_hybrid_constant(&traj, |x| 0.5 * x.p.norm_squared());
        let ang = check_hybrid_constant(&traj, |x| x.q[0] * x.p[1] - x.q[1] * x.p[0]);
        let px = check_hybrid_constant(&traj, |x| x.p[0]);
        assert!(energy.max_drift < 1e-9);
        assert!(ang.max_drift < 1e-9);
        assert!(px.max_drift > 0.1);
        assert_eq!(energy.samples, traj.sample_count());
    }

    fn bouncing(e: f64) -> HybridSystem {
        let h = MechanicalHamiltonian::new(
            Vector::from_element(1, 1.0),
            Potential::Uniform {
                gradient: Vector::from_element(1, 1.0),
            },
        )
        .unwrap();
        HybridSystem::new(
            DynamicsModel::conservative(Arc::new(h)),
            vec![GuardSpec::new(0, "floor", Direction::Decreasing, |x: &PhasePoint| x.q[0])],
            ResetMap::new(move |x: &PhasePoint| x.with_momentum(-&x.p * e)),
        )
    }

    #[test]
    fn inelastic_bounce_hits_zeno_guard() {
        let x0 = PhasePoint::from_slices(&[0.5], &[0.0]).unwrap();
        let traj = simulate_hybrid(&bouncing(0.5), &x0, 10.0, &StepPolicy::default()).unwrap();
        assert!(matches!(traj.termination, Termination::ZenoGuard { .. }), "{:?}", traj.termination);
        assert!(traj.events.len() <= ZenoPolicy::default().max_impacts + 1);
        // Flight times shrink geometrically by e.
        let dts: Vec<f64> = traj.events.windows(2).map(|w| w[1].t - w[0].t).collect();
        assert!((dts[1] / dts[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn max_impacts_limit() {
        let mut system = bouncing(1.0);
        system.zeno.max_impacts = 5;
        let x0 = PhasePoint::from_slices(&[0.5], &[0.0]).unwrap();
        let traj = simulate_hybrid(&system, &x0, 100.0, &StepPolicy::default()).unwrap();
        assert!(matches!(traj.termination, Termination::ZenoGuard { .. }));
        assert_eq!(traj.events.len(), 6);
    }

    #[test]
    fn pass_through_guard_does_not_retrigger() {
        // Identity reset: the flow crosses q = 0 and keeps going.
        let system = HybridSystem::new(
            DynamicsModel::conservative(Arc::new(MechanicalHamiltonian::free(&[1.0]).unwrap())),
            vec![GuardSpec::new(0, "plane", Direction::Decreasing, |x: &PhasePoint| x.q[0])],
            ResetMap::identity(),
        );
        let x0 = PhasePoint::from_slices(&[0.5], &[-1.0]).unwrap();
        let traj = simulate_hybrid(&system, &x0, 2.0, &StepPolicy::default()).unwrap();
        assert_eq!(traj.events.len(), 1);
        assert!(!traj.events[0].departs);
        assert!((traj.final_state().q[0] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn inadmissible_crossing_is_ignored() {
        let guard = GuardSpec::new(0, "wall", Direction::Decreasing, |x: &PhasePoint| x.q[0])
            .with_admissibility(|x: &PhasePoint| (x.p[1] - 1.0).abs());
        let system = HybridSystem::new(free_2d(), vec![guard], reflect());
        let x0 = PhasePoint::from_slices(&[0.5, 0.0], &[-1.0, 0.0]).unwrap();
        let traj = simulate_hybrid(&system, &x0, 1.0, &StepPolicy::default()).unwrap();
        assert!(traj.events.is_empty());
    }

    #[test]
    fn simulation_is_deterministic() {
        let x0 = PhasePoint::from_slices(&[0.1, -0.2], &[0.6, 0.8]).unwrap();
        let a = simulate_hybrid(&billiard(), &x0, 5.0, &StepPolicy::default()).unwrap();
        let b = simulate_hybrid(&billiard(), &x0, 5.0, &StepPolicy::default()).unwrap();
        assert_eq!(a, b);
    }
}

//! Rebuilding hybrid trajectories from a complete solution: integrate only the
//! base dynamics `q̇ = Tπ(X_H(γ_k(q; λ_k)))` inside each region, carry the
//! parameters across impacts with the transfer map, and lift every base
//! sample through `γ`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::{
    departure, guard_rate, run_segment, zeno_check, GuardMonitor, HybridSystem, HybridTrajectory, ImpactEvent,
    SegmentEnd, Termination, TrajectorySegment,
};
use crate::integrate::StepPolicy;
use crate::linalg;
use crate::phase::{self, PhasePoint, Vector};
use crate::verify::{self, FamilyParams, SolutionFamily, TransferMap, VerifyOptions};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructOptions {
    pub policy: StepPolicy,
    /// Allowed mismatch between the transferred lift and the reset image.
    pub lift_tol: f64,
    /// Residual level above which the initial family member draws a warning.
    pub advisory_tol: f64,
    /// Probe time for post-impact region inference, in units of the event
    /// time tolerance.
    pub probe_factor: f64,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self {
            policy: StepPolicy::default(),
            lift_tol: 1e-8,
            advisory_tol: 1e-6,
            probe_factor: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseSegment {
    pub region: usize,
    pub params: FamilyParams,
    pub times: Vec<f64>,
    pub points: Vec<Vector>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub t: f64,
    pub from_region: usize,
    pub to_region: usize,
    pub params_before: FamilyParams,
    pub params_after: FamilyParams,
    /// `‖γ_to(q*; λ′) − p(Δ(q*, γ_from(q*; λ)))‖_∞`.
    pub lift_mismatch: f64,
    pub within_tol: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionRun {
    pub base_segments: Vec<BaseSegment>,
    /// Lifted samples `(q, γ_k(q; λ_k))`.
    pub lifted: HybridTrajectory,
    pub transfer_log: Vec<TransferRecord>,
}

/// Regions whose predicate holds at `q`.
fn regions_at(family: &dyn SolutionFamily, q: &Vector) -> Vec<usize> {
    family
        .regions()
        .into_iter()
        .map(|r| r.id)
        .filter(|&id| family.contains(id, q))
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn reconstruct(
    system: &HybridSystem,
    family: &dyn SolutionFamily,
    transfer: &dyn TransferMap,
    q0: &Vector,
    params0: &FamilyParams,
    region0: usize,
    horizon: f64,
    opts: &ReconstructOptions,
) -> Result<ReconstructionRun> {
    let model = &system.model;
    let tol = &system.tolerances;
    opts.policy.validate()?;
    if q0.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: q0.len(),
            context: "initial base point vs model",
        });
    }
    if !(horizon >= 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be >= 0, got {horizon}")));
    }
    if !family.contains(region0, q0) {
        return Err(Error::RegionViolation {
            region: region0,
            q: q0.iter().copied().collect(),
        });
    }
    let verify_opts = VerifyOptions::default();
    let advisory = verify::residual_for_model(model, family, region0, params0, std::slice::from_ref(q0), &verify_opts)?;
    if advisory.max_residual > opts.advisory_tol {
        warn!(
            "initial family member has residual {:e} (> {:e}); reconstruction may not follow the hybrid flow",
            advisory.max_residual, opts.advisory_tol
        );
    }

    let mut run = ReconstructionRun {
        base_segments: Vec::new(),
        lifted: HybridTrajectory {
            dim: model.dim(),
            segments: Vec::new(),
            events: Vec::new(),
            termination: Termination::HorizonReached,
        },
        transfer_log: Vec::new(),
    };
    let mut monitor = GuardMonitor::new(system.guards.len());
    let mut impact_times = Vec::new();
    let mut region = region0;
    let mut params = params0.clone();
    let mut t = 0.0;
    let mut q = q0.clone();

    loop {
        let lift = |y: &Vector| -> Result<PhasePoint> { PhasePoint::new(y.clone(), family.gamma(region, y, &params)?) };
        let rhs = |_t: f64, y: &Vector| phase::projected_field(model, |s: &Vector| family.gamma(region, s, &params), y);
        let seg = run_segment(rhs, &lift, &system.guards, &mut monitor, q.clone(), t, horizon, &opts.policy, tol)?;

        let mut states = Vec::with_capacity(seg.ys.len());
        let mut rates = Vec::with_capacity(seg.ys.len());
        for (y, qdot) in seg.ys.iter().zip(&seg.fs) {
            let x = lift(y)?;
            let (j, _) = verify::gamma_jacobian(family, region, y, &params, &verify_opts)?;
            let pdot = &j * qdot;
            rates.push(PhasePoint::new(qdot.clone(), pdot)?.stacked());
            states.push(x);
        }
        let index = run.lifted.segments.len();
        run.lifted.segments.push(TrajectorySegment {
            index,
            times: seg.times.clone(),
            states,
            rates,
        });
        run.base_segments.push(BaseSegment {
            region,
            params: params.clone(),
            times: seg.times.clone(),
            points: seg.ys.clone(),
        });

        let guard_index = match seg.end {
            SegmentEnd::Horizon => break,
            SegmentEnd::Chatter { guard_index } => {
                run.lifted.termination = Termination::ZenoGuard {
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
        let t_star = *seg.times.last().expect("impact sample");
        let q_star = seg.ys.last().expect("impact sample").clone();
        let x_minus = lift(&q_star)?;
        let reset_image = system.reset.apply(&x_minus);
        let qdot_plus = phase::base_velocity(model, &reset_image)?;
        let probe = &q_star + qdot_plus * (opts.probe_factor * tol.time_tol_at(t_star));
        let next_region = match regions_at(family, &probe)[..] {
            [only] => only,
            ref matches => {
                return Err(Error::RegionAmbiguous {
                    q: probe.iter().copied().collect(),
                    matches: matches.len(),
                })
            }
        };
        let next_params = transfer.transfer(region, next_region, &q_star, &params)?;
        let p_plus = family.gamma(next_region, &q_star, &next_params)?;
        let mismatch = linalg::max_abs(&(&p_plus - &reset_image.p));
        if mismatch > opts.lift_tol {
            warn!("lift after impact at t = {t_star} misses the reset image by {mismatch:e}");
        }
        run.transfer_log.push(TransferRecord {
            t: t_star,
            from_region: region,
            to_region: next_region,
            params_before: params.clone(),
            params_after: next_params.clone(),
            lift_mismatch: mismatch,
            within_tol: mismatch <= opts.lift_tol,
        });
        let x_plus = PhasePoint::new(q_star.clone(), p_plus)?;

        region = next_region;
        params = next_params;
        let lift_next = |y: &Vector| -> Result<PhasePoint> { PhasePoint::new(y.clone(), family.gamma(region, y, &params)?) };
        let qdot_next = phase::projected_field(model, |s: &Vector| family.gamma(region, s, &params), &q_star)?;
        let (sigma, departs) = departure(guard, guard_rate(guard, &lift_next, &q_star, &qdot_next)?);
        monitor.fired(guard_index, sigma, departs);
        run.lifted.events.push(ImpactEvent {
            t: t_star,
            guard_id: guard.id,
            x_minus,
            x_plus,
            departs,
        });
        impact_times.push(t_star);
        if let Some(reason) = zeno_check(&impact_times, &system.zeno) {
            run.lifted.termination = Termination::ZenoGuard { reason };
            break;
        }
        t = t_star;
        q = q_star;
        if t >= horizon {
            break;
        }
    }
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentDiscrepancy {
    pub index: usize,
    pub sup: f64,
    pub t_at_sup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub segments: Vec<SegmentDiscrepancy>,
    pub sup_discrepancy: f64,
    pub impact_time_diffs: Vec<f64>,
    pub max_impact_time_diff: f64,
    pub direct_impacts: usize,
    pub reconstructed_impacts: usize,
    pub impact_count_mismatch: bool,
}

/// Sup-norm state discrepancy per segment, evaluating `other` on the sample
/// grid of `reference`, plus impact-time differences.
pub fn compare(reference: &HybridTrajectory, other: &HybridTrajectory) -> Result<ComparisonReport> {
    if reference.dim != other.dim {
        return Err(Error::IncomparableHorizons(format!(
            "dimensions differ: {} vs {}",
            reference.dim, other.dim
        )));
    }
    let (t_a, t_b) = (reference.t_end(), other.t_end());
    if (t_a - t_b).abs() > 1e-9 * (1.0 + t_a.abs()) {
        return Err(Error::IncomparableHorizons(format!(
            "trajectories end at t = {t_a} and t = {t_b}"
        )));
    }
    let mut segments = Vec::new();
    for (a, b) in reference.segments.iter().zip(&other.segments) {
        let mut worst = SegmentDiscrepancy {
            index: a.index,
            sup: 0.0,
            t_at_sup: a.t_start(),
        };
        for (t, x) in a.times.iter().zip(&a.states) {
            let diff = linalg::max_abs(&(x.stacked() - b.state_at(*t).stacked()));
            if diff > worst.sup || diff.is_nan() {
                worst.sup = diff;
                worst.t_at_sup = *t;
            }
        }
        segments.push(worst);
    }
    let impact_time_diffs: Vec<f64> = reference
        .events
        .iter()
        .zip(&other.events)
        .map(|(a, b)| (a.t - b.t).abs())
        .collect();
    Ok(ComparisonReport {
        sup_discrepancy: segments.iter().map(|s| s.sup).fold(0.0, f64::max),
        max_impact_time_diff: impact_time_diffs.iter().copied().fold(0.0, f64::max),
        impact_time_diffs,
        direct_impacts: reference.events.len(),
        reconstructed_impacts: other.events.len(),
        impact_count_mismatch: reference.events.len() != other.events.len()
            || reference.segments.len() != other.segments.len(),
        segments,
    })
}

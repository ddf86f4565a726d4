//! Classic RK4 with optional step-doubling control and cubic Hermite dense
//! output on step endpoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::phase::{self, DynamicsModel, PhasePoint, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepPolicy {
    /// Fixed step, or the initial step when `adaptive` is set.
    pub h: f64,
    pub adaptive: bool,
    pub h_min: f64,
    /// Mixed absolute/relative local error target for step doubling.
    pub tol: f64,
}

impl Default for StepPolicy {
    fn default() -> Self {
        Self {
            h: 1e-3,
            adaptive: false,
            h_min: 1e-12,
            tol: 1e-10,
        }
    }
}

impl StepPolicy {
    pub fn fixed(h: f64) -> Self {
        Self { h, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.h > 0.0 && self.h_min > 0.0 && self.tol > 0.0 && self.h.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("step policy must be positive: {self:?}")))
        }
    }
}

/// One accepted step with enough data for cubic Hermite interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseStep {
    pub t0: f64,
    pub t1: f64,
    pub y0: Vector,
    pub y1: Vector,
    pub f0: Vector,
    pub f1: Vector,
}

impl DenseStep {
    /// Cubic Hermite interpolant; extrapolates outside `[t0, t1]`.
    pub fn eval(&self, t: f64) -> Vector {
        let h = self.t1 - self.t0;
        if h == 0.0 {
            return self.y0.clone();
        }
        let s = (t - self.t0) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        &self.y0 * h00 + &self.f0 * (h10 * h) + &self.y1 * h01 + &self.f1 * (h11 * h)
    }

    pub fn derivative(&self, t: f64) -> Vector {
        let h = self.t1 - self.t0;
        if h == 0.0 {
            return self.f0.clone();
        }
        let s = (t - self.t0) / h;
        let s2 = s * s;
        let d00 = (6.0 * s2 - 6.0 * s) / h;
        let d10 = 3.0 * s2 - 4.0 * s + 1.0;
        let d01 = (-6.0 * s2 + 6.0 * s) / h;
        let d11 = 3.0 * s2 - 2.0 * s;
        &self.y0 * d00 + &self.f0 * d10 + &self.y1 * d01 + &self.f1 * d11
    }
}

/// Piecewise Hermite dense output over consecutive steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DenseOutput {
    pub steps: Vec<DenseStep>,
}

impl DenseOutput {
    pub fn t_start(&self) -> Option<f64> {
        self.steps.first().map(|s| s.t0)
    }

    pub fn t_end(&self) -> Option<f64> {
        self.steps.last().map(|s| s.t1)
    }

    /// Step covering `t`, clamped to the first/last step outside the range.
    pub fn step_at(&self, t: f64) -> Option<&DenseStep> {
        if self.steps.is_empty() {
            return None;
        }
        let idx = self.steps.partition_point(|s| s.t1 < t);
        Some(&self.steps[idx.min(self.steps.len() - 1)])
    }

    pub fn eval(&self, t: f64) -> Option<Vector> {
        self.step_at(t).map(|s| s.eval(t))
    }
}

pub(crate) fn rk4_step<F>(rhs: &F, t: f64, y: &Vector, k1: &Vector, h: f64) -> Result<Vector>
where
    F: Fn(f64, &Vector) -> Result<Vector>,
{
    let k2 = rhs(t + 0.5 * h, &(y + k1 * (0.5 * h)))?;
    let k3 = rhs(t + 0.5 * h, &(y + &k2 * (0.5 * h)))?;
    let k4 = rhs(t + h, &(y + &k3 * h))?;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Result of one accepted step.
#[derive(Clone, Debug)]
pub(crate) struct Accepted {
    pub t: f64,
    pub y: Vector,
    pub f: Vector,
}

/// Stateful stepper; keeps the adaptive step size between calls.
pub(crate) struct Stepper<F> {
    rhs: F,
    policy: StepPolicy,
    h: f64,
}

impl<F> Stepper<F>
where
    F: Fn(f64, &Vector) -> Result<Vector>,
{
    pub fn new(rhs: F, policy: StepPolicy) -> Self {
        Self { rhs, h: policy.h, policy }
    }

    pub fn rhs(&self, t: f64, y: &Vector) -> Result<Vector> {
        (self.rhs)(t, y)
    }

    /// Plain RK4 substep of length `h` from `(t, y)` with precomputed slope.
    pub fn substep(&self, t: f64, y: &Vector, f: &Vector, h: f64) -> Result<Vector> {
        if h == 0.0 {
            return Ok(y.clone());
        }
        rk4_step(&self.rhs, t, y, f, h)
    }

    /// Advance from `(t, y)` without passing `t_limit`.
    pub fn step(&mut self, t: f64, y: &Vector, f: &Vector, t_limit: f64) -> Result<Accepted> {
        let remaining = t_limit - t;
        if !self.policy.adaptive {
            // Snap the final step onto t_limit instead of leaving a sliver.
            let h = if remaining <= self.policy.h * (1.0 + 1e-9) {
                remaining
            } else {
                self.policy.h
            };
            let t_new = if h == remaining { t_limit } else { t + h };
            let y_new = rk4_step(&self.rhs, t, y, f, h)?;
            return self.accept(t_new, y_new);
        }
        loop {
            let h = self.h.min(remaining);
            if h < self.policy.h_min && h < remaining {
                return Err(Error::StepUnderflow {
                    t,
                    h,
                    h_min: self.policy.h_min,
                });
            }
            let full = rk4_step(&self.rhs, t, y, f, h)?;
            let mid = rk4_step(&self.rhs, t, y, f, 0.5 * h)?;
            let f_mid = (self.rhs)(t + 0.5 * h, &mid)?;
            let half = rk4_step(&self.rhs, t + 0.5 * h, &mid, &f_mid, 0.5 * h)?;
            let err = (&half - &full)
                .iter()
                .zip(half.iter())
                .map(|(d, y)| d.abs() / 15.0 / (self.policy.tol * (1.0 + y.abs())))
                .fold(0.0_f64, f64::max);
            if !err.is_finite() {
                return Err(Error::NonFiniteState { t: t + h });
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            if err <= 1.0 {
                self.h = h * factor;
                let t_new = if h == remaining { t_limit } else { t + h };
                return self.accept(t_new, half);
            }
            self.h = h * factor;
        }
    }

    fn accept(&self, t: f64, y: Vector) -> Result<Accepted> {
        if !linalg::all_finite(&y) {
            return Err(Error::NonFiniteState { t });
        }
        let f = (self.rhs)(t, &y)?;
        Ok(Accepted { t, y, f })
    }
}

/// Sampled solution of one continuous segment.
#[derive(Clone, Debug)]
pub struct SegmentSolution {
    pub times: Vec<f64>,
    pub states: Vec<PhasePoint>,
    pub dense: DenseOutput,
}

impl SegmentSolution {
    pub fn final_state(&self) -> &PhasePoint {
        self.states.last().expect("segment has at least one sample")
    }

    pub fn state_at(&self, t: f64) -> Option<PhasePoint> {
        self.dense.eval(t).map(|y| PhasePoint::from_stacked(&y))
    }
}

/// Integrate the model's field from `x0` over `[t0, t_end]`.
pub fn integrate_segment(
    model: &DynamicsModel,
    x0: &PhasePoint,
    t0: f64,
    t_end: f64,
    policy: &StepPolicy,
) -> Result<SegmentSolution> {
    policy.validate()?;
    model.check_dim(x0)?;
    if !x0.is_finite() {
        return Err(Error::NonFiniteState { t: t0 });
    }
    if !(t_end > t0) {
        return Err(Error::InvalidArgument(format!("t_end ({t_end}) must exceed t0 ({t0})")));
    }
    let rhs = |_t: f64, y: &Vector| {
        phase::evaluate_field_unchecked(model, &PhasePoint::from_stacked(y)).map(|f| f.stacked())
    };
    let mut stepper = Stepper::new(rhs, *policy);
    let mut t = t0;
    let mut y = x0.stacked();
    let mut f = stepper.rhs(t, &y)?;
    let mut times = vec![t];
    let mut states = vec![x0.clone()];
    let mut dense = DenseOutput::default();
    while t < t_end {
        let acc = stepper.step(t, &y, &f, t_end)?;
        dense.steps.push(DenseStep {
            t0: t,
            t1: acc.t,
            y0: y,
            y1: acc.y.clone(),
            f0: f,
            f1: acc.f.clone(),
        });
        t = acc.t;
        y = acc.y;
        f = acc.f;
        times.push(t);
        states.push(PhasePoint::from_stacked(&y));
    }
    Ok(SegmentSolution { times, states, dense })
}

//! Maps between a posterior flow and its straight (SN) and straight
//! constant-speed (SC) counterparts.
//!
//! Two SC families exist: the interpolating one, `(1 - phi) x0 + phi x1`
//! with `phi = sigma / (a + sigma)`, and the scaling one, `x0 + phi x1` with
//! `phi = sigma / a`. Each can be reached by time adjustment (integrate in
//! `phi`) or by variable shifting (integrate in `t` after adding
//! `(t - phi) * direction`).
//!
//! Base models are always queried at original-frame samples.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedules::{clip_denominator, PhiForm, Schedule, ScheduleValues};
use crate::velocity::{lin2, noise_from_output, velocity_from_output, FieldKind, VelocitySource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransformKind {
    #[serde(rename = "posterior")]
    Posterior,
    #[serde(rename = "sn-interp")]
    SnInterp,
    #[serde(rename = "sn-scale")]
    SnScale,
    #[serde(rename = "sc-interp")]
    ScInterp,
    #[serde(rename = "sc-scale")]
    ScScale,
    #[serde(rename = "sc-interp-shift")]
    ScInterpShift,
    #[serde(rename = "sc-scale-shift")]
    ScScaleShift,
}

impl TransformKind {
    pub const ALL: [TransformKind; 7] = [
        TransformKind::Posterior,
        TransformKind::SnInterp,
        TransformKind::SnScale,
        TransformKind::ScInterp,
        TransformKind::ScScale,
        TransformKind::ScInterpShift,
        TransformKind::ScScaleShift,
    ];

    pub fn id(self) -> &'static str {
        match self {
            TransformKind::Posterior => "posterior",
            TransformKind::SnInterp => "sn-interp",
            TransformKind::SnScale => "sn-scale",
            TransformKind::ScInterp => "sc-interp",
            TransformKind::ScScale => "sc-scale",
            TransformKind::ScInterpShift => "sc-interp-shift",
            TransformKind::ScScaleShift => "sc-scale-shift",
        }
    }

    /// Which scaling the kind applies, if any.
    pub fn form(self) -> Option<PhiForm> {
        match self {
            TransformKind::Posterior => None,
            TransformKind::SnInterp | TransformKind::ScInterp | TransformKind::ScInterpShift => {
                Some(PhiForm::Interp)
            }
            TransformKind::SnScale | TransformKind::ScScale | TransformKind::ScScaleShift => {
                Some(PhiForm::Scale)
            }
        }
    }

    pub fn is_shift(self) -> bool {
        matches!(self, TransformKind::ScInterpShift | TransformKind::ScScaleShift)
    }

    /// Time-adjusted kinds step in `phi` rather than in `t`.
    pub fn steps_in_phi(self) -> bool {
        matches!(self, TransformKind::ScInterp | TransformKind::ScScale)
    }

    pub fn is_constant_speed(self) -> bool {
        self.steps_in_phi() || self.is_shift()
    }
}

impl FromStr for TransformKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| {
                Error::config(
                    "flow",
                    format!(
                        "unknown flow `{s}` (expected one of {})",
                        TransformKind::ALL.map(|k| k.id()).join(", ")
                    ),
                )
            })
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Variable space a batch of samples lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Original,
    Transformed(TransformKind),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x: Array2<f64>,
    pub t: f64,
    pub frame: Frame,
}

impl FlowState {
    pub fn original(x: Array2<f64>, t: f64) -> Self {
        FlowState {
            x,
            t,
            frame: Frame::Original,
        }
    }
}

/// Denominator that divides original samples, `a + sigma` or `a`.
fn scale_denominator(form: PhiForm, sv: &ScheduleValues) -> f64 {
    match form {
        PhiForm::Interp => sv.a + sv.sigma,
        PhiForm::Scale => sv.a,
    }
}

/// Original-frame samples into the frame of `kind`. Shift kinds need the
/// current direction estimate (the SC velocity at `x`).
pub fn to_transformed(
    x: ArrayView2<f64>,
    kind: TransformKind,
    sv: &ScheduleValues,
    direction: Option<ArrayView2<f64>>,
    eps: f64,
) -> Array2<f64> {
    let Some(form) = kind.form() else {
        return x.to_owned();
    };
    let inv = 1.0 / clip_denominator(scale_denominator(form, sv), eps);
    if kind.is_shift() {
        let dir = direction.expect("shift kinds need a direction estimate");
        let offset = sv.t - sv.phi(form, eps).phi;
        lin2(inv, x, offset, dir)
    } else {
        x.mapv(|v| v * inv)
    }
}

/// Back to the original frame at the state's own time `sv.t`. Shift kinds
/// subtract the offset using the most recent direction estimate.
pub fn from_transformed(
    x_bar: ArrayView2<f64>,
    kind: TransformKind,
    sv: &ScheduleValues,
    direction: Option<ArrayView2<f64>>,
    eps: f64,
) -> Array2<f64> {
    let Some(form) = kind.form() else {
        return x_bar.to_owned();
    };
    let k_inv = scale_denominator(form, sv);
    if kind.is_shift() {
        let dir = direction.expect("shift kinds need a direction estimate");
        let offset = sv.t - sv.phi(form, eps).phi;
        lin2(k_inv, x_bar, -offset * k_inv, dir)
    } else {
        x_bar.mapv(|v| v * k_inv)
    }
}

pub fn to_transformed_state(
    state: &FlowState,
    kind: TransformKind,
    sv: &ScheduleValues,
    direction: Option<ArrayView2<f64>>,
    eps: f64,
) -> FlowState {
    debug_assert_eq!(state.frame, Frame::Original);
    FlowState {
        x: to_transformed(state.x.view(), kind, sv, direction, eps),
        t: state.t,
        frame: Frame::Transformed(kind),
    }
}

pub fn from_transformed_state(
    state: &FlowState,
    sv: &ScheduleValues,
    direction: Option<ArrayView2<f64>>,
    eps: f64,
) -> FlowState {
    let x = match state.frame {
        Frame::Original => state.x.clone(),
        Frame::Transformed(kind) => from_transformed(state.x.view(), kind, sv, direction, eps),
    };
    FlowState {
        x,
        t: state.t,
        frame: Frame::Original,
    }
}

/// Velocity of `k_t x_t` given the velocity `v` of `x_t`.
pub fn scaled_process_velocity(
    k: f64,
    k_dot: f64,
    x: ArrayView2<f64>,
    v: ArrayView2<f64>,
) -> Array2<f64> {
    lin2(k_dot, x, k, v)
}

/// Frame velocity of `kind` at original samples `x` from a raw base output.
/// Noise-model outputs use the noise form of the SC velocity; everything else
/// goes through the velocity form.
pub fn transformed_velocity_from_output(
    kind: TransformKind,
    base: FieldKind,
    sv: &ScheduleValues,
    x: ArrayView2<f64>,
    out: Array2<f64>,
    eps: f64,
) -> Array2<f64> {
    let sum = sv.a + sv.sigma;
    match kind {
        TransformKind::Posterior => velocity_from_output(base, sv, x, out, eps),
        TransformKind::SnInterp => {
            let v = velocity_from_output(base, sv, x, out, eps);
            let d = clip_denominator(sum, eps);
            let d2 = d * d;
            lin2(sum / d2, v.view(), -(sv.a_dot + sv.sigma_dot) / d2, x)
        }
        TransformKind::SnScale => {
            let v = velocity_from_output(base, sv, x, out, eps);
            let d = clip_denominator(sv.a, eps);
            let d2 = d * d;
            lin2(sv.a / d2, v.view(), -sv.a_dot / d2, x)
        }
        TransformKind::ScInterp | TransformKind::ScInterpShift => {
            if base == FieldKind::NoiseModel {
                let inv_a = 1.0 / clip_denominator(sv.a, eps);
                lin2(sum * inv_a, out.view(), -inv_a, x)
            } else {
                let v = velocity_from_output(base, sv, x, out, eps);
                let inv = 1.0 / clip_denominator(sv.cross(), eps);
                lin2(sum * inv, v.view(), -(sv.a_dot + sv.sigma_dot) * inv, x)
            }
        }
        TransformKind::ScScale | TransformKind::ScScaleShift => {
            if base == FieldKind::NoiseModel {
                out
            } else {
                let v = velocity_from_output(base, sv, x, out, eps);
                let inv = 1.0 / clip_denominator(sv.cross(), eps);
                lin2(sv.a * inv, v.view(), -sv.a_dot * inv, x)
            }
        }
    }
}

/// A base source seen through one transformation; the object solvers step.
#[derive(Debug, Clone)]
pub struct TransformedField<S> {
    pub base: S,
    pub schedule: Schedule,
    pub kind: TransformKind,
    pub eps: f64,
}

impl<S: VelocitySource> TransformedField<S> {
    pub fn new(base: S, schedule: Schedule, kind: TransformKind, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::config("eps", format!("clip threshold must be positive, got {eps}")));
        }
        Ok(TransformedField {
            base,
            schedule,
            kind,
            eps,
        })
    }

    /// Default clipping for the base kind.
    pub fn with_default_eps(base: S, schedule: Schedule, kind: TransformKind) -> Self {
        let eps = base.kind().default_eps();
        TransformedField {
            base,
            schedule,
            kind,
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Frame velocity at original-frame samples `x`; one base evaluation.
    pub fn velocity(&self, x: ArrayView2<f64>, t: f64) -> Array2<f64> {
        let sv = self.schedule.at(t);
        let out = self.base.evaluate(x, t);
        transformed_velocity_from_output(self.kind, self.base.kind(), &sv, x, out, self.eps)
    }

    /// Integration variable: `phi_t` for time-adjusted kinds, `t` otherwise.
    pub fn theta(&self, t: f64) -> f64 {
        match self.kind.form() {
            Some(form) if self.kind.steps_in_phi() => self.schedule.phi(t, form, self.eps).phi,
            _ => t,
        }
    }

    pub fn to_frame(&self, x: ArrayView2<f64>, t: f64, direction: ArrayView2<f64>) -> Array2<f64> {
        to_transformed(x, self.kind, &self.schedule.at(t), Some(direction), self.eps)
    }

    pub fn from_frame(&self, x_bar: ArrayView2<f64>, t: f64, direction: ArrayView2<f64>) -> Array2<f64> {
        from_transformed(x_bar, self.kind, &self.schedule.at(t), Some(direction), self.eps)
    }

    /// Noise estimate `x1|t` of the base at `x`.
    pub fn noise_estimate(&self, x: ArrayView2<f64>, t: f64) -> Array2<f64> {
        let sv = self.schedule.at(t);
        let out = self.base.evaluate(x, t);
        noise_from_output(self.base.kind(), &sv, x, out, self.eps)
    }
}

/// Sample of the process `b x0 + zeta x1` from a sample `x` of
/// `a x0 + sigma x1` and its noise estimate.
pub fn flow_to_flow_map(
    source: &ScheduleValues,
    target: &ScheduleValues,
    x: ArrayView2<f64>,
    x1_est: ArrayView2<f64>,
    eps: f64,
) -> Array2<f64> {
    let ratio = target.a / clip_denominator(source.a, eps);
    lin2(ratio, x, target.sigma - source.sigma * ratio, x1_est)
}

/// Target-process sample from an SC-frame sample `x_bar` sitting at SC time
/// `sc_time`, extrapolated with the latest SC velocity. For time-adjusted SC
/// flows `sc_time` is the source `phi`; for shifted or rectified sources it is
/// the grid time itself.
pub fn sc_to_target(
    target: &ScheduleValues,
    form: PhiForm,
    x_bar: ArrayView2<f64>,
    sc_time: f64,
    sc_velocity: ArrayView2<f64>,
    eps: f64,
) -> Array2<f64> {
    let k = match form {
        PhiForm::Interp => target.a + target.sigma,
        PhiForm::Scale => target.a,
    };
    let lag = sc_time - target.sigma / clip_denominator(k, eps);
    lin2(k, x_bar, -k * lag, sc_velocity)
}

/// `x1|t - x0|1,t`: direction of the straight line through `x` joining the
/// two endpoint estimates. Ideally the same at every time along a trajectory.
pub fn sn_direction(sv: &ScheduleValues, x: ArrayView2<f64>, x1_est: ArrayView2<f64>, eps: f64) -> Array2<f64> {
    let x0 = crate::velocity::x0_given_x1(sv, x, x1_est, eps);
    lin2(1.0, x1_est, -1.0, x0.view())
}

/// `a' x0|1,t + sigma' x1|t` with `x0|1,t = (x - sigma x1|t) / a`.
pub fn ddim_step(
    sv: &ScheduleValues,
    sv_next: &ScheduleValues,
    x: ArrayView2<f64>,
    x1_est: ArrayView2<f64>,
    eps: f64,
) -> Array2<f64> {
    let x0 = crate::velocity::x0_given_x1(sv, x, x1_est, eps);
    lin2(sv_next.a, x0.view(), sv_next.sigma, x1_est)
}

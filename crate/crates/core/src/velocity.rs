//! Conversions among the three descriptions of a posterior flow state:
//! velocity `v`, data estimate `x0|t` and noise estimate `x1|t`.
//!
//! All functions work on batches (`n x d` arrays) of samples sharing one time.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::schedules::{clip_denominator, ScheduleValues};

pub const VELOCITY_MODEL_EPS: f64 = 1e-6;
pub const NOISE_MODEL_EPS: f64 = 1e-3;

/// What a [`VelocitySource`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    VelocityModel,
    /// Predicts `x1|t`.
    NoiseModel,
    /// Predicts `x0|t`.
    DataModel,
    /// Exact posterior velocity.
    Oracle,
}

impl FieldKind {
    /// Clipping threshold used when nothing else is configured.
    pub fn default_eps(self) -> f64 {
        match self {
            FieldKind::NoiseModel | FieldKind::DataModel => NOISE_MODEL_EPS,
            FieldKind::VelocityModel | FieldKind::Oracle => VELOCITY_MODEL_EPS,
        }
    }

    pub fn predicts_velocity(self) -> bool {
        matches!(self, FieldKind::VelocityModel | FieldKind::Oracle)
    }
}

/// Anything that can be queried at a batch of original-frame samples.
pub trait VelocitySource: Sync {
    fn dim(&self) -> usize;
    fn kind(&self) -> FieldKind;
    /// Raw output for rows of `x`, all at time `t`.
    fn evaluate(&self, x: ArrayView2<f64>, t: f64) -> Array2<f64>;
}

impl<T: VelocitySource + ?Sized> VelocitySource for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn kind(&self) -> FieldKind {
        (**self).kind()
    }
    fn evaluate(&self, x: ArrayView2<f64>, t: f64) -> Array2<f64> {
        (**self).evaluate(x, t)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Known<'a> {
    Velocity(ArrayView2<'a, f64>),
    X0(ArrayView2<'a, f64>),
    X1(ArrayView2<'a, f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityTriple {
    pub v: Array2<f64>,
    pub x0_given_t: Array2<f64>,
    pub x1_given_t: Array2<f64>,
}

/// `a_dot x0 + sigma_dot x1`
pub fn target_velocity(
    sv: &ScheduleValues,
    x0: ArrayView2<f64>,
    x1: ArrayView2<f64>,
) -> Array2<f64> {
    lin2(sv.a_dot, x0, sv.sigma_dot, x1)
}

/// `(x - sigma x1_est) / a`
pub fn x0_given_x1(
    sv: &ScheduleValues,
    x: ArrayView2<f64>,
    x1_est: ArrayView2<f64>,
    eps: f64,
) -> Array2<f64> {
    let inv_a = 1.0 / clip_denominator(sv.a, eps);
    lin2(inv_a, x, -sv.sigma * inv_a, x1_est)
}

/// Fills in the two missing representations from the known one.
pub fn complete_state(
    sv: &ScheduleValues,
    x: ArrayView2<f64>,
    known: Known<'_>,
    eps: f64,
) -> VelocityTriple {
    let cross = sv.cross();
    match known {
        Known::Velocity(v) => {
            let inv = 1.0 / clip_denominator(cross, eps);
            VelocityTriple {
                x0_given_t: lin2(sv.sigma_dot * inv, x, -sv.sigma * inv, v),
                x1_given_t: lin2(-sv.a_dot * inv, x, sv.a * inv, v),
                v: v.to_owned(),
            }
        }
        Known::X1(x1) => {
            let inv_a = 1.0 / clip_denominator(sv.a, eps);
            VelocityTriple {
                v: lin2(sv.a_dot * inv_a, x, cross * inv_a, x1),
                x0_given_t: lin2(inv_a, x, -sv.sigma * inv_a, x1),
                x1_given_t: x1.to_owned(),
            }
        }
        Known::X0(x0) => {
            let inv_s = 1.0 / clip_denominator(sv.sigma, eps);
            VelocityTriple {
                v: lin2(sv.sigma_dot * inv_s, x, -cross * inv_s, x0),
                x1_given_t: lin2(inv_s, x, -sv.a * inv_s, x0),
                x0_given_t: x0.to_owned(),
            }
        }
    }
}

/// Velocity from a raw source output of the given kind.
pub fn velocity_from_output(
    kind: FieldKind,
    sv: &ScheduleValues,
    x: ArrayView2<f64>,
    out: Array2<f64>,
    eps: f64,
) -> Array2<f64> {
    match kind {
        FieldKind::VelocityModel | FieldKind::Oracle => out,
        FieldKind::NoiseModel => complete_state(sv, x, Known::X1(out.view()), eps).v,
        FieldKind::DataModel => complete_state(sv, x, Known::X0(out.view()), eps).v,
    }
}

/// Noise estimate `x1|t` from a raw source output of the given kind.
pub fn noise_from_output(
    kind: FieldKind,
    sv: &ScheduleValues,
    x: ArrayView2<f64>,
    out: Array2<f64>,
    eps: f64,
) -> Array2<f64> {
    match kind {
        FieldKind::NoiseModel => out,
        FieldKind::VelocityModel | FieldKind::Oracle => {
            complete_state(sv, x, Known::Velocity(out.view()), eps).x1_given_t
        }
        FieldKind::DataModel => complete_state(sv, x, Known::X0(out.view()), eps).x1_given_t,
    }
}

/// `alpha * x + beta * y`
pub(crate) fn lin2(alpha: f64, x: ArrayView2<f64>, beta: f64, y: ArrayView2<f64>) -> Array2<f64> {
    debug_assert_eq!(x.dim(), y.dim());
    let mut out = Array2::zeros(x.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(&x)
        .and(&y)
        .for_each(|o, &a, &b| *o = alpha * a + beta * b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::Schedule;
    use ndarray::array;

    #[test]
    fn rectified_target_is_difference() {
        let sv = Schedule::Rectified.at(0.37);
        let x0 = array![[1.0, -2.0]];
        let x1 = array![[0.5, 4.0]];
        assert_eq!(target_velocity(&sv, x0.view(), x1.view()), array![[-0.5, 6.0]]);
    }

    #[test]
    fn x0_from_x1_rectified_half() {
        let sv = Schedule::Rectified.at(0.5);
        let out = x0_given_x1(&sv, array![[1.0, 1.0]].view(), array![[2.0, 0.0]].view(), 1e-6);
        assert_eq!(out, array![[0.0, 2.0]]);
    }

    #[test]
    fn rectified_velocity_from_noise() {
        let t = 0.25;
        let sv = Schedule::Rectified.at(t);
        let x = array![[0.3, -1.0]];
        let x1 = array![[1.1, 0.4]];
        let tri = complete_state(&sv, x.view(), Known::X1(x1.view()), 1e-6);
        let expect = (&x1 - &x) / (1.0 - t);
        for (a, b) in tri.v.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

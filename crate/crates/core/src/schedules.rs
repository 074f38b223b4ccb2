//! Coefficient schedules of linear processes `x_t = a_t x_0 + sigma_t x_1`.
//!
//! Every transformation downstream reads a schedule only through
//! [`ScheduleValues`], the tuple `(a, sigma, a_dot, sigma_dot)` at one time.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const DEFAULT_BETA_MIN: f64 = 0.1;
pub const DEFAULT_BETA_MAX: f64 = 20.0;
pub const DEFAULT_SIGMA_MIN: f64 = 0.01;
pub const DEFAULT_SIGMA_MAX: f64 = 50.0;

/// Floor on `sqrt(1 - alpha_bar)` when forming the vp `sigma_dot` at `t = 0`,
/// where the closed form diverges.
const VP_SIGMA_FLOOR: f64 = 1e-150;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case")]
pub enum Schedule {
    Vp { beta_min: f64, beta_max: f64 },
    SubVp { beta_min: f64, beta_max: f64 },
    /// `a = 1`, `sigma = sigma_min * ((sigma_max / sigma_min)^t - 1)`.
    Ve { sigma_min: f64, sigma_max: f64 },
    Rectified,
    /// Cubic pair `a = 3s^3 - 6s^2 + 4s` (with `s = 1 - t`) and
    /// `sigma = 2t^3 - 3t^2 + 2t`. With `offset_sigma` the noise coefficient
    /// becomes `2t^3 - 3t + 2`, which starts at 2 instead of 0.
    ThirdDegree {
        #[serde(default)]
        offset_sigma: bool,
    },
    FifthDegree,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleValues {
    pub t: f64,
    pub a: f64,
    pub sigma: f64,
    pub a_dot: f64,
    pub sigma_dot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiForm {
    /// `phi = sigma / (a + sigma)`
    Interp,
    /// `phi = sigma / a`
    Scale,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiPair {
    pub phi: f64,
    pub phi_dot: f64,
    pub form: PhiForm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub a0: f64,
    pub sigma0: f64,
    pub a1: f64,
    pub a0_ok: bool,
    pub sigma0_ok: bool,
    /// `a_1` is exactly zero.
    pub a1_exact: bool,
    /// `|a_1| <= 1e-2`.
    pub a1_near_zero: bool,
}

impl ConditionReport {
    pub fn passes(&self) -> bool {
        self.a0_ok && self.sigma0_ok
    }
}

/// `sign(x) * max(|x|, eps)` with `sign(0) = +1`.
#[inline]
pub fn clip_denominator(x: f64, eps: f64) -> f64 {
    debug_assert!(eps > 0.0);
    if x >= 0.0 || x.is_nan() {
        x.max(eps)
    } else {
        x.min(-eps)
    }
}

/// `a * sigma_dot - a_dot * sigma`
#[inline]
pub fn cross_term(sv: &ScheduleValues) -> f64 {
    sv.a * sv.sigma_dot - sv.a_dot * sv.sigma
}

impl ScheduleValues {
    pub fn cross(&self) -> f64 {
        cross_term(self)
    }

    pub fn phi(&self, form: PhiForm, eps: f64) -> PhiPair {
        let cross = cross_term(self);
        let denom = match form {
            PhiForm::Interp => clip_denominator(self.a + self.sigma, eps),
            PhiForm::Scale => clip_denominator(self.a, eps),
        };
        PhiPair {
            phi: self.sigma / denom,
            phi_dot: cross / (denom * denom),
            form,
        }
    }
}

impl Schedule {
    pub fn vp() -> Self {
        Schedule::Vp {
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }

    pub fn sub_vp() -> Self {
        Schedule::SubVp {
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }
    }

    pub fn ve() -> Self {
        Schedule::Ve {
            sigma_min: DEFAULT_SIGMA_MIN,
            sigma_max: DEFAULT_SIGMA_MAX,
        }
    }

    pub fn third_degree() -> Self {
        Schedule::ThirdDegree { offset_sigma: false }
    }

    pub fn all_default() -> [Schedule; 6] {
        [
            Schedule::vp(),
            Schedule::sub_vp(),
            Schedule::ve(),
            Schedule::Rectified,
            Schedule::third_degree(),
            Schedule::FifthDegree,
        ]
    }

    pub fn id(&self) -> &'static str {
        match self {
            Schedule::Vp { .. } => "vp",
            Schedule::SubVp { .. } => "sub-vp",
            Schedule::Ve { .. } => "ve",
            Schedule::Rectified => "rectified",
            Schedule::ThirdDegree { .. } => "third-degree",
            Schedule::FifthDegree => "fifth-degree",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Vp { beta_min, beta_max } | Schedule::SubVp { beta_min, beta_max }
                if !(beta_min > 0.0 && beta_max > beta_min && beta_max.is_finite()) =>
            {
                return Err(Error::Schedule(format!(
                    "need beta_max > beta_min > 0, got ({beta_min}, {beta_max})"
                )));
            }
            Schedule::Ve { sigma_min, sigma_max }
                if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) =>
            {
                return Err(Error::Schedule(format!(
                    "need sigma_max > sigma_min > 0, got ({sigma_min}, {sigma_max})"
                )));
            }
            _ => {}
        }
        Ok(())
    }

    /// Builds a schedule from a string id and an optional JSON params object.
    pub fn from_config(id: &str, params: Option<&Value>) -> Result<Self> {
        let base: Schedule = id.parse()?;
        let Some(params) = params else {
            return Ok(base);
        };
        let obj = params
            .as_object()
            .ok_or_else(|| Error::config("schedule.params", "expected an object"))?;
        let num = |key: &str, default: f64| -> Result<f64> {
            match obj.get(key) {
                None => Ok(default),
                Some(v) => v.as_f64().ok_or_else(|| {
                    Error::config(format!("schedule.params.{key}"), "expected a number")
                }),
            }
        };
        let allowed: &[&str] = match base {
            Schedule::Vp { .. } | Schedule::SubVp { .. } => &["beta_min", "beta_max"],
            Schedule::Ve { .. } => &["sigma_min", "sigma_max"],
            Schedule::ThirdDegree { .. } => &["offset_sigma"],
            _ => &[],
        };
        if let Some(key) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::config(
                format!("schedule.params.{key}"),
                format!("unknown parameter for {}", base.id()),
            ));
        }
        let out = match base {
            Schedule::Vp { .. } => Schedule::Vp {
                beta_min: num("beta_min", DEFAULT_BETA_MIN)?,
                beta_max: num("beta_max", DEFAULT_BETA_MAX)?,
            },
            Schedule::SubVp { .. } => Schedule::SubVp {
                beta_min: num("beta_min", DEFAULT_BETA_MIN)?,
                beta_max: num("beta_max", DEFAULT_BETA_MAX)?,
            },
            Schedule::Ve { .. } => Schedule::Ve {
                sigma_min: num("sigma_min", DEFAULT_SIGMA_MIN)?,
                sigma_max: num("sigma_max", DEFAULT_SIGMA_MAX)?,
            },
            Schedule::ThirdDegree { .. } => Schedule::ThirdDegree {
                offset_sigma: match obj.get("offset_sigma") {
                    None => false,
                    Some(v) => v.as_bool().ok_or_else(|| {
                        Error::config("schedule.params.offset_sigma", "expected a boolean")
                    })?,
                },
            },
            other => other,
        };
        out.validate()
            .map_err(|e| Error::config("schedule.params", e.to_string()))?;
        Ok(out)
    }

    /// Checked evaluation.
    pub fn eval(&self, t: f64) -> Result<ScheduleValues> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeDomain(t));
        }
        Ok(self.at(t))
    }

    /// Closed-form values at `t`; callers guarantee `t` in `[0, 1]`.
    pub fn at(&self, t: f64) -> ScheduleValues {
        debug_assert!((0.0..=1.0).contains(&t), "t = {t}");
        let (a, sigma, a_dot, sigma_dot) = match *self {
            Schedule::Vp { beta_min, beta_max } => {
                let (alpha_bar, beta) = alpha_bar(t, beta_min, beta_max);
                let one_minus = -(-0.5 * t * (beta + beta_min)).exp_m1();
                let a = alpha_bar.sqrt();
                let sigma = one_minus.sqrt();
                (
                    a,
                    sigma,
                    -0.5 * beta * a,
                    alpha_bar * beta / (2.0 * sigma.max(VP_SIGMA_FLOOR)),
                )
            }
            Schedule::SubVp { beta_min, beta_max } => {
                let (alpha_bar, beta) = alpha_bar(t, beta_min, beta_max);
                let one_minus = -(-0.5 * t * (beta + beta_min)).exp_m1();
                let a = alpha_bar.sqrt();
                (a, one_minus, -0.5 * beta * a, alpha_bar * beta)
            }
            Schedule::Ve { sigma_min, sigma_max } => {
                let log_ratio = (sigma_max / sigma_min).ln();
                let growth = (t * log_ratio).exp();
                (
                    1.0,
                    sigma_min * (t * log_ratio).exp_m1(),
                    0.0,
                    sigma_min * log_ratio * growth,
                )
            }
            Schedule::Rectified => (1.0 - t, t, -1.0, 1.0),
            Schedule::ThirdDegree { offset_sigma } => {
                let s = 1.0 - t;
                let a = ((3.0 * s - 6.0) * s + 4.0) * s;
                let a_dot = -(3.0 * s - 2.0).powi(2);
                if offset_sigma {
                    (a, (2.0 * t * t - 3.0) * t + 2.0, a_dot, 6.0 * t * t - 3.0)
                } else {
                    (
                        a,
                        ((2.0 * t - 3.0) * t + 2.0) * t,
                        a_dot,
                        (6.0 * t - 6.0) * t + 2.0,
                    )
                }
            }
            Schedule::FifthDegree => {
                let s = 1.0 - t;
                (s.powi(5), t.powi(5), -5.0 * s.powi(4), 5.0 * t.powi(4))
            }
        };
        ScheduleValues {
            t,
            a,
            sigma,
            a_dot,
            sigma_dot,
        }
    }

    pub fn phi(&self, t: f64, form: PhiForm, eps: f64) -> PhiPair {
        self.at(t).phi(form, eps)
    }

    pub fn check_conditions(&self) -> ConditionReport {
        let s0 = self.at(0.0);
        let s1 = self.at(1.0);
        ConditionReport {
            a0: s0.a,
            sigma0: s0.sigma,
            a1: s1.a,
            a0_ok: s0.a == 1.0,
            sigma0_ok: s0.sigma == 0.0,
            a1_exact: s1.a == 0.0,
            a1_near_zero: s1.a.abs() <= 1e-2,
        }
    }
}

/// `(alpha_bar_t, beta_t)` with `beta_t = t (beta_max - beta_min) + beta_min`.
fn alpha_bar(t: f64, beta_min: f64, beta_max: f64) -> (f64, f64) {
    let beta = t * (beta_max - beta_min) + beta_min;
    ((-0.5 * t * (beta + beta_min)).exp(), beta)
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "vp" => Schedule::vp(),
            "sub-vp" | "sub_vp" => Schedule::sub_vp(),
            "ve" => Schedule::ve(),
            "rectified" => Schedule::Rectified,
            "third-degree" | "third_degree" => Schedule::third_degree(),
            "fifth-degree" | "fifth_degree" => Schedule::FifthDegree,
            other => {
                return Err(Error::config(
                    "schedule",
                    format!(
                        "unknown schedule `{other}` (expected vp, sub-vp, ve, rectified, \
                         third-degree, fifth-degree)"
                    ),
                ))
            }
        })
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

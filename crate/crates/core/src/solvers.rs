//! Integrators for posterior, SN and SC flows.
//!
//! Every step maps the current original-frame batch into the field's frame,
//! advances there, and maps back. Stage and step increments are scaled by the
//! change of the frame's integration variable (`phi` for time-adjusted SC
//! kinds, `t` otherwise), while multistep coefficients are always built from
//! the grid times in `t`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transforms::TransformedField;
use crate::velocity::VelocitySource;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    /// `n_steps + 1` evenly spaced times from `t_start` to `t_end`.
    pub fn uniform(n_steps: usize, t_start: f64, t_end: f64) -> Result<Self> {
        if n_steps < 1 {
            return Err(Error::Solver("need at least one step".into()));
        }
        let h = (t_end - t_start) / n_steps as f64;
        let mut points: Vec<f64> = (0..=n_steps).map(|i| t_start + h * i as f64).collect();
        points[n_steps] = t_end;
        Self::new(points)
    }

    /// Sampling from `t = 1` down to `t = 0`.
    pub fn sampling(n_steps: usize) -> Result<Self> {
        Self::uniform(n_steps, 1.0, 0.0)
    }

    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Solver("grid needs two or more points".into()));
        }
        if points.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Solver("grid points must lie in [0, 1]".into()));
        }
        let dir = (points[1] - points[0]).signum();
        if dir == 0.0 || points.windows(2).any(|w| (w[1] - w[0]).signum() != dir) {
            return Err(Error::Solver("grid must be strictly monotone".into()));
        }
        Ok(TimeGrid { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn n_steps(&self) -> usize {
        self.points.len() - 1
    }
}

/// Explicit Runge-Kutta tableau; `a` holds the strictly lower rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Tableau {
    pub c: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Tableau {
    pub fn euler() -> Self {
        Tableau {
            c: vec![0.0],
            a: vec![vec![]],
            b: vec![1.0],
        }
    }

    pub fn midpoint() -> Self {
        Tableau {
            c: vec![0.0, 0.5],
            a: vec![vec![], vec![0.5]],
            b: vec![0.0, 1.0],
        }
    }

    pub fn heun() -> Self {
        Tableau {
            c: vec![0.0, 1.0],
            a: vec![vec![], vec![1.0]],
            b: vec![0.5, 0.5],
        }
    }

    pub fn rk3() -> Self {
        Tableau {
            c: vec![0.0, 0.5, 1.0],
            a: vec![vec![], vec![0.5], vec![-1.0, 2.0]],
            b: vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
        }
    }

    pub fn rk4() -> Self {
        Tableau {
            c: vec![0.0, 0.5, 0.5, 1.0],
            a: vec![vec![], vec![0.5], vec![0.0, 0.5], vec![0.0, 0.0, 1.0]],
            b: vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
        }
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.b.len();
        if s == 0 || self.c.len() != s || self.a.len() != s {
            return Err(Error::Solver("tableau sizes disagree".into()));
        }
        if self.c[0] != 0.0 {
            return Err(Error::Solver("first stage must sit at c = 0".into()));
        }
        if (self.b.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Solver("weights b must sum to 1".into()));
        }
        for j in 1..s {
            if self.a[j].len() != j {
                return Err(Error::Solver(format!("row {j} of a must have {j} entries")));
            }
            if (self.a[j].iter().sum::<f64>() - self.c[j]).abs() > 1e-12 {
                return Err(Error::Solver(format!("row {j} of a does not sum to c")));
            }
            if self.c[j] <= 0.0 {
                return Err(Error::Solver(format!("stage {j} needs c > 0")));
            }
        }
        Ok(())
    }
}

fn check_distinct(times: &[f64]) -> Result<()> {
    for i in 0..times.len() {
        for j in i + 1..times.len() {
            if times[i] == times[j] || !times[i].is_finite() {
                return Err(Error::Solver(format!("duplicate time {}", times[i])));
            }
        }
    }
    Ok(())
}

/// Adams-Bashforth weights for `[t_{i+1}, t_i, t_{i-1}, t_{i-2}]` (2 to 4
/// times). Weight `m` multiplies the velocity at `t_{i-m}`; their weighted sum
/// times the step in the integration variable gives the update.
pub fn ab_coefficients(times: &[f64]) -> Result<Vec<f64>> {
    check_distinct(times)?;
    Ok(match *times {
        [_, _] => vec![1.0],
        [t1, t0, tm1] => {
            let l0 = (t1 + t0 - 2.0 * tm1) / (2.0 * (t0 - tm1));
            let l1 = -(t1 - t0) / (2.0 * (t0 - tm1));
            vec![l0, l1]
        }
        [t1, t0, tm1, tm2] => {
            let l0 = (2.0 * (t1 * t1 + t1 * t0 + t0 * t0) - 3.0 * (tm1 + tm2) * (t1 + t0)
                + 6.0 * tm1 * tm2)
                / (6.0 * (t0 - tm1) * (t0 - tm2));
            let l1 = (t1 - t0) * (2.0 * t1 + t0 - 3.0 * tm2) / (6.0 * (tm1 - t0) * (tm1 - tm2));
            let l2 = (t1 - t0) * (2.0 * t1 + t0 - 3.0 * tm1) / (6.0 * (tm2 - t0) * (tm2 - tm1));
            vec![l0, l1, l2]
        }
        _ => return Err(Error::Solver("AB coefficients need 2 to 4 times".into())),
    })
}

/// Adams-Moulton weights for `[t_{i+1}, t_i, t_{i-1}]` (2 or 3 times). Weight
/// 0 multiplies the velocity at the new time `t_{i+1}`.
pub fn am_coefficients(times: &[f64]) -> Result<Vec<f64>> {
    check_distinct(times)?;
    Ok(match *times {
        [_, _] => vec![0.5, 0.5],
        [t1, t0, tm1] => {
            let l0 = (2.0 * t1 + t0 - 3.0 * tm1) / (6.0 * (t1 - tm1));
            let l1 = (t1 + 2.0 * t0 - 3.0 * tm1) / (6.0 * (t0 - tm1));
            let l2 = -(t1 - t0) * (t1 - t0) / (6.0 * (t1 - tm1) * (t0 - tm1));
            vec![l0, l1, l2]
        }
        _ => return Err(Error::Solver("AM coefficients need 2 or 3 times".into())),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverMethod {
    Euler,
    Midpoint,
    Heun,
    Rk3,
    Rk4,
    Ab2,
    Ab3,
    Ab1Am2,
    Ab2Am2,
    Ab2Am3,
    Ab3Am3,
}

impl SolverMethod {
    pub const ALL: [SolverMethod; 11] = [
        SolverMethod::Euler,
        SolverMethod::Midpoint,
        SolverMethod::Heun,
        SolverMethod::Rk3,
        SolverMethod::Rk4,
        SolverMethod::Ab2,
        SolverMethod::Ab3,
        SolverMethod::Ab1Am2,
        SolverMethod::Ab2Am2,
        SolverMethod::Ab2Am3,
        SolverMethod::Ab3Am3,
    ];

    pub fn id(self) -> &'static str {
        match self {
            SolverMethod::Euler => "euler",
            SolverMethod::Midpoint => "midpoint",
            SolverMethod::Heun => "heun",
            SolverMethod::Rk3 => "rk3",
            SolverMethod::Rk4 => "rk4",
            SolverMethod::Ab2 => "ab2",
            SolverMethod::Ab3 => "ab3",
            SolverMethod::Ab1Am2 => "ab1am2",
            SolverMethod::Ab2Am2 => "ab2am2",
            SolverMethod::Ab2Am3 => "ab2am3",
            SolverMethod::Ab3Am3 => "ab3am3",
        }
    }

    pub fn tableau(self) -> Option<Tableau> {
        match self {
            SolverMethod::Euler => Some(Tableau::euler()),
            SolverMethod::Midpoint => Some(Tableau::midpoint()),
            SolverMethod::Heun => Some(Tableau::heun()),
            SolverMethod::Rk3 => Some(Tableau::rk3()),
            SolverMethod::Rk4 => Some(Tableau::rk4()),
            _ => None,
        }
    }

    /// `(predictor order, corrector order)`; corrector 0 means none.
    pub fn multistep_orders(self) -> Option<(usize, usize)> {
        match self {
            SolverMethod::Ab2 => Some((2, 0)),
            SolverMethod::Ab3 => Some((3, 0)),
            SolverMethod::Ab1Am2 => Some((1, 2)),
            SolverMethod::Ab2Am2 => Some((2, 2)),
            SolverMethod::Ab2Am3 => Some((2, 3)),
            SolverMethod::Ab3Am3 => Some((3, 3)),
            _ => None,
        }
    }
}

impl FromStr for SolverMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SolverMethod::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| {
                Error::config(
                    "solver",
                    format!(
                        "unknown solver `{s}` (expected one of {})",
                        SolverMethod::ALL.map(|m| m.id()).join(", ")
                    ),
                )
            })
    }
}

impl fmt::Display for SolverMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// How multistep methods take their first steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarmUp {
    /// Adams-Bashforth of orders 1, 2, ... until enough history exists.
    #[default]
    IncreasingOrderAb,
    Heun,
    Rk3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: SolverMethod,
    #[serde(default)]
    pub warm_up: WarmUp,
    #[serde(default = "default_true")]
    pub reuse_predicted_velocity: bool,
}

fn default_true() -> bool {
    true
}

impl SolverConfig {
    pub fn new(method: SolverMethod) -> Self {
        SolverConfig {
            method,
            warm_up: WarmUp::IncreasingOrderAb,
            reuse_predicted_velocity: true,
        }
    }
}

impl From<SolverMethod> for SolverConfig {
    fn from(method: SolverMethod) -> Self {
        SolverConfig::new(method)
    }
}

/// Which grid points keep full per-sample records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Keep {
    #[default]
    All,
    /// First and last grid points only.
    Endpoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub keep: Keep,
    /// Store the frame velocity batch of every kept record.
    pub keep_velocity: bool,
}

impl From<Keep> for RunOptions {
    fn from(keep: Keep) -> Self {
        RunOptions {
            keep,
            keep_velocity: false,
        }
    }
}

/// State of the whole batch at one grid point.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub nfe_so_far: usize,
    pub x: Array2<f64>,
    /// Per sample: max absolute coordinate of `x`.
    pub max_abs_x: Array1<f64>,
    /// Per sample: max absolute coordinate of the frame state.
    pub max_abs_xbar: Array1<f64>,
    /// Per sample: max absolute coordinate of the frame velocity combination
    /// that produced this state (the first evaluated velocity at step 0).
    pub max_abs_v: Array1<f64>,
    /// Change of the integration variable over the step into this record.
    pub delta_phi: f64,
    /// Frame velocity combination behind `max_abs_v`, if requested.
    pub v: Option<Array2<f64>>,
}

/// Single-sample view of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<TrajectoryPoint>,
    pub nfe: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub t: f64,
    pub nfe_so_far: usize,
    pub x: Vec<f64>,
    pub max_abs_x: f64,
    pub max_abs_xbar: f64,
    pub max_abs_v: f64,
    pub delta_phi: f64,
}

impl Trajectory {
    pub fn points(&self) -> Array2<f64> {
        let d = self.records.first().map_or(0, |r| r.x.len());
        let flat: Vec<f64> = self.records.iter().flat_map(|r| r.x.iter().copied()).collect();
        Array2::from_shape_vec((self.records.len(), d), flat).expect("consistent record widths")
    }
}

#[derive(Debug, Clone)]
pub struct Integration {
    pub records: Vec<StepRecord>,
    pub nfe: usize,
}

impl Integration {
    pub fn n_samples(&self) -> usize {
        self.records[0].x.nrows()
    }

    pub fn final_samples(&self) -> &Array2<f64> {
        &self.records.last().expect("at least one record").x
    }

    pub fn trajectory(&self, i: usize) -> Trajectory {
        Trajectory {
            records: self
                .records
                .iter()
                .map(|r| TrajectoryPoint {
                    step: r.step,
                    t: r.t,
                    nfe_so_far: r.nfe_so_far,
                    x: r.x.row(i).to_vec(),
                    max_abs_x: r.max_abs_x[i],
                    max_abs_xbar: r.max_abs_xbar[i],
                    max_abs_v: r.max_abs_v[i],
                    delta_phi: r.delta_phi,
                })
                .collect(),
            nfe: self.nfe,
        }
    }

    pub fn trajectories(&self) -> Vec<Trajectory> {
        (0..self.n_samples()).map(|i| self.trajectory(i)).collect()
    }

    /// Largest `|x|` coordinate over every kept record and sample.
    pub fn max_abs_x(&self) -> f64 {
        self.records
            .iter()
            .flat_map(|r| r.max_abs_x.iter().copied())
            .fold(0.0, nan_max)
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for r in &self.records {
            if r.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sample at step {} (t = {})", r.step, r.t)));
            }
        }
        Ok(())
    }
}

fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

fn row_max_abs(x: &Array2<f64>) -> Array1<f64> {
    x.map_axis(Axis(1), |r| r.iter().fold(0.0, |m, v| nan_max(m, v.abs())))
}

/// `x + sum_m w_m vs_m`
fn axpy_sum(x: &Array2<f64>, scale: f64, weights: &[f64], vs: &[&Array2<f64>]) -> Array2<f64> {
    let mut out = x.clone();
    for (w, v) in weights.iter().zip(vs) {
        let k = scale * w;
        if k != 0.0 {
            Zip::from(&mut out).and(*v).for_each(|o, &vi| *o += k * vi);
        }
    }
    out
}

fn weighted_sum(weights: &[f64], vs: &[&Array2<f64>]) -> Array2<f64> {
    let mut out = Array2::zeros(vs[0].raw_dim());
    for (w, v) in weights.iter().zip(vs) {
        if *w != 0.0 {
            Zip::from(&mut out).and(*v).for_each(|o, &vi| *o += w * vi);
        }
    }
    out
}

struct StepResult {
    x: Array2<f64>,
    x_bar: Array2<f64>,
    v: Array2<f64>,
    delta: f64,
}

struct Stepper<'f, S> {
    field: &'f TransformedField<S>,
    nfe: usize,
}

impl<S: VelocitySource> Stepper<'_, S> {
    fn eval(&mut self, x: ArrayView2<f64>, t: f64) -> Array2<f64> {
        self.nfe += 1;
        self.field.velocity(x, t)
    }

    /// One explicit RK step; `f1` is the frame velocity at `(x, t)`.
    fn rk(&mut self, x: &Array2<f64>, t: f64, t_next: f64, tab: &Tableau, f1: Array2<f64>) -> StepResult {
        let field = self.field;
        let theta0 = field.theta(t);
        let x_bar = field.to_frame(x.view(), t, f1.view());
        let mut ks = vec![f1];
        for j in 1..tab.stages() {
            let tau = t + tab.c[j] * (t_next - t);
            let delta = field.theta(tau) - theta0;
            let weights: Vec<f64> = tab.a[j].iter().map(|a| a / tab.c[j]).collect();
            let refs: Vec<&Array2<f64>> = ks.iter().collect();
            let stage = axpy_sum(&x_bar, delta, &weights, &refs);
            let x_stage = field.from_frame(stage.view(), tau, ks[j - 1].view());
            let f = self.eval(x_stage.view(), tau);
            ks.push(f);
        }
        let refs: Vec<&Array2<f64>> = ks.iter().collect();
        let v = weighted_sum(&tab.b, &refs);
        let delta = field.theta(t_next) - theta0;
        let x_bar_next = axpy_sum(&x_bar, delta, &[1.0], &[&v]);
        let x_next = field.from_frame(x_bar_next.view(), t_next, ks.last().expect("one stage").view());
        StepResult {
            x: x_next,
            x_bar: x_bar_next,
            v,
            delta,
        }
    }

    /// `x_bar(t) + delta * sum_m w_m vs_m`, mapped back at `t_next` with `dir`.
    fn linear(
        &mut self,
        x: &Array2<f64>,
        t: f64,
        t_next: f64,
        weights: &[f64],
        vs: &[&Array2<f64>],
        dir: &Array2<f64>,
    ) -> StepResult {
        let field = self.field;
        let delta = field.theta(t_next) - field.theta(t);
        let x_bar = field.to_frame(x.view(), t, vs[0].view());
        let v = weighted_sum(weights, vs);
        let x_bar_next = axpy_sum(&x_bar, delta, &[1.0], &[&v]);
        let x_next = field.from_frame(x_bar_next.view(), t_next, dir.view());
        StepResult {
            x: x_next,
            x_bar: x_bar_next,
            v,
            delta,
        }
    }
}

/// One Euler step between original-frame batches; returns the new batch.
pub fn euler_step<S: VelocitySource>(
    field: &TransformedField<S>,
    x: ArrayView2<f64>,
    t: f64,
    t_next: f64,
) -> Array2<f64> {
    let mut st = Stepper { field, nfe: 0 };
    let f = st.eval(x, t);
    st.rk(&x.to_owned(), t, t_next, &Tableau::euler(), f).x
}

/// One explicit RK step between original-frame batches.
pub fn rk_step<S: VelocitySource>(
    field: &TransformedField<S>,
    x: ArrayView2<f64>,
    t: f64,
    t_next: f64,
    tableau: &Tableau,
) -> Result<Array2<f64>> {
    tableau.validate()?;
    let mut st = Stepper { field, nfe: 0 };
    let f = st.eval(x, t);
    Ok(st.rk(&x.to_owned(), t, t_next, tableau, f).x)
}

struct Recorder {
    keep: Keep,
    keep_velocity: bool,
    n_steps: usize,
    records: Vec<StepRecord>,
}

impl Recorder {
    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, step: usize, t: f64, nfe: usize, x: &Array2<f64>, x_bar: &Array2<f64>, v: &Array2<f64>, delta: f64) {
        if self.keep == Keep::Endpoints && step != 0 && step != self.n_steps {
            return;
        }
        self.records.push(StepRecord {
            step,
            t,
            nfe_so_far: nfe,
            x: x.clone(),
            max_abs_x: row_max_abs(x),
            max_abs_xbar: row_max_abs(x_bar),
            max_abs_v: row_max_abs(v),
            delta_phi: delta,
            v: self.keep_velocity.then(|| v.clone()),
        });
    }
}

/// Integrates every row of `x_init` (samples at `grid[0]`) along `field`.
pub fn run<S: VelocitySource>(
    field: &TransformedField<S>,
    grid: &TimeGrid,
    config: SolverConfig,
    x_init: ArrayView2<f64>,
) -> Result<Integration> {
    run_with(field, grid, config, x_init, RunOptions::default())
}

pub fn run_with<S: VelocitySource>(
    field: &TransformedField<S>,
    grid: &TimeGrid,
    config: SolverConfig,
    x_init: ArrayView2<f64>,
    options: impl Into<RunOptions>,
) -> Result<Integration> {
    let options = options.into();
    if x_init.ncols() != field.dim() {
        return Err(Error::Dimension {
            expected: field.dim(),
            got: x_init.ncols(),
        });
    }
    if x_init.nrows() == 0 {
        return Err(Error::Solver("empty initial batch".into()));
    }
    let ts = grid.points();
    let n = grid.n_steps();
    let mut st = Stepper { field, nfe: 0 };
    let mut rec = Recorder {
        keep: options.keep,
        keep_velocity: options.keep_velocity,
        n_steps: n,
        records: Vec::new(),
    };
    let mut x = x_init.to_owned();
    let f0 = st.eval(x.view(), ts[0]);
    let x_bar0 = field.to_frame(x.view(), ts[0], f0.view());
    rec.push(0, ts[0], st.nfe, &x, &x_bar0, &f0, 0.0);

    if let Some(tab) = config.method.tableau() {
        tab.validate()?;
        let mut f = Some(f0);
        for i in 0..n {
            let f1 = match f.take() {
                Some(f) => f,
                None => st.eval(x.view(), ts[i]),
            };
            let r = st.rk(&x, ts[i], ts[i + 1], &tab, f1);
            x = r.x;
            rec.push(i + 1, ts[i + 1], st.nfe, &x, &r.x_bar, &r.v, r.delta);
        }
        return Ok(Integration {
            records: rec.records,
            nfe: st.nfe,
        });
    }

    let (p, q) = config
        .method
        .multistep_orders()
        .expect("non-RK methods are multistep");
    let warm_tab = match config.warm_up {
        WarmUp::IncreasingOrderAb => None,
        WarmUp::Heun => Some(Tableau::heun()),
        WarmUp::Rk3 => Some(Tableau::rk3()),
    };
    let warm_steps = if warm_tab.is_some() { p.max(q.saturating_sub(1)) - 1 } else { 0 };
    // Most recent first: (time, frame velocity).
    let mut hist: VecDeque<(f64, Array2<f64>)> = VecDeque::new();
    hist.push_front((ts[0], f0));
    for i in 0..n {
        let (t, t_next) = (ts[i], ts[i + 1]);
        let last = i + 1 == n;
        if let (Some(tab), true) = (&warm_tab, i < warm_steps) {
            let f1 = hist[0].1.clone();
            let r = st.rk(&x, t, t_next, tab, f1);
            x = r.x;
            if !last {
                let f = st.eval(x.view(), t_next);
                hist.push_front((t_next, f));
            }
            rec.push(i + 1, t_next, st.nfe, &x, &r.x_bar, &r.v, r.delta);
            hist.truncate(3);
            continue;
        }
        let order = p.min(hist.len());
        let mut times = vec![t_next];
        times.extend(hist.iter().take(order).map(|h| h.0));
        let l = ab_coefficients(&times)?;
        let vs: Vec<&Array2<f64>> = hist.iter().take(order).map(|h| &h.1).collect();
        if q == 0 {
            let r = st.linear(&x, t, t_next, &l, &vs, &hist[0].1);
            x = r.x;
            if !last {
                let f = st.eval(x.view(), t_next);
                hist.push_front((t_next, f));
            }
            rec.push(i + 1, t_next, st.nfe, &x, &r.x_bar, &r.v, r.delta);
        } else {
            let pred = st.linear(&x, t, t_next, &l, &vs, &hist[0].1);
            let fa = st.eval(pred.x.view(), t_next);
            let corr_order = q.min(hist.len() + 1);
            let mut times = vec![t_next];
            times.extend(hist.iter().take(corr_order - 1).map(|h| h.0));
            let lt = am_coefficients(&times)?;
            let mut vs: Vec<&Array2<f64>> = vec![&fa];
            vs.extend(hist.iter().take(corr_order - 1).map(|h| &h.1));
            // The corrector starts from the same frame state as the predictor.
            let field = st.field;
            let delta = field.theta(t_next) - field.theta(t);
            let x_bar = field.to_frame(x.view(), t, hist[0].1.view());
            let v = weighted_sum(&lt, &vs);
            let x_bar_next = axpy_sum(&x_bar, delta, &[1.0], &[&v]);
            x = field.from_frame(x_bar_next.view(), t_next, fa.view());
            if config.reuse_predicted_velocity {
                hist.push_front((t_next, fa));
            } else if !last {
                let f = st.eval(x.view(), t_next);
                hist.push_front((t_next, f));
            }
            rec.push(i + 1, t_next, st.nfe, &x, &x_bar_next, &v, delta);
        }
        hist.truncate(3);
    }
    Ok(Integration {
        records: rec.records,
        nfe: st.nfe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_examples() {
        assert_eq!(TimeGrid::sampling(2).unwrap().points(), &[1.0, 0.5, 0.0]);
        assert_eq!(TimeGrid::sampling(1).unwrap().points(), &[1.0, 0.0]);
        assert!(TimeGrid::sampling(0).is_err());
        assert!(TimeGrid::new(vec![1.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::new(vec![1.0, 0.5, 0.7]).is_err());
    }

    #[test]
    fn tableaux_are_consistent() {
        for m in SolverMethod::ALL {
            if let Some(t) = m.tableau() {
                t.validate().unwrap();
            }
        }
        let mut bad = Tableau::heun();
        bad.b = vec![0.3, 0.3];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn duplicate_times_rejected() {
        assert!(ab_coefficients(&[0.5, 0.6, 0.6]).is_err());
        assert!(am_coefficients(&[0.5, 0.5]).is_err());
    }

    #[test]
    fn method_ids_round_trip() {
        for m in SolverMethod::ALL {
            assert_eq!(m.id().parse::<SolverMethod>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.id()));
        }
    }
}

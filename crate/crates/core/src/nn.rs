//! Three-layer tanh MLP on `concat(x, t)` with hand-written backprop and Adam,
//! trained by velocity matching or noise matching.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedules::Schedule;
use crate::solvers::{run_with, Keep, SolverConfig, SolverMethod, TimeGrid};
use crate::transforms::{TransformKind, TransformedField};
use crate::velocity::{FieldKind, VelocitySource};

pub const HIDDEN: usize = 100;
pub const CHECKPOINT_VERSION: u32 = 1;

/// Weights are stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl MlpParams {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        MlpParams {
            w1: Array2::zeros((hidden, dim + 1)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, hidden)),
            b2: Array1::zeros(hidden),
            w3: Array2::zeros((dim, hidden)),
            b3: Array1::zeros(dim),
        }
    }

    /// Each layer uniform in `+-1/sqrt(fan_in)`.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dim, hidden);
        let fill = |a: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in a {
                *v = rng.random_range(-bound..bound);
            }
        };
        let [w1, b1, w2, b2, w3, b3] = p.slices_mut();
        fill(w1, dim + 1, &mut rng);
        fill(b1, dim + 1, &mut rng);
        fill(w2, hidden, &mut rng);
        fill(b2, hidden, &mut rng);
        fill(w3, hidden, &mut rng);
        fill(b3, hidden, &mut rng);
        p
    }

    pub fn dim(&self) -> usize {
        self.w3.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn slices(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
        ]
    }

    fn check_shapes(&self) -> Result<()> {
        let (h, d) = (self.hidden(), self.dim());
        let ok = self.w1.dim() == (h, d + 1)
            && self.b1.len() == h
            && self.w2.dim() == (h, h)
            && self.b2.len() == h
            && self.w3.dim() == (d, h)
            && self.b3.len() == d;
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint("inconsistent layer shapes".into()))
        }
    }

    /// Rows of `x` each paired with their own time in `t`.
    pub fn forward(&self, x: ArrayView2<f64>, t: ArrayView1<f64>) -> Array2<f64> {
        self.forward_cached(x, t).out
    }

    /// Single sample.
    pub fn forward_one(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row shape");
        Ok(self.forward(xv, ndarray::aview1(&[t])).into_raw_vec_and_offset().0)
    }

    fn forward_cached(&self, x: ArrayView2<f64>, t: ArrayView1<f64>) -> ForwardCache {
        let n = x.nrows();
        let d = self.dim();
        assert_eq!(x.ncols(), d, "input dimension");
        assert_eq!(t.len(), n, "one time per row");
        let mut input = Array2::zeros((n, d + 1));
        input.slice_mut(s![.., ..d]).assign(&x);
        input.column_mut(d).assign(&t);
        let mut h1 = input.dot(&self.w1.t());
        h1 += &self.b1;
        h1.mapv_inplace(tanh);
        let mut h2 = h1.dot(&self.w2.t());
        h2 += &self.b2;
        h2.mapv_inplace(tanh);
        let mut out = h2.dot(&self.w3.t());
        out += &self.b3;
        ForwardCache { input, h1, h2, out }
    }

    /// Gradients of `sum(d_out * out)` given the upstream gradient `d_out`.
    fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>) -> MlpParams {
        let gw3 = d_out.t().dot(&cache.h2);
        let gb3 = d_out.sum_axis(Axis(0));
        let mut dz2 = d_out.dot(&self.w3);
        Zip::from(&mut dz2).and(&cache.h2).for_each(|g, &h| *g *= 1.0 - h * h);
        let gw2 = dz2.t().dot(&cache.h1);
        let gb2 = dz2.sum_axis(Axis(0));
        let mut dz1 = dz2.dot(&self.w2);
        Zip::from(&mut dz1).and(&cache.h1).for_each(|g, &h| *g *= 1.0 - h * h);
        let gw1 = dz1.t().dot(&cache.input);
        let gb1 = dz1.sum_axis(Axis(0));
        MlpParams {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
            w3: gw3,
            b3: gb3,
        }
    }
}

fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

struct ForwardCache {
    input: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    out: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Regress `a_dot x0 + sigma_dot x1`.
    VelocityMatching,
    /// Regress `x1`.
    NoiseMatching,
}

impl LossKind {
    pub fn field_kind(self) -> FieldKind {
        match self {
            LossKind::VelocityMatching => FieldKind::VelocityModel,
            LossKind::NoiseMatching => FieldKind::NoiseModel,
        }
    }
}

/// Per-sample weight of the squared error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossWeight {
    #[default]
    Unit,
    Constant(f64),
}

impl LossWeight {
    fn value(self) -> f64 {
        match self {
            LossWeight::Unit => 1.0,
            LossWeight::Constant(c) => c,
        }
    }
}

/// Training batch: endpoint pairs and their times.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x0: ArrayView2<'a, f64>,
    pub x1: ArrayView2<'a, f64>,
    pub t: ArrayView1<'a, f64>,
}

/// Network input `x_t` and regression target for a batch.
pub fn batch_inputs(batch: &Batch<'_>, schedule: &Schedule, loss: LossKind) -> (Array2<f64>, Array2<f64>) {
    let (n, d) = batch.x0.dim();
    let mut xt = Array2::zeros((n, d));
    let mut target = Array2::zeros((n, d));
    for r in 0..n {
        let sv = schedule.at(batch.t[r]);
        for c in 0..d {
            let (x0, x1) = (batch.x0[[r, c]], batch.x1[[r, c]]);
            xt[[r, c]] = sv.a * x0 + sv.sigma * x1;
            target[[r, c]] = match loss {
                LossKind::VelocityMatching => sv.a_dot * x0 + sv.sigma_dot * x1,
                LossKind::NoiseMatching => x1,
            };
        }
    }
    (xt, target)
}

/// Mean over the batch of the weighted squared error norm, and its gradient.
pub fn loss_and_gradients(
    params: &MlpParams,
    batch: &Batch<'_>,
    schedule: &Schedule,
    loss: LossKind,
    weight: LossWeight,
) -> (f64, MlpParams) {
    let n = batch.x0.nrows();
    assert!(n > 0, "empty batch");
    let (xt, target) = batch_inputs(batch, schedule, loss);
    let cache = params.forward_cached(xt.view(), batch.t);
    let lam = weight.value();
    let mut resid = &cache.out - &target;
    let value = lam * resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
    let scale = 2.0 * lam / n as f64;
    resid.mapv_inplace(|r| r * scale);
    (value, params.backward(&cache, &resid))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: MlpParams,
    v: MlpParams,
}

impl Adam {
    pub fn new(like: &MlpParams, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: MlpParams::zeros(like.dim(), like.hidden()),
            v: MlpParams::zeros(like.dim(), like.hidden()),
        }
    }

    pub fn update(&mut self, params: &mut MlpParams, grad: &MlpParams) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let ps = params.slices_mut();
        let gs = grad.slices();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::loss")]
    pub loss: LossKind,
    #[serde(default = "defaults::iterations")]
    pub iterations: usize,
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::n_data")]
    pub n_data: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss_weight: LossWeight,
}

mod defaults {
    use super::LossKind;
    pub fn loss() -> LossKind {
        LossKind::VelocityMatching
    }
    pub fn iterations() -> usize {
        20_000
    }
    pub fn batch() -> usize {
        2048
    }
    pub fn lr() -> f64 {
        0.003
    }
    pub fn n_data() -> usize {
        30_000
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: defaults::loss(),
            iterations: defaults::iterations(),
            batch: defaults::batch(),
            lr: defaults::lr(),
            n_data: defaults::n_data(),
            seed: 0,
            loss_weight: LossWeight::Unit,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("train.iterations", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if self.n_data == 0 {
            return Err(Error::config("train.n_data", "must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("train.lr", "must be positive"));
        }
        Ok(())
    }
}

/// How `x0` and `x1` rows are paired within a minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    Independent,
    /// Row `i` of `x0` goes with row `i` of `x1`.
    Paired,
}

/// Trained network together with the process it models.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub params: MlpParams,
    pub schedule: Schedule,
    pub kind: FieldKind,
}

impl VelocitySource for Mlp {
    fn dim(&self) -> usize {
        self.params.dim()
    }

    fn kind(&self) -> FieldKind {
        self.kind
    }

    fn evaluate(&self, x: ArrayView2<f64>, t: f64) -> Array2<f64> {
        let ts = Array1::from_elem(x.nrows(), t);
        self.params.forward(x, ts.view())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Minibatch loss per iteration.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the `window` iterations ending at `iteration` (1-based).
    pub fn smoothed(&self, iteration: usize, window: usize) -> f64 {
        let end = iteration.min(self.losses.len());
        let start = end.saturating_sub(window);
        let w = &self.losses[start..end];
        w.iter().sum::<f64>() / w.len() as f64
    }
}

/// Adam on minibatches `(x0, x1, t ~ U[0, 1))`; deterministic given the seed.
pub fn train(
    config: &TrainConfig,
    x0_data: ArrayView2<f64>,
    x1_data: ArrayView2<f64>,
    schedule: Schedule,
    coupling: Coupling,
) -> Result<(Mlp, TrainReport)> {
    config.validate()?;
    let d = x0_data.ncols();
    if x1_data.ncols() != d {
        return Err(Error::Dimension {
            expected: d,
            got: x1_data.ncols(),
        });
    }
    if x0_data.nrows() == 0 || x1_data.nrows() == 0 {
        return Err(Error::config("train", "empty dataset"));
    }
    if coupling == Coupling::Paired && x0_data.nrows() != x1_data.nrows() {
        return Err(Error::config("train", "paired data must have equal row counts"));
    }
    let mut params = MlpParams::init(d, HIDDEN, config.seed);
    let mut adam = Adam::new(&params, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let b = config.batch;
    let mut x0 = Array2::zeros((b, d));
    let mut x1 = Array2::zeros((b, d));
    let mut t = Array1::zeros(b);
    let mut report = TrainReport {
        losses: Vec::with_capacity(config.iterations),
    };
    for _ in 0..config.iterations {
        for r in 0..b {
            let i0 = rng.random_range(0..x0_data.nrows());
            let i1 = match coupling {
                Coupling::Independent => rng.random_range(0..x1_data.nrows()),
                Coupling::Paired => i0,
            };
            x0.row_mut(r).assign(&x0_data.row(i0));
            x1.row_mut(r).assign(&x1_data.row(i1));
            t[r] = rng.random::<f64>();
        }
        let batch = Batch {
            x0: x0.view(),
            x1: x1.view(),
            t: t.view(),
        };
        let (loss, grad) = loss_and_gradients(&params, &batch, &schedule, config.loss, config.loss_weight);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at iteration {}",
                report.losses.len() + 1
            )));
        }
        report.losses.push(loss);
        adam.update(&mut params, &grad);
    }
    Ok((
        Mlp {
            params,
            schedule,
            kind: config.loss.field_kind(),
        },
        report,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReflowConfig {
    #[serde(default)]
    pub train: TrainConfig,
    /// Teacher flow used to build the coupling.
    #[serde(default = "reflow_defaults::flow")]
    pub flow: TransformKind,
    #[serde(default = "reflow_defaults::solver")]
    pub solver: SolverConfig,
    #[serde(default = "reflow_defaults::steps")]
    pub steps: usize,
}

mod reflow_defaults {
    use super::*;
    pub fn flow() -> TransformKind {
        TransformKind::ScInterp
    }
    pub fn solver() -> SolverConfig {
        SolverConfig::new(SolverMethod::Euler)
    }
    pub fn steps() -> usize {
        100
    }
}

impl Default for ReflowConfig {
    fn default() -> Self {
        ReflowConfig {
            train: TrainConfig::default(),
            flow: reflow_defaults::flow(),
            solver: reflow_defaults::solver(),
            steps: reflow_defaults::steps(),
        }
    }
}

/// Couples each `x1` row with the teacher's endpoint and fits a fresh
/// rectified-schedule velocity model to that deterministic coupling.
/// Returns the student, its training log, and the generated `x0` rows.
pub fn reflow<S: VelocitySource>(
    teacher: &TransformedField<S>,
    x1_data: ArrayView2<f64>,
    config: &ReflowConfig,
) -> Result<(Mlp, TrainReport, Array2<f64>)> {
    let grid = TimeGrid::sampling(config.steps)?;
    let n = config.train.n_data.min(x1_data.nrows());
    let x1 = x1_data.slice(s![..n, ..]);
    let integ = run_with(teacher, &grid, config.solver, x1, Keep::Endpoints)?;
    integ.ensure_finite()?;
    let x0 = integ.final_samples().clone();
    let train_cfg = TrainConfig {
        loss: LossKind::VelocityMatching,
        ..config.train
    };
    let (student, report) = train(&train_cfg, x0.view(), x1, Schedule::Rectified, Coupling::Paired)?;
    Ok((student, report, x0))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointJson {
    version: u32,
    dim: usize,
    hidden: usize,
    schedule_id: String,
    schedule: Schedule,
    field_kind: FieldKind,
    weights: WeightsJson,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct WeightsJson {
    W1: Vec<f64>,
    b1: Vec<f64>,
    W2: Vec<f64>,
    b2: Vec<f64>,
    W3: Vec<f64>,
    b3: Vec<f64>,
}

impl Mlp {
    pub fn to_json(&self) -> Result<String> {
        let [w1, b1, w2, b2, w3, b3] = self.params.slices().map(|s| s.to_vec());
        let ck = CheckpointJson {
            version: CHECKPOINT_VERSION,
            dim: self.params.dim(),
            hidden: self.params.hidden(),
            schedule_id: self.schedule.id().to_string(),
            schedule: self.schedule,
            field_kind: self.kind,
            weights: WeightsJson {
                W1: w1,
                b1,
                W2: w2,
                b2,
                W3: w3,
                b3,
            },
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: CheckpointJson =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        if ck.schedule_id != ck.schedule.id() {
            return Err(Error::Checkpoint(format!(
                "schedule_id `{}` disagrees with schedule `{}`",
                ck.schedule_id,
                ck.schedule.id()
            )));
        }
        let (d, h) = (ck.dim, ck.hidden);
        let shape2 = |v: Vec<f64>, r: usize, c: usize, name: &str| {
            Array2::from_shape_vec((r, c), v)
                .map_err(|_| Error::Checkpoint(format!("{name} should hold {r}x{c} values")))
        };
        let shape1 = |v: Vec<f64>, n: usize, name: &str| {
            if v.len() == n {
                Ok(Array1::from_vec(v))
            } else {
                Err(Error::Checkpoint(format!("{name} should hold {n} values")))
            }
        };
        let w = ck.weights;
        let params = MlpParams {
            w1: shape2(w.W1, h, d + 1, "W1")?,
            b1: shape1(w.b1, h, "b1")?,
            w2: shape2(w.W2, h, h, "W2")?,
            b2: shape1(w.b2, h, "b2")?,
            w3: shape2(w.W3, d, h, "W3")?,
            b3: shape1(w.b3, d, "b3")?,
        };
        params.check_shapes()?;
        Ok(Mlp {
            params,
            schedule: ck.schedule,
            kind: ck.field_kind,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

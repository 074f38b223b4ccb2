//! Config-driven runs: sampling cells, flow-to-flow simulation, convergence.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::io::{write_json, write_samples_csv, write_trajectories_csv};
use super::metrics::{energy_distance_auto, median, median_straightness, trajectory_rmse};
use super::toy::{gaussian_pair, DatasetSpec};
use crate::error::{Error, Result};
use crate::gmm::{GaussianMixture, GmmOracle};
use crate::nn::Mlp;
use crate::schedules::Schedule;
use crate::solvers::{run_with, Integration, Keep, RunOptions, SolverConfig, SolverMethod, TimeGrid, WarmUp};
use crate::transforms::{sc_to_target, to_transformed, TransformKind, TransformedField};
use crate::velocity::{FieldKind, VelocitySource};

/// Parses a JSON document into `T`, reporting the path of the offending key.
pub fn parse_config<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path.is_empty() { ".".into() } else { path }, e.into_inner().to_string())
    })
}

pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// `"vp"` or `{"id": "vp", "params": {...}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Id(String),
    Full {
        id: String,
        #[serde(default)]
        params: Option<Value>,
    },
}

impl ScheduleSpec {
    pub fn resolve(&self) -> Result<Schedule> {
        match self {
            ScheduleSpec::Id(id) => id.parse(),
            ScheduleSpec::Full { id, params } => Schedule::from_config(id, params.as_ref()),
        }
    }
}

/// Velocity field with the same value everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField {
    pub velocity: Vec<f64>,
}

impl VelocitySource for ConstantField {
    fn dim(&self) -> usize {
        self.velocity.len()
    }

    fn kind(&self) -> FieldKind {
        FieldKind::VelocityModel
    }

    fn evaluate(&self, x: ArrayView2<f64>, _t: f64) -> Array2<f64> {
        let mut out = Array2::zeros(x.raw_dim());
        for mut row in out.rows_mut() {
            row.iter_mut().zip(&self.velocity).for_each(|(o, v)| *o = *v);
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceSpec {
    /// Exact posterior of the dataset mixtures.
    Oracle,
    /// Trained checkpoint.
    Model(PathBuf),
    /// Constant velocity field.
    Constant(Vec<f64>),
}

/// Concrete velocity source behind a run.
#[derive(Debug, Clone)]
pub enum Source {
    Oracle(GmmOracle),
    Model(Mlp),
    Constant(ConstantField),
}

impl VelocitySource for Source {
    fn dim(&self) -> usize {
        match self {
            Source::Oracle(o) => o.dim(),
            Source::Model(m) => m.dim(),
            Source::Constant(c) => c.dim(),
        }
    }

    fn kind(&self) -> FieldKind {
        match self {
            Source::Oracle(o) => o.kind(),
            Source::Model(m) => m.kind(),
            Source::Constant(c) => c.kind(),
        }
    }

    fn evaluate(&self, x: ArrayView2<f64>, t: f64) -> Array2<f64> {
        match self {
            Source::Oracle(o) => o.evaluate(x, t),
            Source::Model(m) => m.evaluate(x, t),
            Source::Constant(c) => c.evaluate(x, t),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub flow: TransformKind,
    pub solver: SolverMethod,
    #[serde(default)]
    pub warm_up: WarmUp,
    #[serde(default = "yes")]
    pub reuse_predicted_velocity: bool,
    pub steps: Vec<usize>,
    /// Map SC samples onto this process instead of recovering the source.
    #[serde(default)]
    pub target: Option<ScheduleSpec>,
}

fn yes() -> bool {
    true
}

fn default_count() -> usize {
    2048
}

fn default_trajectories() -> usize {
    64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSpec,
    /// Required unless the source is a checkpoint, which carries its own.
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    pub source: SourceSpec,
    /// Clip threshold; defaults by source kind.
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Trajectories written to each CSV.
    #[serde(default = "default_trajectories")]
    pub trajectories: usize,
    pub cells: Vec<CellSpec>,
}

/// Builds the source and schedule named by a config.
pub fn resolve_source(
    source: &SourceSpec,
    schedule: Option<&ScheduleSpec>,
    dataset: &DatasetSpec,
    base_dir: &Path,
) -> Result<(Source, Schedule)> {
    let named = schedule.map(|s| s.resolve()).transpose()?;
    match source {
        SourceSpec::Model(path) => {
            let path = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
            let model = Mlp::load(&path)?;
            if let Some(s) = named {
                if s != model.schedule {
                    return Err(Error::config(
                        "schedule",
                        format!("checkpoint was trained on {}, config asks for {}", model.schedule, s),
                    ));
                }
            }
            let sched = model.schedule;
            Ok((Source::Model(model), sched))
        }
        SourceSpec::Oracle => {
            let s = named.ok_or_else(|| Error::config("schedule", "required for the oracle source"))?;
            let oracle = GmmOracle::new(dataset.p0.clone(), dataset.p1.clone(), s)?;
            Ok((Source::Oracle(oracle), s))
        }
        SourceSpec::Constant(v) => {
            let s = named.ok_or_else(|| Error::config("schedule", "required for a constant source"))?;
            if v.len() != dataset.p1.dim() {
                return Err(Error::config("source.constant", "length must match the data dimension"));
            }
            Ok((Source::Constant(ConstantField { velocity: v.clone() }), s))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellMetrics {
    pub flow: String,
    pub solver: String,
    pub steps: usize,
    pub target: Option<String>,
    pub nfe: usize,
    pub energy_distance: f64,
    pub baseline_energy_distance: f64,
    pub straightness_median: Option<f64>,
    pub max_abs_x: f64,
    pub final_max_abs_x: f64,
    pub max_abs_xbar: f64,
    pub max_abs_v: f64,
    pub finite: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub schedule: String,
    pub source: String,
    pub eps: f64,
    pub count: usize,
    pub cells: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub dir: String,
    pub metrics: CellMetrics,
}

fn max_over(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, |m, v| if m.is_nan() || v.is_nan() { f64::NAN } else { m.max(v) })
}

/// Per-record maxima of a run, plus the sample straightness.
pub fn summarize(integ: &Integration) -> (f64, f64, f64, f64, Option<f64>) {
    let max_x = integ.max_abs_x();
    let last = integ.records.last().expect("records");
    let final_x = max_over(last.max_abs_x.iter().copied());
    let xbar = max_over(integ.records.iter().flat_map(|r| r.max_abs_xbar.iter().copied()));
    let v = max_over(integ.records.iter().flat_map(|r| r.max_abs_v.iter().copied()));
    let straight = if integ.records.len() >= 3 {
        let xs: Vec<Array2<f64>> = integ.records.iter().map(|r| r.x.clone()).collect();
        median_straightness(&xs).ok()
    } else {
        None
    };
    (max_x, final_x, xbar, v, straight)
}

/// Frame states of every kept record of a run of `field`. Shifted kinds need
/// the run to have kept its velocities.
pub fn frame_records<S: VelocitySource>(field: &TransformedField<S>, integ: &Integration) -> Result<Vec<Array2<f64>>> {
    integ
        .records
        .iter()
        .map(|r| {
            let sv = field.schedule.at(r.t);
            match (&r.v, field.kind.is_shift()) {
                (Some(v), _) => Ok(to_transformed(r.x.view(), field.kind, &sv, Some(v.view()), field.eps)),
                (None, false) => Ok(to_transformed(r.x.view(), field.kind, &sv, None, field.eps)),
                (None, true) => Err(Error::Solver("shifted frames need kept velocities".into())),
            }
        })
        .collect()
}

/// Samples and per-record SC velocities of an SC run mapped onto `target`.
pub struct TargetRun {
    pub integration: Integration,
    /// Target-process samples at each record, in record order.
    pub mapped: Vec<Array2<f64>>,
}

impl TargetRun {
    pub fn final_samples(&self) -> &Array2<f64> {
        self.mapped.last().expect("records")
    }

    /// Largest SC-velocity coordinate near either end of the grid over the
    /// median of per-record maxima inside `[0.25, 0.75]`.
    pub fn endpoint_velocity_ratio(&self, edge: f64) -> f64 {
        let per_record: Vec<(f64, f64)> = self
            .integration
            .records
            .iter()
            .map(|r| (r.t, max_over(r.max_abs_v.iter().copied())))
            .collect();
        let edge_peak = max_over(
            per_record
                .iter()
                .filter(|(t, _)| *t <= edge || *t >= 1.0 - edge)
                .map(|p| p.1),
        );
        let mid: Vec<f64> = per_record
            .iter()
            .filter(|(t, _)| (0.25..=0.75).contains(t))
            .map(|p| p.1)
            .collect();
        edge_peak / median(&mid)
    }
}

/// Steps the SC flow of `field` and maps every record onto the process
/// `target`, using the latest SC velocity for the extrapolation.
pub fn simulate_target<S: VelocitySource>(
    field: &TransformedField<S>,
    target: Schedule,
    grid: &TimeGrid,
    solver: SolverConfig,
    x_init: ArrayView2<f64>,
) -> Result<TargetRun> {
    let kind = field.kind;
    let form = match (kind.is_constant_speed(), kind.form()) {
        (true, Some(form)) => form,
        _ => {
            return Err(Error::config(
                "flow",
                format!("flow-to-flow needs a constant-speed flow, got {kind}"),
            ))
        }
    };
    let integ = run_with(
        field,
        grid,
        solver,
        x_init,
        RunOptions {
            keep: Keep::All,
            keep_velocity: true,
        },
    )?;
    let mut mapped = Vec::with_capacity(integ.records.len());
    for r in &integ.records {
        let v = r.v.as_ref().expect("velocities kept");
        let sv = field.schedule.at(r.t);
        let x_bar = to_transformed(r.x.view(), kind, &sv, Some(v.view()), field.eps);
        let sc_time = field.theta(r.t);
        mapped.push(sc_to_target(&target.at(r.t), form, x_bar.view(), sc_time, v.view(), field.eps));
    }
    Ok(TargetRun {
        integration: integ,
        mapped,
    })
}

/// Fresh `p0` samples that cell outputs are scored against, plus the energy
/// distance between two independent such draws.
#[derive(Debug, Clone)]
pub struct Reference {
    pub samples: Array2<f64>,
    pub baseline: f64,
    pub seed: u64,
}

impl Reference {
    pub fn draw(p0: &GaussianMixture, count: usize, seed: u64) -> Result<Self> {
        let samples = p0.sample(count, seed.wrapping_add(1_000_003));
        let other = p0.sample(count, seed.wrapping_add(2_000_003));
        let baseline = energy_distance_auto(samples.view(), other.view(), seed)?;
        Ok(Reference { samples, baseline, seed })
    }
}

/// One sampling run: a flow, a solver, a step count and an optional target
/// process for flow-to-flow mapping.
#[derive(Debug, Clone, Copy)]
pub struct CellRequest {
    pub flow: TransformKind,
    pub solver: SolverConfig,
    pub steps: usize,
    pub target: Option<Schedule>,
}

impl CellRequest {
    /// Directory name used by [`run_experiment`].
    pub fn name(&self) -> String {
        match self.target {
            Some(t) => format!("{}_{}_to_{}_n{}", self.flow, self.solver.method, t, self.steps),
            None => format!("{}_{}_n{}", self.flow, self.solver.method, self.steps),
        }
    }
}

/// Runs one cell from `x_init` and writes `trajectories.csv`, `samples.csv`
/// and `metrics.json` into `dir`.
#[allow(clippy::too_many_arguments)]
pub fn run_cell<S: VelocitySource>(
    source: &S,
    schedule: Schedule,
    eps: f64,
    request: &CellRequest,
    x_init: ArrayView2<f64>,
    reference: &Reference,
    trajectories: usize,
    dir: &Path,
) -> Result<CellMetrics> {
    if request.steps == 0 {
        return Err(Error::config("steps", "N must be positive"));
    }
    let field = TransformedField::new(source, schedule, request.flow, eps)?;
    let grid = TimeGrid::sampling(request.steps)?;
    let (integ, finals) = match request.target {
        Some(tgt) => {
            let run = simulate_target(&field, tgt, &grid, request.solver, x_init)?;
            let finals = run.final_samples().clone();
            (run.integration, finals)
        }
        None => {
            let integ = run_with(&field, &grid, request.solver, x_init, Keep::All)?;
            let finals = integ.final_samples().clone();
            (integ, finals)
        }
    };
    let finite = finals.iter().all(|v| v.is_finite());
    let ed = if finite {
        energy_distance_auto(finals.view(), reference.samples.view(), reference.seed)?
    } else {
        f64::NAN
    };
    let (max_x, final_x, xbar, v, straight) = summarize(&integ);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_trajectories_csv(&dir.join("trajectories.csv"), &integ, trajectories)?;
    write_samples_csv(&dir.join("samples.csv"), finals.view())?;
    let metrics = CellMetrics {
        flow: request.flow.to_string(),
        solver: request.solver.method.to_string(),
        steps: request.steps,
        target: request.target.map(|t| t.to_string()),
        nfe: integ.nfe,
        energy_distance: ed,
        baseline_energy_distance: reference.baseline,
        straightness_median: straight,
        max_abs_x: max_x,
        final_max_abs_x: final_x,
        max_abs_xbar: xbar,
        max_abs_v: v,
        finite,
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

/// Runs every cell of `config`, writing one directory per (cell, N) plus a
/// manifest under `out`. `base_dir` resolves relative checkpoint paths.
pub fn run_experiment(config: &ExperimentConfig, base_dir: &Path, out: &Path) -> Result<Manifest> {
    if config.cells.is_empty() {
        return Err(Error::config("cells", "at least one cell is required"));
    }
    if config.count == 0 {
        return Err(Error::config("count", "must be positive"));
    }
    let (source, schedule) = resolve_source(&config.source, config.schedule.as_ref(), &config.dataset, base_dir)?;
    let eps = config.eps.unwrap_or_else(|| source.kind().default_eps());
    if !(eps > 0.0) {
        return Err(Error::config("eps", "must be positive"));
    }
    let mut requests = Vec::new();
    for (ci, cell) in config.cells.iter().enumerate() {
        if cell.steps.is_empty() {
            return Err(Error::config(format!("cells[{ci}].steps"), "must list at least one N"));
        }
        if cell.steps.contains(&0) {
            return Err(Error::config(format!("cells[{ci}].steps"), "N must be positive"));
        }
        let target = cell
            .target
            .as_ref()
            .map(|t| t.resolve())
            .transpose()
            .map_err(|e| Error::config(format!("cells[{ci}].target"), e.to_string()))?;
        if target.is_some() && !cell.flow.is_constant_speed() {
            return Err(Error::config(
                format!("cells[{ci}].flow"),
                "flow-to-flow targets need a constant-speed flow",
            ));
        }
        let solver = SolverConfig {
            method: cell.solver,
            warm_up: cell.warm_up,
            reuse_predicted_velocity: cell.reuse_predicted_velocity,
        };
        requests.extend(cell.steps.iter().map(|&steps| CellRequest {
            flow: cell.flow,
            solver,
            steps,
            target,
        }));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let x_init = config.dataset.p1.sample(config.count, config.seed);
    let reference = Reference::draw(&config.dataset.p0, config.count, config.seed)?;
    let mut entries = Vec::new();
    for request in &requests {
        let name = request.name();
        let metrics = run_cell(
            &source,
            schedule,
            eps,
            request,
            x_init.view(),
            &reference,
            config.trajectories,
            &out.join(&name),
        )?;
        entries.push(ManifestEntry { dir: name, metrics });
    }
    let manifest = Manifest {
        schedule: schedule.to_string(),
        source: match &config.source {
            SourceSpec::Oracle => "oracle".into(),
            SourceSpec::Model(p) => p.display().to_string(),
            SourceSpec::Constant(_) => "constant".into(),
        },
        eps,
        count: config.count,
        cells: entries,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

impl Manifest {
    pub fn all_finite(&self) -> bool {
        self.cells.iter().all(|c| c.metrics.finite)
    }
}

/// Which endpoint distributions a convergence study uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Endpoints {
    /// One smooth Gaussian on each side.
    #[default]
    GaussianPair,
    /// The toy mixtures.
    Toy,
}

impl Endpoints {
    pub fn mixtures(self) -> (GaussianMixture, GaussianMixture) {
        match self {
            Endpoints::GaussianPair => gaussian_pair(),
            Endpoints::Toy => (super::toy::toy_p0(), super::toy::toy_p1()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub schedule: Schedule,
    pub flow: TransformKind,
    pub endpoints: Endpoints,
    pub methods: Vec<SolverMethod>,
    /// Applies to the multistep methods.
    pub warm_up: WarmUp,
    pub steps: Vec<usize>,
    pub reference_steps: usize,
    pub count: usize,
    pub seed: u64,
    pub eps: f64,
}

impl ConvergenceConfig {
    pub fn new(schedule: Schedule) -> Self {
        ConvergenceConfig {
            schedule,
            flow: TransformKind::ScInterp,
            endpoints: Endpoints::GaussianPair,
            methods: vec![
                SolverMethod::Euler,
                SolverMethod::Heun,
                SolverMethod::Ab2,
                SolverMethod::Rk3,
                SolverMethod::Ab3,
                SolverMethod::Rk4,
            ],
            warm_up: WarmUp::default(),
            steps: vec![8, 16, 32, 64, 128],
            reference_steps: 4096,
            count: 256,
            seed: 0,
            eps: FieldKind::Oracle.default_eps(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvergenceRow {
    pub method: SolverMethod,
    pub steps: usize,
    pub nfe: usize,
    pub rmse: f64,
    /// `log2(err(N) / err(2N))`, when `2N` is also in the study.
    pub order: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvergenceReport {
    pub schedule: String,
    pub flow: String,
    pub reference_steps: usize,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceReport {
    pub fn rmse(&self, method: SolverMethod, steps: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method && r.steps == steps).map(|r| r.rmse)
    }

    pub fn order(&self, method: SolverMethod, steps: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.steps == steps)
            .and_then(|r| r.order)
    }
}

/// Final-sample RMS error of each method against an rk4 reference on the
/// exact posterior field.
pub fn convergence_study(cfg: &ConvergenceConfig) -> Result<ConvergenceReport> {
    let (p0, p1) = cfg.endpoints.mixtures();
    let oracle = GmmOracle::new(p0, p1.clone(), cfg.schedule)?;
    let field = TransformedField::new(&oracle, cfg.schedule, cfg.flow, cfg.eps)?;
    let x_init = p1.sample(cfg.count, cfg.seed);
    let reference = run_with(
        &field,
        &TimeGrid::sampling(cfg.reference_steps)?,
        SolverMethod::Rk4.into(),
        x_init.view(),
        Keep::Endpoints,
    )?;
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        let mut errs = Vec::new();
        for &n in &cfg.steps {
            let solver = SolverConfig {
                warm_up: cfg.warm_up,
                ..SolverConfig::new(method)
            };
            let integ = run_with(&field, &TimeGrid::sampling(n)?, solver, x_init.view(), Keep::Endpoints)?;
            let err = trajectory_rmse(integ.final_samples().view(), reference.final_samples().view())?;
            errs.push((n, integ.nfe, err));
        }
        for &(n, nfe, err) in &errs {
            let order = errs
                .iter()
                .find(|(m, _, _)| *m == 2 * n)
                .map(|&(_, _, e2)| (err / e2).log2());
            rows.push(ConvergenceRow {
                method,
                steps: n,
                nfe,
                rmse: err,
                order,
            });
        }
    }
    Ok(ConvergenceReport {
        schedule: cfg.schedule.to_string(),
        flow: cfg.flow.to_string(),
        reference_steps: cfg.reference_steps,
        rows,
    })
}

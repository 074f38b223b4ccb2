//! `vfm`: train velocity models, sample along transformed flows, reflow,
//! convergence studies and sample metrics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use vfm_core::experiments::{
    convergence_study, energy_distance_auto, make_toy, parse_config, read_samples_csv, run_cell, run_experiment,
    trajectory_rmse, write_json, CellRequest, ConvergenceConfig, DatasetSpec, Endpoints, ExperimentConfig, Reference,
    ScheduleSpec, Source,
};
use vfm_core::nn::{reflow, train, Coupling, ReflowConfig};
use vfm_core::{
    Error, GmmOracle, Mlp, Schedule, SolverConfig, SolverMethod, TrainConfig, TransformKind, TransformedField,
    VelocitySource, WarmUp,
};

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERIC: u8 = 2;

#[derive(Parser)]
#[command(name = "vfm", version, about = "Straight constant-speed flows on a 2D toy problem")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a velocity or noise model on the toy data.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample along one flow and write samples, trajectories and metrics.
    Sample(SampleArgs),
    /// Retrain a rectified-schedule model on a teacher's deterministic coupling.
    Reflow {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solver convergence orders on the exact posterior field.
    Convergence(ConvergenceArgs),
    /// Energy distance (and paired RMSE when shapes match) between two sample files.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Run every cell of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["model", "oracle"]))]
struct SampleArgs {
    /// Trained checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Use the exact posterior of the toy mixtures.
    #[arg(long)]
    oracle: bool,
    /// Required with --oracle; must match the checkpoint otherwise.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long, default_value = "sc-interp")]
    flow: String,
    #[arg(long, default_value = "euler")]
    solver: String,
    #[arg(long, default_value = "increasing-order-ab")]
    warm_up: String,
    /// Recompute the corrector velocity instead of reusing the predicted one.
    #[arg(long)]
    no_reuse: bool,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 2048)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clip threshold; defaults by model kind.
    #[arg(long)]
    eps: Option<f64>,
    /// Map constant-speed samples onto this process.
    #[arg(long)]
    target: Option<String>,
    /// Trajectories written to the CSV.
    #[arg(long, default_value_t = 64)]
    trajectories: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConvergenceArgs {
    /// The study always uses the exact posterior field.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    schedule: String,
    #[arg(long, default_value = "sc-interp")]
    flow: String,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    #[arg(long, default_value = "increasing-order-ab")]
    warm_up: String,
    #[arg(long, default_value_t = 4096)]
    reference_steps: usize,
    #[arg(long, default_value_t = 256)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "gaussian-pair")]
    endpoints: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    schedule: ScheduleSpec,
    #[serde(default)]
    dataset: DatasetSpec,
    #[serde(default)]
    train: TrainConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReflowFile {
    #[serde(default)]
    dataset: DatasetSpec,
    #[serde(default)]
    reflow: ReflowConfig,
    /// Teacher clip threshold; defaults by model kind.
    #[serde(default)]
    eps: Option<f64>,
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    Ok(std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn read_file_config<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    Ok(parse_config(&read_text(path)?)?)
}

fn parse<T: std::str::FromStr<Err = Error>>(text: &str) -> anyhow::Result<T> {
    Ok(text.parse::<T>()?)
}

fn parse_warm_up(text: &str) -> anyhow::Result<WarmUp> {
    serde_json::from_value(serde_json::Value::String(text.into()))
        .map_err(|_| Error::config("warm-up", format!("unknown warm-up `{text}`")).into())
}

fn cmd_train(config: &Path, out: &Path) -> anyhow::Result<()> {
    let file: TrainFile = read_file_config(config)?;
    let schedule = file.schedule.resolve()?;
    let spec = DatasetSpec {
        n: file.train.n_data,
        ..file.dataset
    };
    let (x0, x1) = make_toy(&spec);
    let (model, report) = train(&file.train, x0.view(), x1.view(), schedule, Coupling::Independent)?;
    model.save(out)?;
    let window = 200.min(report.losses.len());
    println!(
        "{}",
        serde_json::json!({
            "schedule": schedule.to_string(),
            "iterations": report.losses.len(),
            "smoothed_loss_start": report.smoothed(window, window),
            "smoothed_loss_end": report.smoothed(report.losses.len(), window),
            "out": out.display().to_string(),
        })
    );
    Ok(())
}

/// Returns `false` when non-finite samples were produced.
fn cmd_sample(args: &SampleArgs) -> anyhow::Result<bool> {
    let named = args.schedule.as_deref().map(parse::<Schedule>).transpose()?;
    let dataset = DatasetSpec::default();
    let (source, schedule) = match (&args.model, args.oracle) {
        (Some(path), false) => {
            let model = Mlp::load(path)?;
            if let Some(s) = named {
                if s != model.schedule {
                    bail!(Error::config(
                        "schedule",
                        format!("checkpoint was trained on {}, not {s}", model.schedule)
                    ));
                }
            }
            let schedule = model.schedule;
            (Source::Model(model), schedule)
        }
        (None, true) => {
            let schedule = named.ok_or_else(|| Error::config("schedule", "required with --oracle"))?;
            let oracle = GmmOracle::new(dataset.p0.clone(), dataset.p1.clone(), schedule)?;
            (Source::Oracle(oracle), schedule)
        }
        _ => bail!(Error::config("source", "pass exactly one of --model and --oracle")),
    };
    if args.count == 0 {
        bail!(Error::config("count", "must be positive"));
    }
    let eps = args.eps.unwrap_or_else(|| source.kind().default_eps());
    if eps.is_nan() || eps <= 0.0 {
        bail!(Error::config("eps", "must be positive"));
    }
    let request = CellRequest {
        flow: parse::<TransformKind>(&args.flow)?,
        solver: SolverConfig {
            method: parse::<SolverMethod>(&args.solver)?,
            warm_up: parse_warm_up(&args.warm_up)?,
            reuse_predicted_velocity: !args.no_reuse,
        },
        steps: args.steps,
        target: args.target.as_deref().map(parse::<Schedule>).transpose()?,
    };
    if request.target.is_some() && !request.flow.is_constant_speed() {
        bail!(Error::config("flow", "--target needs a constant-speed flow"));
    }
    let x_init = dataset.p1.sample(args.count, args.seed);
    let reference = Reference::draw(&dataset.p0, args.count, args.seed)?;
    let metrics = run_cell(
        &source,
        schedule,
        eps,
        &request,
        x_init.view(),
        &reference,
        args.trajectories,
        &args.out,
    )?;
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(metrics.finite)
}

fn cmd_reflow(teacher: &Path, config: &Path, out: &Path) -> anyhow::Result<()> {
    let file: ReflowFile = read_file_config(config)?;
    let model = Mlp::load(teacher)?;
    let eps = file.eps.unwrap_or_else(|| model.kind.default_eps());
    let field = TransformedField::new(&model, model.schedule, file.reflow.flow, eps)?;
    let spec = DatasetSpec {
        n: file.reflow.train.n_data,
        ..file.dataset
    };
    let (_, x1) = make_toy(&spec);
    let (student, report, _) = reflow(&field, x1.view(), &file.reflow)?;
    student.save(out)?;
    let window = 200.min(report.losses.len());
    println!(
        "{}",
        serde_json::json!({
            "teacher_schedule": model.schedule.to_string(),
            "iterations": report.losses.len(),
            "smoothed_loss_end": report.smoothed(report.losses.len(), window),
            "out": out.display().to_string(),
        })
    );
    Ok(())
}

fn cmd_convergence(args: &ConvergenceArgs) -> anyhow::Result<()> {
    let mut cfg = ConvergenceConfig::new(parse::<Schedule>(&args.schedule)?);
    cfg.flow = parse::<TransformKind>(&args.flow)?;
    if let Some(methods) = &args.methods {
        cfg.methods = methods.iter().map(|m| parse::<SolverMethod>(m)).collect::<anyhow::Result<_>>()?;
    }
    if let Some(steps) = &args.steps {
        if steps.contains(&0) {
            bail!(Error::config("steps", "N must be positive"));
        }
        cfg.steps = steps.clone();
    }
    cfg.warm_up = parse_warm_up(&args.warm_up)?;
    cfg.reference_steps = args.reference_steps;
    cfg.count = args.count;
    cfg.seed = args.seed;
    cfg.endpoints = serde_json::from_value::<Endpoints>(serde_json::Value::String(args.endpoints.clone()))
        .map_err(|_| Error::config("endpoints", format!("unknown endpoints `{}`", args.endpoints)))?;
    let report = convergence_study(&cfg)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    write_json(&args.out.join("convergence.json"), &report)?;
    let mut csv = String::from("method,steps,nfe,rmse,order\n");
    for row in &report.rows {
        let order = row.order.map_or(String::new(), |o| o.to_string());
        csv.push_str(&format!("{},{},{},{},{}\n", row.method, row.steps, row.nfe, row.rmse, order));
    }
    let csv_path = args.out.join("convergence.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    for row in &report.rows {
        println!(
            "{:<8} N={:<5} nfe={:<6} rmse={:.4e} order={}",
            row.method,
            row.steps,
            row.nfe,
            row.rmse,
            row.order.map_or("-".to_string(), |o| format!("{o:.3}"))
        );
    }
    Ok(())
}

fn cmd_metrics(a: &Path, b: &Path) -> anyhow::Result<()> {
    let sa = read_samples_csv(a)?;
    let sb = read_samples_csv(b)?;
    let ed = energy_distance_auto(sa.view(), sb.view(), 0)?;
    let rmse = if sa.dim() == sb.dim() {
        Some(trajectory_rmse(sa.view(), sb.view())?)
    } else {
        None
    };
    println!(
        "{}",
        serde_json::json!({
            "energy_distance": ed,
            "trajectory_rmse": rmse,
            "n_a": sa.nrows(),
            "n_b": sb.nrows(),
        })
    );
    Ok(())
}

/// Returns `false` when any cell produced non-finite samples.
fn cmd_run(config: &Path, out: &Path) -> anyhow::Result<bool> {
    let cfg: ExperimentConfig = read_file_config(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let manifest = run_experiment(&cfg, base, out)?;
    for cell in &manifest.cells {
        println!(
            "{:<40} nfe={:<6} energy_distance={:.5} finite={}",
            cell.dir, cell.metrics.nfe, cell.metrics.energy_distance, cell.metrics.finite
        );
    }
    Ok(manifest.all_finite())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite(_)) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: anyhow::Result<bool> = match &cli.command {
        Command::Train { config, out } => cmd_train(config, out).map(|_| true),
        Command::Sample(args) => cmd_sample(args),
        Command::Reflow { teacher, config, out } => cmd_reflow(teacher, config, out).map(|_| true),
        Command::Convergence(args) => cmd_convergence(args).map(|_| true),
        Command::Metrics { a, b } => cmd_metrics(a, b).map(|_| true),
        Command::Run { config, out } => cmd_run(config, out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: non-finite samples detected");
            ExitCode::from(EXIT_NUMERIC)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

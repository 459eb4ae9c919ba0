//! `moekit` command-line front end.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use moekit::bench::{self, ExperimentConfig, Scale};
use moekit::em::{fit_mle, EMConfig};
use moekit::identifiability::{strong_identifiability_score, uniform_grid, weak_identifiability_score};
use moekit::polysys::{search_nontrivial, SystemInstance, SystemKind};
use moekit::router::{self, RoutingLog, UtilizationMode};
use moekit::sampler::{sample_dataset, SamplerConfig};
use moekit::voronoi::LossKind;
use moekit::{Dataset, Error, ExpertFamily, GatingKind, MixingMeasurePair};

#[derive(Parser)]
#[command(name = "moekit", version, about = "Simulate, fit and score Gaussian mixture-of-experts models with shared and routed experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset from a model.
    Simulate(SimulateArgs),
    /// Fit a model to a dataset by EM.
    Fit(FitArgs),
    /// Voronoi loss between a fitted and a true model.
    Loss(LossArgs),
    /// Convergence-rate benchmark.
    Bench(BenchArgs),
    /// Search the polynomial systems for non-trivial solutions.
    Polysys(PolysysArgs),
    /// Identifiability score of a model's expert families.
    Ident(IdentArgs),
    /// Router metrics on a routing log.
    Router(RouterArgs),
    /// Monte-Carlo total variation distance between two models.
    Tv(TvArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Model JSON file.
    #[arg(long, required_unless_present = "theorem", conflicts_with = "theorem")]
    model: Option<PathBuf>,
    /// Use the ground truth of a benchmark preset instead of a model file.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    theorem: Option<u8>,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = -3.0, allow_hyphen_values = true)]
    input_low: f64,
    #[arg(long, default_value_t = 3.0, allow_hyphen_values = true)]
    input_high: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset CSV with header `x_0,...,x_{d-1},y`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    k1: usize,
    #[arg(long)]
    k2: usize,
    /// softmax, sigmoid or topk:<K>.
    #[arg(long, default_value = "softmax")]
    gating: GatingKind,
    #[arg(long, default_value = "linear")]
    shared_family: ExpertFamily,
    #[arg(long, default_value = "linear")]
    routed_family: ExpertFamily,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LossArgs {
    #[arg(long)]
    fitted: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// d1, d2, d3, d4 or d5 (with --K).
    #[arg(long)]
    loss: String,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4), required_unless_present = "config", conflicts_with = "config")]
    theorem: Option<u8>,
    /// ExperimentConfig JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    scale: Scale,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output records CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PolysysArgs {
    #[arg(long)]
    system: SystemKind,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    r: usize,
    #[arg(long, default_value_t = 100)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum IdentMode {
    Strong,
    Weak,
}

#[derive(Args)]
struct IdentArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    mode: IdentMode,
    #[arg(long, default_value_t = 512)]
    grid: usize,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum RouterMetric {
    Saturation,
    ChangeRate,
    Jain,
}

#[derive(Args)]
struct RouterArgs {
    #[arg(long)]
    log: PathBuf,
    /// Single metric; omit together with --curve for batch mode.
    #[arg(long, value_enum, required_unless_present = "curve")]
    metric: Option<RouterMetric>,
    /// Checkpoint id (defaults to the first checkpoint).
    #[arg(long)]
    t: Option<u64>,
    /// Final checkpoint id for saturation (defaults to the last one).
    #[arg(long = "T")]
    final_t: Option<u64>,
    /// Utilization counted per token or per routing weight.
    #[arg(long, default_value = "tokens")]
    mode: UtilizationMode,
    #[arg(long)]
    num_experts: Option<usize>,
    /// Batch mode: write a per-checkpoint CSV curve here.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Label column for the curve CSV (defaults to the log file stem).
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args)]
struct TvArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_x: usize,
    #[arg(long, default_value_t = 40.0)]
    y_halfwidth: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("JSON output"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> moekit::Result<Value> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Loss(a) => loss(a),
        Command::Bench(a) => run_bench(a),
        Command::Polysys(a) => polysys(a),
        Command::Ident(a) => ident(a),
        Command::Router(a) => run_router(a),
        Command::Tv(a) => tv(a),
    }
}

fn write_json(path: &Path, value: &Value) -> moekit::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn simulate(a: SimulateArgs) -> moekit::Result<Value> {
    let model = match (a.model, a.theorem) {
        (Some(path), _) => MixingMeasurePair::load(path)?,
        (None, Some(t)) => bench::preset_theorem(t)?.truth,
        (None, None) => unreachable!("clap requires one of --model and --theorem"),
    };
    let cfg = SamplerConfig {
        n: a.n,
        input_low: a.input_low,
        input_high: a.input_high,
        seed: a.seed,
    };
    let data = sample_dataset(&model, &cfg)?;
    data.write_csv(&a.out)?;
    Ok(json!({ "n": data.len(), "input_dim": data.input_dim(), "out": a.out }))
}

fn fit(a: FitArgs) -> moekit::Result<Value> {
    let data = Dataset::read_csv(&a.data)?;
    let defaults = EMConfig::default();
    let cfg = EMConfig {
        seed: a.seed,
        restarts: a.restarts.unwrap_or(defaults.restarts),
        max_iter: a.max_iter.unwrap_or(defaults.max_iter),
        tol: a.tol.unwrap_or(defaults.tol),
        ..defaults
    };
    let result = fit_mle(&data, a.k1, a.k2, a.shared_family, a.routed_family, a.gating, &cfg)?;
    result.model.save(&a.out)?;
    Ok(json!({
        "loglik": result.final_loglik(),
        "iterations": result.iterations,
        "converged": result.converged,
        "restart_index": result.restart_index,
        "out": a.out,
    }))
}

fn loss(a: LossArgs) -> moekit::Result<Value> {
    let fitted = MixingMeasurePair::load(&a.fitted)?;
    let truth = MixingMeasurePair::load(&a.truth)?;
    let kind: LossKind = match (a.loss.as_str(), a.k) {
        ("d5", Some(k)) => LossKind::D5 { k },
        ("d5", None) => return Err(Error::invalid("K", "d5 needs --K")),
        (s, _) => s.parse()?,
    };
    let report = serde_json::to_value(kind.evaluate(&fitted, &truth)?)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(report)
}

fn run_bench(a: BenchArgs) -> moekit::Result<Value> {
    let mut cfg: ExperimentConfig = match (&a.config, a.theorem) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)?
        }
        (None, Some(t)) => bench::preset_theorem(t)?.with_scale(a.scale),
        (None, None) => unreachable!("clap requires one of --theorem and --config"),
    };
    if a.config.is_none() {
        cfg.master_seed = a.seed;
    }
    if let Some(reps) = a.reps {
        cfg.reps = reps;
    }
    let records = bench::run_experiment(&cfg)?;
    bench::export_csv(&records, &a.out)?;
    let summary = bench::summarize(&records);
    let slope = bench::fit_loglog_slope(&records).ok();
    Ok(json!({
        "loss": cfg.loss.to_string(),
        "records": records.len(),
        "failed_runs": records.iter().filter(|r| !r.loss.is_finite()).count(),
        "summary": summary,
        "slope": slope,
        "out": a.out,
    }))
}

fn polysys(a: PolysysArgs) -> moekit::Result<Value> {
    let sys = SystemInstance {
        kind: a.system,
        m: a.m,
        r: a.r,
        d: 1,
    };
    let out = search_nontrivial(&sys, a.restarts, a.seed)?;
    Ok(json!({
        "found": out.found(),
        "residual_norm": out.residual_norm,
        "restarts": out.restarts,
        "vars": out.solution,
    }))
}

fn ident(a: IdentArgs) -> moekit::Result<Value> {
    let model = MixingMeasurePair::load(&a.model)?;
    if model.input_dim != 1 {
        return Err(Error::invalid("model", "identifiability grids are one-dimensional; input_dim must be 1"));
    }
    let grid = uniform_grid(a.grid, -3.0, 3.0);
    let routed: Vec<Vec<f64>> = model.routed.iter().map(|r| r.expert_params.clone()).collect();
    let score = match a.mode {
        IdentMode::Strong => {
            let shared: Vec<Vec<f64>> = model.shared.iter().map(|s| s.expert_params.clone()).collect();
            strong_identifiability_score(&model.shared_family, &model.routed_family, &shared, &routed, &grid)?
        }
        IdentMode::Weak => weak_identifiability_score(&model.routed_family, &routed, &grid)?,
    };
    Ok(json!({
        "score": score.relative(),
        "pass": score.passes(),
        "min_singular_value": score.min_singular_value,
        "max_singular_value": score.max_singular_value,
        "gram_dim": score.gram_dim,
        "block": score.block,
    }))
}

fn run_router(a: RouterArgs) -> moekit::Result<Value> {
    let log = RoutingLog::read_csv(&a.log, a.num_experts)?;
    let first = log.checkpoints()[0];
    let last = *log.checkpoints().last().expect("non-empty log");
    let mut out = serde_json::Map::new();
    if let Some(metric) = a.metric {
        let t = a.t.unwrap_or(first);
        let (name, value) = match metric {
            RouterMetric::Saturation => ("saturation", router::saturation(&log, t, a.final_t.unwrap_or(last))?),
            RouterMetric::ChangeRate => ("change_rate", router::change_rate(&log, t)?),
            RouterMetric::Jain => ("jain", router::jain_index(&router::utilization(&log, t, a.mode)?)?),
        };
        out.insert("metric".into(), json!(name));
        out.insert("checkpoint".into(), json!(t));
        out.insert("value".into(), json!(value));
    }
    if let Some(path) = &a.curve {
        let label = a.label.clone().unwrap_or_else(|| {
            a.log
                .file_stem()
                .map(|s| s.to_string_lossy().replace([',', '"'], "_"))
                .unwrap_or_else(|| "log".into())
        });
        let curve = router::metric_curve(&log, a.mode)?;
        router::write_curve_csv(&curve, &label, path)?;
        out.insert("curve".into(), json!(path));
        out.insert("checkpoints".into(), json!(curve.len()));
    }
    Ok(Value::Object(out))
}

fn tv(a: TvArgs) -> moekit::Result<Value> {
    let ma = MixingMeasurePair::load(&a.a)?;
    let mb = MixingMeasurePair::load(&a.b)?;
    let d = bench::tv_distance(&ma, &mb, a.n_x, a.y_halfwidth, a.seed)?;
    Ok(json!({ "tv": d }))
}

use std::fs;
use std::path::{Path, PathBuf};

use anchor_moe::dataset::{load_csv, Table};
use anchor_moe::metrics::{self, AggregateReport, Original, ZSpace};
use anchor_moe::pipeline::{
    self, plan_for, run_ablation, run_benchmark, run_split, run_table, sha256_hex, toy_demo, BenchmarkResult, PipelineConfig,
    RunOutput, TrainedPipeline, ABLATION_ARMS,
};
use anchor_moe::theory::{self, BalanceConfig, Embedding, ManifoldConfig, RateConfig, RateResult, SparseConfig};
use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::config::{fresh_dir, load_config_file, Overrides, RunConfig};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Text,
    Markdown,
    Json,
}

fn mkdir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn create(path: &Path) -> Result<fs::File, CliError> {
    fs::File::create(path).map_err(|e| CliError::io(path, e))
}

/// Loads the dataset and returns it with the hash of the file bytes.
fn load_data(cfg: &RunConfig) -> Result<(Table, String), CliError> {
    let path = cfg.data_path()?;
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let sha = sha256_hex(&bytes);
    if let Some(expected) = &cfg.data_sha256 {
        if *expected != sha {
            return Err(CliError::Core(anchor_moe::Error::InvalidData(format!(
                "{} has sha256 {sha}, config expects {expected}",
                path.display()
            ))));
        }
    }
    Ok((load_csv(path, &cfg.schema)?, sha))
}

/// Writes `config.json` with defaults materialized and the data hash.
fn echo_config(dir: &Path, cfg: &RunConfig, sha: &str) -> Result<(), CliError> {
    let mut echo = cfg.clone();
    echo.data_sha256 = Some(sha.to_string());
    echo.output_dir = None;
    write_json(&dir.join("config.json"), &echo)
}

fn write_run(dir: &Path, run: &RunOutput) -> Result<(), CliError> {
    mkdir(dir)?;
    write_json(&dir.join("report.json"), &run.report)?;
    write_text(&dir.join("plan.json"), &run.plan.to_json()?)?;
    run.phase1.write_csv(create(&dir.join("phase1.csv"))?)?;
    run.phase2.write_csv(create(&dir.join("phase2.csv"))?)?;
    Ok(())
}

fn write_aggregate(dir: &Path, agg: &AggregateReport) -> Result<(), CliError> {
    agg.write_csv(create(&dir.join("aggregate.csv"))?)?;
    write_json(&dir.join("aggregate.json"), agg)
}

#[derive(Serialize)]
struct Failure {
    seed: u64,
    exit_code: i32,
    error: String,
}

/// Per-run folders, `runs.csv`, aggregate files, and `failures.json` when
/// any run failed.
fn write_benchmark(dir: &Path, res: &BenchmarkResult) -> Result<(), CliError> {
    let runs_dir = dir.join("runs");
    mkdir(&runs_dir)?;
    let mut table = csv::Writer::from_writer(create(&dir.join("runs.csv"))?);
    for run in &res.runs {
        write_run(&runs_dir.join(format!("seed_{}", run.report.seed)), run)?;
        table.serialize(&run.report)?;
    }
    table.flush().map_err(|e| CliError::io(dir, e))?;
    if let Some(agg) = &res.aggregate {
        write_aggregate(dir, agg)?;
    }
    if !res.failures.is_empty() {
        let fails: Vec<Failure> = res
            .failures
            .iter()
            .map(|(seed, e)| Failure {
                seed: *seed,
                exit_code: e.exit_code(),
                error: e.to_string(),
            })
            .collect();
        write_json(&dir.join("failures.json"), &fails)?;
    }
    Ok(())
}

fn warn_failures(label: &str, res: &BenchmarkResult) {
    for (seed, e) in &res.failures {
        eprintln!("warning: {label} seed {seed} failed: {e}");
    }
    if !res.failures.is_empty() {
        eprintln!(
            "warning: {label}: aggregate excludes {} failed run(s) of {}",
            res.failures.len(),
            res.failures.len() + res.runs.len()
        );
    }
}

fn first_failure(res: BenchmarkResult) -> CliError {
    res.failures
        .into_iter()
        .next()
        .map_or_else(|| CliError::Usage("no runs".into()), |(_, e)| CliError::from(e))
}

const SUMMARY_METRICS: [&str; 3] = ["rmse", "nll", "crps"];

fn print_aggregate(agg: &AggregateReport, format: Format) -> Result<(), CliError> {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(agg)?),
        Format::Markdown => {
            println!("| dataset | RMSE | NLL | CRPS |");
            println!("|---|---|---|---|");
            println!("{}", agg.markdown_row(&SUMMARY_METRICS));
        }
        Format::Text => {
            println!("{} ({} runs)", agg.dataset, agg.runs);
            for m in &agg.metrics {
                println!("  {:<18} {:>12.6} ± {:.6}", m.metric, m.mean, m.stderr);
            }
        }
    }
    Ok(())
}

pub fn benchmark(o: &Overrides, format: Format) -> Result<(), CliError> {
    let cfg = o.resolve()?;
    let (table, sha) = load_data(&cfg)?;
    let name = cfg.dataset_name();
    let dir = cfg.run_dir(&name)?;
    mkdir(&dir)?;
    echo_config(&dir, &cfg, &sha)?;
    let res = run_benchmark(&table, &name, &cfg.pipeline, cfg.n_runs, cfg.seed_base)?;
    write_benchmark(&dir, &res)?;
    warn_failures(&name, &res);
    eprintln!("wrote {}", dir.display());
    match &res.aggregate {
        Some(agg) => print_aggregate(agg, format),
        None => Err(first_failure(res)),
    }
}

#[derive(Serialize)]
struct AblationSummary<'a> {
    dataset: &'a str,
    plans_shared: bool,
    arms: Vec<(&'a str, Option<&'a AggregateReport>)>,
}

pub fn ablate(o: &Overrides, format: Format) -> Result<(), CliError> {
    let cfg = o.resolve()?;
    let (table, sha) = load_data(&cfg)?;
    let name = cfg.dataset_name();
    let dir = cfg.run_dir(&format!("{name}-ablation"))?;
    mkdir(&dir)?;
    echo_config(&dir, &cfg, &sha)?;
    let res = run_ablation(&table, &name, &cfg.pipeline, cfg.n_runs, cfg.seed_base)?;
    let shared = res.plans_shared()?;
    let mut long = csv::Writer::from_writer(create(&dir.join("ablation.csv"))?);
    long.write_record(["dataset", "arm", "metric", "mean", "stderr"])?;
    for (arm, r) in &res.arms {
        let arm_dir = dir.join(arm);
        mkdir(&arm_dir)?;
        write_json(&arm_dir.join("pipeline_config.json"), &pipeline::ablation_config(&cfg.pipeline, arm)?.resolved())?;
        write_benchmark(&arm_dir, r)?;
        warn_failures(&format!("{name}/{arm}"), r);
        if let Some(agg) = &r.aggregate {
            for m in &agg.metrics {
                long.write_record([
                    name.clone(),
                    arm.clone(),
                    m.metric.clone(),
                    format!("{:.17e}", m.mean),
                    format!("{:.17e}", m.stderr),
                ])?;
            }
        }
    }
    long.flush().map_err(|e| CliError::io(&dir, e))?;
    let summary = AblationSummary {
        dataset: &name,
        plans_shared: shared,
        arms: res.arms.iter().map(|(a, r)| (a.as_str(), r.aggregate.as_ref())).collect(),
    };
    write_json(&dir.join("ablation.json"), &summary)?;
    eprintln!("wrote {}", dir.display());
    if !shared {
        return Err(CliError::Core(anchor_moe::Error::InvalidData("ablation arms used different split plans".into())));
    }
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&summary)?),
        Format::Markdown | Format::Text => {
            for metric in ["nll", "rmse"] {
                println!("{}", metric.to_uppercase());
                println!("| dataset | {} |", ABLATION_ARMS.join(" | "));
                println!("|---|{}", "---|".repeat(ABLATION_ARMS.len()));
                let cells: Vec<String> = ABLATION_ARMS
                    .iter()
                    .map(|arm| {
                        res.arm(arm)
                            .and_then(|r| r.aggregate.as_ref())
                            .and_then(|a| a.get(metric))
                            .map_or_else(|| "n/a".into(), |m| format!("{:.2} ± {:.2}", m.mean, m.stderr))
                    })
                    .collect();
                println!("| {} | {} |", name, cells.join(" | "));
                println!();
            }
        }
    }
    Ok(())
}

pub fn train(o: &Overrides) -> Result<(), CliError> {
    let cfg = o.resolve()?;
    let (table, sha) = load_data(&cfg)?;
    let name = cfg.dataset_name();
    let dir = cfg.run_dir(&format!("{name}-train"))?;
    mkdir(&dir)?;
    echo_config(&dir, &cfg, &sha)?;
    let seed = cfg.seed_base;
    let t = run_table(&table, &cfg.pipeline, seed)?;
    let plan = plan_for(&t, &cfg.pipeline, seed)?;
    let run = run_split(&t, &name, &plan, &cfg.pipeline)?;
    write_run(&dir, &run)?;
    write_text(&dir.join("model.json"), &run.pipeline.to_json()?)?;
    let r = &run.report;
    println!(
        "{name} seed {seed}: rmse {:.4}  nll {:.4}  crps {:.4}  gbdt stages {}  moe epochs {}",
        r.rmse_original, r.nll_z, r.crps_z, r.t_gbdt, r.t_moe
    );
    eprintln!("wrote {}", dir.display());
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// `model.json` written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub common: Overrides,
}

#[derive(Serialize)]
struct EvalMetrics {
    n: usize,
    rmse: f64,
    rmse_uncalibrated: f64,
    nll_z: f64,
    crps_z: f64,
}

#[derive(Serialize)]
struct PredictionRow {
    row: usize,
    y: f64,
    mean: f64,
    raw_mean: f64,
    z_mean: f64,
    z_sd: f64,
    q025: f64,
    q975: f64,
}

pub fn eval(args: &EvalArgs, format: Format) -> Result<(), CliError> {
    let cfg = args.common.resolve()?;
    let (table, _) = load_data(&cfg)?;
    let text = fs::read_to_string(&args.model).map_err(|e| CliError::io(&args.model, e))?;
    let model = TrainedPipeline::from_json(&text)?;
    let pred = model.predict(&table.features)?;
    let z = model.y_scaler.apply_all(&table.target);
    let m = EvalMetrics {
        n: table.n_rows(),
        rmse: metrics::rmse(Original(&pred.means), Original(&table.target))?,
        rmse_uncalibrated: metrics::rmse(Original(&pred.raw_means), Original(&table.target))?,
        nll_z: metrics::nll(&pred.densities, ZSpace(&z))?,
        crps_z: metrics::mean_crps(&pred.densities, ZSpace(&z))?,
    };
    let dir = cfg.run_dir(&format!("{}-eval", cfg.dataset_name()))?;
    mkdir(&dir)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("predictions.csv"))?);
    for (i, d) in pred.densities.iter().enumerate() {
        w.serialize(PredictionRow {
            row: i,
            y: table.target[i],
            mean: pred.means[i],
            raw_mean: pred.raw_means[i],
            z_mean: d.mean(),
            z_sd: d.variance().sqrt(),
            q025: model.y_scaler.invert(d.quantile(0.025)),
            q975: model.y_scaler.invert(d.quantile(0.975)),
        })?;
    }
    w.flush().map_err(|e| CliError::io(&dir, e))?;
    write_json(&dir.join("metrics.json"), &m)?;
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&m)?),
        Format::Markdown => {
            println!("| n | RMSE | RMSE (uncal.) | NLL | CRPS |\n|---|---|---|---|---|");
            println!("| {} | {:.4} | {:.4} | {:.4} | {:.4} |", m.n, m.rmse, m.rmse_uncalibrated, m.nll_z, m.crps_z);
        }
        Format::Text => println!(
            "n {}  rmse {:.4}  rmse_uncal {:.4}  nll {:.4}  crps {:.4}",
            m.n, m.rmse, m.rmse_uncalibrated, m.nll_z, m.crps_z
        ),
    }
    eprintln!("wrote {}", dir.display());
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct ToyArgs {
    /// TOML or JSON config; only its `pipeline` table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub holdout: usize,
    #[arg(long, default_value_t = 200)]
    pub grid: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ToySummary<'a> {
    coverage: f64,
    n_holdout: usize,
    report: &'a metrics::RunReport,
    config: &'a PipelineConfig,
}

pub fn toy(args: &ToyArgs) -> Result<(), CliError> {
    let mut pc = match &args.config {
        Some(p) => load_config_file(p)?.pipeline,
        None => PipelineConfig::default(),
    };
    if let Some(e) = args.epochs {
        pc.train.max_epochs = e;
    }
    let demo = toy_demo(&pc, args.n, args.seed, args.holdout, args.grid)?;
    let dir = match &args.out {
        Some(d) => d.clone(),
        None => fresh_dir("toy")?,
    };
    mkdir(&dir)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("band.csv"))?);
    for r in &demo.band {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(&dir, e))?;
    let mut w = csv::Writer::from_writer(create(&dir.join("train.csv"))?);
    w.write_record(["x", "y"])?;
    for (i, y) in demo.train.target.iter().enumerate() {
        w.write_record([demo.train.features.get(i, 0).to_string(), y.to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(&dir, e))?;
    let mut w = csv::Writer::from_writer(create(&dir.join("snapshots.csv"))?);
    w.write_record(["arm", "epoch", "fraction", "x", "mean", "lower", "upper"])?;
    for s in &demo.snapshots {
        for r in &s.rows {
            w.write_record([
                s.arm.clone(),
                s.epoch.to_string(),
                s.fraction.to_string(),
                r.x.to_string(),
                r.mean.to_string(),
                r.lower.to_string(),
                r.upper.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| CliError::io(&dir, e))?;
    write_json(
        &dir.join("summary.json"),
        &ToySummary {
            coverage: demo.coverage,
            n_holdout: demo.n_holdout,
            report: &demo.report,
            config: &pc,
        },
    )?;
    println!(
        "95% band coverage on {} held-out points: {:.3}  (test nll {:.3}, rmse {:.3})",
        demo.n_holdout, demo.coverage, demo.report.nll_z, demo.report.rmse_original
    );
    eprintln!("wrote {}", dir.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ManifoldKind {
    Helix,
    TorusPatch,
}

#[derive(Debug, Clone, Args)]
pub struct RatesArgs {
    #[arg(long, default_value_t = 1)]
    pub d: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Sparse target: only the first `s` of `d` coordinates matter.
    #[arg(long)]
    pub sparse: bool,
    #[arg(long, default_value_t = 1)]
    pub s: usize,
    /// Interpolate on an embedded manifold instead of the cube.
    #[arg(long, value_enum)]
    pub manifold: Option<ManifoldKind>,
    /// Zero-padded ambient dimension for `--manifold`.
    #[arg(long)]
    pub ambient: Option<usize>,
    /// Run the K-versus-N balance experiment.
    #[arg(long)]
    pub balance: bool,
    #[arg(long, default_value_t = 10)]
    pub n_functions: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n_mc: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SlopeRow {
    experiment: String,
    slope: f64,
    stderr: f64,
    target: f64,
}

pub fn rates(args: &RatesArgs, format: Format) -> Result<(), CliError> {
    if !(args.alpha > 0.0 && args.alpha <= 1.0) {
        return Err(CliError::Usage(format!("--alpha must lie in (0, 1], got {}", args.alpha)));
    }
    if args.d == 0 {
        return Err(CliError::Usage("--d must be at least 1".into()));
    }
    let a = args.alpha;
    let mut curves: Vec<RateResult> = Vec::new();
    let mut slopes: Vec<SlopeRow> = Vec::new();
    let mut balance_rows = Vec::new();
    let mut push = |r: RateResult, target: f64, slopes: &mut Vec<SlopeRow>| {
        slopes.push(SlopeRow {
            experiment: r.label.clone(),
            slope: r.slope,
            stderr: r.slope_stderr,
            target,
        });
        curves.push(r);
    };
    if args.balance {
        let cfg = BalanceConfig {
            n_functions: args.n_functions,
            n_mc: args.n_mc,
            seed: args.seed,
            ..BalanceConfig::default_for(args.d, a)
        };
        let b = theory::balance_experiment(&cfg)?;
        slopes.push(SlopeRow {
            experiment: format!("balance_d{}", args.d),
            slope: b.exponent,
            stderr: f64::NAN,
            target: args.d as f64 / (2.0 * a + args.d as f64),
        });
        balance_rows = b.rows;
    } else if let Some(kind) = args.manifold {
        let emb = match kind {
            ManifoldKind::Helix => Embedding::Helix,
            ManifoldKind::TorusPatch => Embedding::TorusPatch,
        };
        let mut cfg = ManifoldConfig {
            n_functions: args.n_functions,
            n_mc: args.n_mc,
            seed: args.seed,
            ..ManifoldConfig::default_for(emb, a)
        };
        if let Some(amb) = args.ambient {
            cfg.ambient = amb;
        }
        let m = theory::manifold_rate_experiment(&cfg)?;
        eprintln!("embedding Lipschitz bounds: [{:.4}, {:.4}]", m.lipschitz_lower, m.lipschitz_upper);
        push(m.rate, -2.0 * a / emb.intrinsic_dim() as f64, &mut slopes);
    } else if args.sparse {
        let cfg = SparseConfig {
            n_functions: args.n_functions,
            n_mc: args.n_mc,
            seed: args.seed,
            ..SparseConfig::default_for(args.d, args.s, a)
        };
        let r = theory::sparse_rate_experiment(&cfg)?;
        push(r.subspace, -2.0 * a / args.s as f64, &mut slopes);
        push(r.ambient, -2.0 * a / args.d as f64, &mut slopes);
    } else {
        let cfg = RateConfig {
            n_functions: args.n_functions,
            n_mc: args.n_mc,
            seed: args.seed,
            ..RateConfig::default_for(args.d, a)
        };
        push(theory::rate_experiment(&cfg)?, -2.0 * a / args.d as f64, &mut slopes);
    }

    let dir = match &args.out {
        Some(d) => d.clone(),
        None => fresh_dir("rates")?,
    };
    mkdir(&dir)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("rates.csv"))?);
    w.write_record(["experiment", "k", "mesh", "mse", "stderr"])?;
    for c in &curves {
        c.write_csv(&mut w)?;
    }
    w.flush().map_err(|e| CliError::io(&dir, e))?;
    if !balance_rows.is_empty() {
        let mut w = csv::Writer::from_writer(create(&dir.join("balance.csv"))?);
        for r in &balance_rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| CliError::io(&dir, e))?;
    }
    let mut w = csv::Writer::from_writer(create(&dir.join("slopes.csv"))?);
    for s in &slopes {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| CliError::io(&dir, e))?;

    match format {
        Format::Json => {
            let v: Vec<_> = slopes
                .iter()
                .map(|s| serde_json::json!({"experiment": s.experiment, "slope": s.slope, "target": s.target}))
                .collect();
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
        Format::Markdown => {
            println!("| experiment | slope | target |\n|---|---|---|");
            for s in &slopes {
                println!("| {} | {:.3} | {:.3} |", s.experiment, s.slope, s.target);
            }
        }
        Format::Text => {
            let mut out = csv::Writer::from_writer(std::io::stdout());
            for s in &slopes {
                out.serialize(s)?;
            }
            out.flush().map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
        }
    }
    eprintln!("wrote {}", dir.display());
    Ok(())
}

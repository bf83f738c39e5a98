//! One outer run end to end, plus the multi-run benchmark and ablation
//! drivers built on it.
//!
//! A run: split, pick the GBDT stage count on TR/VA, truncate it for Phase 1
//! and refit it on TV for Phase 2, select the MoE epoch count on VA, retrain
//! from that checkpoint on TV, fit the mean calibration on CAL and score TEST.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{apply_calibration, fit_calibration, CalibrationMap, FitUnits};
use crate::dataset::{augment_with_anchor, make_split_plan, ColumnScaler, Matrix, SplitFractions, SplitPlan, Table, ZScaler};
use crate::error::{Error, Result};
use crate::gbdt::{fit_gbdt, predict_anchor, select_stages, select_stages_loglik, GbdtConfig, GbdtModel, StageSelection};
use crate::metrics::{self, aggregate, AggregateReport, Original, RunReport, ZSpace};
use crate::moe::{CouplingMode, MixtureDensity, MoeConfig, MoeModel};
use crate::training::{train_phase1, FoldData, TrainConfig, TrainTrace, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub split: SplitFractions,
    pub gbdt: GbdtConfig,
    pub moe: MoeConfig,
    pub train: TrainConfig,
    pub calibration_units: FitUnits,
    /// Drop the GBDT: no anchor feature, free expert means.
    pub no_anchor: bool,
    /// Zero router logits; gating from the metric window only.
    pub no_router: bool,
    /// Report RMSE of the uncalibrated means.
    pub no_calibration: bool,
    /// Randomly keep this many rows before splitting.
    pub subsample: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            split: SplitFractions::default(),
            gbdt: GbdtConfig::default(),
            moe: MoeConfig::default(),
            train: TrainConfig::default(),
            calibration_units: FitUnits::Original,
            no_anchor: false,
            no_router: false,
            no_calibration: false,
            subsample: None,
        }
    }
}

impl PipelineConfig {
    /// Applies the ablation switches to the model settings.
    pub fn resolved(&self) -> PipelineConfig {
        let mut c = self.clone();
        if c.no_anchor {
            c.moe.mode = CouplingMode::Free;
        }
        if c.no_router {
            c.moe.use_router = false;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.gbdt.validate()?;
        self.moe.validate()?;
        self.train.validate()?;
        if !self.no_anchor && self.moe.mode == CouplingMode::Free {
            return Err(Error::InvalidConfig("free mode is the no-anchor ablation; set no_anchor".into()));
        }
        Ok(())
    }
}

/// Everything needed to predict on new rows after a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedPipeline {
    pub config: PipelineConfig,
    pub anchor: Option<GbdtModel>,
    pub y_scaler: ZScaler,
    pub x_scaler: ColumnScaler,
    pub model: MoeModel,
    pub calibration: CalibrationMap,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Predictive densities in z-units.
    pub densities: Vec<MixtureDensity>,
    /// Uncalibrated predictive means, original units.
    pub raw_means: Vec<f64>,
    /// Calibrated means, original units.
    pub means: Vec<f64>,
}

impl TrainedPipeline {
    /// Standardized model inputs and z-scored anchors for raw features.
    pub fn model_inputs(&self, features: &Matrix) -> Result<(Matrix, Option<Vec<f64>>)> {
        prepare_inputs(features, self.anchor.as_ref(), &self.y_scaler, &self.x_scaler)
    }

    pub fn predict(&self, features: &Matrix) -> Result<Prediction> {
        let (xbar, anchors) = self.model_inputs(features)?;
        let densities = self.model.predict_densities(&xbar, anchors.as_deref())?;
        let raw_means: Vec<f64> = densities.iter().map(|d| self.y_scaler.invert(d.mean())).collect();
        let means = match self.calibration.fit_units {
            FitUnits::Original => apply_calibration(&self.calibration, &raw_means),
            FitUnits::ZSpace => {
                let z: Vec<f64> = densities.iter().map(|d| d.mean()).collect();
                self.y_scaler.invert_all(&apply_calibration(&self.calibration, &z))
            }
        };
        Ok(Prediction {
            densities,
            raw_means,
            means,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn anchor_z(features: &Matrix, anchor: &GbdtModel, y_scaler: &ZScaler) -> Result<Vec<f64>> {
    Ok(y_scaler.apply_all(&predict_anchor(anchor, features)?))
}

/// Appends the z-scored anchor (when present) and standardizes columns.
fn prepare_inputs(
    features: &Matrix,
    anchor: Option<&GbdtModel>,
    y_scaler: &ZScaler,
    x_scaler: &ColumnScaler,
) -> Result<(Matrix, Option<Vec<f64>>)> {
    match anchor {
        Some(a) => {
            let az = anchor_z(features, a, y_scaler)?;
            let xbar = x_scaler.transform(&augment_with_anchor(features, &az)?)?;
            Ok((xbar, Some(az)))
        }
        None => Ok((x_scaler.transform(features)?, None)),
    }
}

/// Fits the target and column scalers on one fold and prepares it.
fn prepare_fold(table: &Table, anchor: Option<&GbdtModel>) -> Result<(FoldData, ZScaler, ColumnScaler)> {
    let y_scaler = ZScaler::fit(&table.target)?;
    let augmented = match anchor {
        Some(a) => augment_with_anchor(&table.features, &anchor_z(&table.features, a, &y_scaler)?)?,
        None => table.features.clone(),
    };
    let x_scaler = ColumnScaler::fit(&augmented)?;
    let (xbar, az) = prepare_inputs(&table.features, anchor, &y_scaler, &x_scaler)?;
    let fold = FoldData::new(xbar, az, y_scaler.apply_all(&table.target))?;
    Ok((fold, y_scaler, x_scaler))
}

/// Data for an already-fitted set of scalers.
fn apply_fold(table: &Table, anchor: Option<&GbdtModel>, y_scaler: &ZScaler, x_scaler: &ColumnScaler) -> Result<FoldData> {
    let (xbar, az) = prepare_inputs(&table.features, anchor, y_scaler, x_scaler)?;
    FoldData::new(xbar, az, y_scaler.apply_all(&table.target))
}

#[derive(Debug, Clone)]
pub struct AnchorFit {
    pub t_star: usize,
    /// TR model truncated to `t_star` stages.
    pub f_sub: GbdtModel,
    /// Fresh `t_star`-stage model fitted on TV.
    pub f_hat: GbdtModel,
}

/// Stage selection on TR/VA followed by the TV refit.
pub fn fit_anchor(tr: &Table, va: &Table, tv: &Table, config: &GbdtConfig) -> Result<AnchorFit> {
    let full = fit_gbdt(&tr.features, &tr.target, config)?;
    let t_star = match config.selection {
        StageSelection::ValidationRmse => select_stages(&full, &va.features, &va.target)?,
        StageSelection::ValidationLogLik => {
            select_stages_loglik(&full, &tr.features, &tr.target, &va.features, &va.target)?
        }
    };
    let f_sub = full.truncated(t_star);
    let f_hat = if t_star == 0 {
        fit_gbdt(&tv.features, &tv.target, config)?.truncated(0)
    } else {
        fit_gbdt(
            &tv.features,
            &tv.target,
            &GbdtConfig {
                max_stages: t_star,
                ..*config
            },
        )?
    };
    debug_assert!(f_sub.n_stages == f_hat.n_stages || f_hat.n_stages < t_star);
    debug_assert!(f_sub.shrinkage == f_hat.shrinkage && f_sub.max_depth == f_hat.max_depth);
    Ok(AnchorFit { t_star, f_sub, f_hat })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub plan: SplitPlan,
    pub phase1: TrainTrace,
    pub phase2: TrainTrace,
    pub pipeline: TrainedPipeline,
}

/// Model-initialization seed derived from the run seed.
fn init_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5851_F42D_4C95_7F2D
}

/// Runs the whole procedure on one split plan.
pub fn run_split(table: &Table, dataset: &str, plan: &SplitPlan, config: &PipelineConfig) -> Result<RunOutput> {
    run_split_observed(table, dataset, plan, config, |_, _| {})
}

/// As [`run_split`], calling `observe(epoch, model)` on the Phase-2 model
/// before training and after every Phase-2 epoch.
pub fn run_split_observed<F>(table: &Table, dataset: &str, plan: &SplitPlan, config: &PipelineConfig, mut observe: F) -> Result<RunOutput>
where
    F: FnMut(usize, &TrainedPipelineView<'_>),
{
    let cfg = config.resolved();
    cfg.validate()?;
    plan.validate()?;
    if plan.n != table.n_rows() {
        return Err(Error::DimensionMismatch {
            expected: table.n_rows(),
            got: plan.n,
        });
    }
    let tr = table.select_rows(&plan.tr_idx);
    let va = table.select_rows(&plan.va_idx);
    let tv = table.select_rows(&plan.tv_idx);
    let cal = table.select_rows(&plan.cal_idx);
    let test = table.select_rows(&plan.test_idx);

    let anchor = if cfg.no_anchor {
        None
    } else {
        Some(fit_anchor(&tr, &va, &tv, &cfg.gbdt)?)
    };

    // Phase 1: TR statistics, truncated TR anchor.
    let (tr_fold, y_tr, x_tr) = prepare_fold(&tr, anchor.as_ref().map(|a| &a.f_sub))?;
    let va_fold = apply_fold(&va, anchor.as_ref().map(|a| &a.f_sub), &y_tr, &x_tr)?;
    let init = MoeModel::new(cfg.moe, tr_fold.x.cols(), init_seed(plan.seed), Some(&tr_fold.x))?;
    let train_cfg = TrainConfig {
        seed: plan.seed,
        ..cfg.train
    };
    let phase1 = train_phase1(&tr_fold, &va_fold, &init, &train_cfg)?;

    // Phase 2: TV statistics, refit TV anchor, warm start from the checkpoint.
    let f_hat = anchor.as_ref().map(|a| &a.f_hat);
    let (tv_fold, y_tv, x_tv) = prepare_fold(&tv, f_hat)?;
    let mut model = phase1.checkpoint.clone();
    let mut phase2 = TrainTrace::default();
    {
        let mut trainer = Trainer::new(&model, &tv_fold, train_cfg, 2)?;
        fn view<'a>(
            anchor: Option<&'a GbdtModel>,
            y_scaler: &'a ZScaler,
            x_scaler: &'a ColumnScaler,
            model: &'a MoeModel,
        ) -> TrainedPipelineView<'a> {
            TrainedPipelineView {
                anchor,
                y_scaler,
                x_scaler,
                model,
            }
        }
        observe(0, &view(f_hat, &y_tv, &x_tv, &model));
        for epoch in 1..=phase1.best_epoch {
            let parts = trainer.epoch(&mut model, epoch)?;
            phase2.records.push(crate::training::record_summary(epoch, &parts));
            observe(epoch, &view(f_hat, &y_tv, &x_tv, &model));
        }
    }

    let mut pipeline = TrainedPipeline {
        config: cfg.clone(),
        anchor: f_hat.cloned(),
        y_scaler: y_tv,
        x_scaler: x_tv,
        model,
        calibration: CalibrationMap::identity(cfg.calibration_units),
    };

    if !cfg.no_calibration {
        let p = pipeline.predict(&cal.features)?;
        pipeline.calibration = match cfg.calibration_units {
            FitUnits::Original => fit_calibration(&p.raw_means, &cal.target, FitUnits::Original)?,
            FitUnits::ZSpace => {
                let z: Vec<f64> = p.densities.iter().map(|d| d.mean()).collect();
                fit_calibration(&z, &pipeline.y_scaler.apply_all(&cal.target), FitUnits::ZSpace)?
            }
        };
    }

    let pred = pipeline.predict(&test.features)?;
    let y_test_z = pipeline.y_scaler.apply_all(&test.target);
    let report = RunReport {
        dataset: dataset.to_string(),
        seed: plan.seed,
        rmse_original: metrics::rmse(Original(&pred.means), Original(&test.target))?,
        rmse_uncalibrated: metrics::rmse(Original(&pred.raw_means), Original(&test.target))?,
        nll_z: metrics::nll(&pred.densities, ZSpace(&y_test_z))?,
        crps_z: metrics::mean_crps(&pred.densities, ZSpace(&y_test_z))?,
        n_test: test.n_rows(),
        t_gbdt: anchor.as_ref().map_or(0, |a| a.t_star),
        t_moe: phase1.best_epoch,
    };
    Ok(RunOutput {
        report,
        plan: plan.clone(),
        phase1: phase1.trace,
        phase2,
        pipeline,
    })
}

/// Borrowed, uncalibrated view of a pipeline mid-training.
pub struct TrainedPipelineView<'a> {
    pub anchor: Option<&'a GbdtModel>,
    pub y_scaler: &'a ZScaler,
    pub x_scaler: &'a ColumnScaler,
    pub model: &'a MoeModel,
}

impl TrainedPipelineView<'_> {
    pub fn densities(&self, features: &Matrix) -> Result<Vec<MixtureDensity>> {
        let (xbar, az) = prepare_inputs(features, self.anchor, self.y_scaler, self.x_scaler)?;
        self.model.predict_densities(&xbar, az.as_deref())
    }
}

/// Row subsample (if configured) for a given run seed.
pub fn run_table(table: &Table, config: &PipelineConfig, seed: u64) -> Result<Table> {
    match config.subsample {
        Some(m) if m < table.n_rows() => crate::dataset::subsample(table, m, seed),
        _ => Ok(table.clone()),
    }
}

pub fn plan_for(table: &Table, config: &PipelineConfig, seed: u64) -> Result<SplitPlan> {
    make_split_plan(table.n_rows(), seed, &config.split)
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn plan_hash(plan: &SplitPlan) -> Result<String> {
    Ok(sha256_hex(plan.to_json()?.as_bytes()))
}

#[derive(Debug)]
pub struct BenchmarkResult {
    pub runs: Vec<RunOutput>,
    pub failures: Vec<(u64, Error)>,
    pub aggregate: Option<AggregateReport>,
}

/// Runs seeds `seed_base..seed_base + n_runs` in parallel. Failed runs are
/// collected and left out of the aggregate.
pub fn run_benchmark(table: &Table, dataset: &str, config: &PipelineConfig, n_runs: usize, seed_base: u64) -> Result<BenchmarkResult> {
    if n_runs == 0 {
        return Err(Error::InvalidConfig("n_runs must be at least 1".into()));
    }
    config.resolved().validate()?;
    let outcomes: Vec<(u64, Result<RunOutput>)> = (0..n_runs as u64)
        .into_par_iter()
        .map(|i| {
            let seed = seed_base + i;
            let out = run_table(table, config, seed)
                .and_then(|t| plan_for(&t, config, seed).and_then(|p| run_split(&t, dataset, &p, config)));
            (seed, out)
        })
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in outcomes {
        match r {
            Ok(o) => runs.push(o),
            Err(e) => failures.push((seed, e)),
        }
    }
    let reports: Vec<RunReport> = runs.iter().map(|r| r.report.clone()).collect();
    let aggregate = if reports.is_empty() { None } else { Some(aggregate(&reports)?) };
    Ok(BenchmarkResult {
        runs,
        failures,
        aggregate,
    })
}

pub const ABLATION_ARMS: [&str; 4] = ["full", "no_anchor", "no_router", "no_cal"];

pub fn ablation_config(base: &PipelineConfig, arm: &str) -> Result<PipelineConfig> {
    let mut c = base.clone();
    match arm {
        "full" => {}
        "no_anchor" => c.no_anchor = true,
        "no_router" => c.no_router = true,
        "no_cal" => c.no_calibration = true,
        other => return Err(Error::InvalidConfig(format!("unknown ablation arm '{other}'"))),
    }
    Ok(c)
}

#[derive(Debug)]
pub struct AblationResult {
    pub arms: Vec<(String, BenchmarkResult)>,
}

impl AblationResult {
    pub fn arm(&self, name: &str) -> Option<&BenchmarkResult> {
        self.arms.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    /// Whether every arm used the same split plan for each seed.
    pub fn plans_shared(&self) -> Result<bool> {
        let hashes = |r: &BenchmarkResult| -> Result<Vec<(u64, String)>> {
            let mut v: Vec<(u64, String)> = r
                .runs
                .iter()
                .map(|o| Ok((o.plan.seed, plan_hash(&o.plan)?)))
                .collect::<Result<_>>()?;
            v.sort();
            Ok(v)
        };
        let first = hashes(&self.arms[0].1)?;
        for (_, r) in &self.arms[1..] {
            if hashes(r)? != first {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

pub fn run_ablation(table: &Table, dataset: &str, config: &PipelineConfig, n_runs: usize, seed_base: u64) -> Result<AblationResult> {
    let mut arms = Vec::new();
    for arm in ABLATION_ARMS {
        let cfg = ablation_config(config, arm)?;
        arms.push((arm.to_string(), run_benchmark(table, dataset, &cfg, n_runs, seed_base)?));
    }
    Ok(AblationResult { arms })
}

/// Heteroscedastic 1-D toy data: `y = sin(x)·x/2 + ε`, `x ~ U[−4, 4]`,
/// `sd(ε) = 0.1 + 0.2|x|/4`.
pub fn toy_table(n: usize, seed: u64) -> Result<Table> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.random_range(-4.0..4.0);
        let sd = 0.1 + 0.2 * x.abs() / 4.0;
        xs.push(x);
        ys.push(x.sin() * x / 2.0 + sd * std_normal.sample(&mut rng));
    }
    Table::new(Matrix::column_vector(&xs), ys, vec!["x".into()])
}

#[derive(Debug, Clone, Serialize)]
pub struct BandRow {
    pub x: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Snapshot {
    pub arm: String,
    pub epoch: usize,
    pub fraction: f64,
    pub rows: Vec<BandRow>,
}

#[derive(Debug, Clone)]
pub struct ToyDemo {
    pub train: Table,
    pub band: Vec<BandRow>,
    pub coverage: f64,
    pub n_holdout: usize,
    pub snapshots: Vec<Snapshot>,
    pub report: RunReport,
}

/// Central interval of a z-space density mapped to original units.
fn band(dens: &[MixtureDensity], xs: &[f64], y: &ZScaler, level: f64, means: Option<&[f64]>) -> Vec<BandRow> {
    let lo_p = (1.0 - level) / 2.0;
    dens.iter()
        .enumerate()
        .map(|(i, d)| BandRow {
            x: xs[i],
            mean: means.map_or_else(|| y.invert(d.mean()), |m| m[i]),
            lower: y.invert(d.quantile(lo_p)),
            upper: y.invert(d.quantile(1.0 - lo_p)),
        })
        .collect()
}

fn grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| -4.0 + 8.0 * i as f64 / (n - 1) as f64).collect()
}

/// Trains on the toy data, reports the 95% band on a grid, the held-out
/// coverage of that band, and band snapshots at 0/33/67/100% of Phase 2
/// for the anchored and anchor-free models.
pub fn toy_demo(config: &PipelineConfig, n: usize, seed: u64, n_holdout: usize, grid_points: usize) -> Result<ToyDemo> {
    let table = toy_table(n, seed)?;
    let holdout = toy_table(n_holdout, seed.wrapping_add(1_000_003))?;
    let xs = grid(grid_points);
    let grid_m = Matrix::column_vector(&xs);
    let plan = make_split_plan(table.n_rows(), seed, &config.split)?;

    let mut snapshots = Vec::new();
    let mut main = None;
    for (arm, no_anchor) in [("anchor", false), ("no_anchor", true)] {
        let cfg = PipelineConfig {
            no_anchor,
            ..config.clone()
        };
        let mut captured: Vec<(usize, Vec<MixtureDensity>, ZScaler)> = Vec::new();
        let out = run_split_observed(&table, "toy", &plan, &cfg, |epoch, view| {
            if let Ok(d) = view.densities(&grid_m) {
                captured.push((epoch, d, *view.y_scaler));
            }
        })?;
        let total = out.report.t_moe;
        let wanted: Vec<(f64, usize)> = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]
            .iter()
            .map(|f| (*f, (f * total as f64).round() as usize))
            .collect();
        for (fraction, epoch) in wanted {
            if let Some((_, d, ys)) = captured.iter().find(|(e, _, _)| *e == epoch) {
                snapshots.push(Snapshot {
                    arm: arm.to_string(),
                    epoch,
                    fraction,
                    rows: band(d, &xs, ys, 0.95, None),
                });
            }
        }
        if !no_anchor {
            main = Some(out);
        }
    }
    let out = main.expect("anchored arm ran");
    let p = &out.pipeline;
    let grid_pred = p.predict(&grid_m)?;
    let band_rows = band(&grid_pred.densities, &xs, &p.y_scaler, 0.95, Some(&grid_pred.means));
    let hold = p.predict(&holdout.features)?;
    let inside = hold
        .densities
        .iter()
        .zip(&holdout.target)
        .filter(|(d, y)| {
            let lo = p.y_scaler.invert(d.quantile(0.025));
            let hi = p.y_scaler.invert(d.quantile(0.975));
            **y >= lo && **y <= hi
        })
        .count();
    Ok(ToyDemo {
        train: table,
        band: band_rows,
        coverage: inside as f64 / n_holdout as f64,
        n_holdout,
        snapshots,
        report: out.report,
    })
}

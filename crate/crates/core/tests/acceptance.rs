//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines always reach the
//! console. `ACCEPTANCE_ONLY=2,9` restricts the run to the listed criteria.
//! A criterion whose dataset file is absent prints FAIL with the reason but
//! does not fail the process; any other FAIL does.

mod common;

use std::time::{Duration, Instant};

use anchor_moe::calibration::{apply_calibration, fit_calibration, FitUnits};
use anchor_moe::dataset::{load_csv, Matrix, Schema, Table, TargetColumn};
use anchor_moe::metrics::{crps_bound_check, crps_gaussian_mixture, CrpsBounds};
use anchor_moe::moe::{Component, CouplingMode, MixtureDensity, MoeConfig, MoeModel, Penalties};
use anchor_moe::nn::{grad_check, GradCheckOptions};
use anchor_moe::pipeline::{run_ablation, run_benchmark, BenchmarkResult, PipelineConfig};
use anchor_moe::theory::{self, BalanceConfig, RateConfig, SparseConfig};
use anchor_moe::training::{FoldData, TrainConfig, Trainer};
use common::{least_squares_line, quad_crps, quad_mass, Mix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

enum Outcome {
    Pass(String),
    Fail(String),
    /// Input data is not present in `data/`.
    Missing(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

struct DatasetSpec {
    name: &'static str,
    file: &'static str,
    target: Option<&'static str>,
    drop: &'static [&'static str],
}

const YACHT: DatasetSpec = DatasetSpec {
    name: "yacht",
    file: "yacht.csv",
    target: None,
    drop: &[],
};
const BOSTON: DatasetSpec = DatasetSpec {
    name: "boston",
    file: "boston.csv",
    target: None,
    drop: &[],
};
// UCI ENB2012 naming: X1..X8 inputs, Y1 heating load, Y2 cooling load.
const ENERGY: DatasetSpec = DatasetSpec {
    name: "energy",
    file: "energy.csv",
    target: Some("Y1"),
    drop: &["Y2"],
};
const CONCRETE: DatasetSpec = DatasetSpec {
    name: "concrete",
    file: "concrete.csv",
    target: None,
    drop: &[],
};

fn load(ds: &DatasetSpec) -> Result<Table, Outcome> {
    let path = common::data_dir().join(ds.file);
    if !path.exists() {
        return Err(Outcome::Missing(format!("data/{} not present", ds.file)));
    }
    let schema = Schema {
        target: ds.target.map_or(TargetColumn::Last, |t| TargetColumn::Name(t.into())),
        drop: ds.drop.iter().map(|s| s.to_string()).collect(),
        ..Schema::default()
    };
    load_csv(&path, &schema).map_err(|e| Outcome::Fail(format!("cannot load {}: {e}", ds.file)))
}

fn bench(ds: &DatasetSpec, runs: usize) -> Result<(BenchmarkResult, Duration), Outcome> {
    let table = load(ds)?;
    let t0 = Instant::now();
    let res = run_benchmark(&table, ds.name, &PipelineConfig::default(), runs, 0)
        .map_err(|e| Outcome::Fail(format!("benchmark error: {e}")))?;
    Ok((res, t0.elapsed()))
}

/// Mean NLL and RMSE with a closure deciding pass/fail.
fn benchmark_criterion(ds: &DatasetSpec, runs: usize, budget_s: u64, bounds: &str, ok: impl Fn(f64, f64) -> bool) -> Outcome {
    let (res, took) = match bench(ds, runs) {
        Ok(r) => r,
        Err(o) => return o,
    };
    let Some(agg) = &res.aggregate else {
        return Outcome::Fail(format!("all {runs} runs failed"));
    };
    let nll = agg.get("nll").map_or(f64::NAN, |m| m.mean);
    let rmse = agg.get("rmse").map_or(f64::NAN, |m| m.mean);
    let nll_se = agg.get("nll").map_or(f64::NAN, |m| m.stderr);
    let rmse_se = agg.get("rmse").map_or(f64::NAN, |m| m.stderr);
    let in_time = took.as_secs() < budget_s;
    verdict(
        ok(nll, rmse) && in_time && res.failures.is_empty(),
        format!(
            "{} {} runs: NLL {:.3} ± {:.3}, RMSE {:.3} ± {:.3} (need {bounds}); {:.0}s of {}s budget; {} failed runs",
            ds.name,
            agg.runs,
            nll,
            nll_se,
            rmse,
            rmse_se,
            took.as_secs_f64(),
            budget_s,
            res.failures.len()
        ),
    )
}

fn c1() -> Outcome {
    benchmark_criterion(&YACHT, 20, 600, "NLL <= -1.4, RMSE <= 1.0", |n, r| n <= -1.4 && r <= 1.0)
}

fn c2() -> Outcome {
    benchmark_criterion(&BOSTON, 20, 900, "NLL in [0.2, 1.0], RMSE in [2.5, 3.6]", |n, r| {
        (0.2..=1.0).contains(&n) && (2.5..=3.6).contains(&r)
    })
}

fn c3() -> Outcome {
    benchmark_criterion(&ENERGY, 20, 900, "NLL <= -1.0, RMSE <= 0.8", |n, r| n <= -1.0 && r <= 0.8)
}

fn c4() -> Outcome {
    benchmark_criterion(&CONCRETE, 10, 1200, "NLL <= 0.6, RMSE <= 5.2", |n, r| n <= 0.6 && r <= 5.2)
}

fn c5() -> Outcome {
    let table = match load(&ENERGY) {
        Ok(t) => t,
        Err(o) => return o,
    };
    let res = match run_ablation(&table, "energy", &PipelineConfig::default(), 10, 0) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(format!("ablation error: {e}")),
    };
    let metric = |arm: &str, m: &str| {
        res.arm(arm)
            .and_then(|r| r.aggregate.as_ref())
            .and_then(|a| a.get(m))
            .map_or(f64::NAN, |s| s.mean)
    };
    let (nf, nr, na) = (metric("full", "nll"), metric("no_router", "nll"), metric("no_anchor", "nll"));
    let (rf, ra) = (metric("full", "rmse"), metric("no_anchor", "rmse"));
    let shared = res.plans_shared().unwrap_or(false);
    verdict(
        nf < nr && nf < na && rf < ra && shared,
        format!("energy NLL full {nf:.3} vs no_router {nr:.3}, no_anchor {na:.3}; RMSE full {rf:.3} vs no_anchor {ra:.3}; shared plans {shared}"),
    )
}

fn c6() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    let mut run = |label: &str, f: &dyn Fn() -> anchor_moe::Result<f64>, lo: f64, hi: f64| {
        let t0 = Instant::now();
        match f() {
            Ok(s) => {
                let secs = t0.elapsed().as_secs_f64();
                ok &= (lo..=hi).contains(&s) && secs < 300.0;
                parts.push(format!("{label} {s:.3} in [{lo}, {hi}] ({secs:.0}s)"));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{label} error {e}"));
            }
        }
    };
    run("d=1", &|| theory::rate_experiment(&RateConfig::default_for(1, 1.0)).map(|r| r.slope), -2.3, -1.7);
    run("d=2", &|| theory::rate_experiment(&RateConfig::default_for(2, 1.0)).map(|r| r.slope), -1.3, -0.7);
    run(
        "sparse s=1 of d=5",
        &|| theory::sparse_rate_experiment(&SparseConfig::default_for(5, 1, 1.0)).map(|r| r.subspace.slope),
        -2.3,
        -1.7,
    );
    verdict(ok, format!("squared-error slopes: {}", parts.join("; ")))
}

fn c7() -> Outcome {
    let t0 = Instant::now();
    match theory::balance_experiment(&BalanceConfig::default_for(1, 1.0)) {
        Ok(b) => {
            let secs = t0.elapsed().as_secs_f64();
            verdict(
                (0.23..=0.43).contains(&b.exponent) && secs < 600.0,
                format!("d=1 alpha=1 K* exponent {:.3} in [0.23, 0.43] ({secs:.0}s); K* by N {:?}", b.exponent, b.k_star),
            )
        }
        Err(e) => Outcome::Fail(format!("balance error {e}")),
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_fold(n: usize, d: usize, seed: u64) -> FoldData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * d).map(|_| gauss(&mut rng)).collect();
    let a: Vec<f64> = (0..n).map(|i| (x[i * d] * 1.3).sin() + 0.2 * x[i * d + 1]).collect();
    let y: Vec<f64> = a
        .iter()
        .enumerate()
        .map(|(i, v)| v + (0.1 + 0.2 * x[i * d].abs()) * gauss(&mut rng))
        .collect();
    FoldData::new(Matrix::from_vec(n, d, x).unwrap(), Some(a), y).unwrap()
}

fn perturb(m: &mut MoeModel, rng: &mut ChaCha8Rng, scale: f64) {
    for p in 0..m.store.len() {
        for v in m.store.value_mut(p) {
            *v += scale * rng.random_range(-1.0..1.0);
        }
    }
    m.project_constraints();
}

fn c8() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut unresolved = 0;
    let pen = Penalties::default();
    for draw in 0..20u64 {
        let mode = [CouplingMode::AnchorDelta, CouplingMode::Free, CouplingMode::AnchorOnly][draw as usize % 3];
        let fold = random_fold(8, 4, 500 + draw);
        let cfg = MoeConfig { mode, ..MoeConfig::default() };
        let mut m = MoeModel::new(cfg, 4, 900 + draw, Some(&fold.x)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1300 + draw);
        perturb(&mut m, &mut rng, 0.2);
        let anchors = fold.anchor.as_deref();
        let rows: Vec<usize> = (0..8).collect();
        let mut g = m.store.grad_buffers();
        if let Err(e) = m.objective(&fold.x, anchors, &fold.y, &rows, &pen, Some(&mut g)) {
            return Outcome::Fail(format!("objective failed: {e}"));
        }
        let report = grad_check(
            &m.store,
            &g,
            |s| {
                let probe = MoeModel { store: s.clone(), ..m.clone() };
                let p = probe.objective(&fold.x, anchors, &fold.y, &rows, &pen, None).unwrap();
                (p.total, p.signature)
            },
            GradCheckOptions::default(),
        );
        worst = worst.max(report.max_rel_err());
        checked += report.checked();
        unresolved += report.unresolved();
    }
    verdict(
        worst < 1e-3 && unresolved * 20 < checked,
        format!("20 draws, 8-sample batches: max rel err {worst:.2e} < 1e-3 over {checked} coordinates ({unresolved} skipped at gate switches)"),
    )
}

fn to_mix(d: &MixtureDensity) -> Mix {
    d.components.iter().map(|c| (c.weight, c.mean, c.sd)).collect()
}

fn c9() -> Outcome {
    let mut states: Vec<(MoeModel, FoldData)> = Vec::new();
    for s in 0..500u64 {
        let fold = random_fold(4, 3, 7000 + s);
        let m = MoeModel::new(MoeConfig::default(), 3, 8000 + s, Some(&fold.x)).unwrap();
        states.push((m, fold));
    }
    for s in 0..5u64 {
        let fold = random_fold(200, 3, 9000 + s);
        let mut m = MoeModel::new(MoeConfig::default(), 3, 9100 + s, Some(&fold.x)).unwrap();
        let mut tr = Trainer::new(&m, &fold, TrainConfig::default(), 1).unwrap();
        for epoch in 1..=100 {
            if let Err(e) = tr.epoch(&mut m, epoch) {
                return Outcome::Fail(format!("training failed: {e}"));
            }
            states.push((m.clone(), fold.clone()));
        }
    }
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for (m, fold) in &states {
        let i = rng.random_range(0..fold.len());
        let anchor = fold.anchor.as_ref().map(|a| a[i]);
        let d = m.density(fold.x.row(i), anchor).unwrap();
        worst = worst.max((quad_mass(&to_mix(&d)) - 1.0).abs());
    }
    verdict(
        worst < 1e-6,
        format!("{} model states (500 untrained, 500 trained): max |∫p − 1| = {worst:.2e}", states.len()),
    )
}

fn c10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst_sum = 0.0f64;
    let mut worst_floor = f64::INFINITY;
    let mut ok = true;
    let mut n = 0;
    for s in 0..100u64 {
        let (k_total, k) = [(8, 2), (8, 1), (5, 3), (4, 4), (16, 2)][s as usize % 5];
        let eps = [0.05, 0.2, 0.0, 0.5, 0.01][s as usize % 5];
        let cfg = MoeConfig {
            n_experts: k_total,
            top_k: k,
            smoothing: eps,
            hidden: 4,
            use_router: s % 7 != 0,
            mode: CouplingMode::Free,
            ..MoeConfig::default()
        };
        let mut m = MoeModel::new(cfg, 3, 40 + s, None).unwrap();
        perturb(&mut m, &mut rng, 1.0);
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| 3.0 * gauss(&mut rng)).collect();
            let g = m.gates(&x).unwrap();
            let total: f64 = g.weights.iter().sum();
            worst_sum = worst_sum.max((total - 1.0).abs());
            let nonzero = g.weights.iter().filter(|w| **w != 0.0).count();
            ok &= nonzero <= k && g.active.len() == k && g.weights.iter().all(|w| *w >= 0.0);
            ok &= (0..k_total).filter(|j| !g.active.contains(j)).all(|j| g.weights[j] == 0.0);
            for &j in &g.active {
                worst_floor = worst_floor.min(g.weights[j] - eps / k as f64);
            }
            n += 1;
        }
    }
    verdict(
        ok && worst_sum < 1e-10 && worst_floor >= -1e-12,
        format!("{n} draws: max |Σᾱ − 1| = {worst_sum:.1e}, min(active − ε/k) = {worst_floor:.1e}, support and top-k size respected: {ok}"),
    )
}

fn c11() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut worst_idem = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(3..30);
        let a_true = rng.random_range(-3.0..3.0);
        let b_true = rng.random_range(-3.0..3.0);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = p.iter().map(|v| a_true * v + b_true + rng.random_range(-1.0..1.0)).collect();
        let m = fit_calibration(&p, &y, FitUnits::Original).unwrap();
        let (ga, gb) = least_squares_line(&p, &y);
        worst = worst.max((m.a - ga).abs()).max((m.b - gb).abs());
        let again = fit_calibration(&apply_calibration(&m, &p), &y, FitUnits::Original).unwrap();
        worst_idem = worst_idem.max((again.a - 1.0).abs()).max(again.b.abs());
    }
    verdict(
        worst < 1e-8 && worst_idem < 1e-10,
        format!("100 datasets: max |(a,b) − first-order oracle| = {worst:.1e}, idempotence error {worst_idem:.1e}"),
    )
}

fn random_mixture(rng: &mut ChaCha8Rng, r_f: f64, sigma_max: f64) -> MixtureDensity {
    let n = rng.random_range(1..7);
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    MixtureDensity::new(
        raw.iter()
            .map(|w| Component {
                weight: w / total,
                mean: rng.random_range(-r_f..r_f),
                sd: rng.random_range(0.05..sigma_max),
            })
            .collect(),
    )
}

fn c12() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = random_mixture(&mut rng, 3.0, 1.0);
        let y = rng.random_range(-5.0..5.0);
        worst = worst.max((crps_gaussian_mixture(&d, y) - quad_crps(&to_mix(&d), y)).abs());
    }
    let bounds = CrpsBounds {
        r_f: 2.0,
        r_y: 3.0,
        sigma_max: 1.0,
    };
    let mut violations = 0;
    for _ in 0..100_000 {
        let d = random_mixture(&mut rng, bounds.r_f, bounds.sigma_max);
        let y = rng.random_range(-bounds.r_y..bounds.r_y);
        if !crps_bound_check(&d, y, &bounds).unwrap_or(false) {
            violations += 1;
        }
    }
    verdict(
        worst < 1e-6 && violations == 0,
        format!(
            "closed form vs quadrature max |Δ| = {worst:.1e} over 1000 mixtures; bound {:.3} violated {violations} times in 1e5 draws",
            bounds.value()
        ),
    )
}

fn c13() -> Outcome {
    let mut csvs = Vec::new();
    for _ in 0..2 {
        let (res, _) = match bench(&YACHT, 20) {
            Ok(r) => r,
            Err(o) => return o,
        };
        let mut buf = Vec::new();
        match &res.aggregate {
            Some(a) => a.write_csv(&mut buf).unwrap(),
            None => return Outcome::Fail("all runs failed".into()),
        }
        csvs.push(buf);
    }
    verdict(csvs[0] == csvs[1], format!("yacht aggregate.csv identical across repeats: {}", csvs[0] == csvs[1]))
}

fn c14() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut mismatches = 0;
    let mut n = 0;
    for s in 0..50u64 {
        let d_in = 1 + s as usize % 6;
        let x: Vec<f64> = (0..64 * d_in).map(|_| 2.0 * gauss(&mut rng)).collect();
        let xm = Matrix::from_vec(64, d_in, x).unwrap();
        let m = MoeModel::new(MoeConfig::default(), d_in, 300 + s, Some(&xm)).unwrap();
        let anchors: Vec<f64> = (0..64).map(|_| 3.0 * gauss(&mut rng)).collect();
        for (dens, a) in m.predict_densities(&xm, Some(&anchors)).unwrap().iter().zip(&anchors) {
            if dens.mean() != *a {
                mismatches += 1;
            }
            n += 1;
        }
    }
    verdict(mismatches == 0, format!("{n} inputs over 50 fresh models: {mismatches} means differ from the anchor"))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(u32, fn() -> Outcome); 14] = [
        (1, c1),
        (2, c2),
        (3, c3),
        (4, c4),
        (5, c5),
        (6, c6),
        (7, c7),
        (8, c8),
        (9, c9),
        (10, c10),
        (11, c11),
        (12, c12),
        (13, c13),
        (14, c14),
    ];
    let (mut passed, mut failed, mut missing) = (0, 0, 0);
    for (id, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let line = match f() {
            Outcome::Pass(d) => {
                passed += 1;
                format!("PASS [{id:>2}] {d}")
            }
            Outcome::Fail(d) => {
                failed += 1;
                format!("FAIL [{id:>2}] {d}")
            }
            Outcome::Missing(d) => {
                missing += 1;
                format!("FAIL [{id:>2}] not evaluated: {d}")
            }
        };
        println!("{line}  [{:.1}s]", t0.elapsed().as_secs_f64());
    }
    println!("acceptance: {passed} passed, {} failed ({missing} for missing data)", failed + missing);
    if failed > 0 {
        std::process::exit(1);
    }
}

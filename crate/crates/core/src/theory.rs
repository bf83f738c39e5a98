//! Numerical checks of the approximation theory behind windowed experts:
//! hat partitions of unity on regular lattices, random Hölder test functions,
//! and Monte Carlo estimates of interpolation and balanced-risk rates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Tensor-product linear hats on `[0, 1]^d` with `per_axis` nodes per axis
/// (nodes on the boundary included, so truncated boundary hats already sum
/// to one without renormalization).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PouLattice {
    pub d: usize,
    pub per_axis: usize,
}

impl PouLattice {
    pub fn new(d: usize, per_axis: usize) -> Result<Self> {
        if d == 0 || per_axis < 2 {
            return Err(Error::InvalidConfig(format!(
                "lattice needs d >= 1 and at least 2 nodes per axis, got d = {d}, per_axis = {per_axis}"
            )));
        }
        if (per_axis as f64).powi(d as i32) > 1e8 {
            return Err(Error::InvalidConfig(format!("lattice {per_axis}^{d} is too large")));
        }
        Ok(PouLattice { d, per_axis })
    }

    /// Window count `K = per_axis^d`.
    pub fn n_windows(&self) -> usize {
        self.per_axis.pow(self.d as u32)
    }

    pub fn mesh(&self) -> f64 {
        1.0 / (self.per_axis - 1) as f64
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let mut rest = flat;
        (0..self.d)
            .map(|_| {
                let i = rest % self.per_axis;
                rest /= self.per_axis;
                i as f64 * self.mesh()
            })
            .collect()
    }

    /// The `2^d` windows whose support contains `x`, with their weights.
    /// Coordinates outside `[0, 1]` are clamped.
    pub fn weights(&self, x: &[f64]) -> Vec<(usize, f64)> {
        assert_eq!(x.len(), self.d, "point dimension does not match lattice");
        let cells = (self.per_axis - 1) as f64;
        let mut base = Vec::with_capacity(self.d);
        let mut frac = Vec::with_capacity(self.d);
        for &xi in x {
            let u = xi.clamp(0.0, 1.0) * cells;
            let i = (u.floor() as usize).min(self.per_axis - 2);
            base.push(i);
            frac.push(u - i as f64);
        }
        let mut out = Vec::with_capacity(1 << self.d);
        for corner in 0..(1usize << self.d) {
            let mut flat = 0;
            let mut stride = 1;
            let mut w = 1.0;
            for a in 0..self.d {
                let up = (corner >> a) & 1 == 1;
                flat += (base[a] + up as usize) * stride;
                stride *= self.per_axis;
                w *= if up { frac[a] } else { 1.0 - frac[a] };
            }
            out.push((flat, w));
        }
        out
    }

    /// `Σ_j w_j(x) f(x_j)`.
    pub fn interpolate<F: Fn(&[f64]) -> f64>(&self, f: &F, x: &[f64]) -> f64 {
        self.weights(x).into_iter().map(|(j, w)| w * f(&self.node(j))).sum()
    }
}

/// Triangle wave: distance to the nearest integer. 1-Lipschitz, range `[0, ½]`.
fn tri(u: f64) -> f64 {
    (u - u.round()).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Ridge {
    amplitude: f64,
    direction: Vec<f64>,
    shifts: Vec<f64>,
}

/// Random ridge sum `f(x) = Σ_r a_r g_r(⟨u_r, x⟩)` with lacunary profiles
/// `g_r(t) = Σ_n 2^{-nα} tri(2^n t + s_{r,n})`. Truncated at `levels`, so
/// the profile is exactly α-Hölder for α < 1 and Lipschitz for α = 1, while
/// piecewise-linear interpolation at mesh `h > 2^{-levels}` still loses
/// `h^α` in sup norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderFunction {
    pub alpha: f64,
    pub dim: usize,
    pub levels: usize,
    ridges: Vec<Ridge>,
}

pub const DEFAULT_LEVELS: usize = 22;
const N_RIDGES: usize = 3;

impl HolderFunction {
    pub fn random(dim: usize, alpha: f64, seed: u64) -> Result<Self> {
        Self::random_with_levels(dim, alpha, DEFAULT_LEVELS, seed)
    }

    pub fn random_with_levels(dim: usize, alpha: f64, levels: usize, seed: u64) -> Result<Self> {
        check_alpha(alpha)?;
        if dim == 0 {
            return Err(Error::InvalidConfig("Hölder function needs dim >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ridges = (0..N_RIDGES)
            .map(|_| {
                let amplitude: f64 = StandardNormal.sample(&mut rng);
                let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = raw.iter().map(|v: &f64| v * v).sum::<f64>().sqrt().max(1e-12);
                Ridge {
                    amplitude: amplitude / (N_RIDGES as f64).sqrt(),
                    direction: raw.iter().map(|v| v / norm).collect(),
                    shifts: (0..=levels).map(|_| rng.random::<f64>()).collect(),
                }
            })
            .collect();
        Ok(HolderFunction {
            alpha,
            dim,
            levels,
            ridges,
        })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for r in &self.ridges {
            let t: f64 = r.direction.iter().zip(x).map(|(u, v)| u * v).sum();
            let mut g = 0.0;
            let mut freq = 1.0;
            for s in &r.shifts {
                g += tri(freq * t + s) / freq.powf(self.alpha);
                freq *= 2.0;
            }
            total += r.amplitude * g;
        }
        total
    }

    /// Upper bound on `sup |f(x) − f(x')| / ‖x − x'‖^α`, from
    /// `|tri(a) − tri(b)| ≤ min(|a − b|, ½)` level by level.
    pub fn holder_constant(&self) -> f64 {
        let amp: f64 = self.ridges.iter().map(|r| r.amplitude.abs()).sum();
        let bound = |delta: f64| -> f64 {
            let mut s = 0.0;
            let mut freq = 1.0f64;
            for _ in 0..=self.levels {
                s += (freq * delta).min(0.5) / freq.powf(self.alpha);
                freq *= 2.0;
            }
            s / delta.powf(self.alpha)
        };
        // The bound is piecewise smooth in log δ; a fine log grid plus a 1%
        // margin covers the gaps between grid points.
        let hi = (self.dim as f64).sqrt().max(1.0) * 4.0;
        let lo = 2f64.powi(-(self.levels as i32) - 4);
        let steps = 4000;
        let ratio = (hi / lo).ln() / steps as f64;
        let sup = (0..=steps).map(|i| bound(lo * (ratio * i as f64).exp())).fold(0.0, f64::max);
        amp * sup * 1.01
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "smoothness alpha must lie in (0, 1] for hat interpolation, got {alpha}"
        )));
    }
    Ok(())
}

/// Largest sampled `|f(x) − f(x')| / ‖x − x'‖^α` over random pairs in the unit cube.
pub fn empirical_holder_quotient(f: &HolderFunction, pairs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for i in 0..pairs {
        let x: Vec<f64> = (0..f.dim).map(|_| rng.random::<f64>()).collect();
        // Half of the pairs are close, where the quotient is largest for α < 1.
        let scale = if i % 2 == 0 { 1.0 } else { 10f64.powf(-rng.random_range(1.0..8.0)) };
        let y: Vec<f64> = x.iter().map(|v| v + scale * (rng.random::<f64>() - 0.5)).collect();
        let dist = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dist > 0.0 {
            best = best.max((f.eval(&x) - f.eval(&y)).abs() / dist.powf(f.alpha));
        }
    }
    best
}

fn draw_seed(seed: u64, i: u64) -> u64 {
    (seed ^ 0xD1B5_4A32_D192_ED03).wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn uniform_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub k: usize,
    pub mesh: f64,
    /// Squared L² error averaged over function draws.
    pub mse: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateResult {
    pub label: String,
    pub rows: Vec<RateRow>,
    /// Mean over draws of the per-draw log-log OLS slope.
    pub slope: f64,
    pub slope_stderr: f64,
}

/// Squared interpolation error against `K` for each target in `targets`,
/// each a function on `[0, 1]^dim`.
fn error_curve<F>(label: &str, dim: usize, per_axis: &[usize], n_mc: usize, targets: &[F], seed: u64) -> Result<RateResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if per_axis.len() < 4 {
        return Err(Error::InvalidConfig("rate experiments need at least 4 lattice sizes".into()));
    }
    if n_mc < 10_000 {
        return Err(Error::InvalidConfig(format!("need at least 10000 Monte Carlo points, got {n_mc}")));
    }
    if targets.is_empty() {
        return Err(Error::InvalidConfig("no target functions".into()));
    }
    let lattices: Vec<PouLattice> = per_axis.iter().map(|&m| PouLattice::new(dim, m)).collect::<Result<_>>()?;
    let cells: Vec<(usize, usize)> = (0..targets.len()).flat_map(|i| (0..lattices.len()).map(move |k| (i, k))).collect();
    let errs: Vec<f64> = cells
        .par_iter()
        .map(|&(i, k)| {
            let f = &targets[i];
            let pts = uniform_points(n_mc, dim, draw_seed(seed, 1_000 + i as u64));
            let s: f64 = pts
                .iter()
                .map(|x| {
                    let e = lattices[k].interpolate(f, x) - f(x);
                    e * e
                })
                .sum();
            s / n_mc as f64
        })
        .collect();
    let n_k = lattices.len();
    let log_k: Vec<f64> = lattices.iter().map(|l| (l.n_windows() as f64).ln()).collect();
    let slopes: Vec<f64> = (0..targets.len())
        .map(|i| {
            let log_e: Vec<f64> = errs[i * n_k..(i + 1) * n_k].iter().map(|e| e.max(1e-300).ln()).collect();
            stats::ols_line(&log_k, &log_e).0
        })
        .collect();
    let rows = lattices
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let col: Vec<f64> = (0..targets.len()).map(|i| errs[i * n_k + k]).collect();
            let (mse, stderr) = crate::metrics::mean_and_stderr(&col);
            RateRow {
                k: l.n_windows(),
                mesh: l.mesh(),
                mse,
                stderr,
            }
        })
        .collect();
    let (slope, slope_stderr) = crate::metrics::mean_and_stderr(&slopes);
    Ok(RateResult {
        label: label.to_string(),
        rows,
        slope,
        slope_stderr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateConfig {
    pub d: usize,
    pub alpha: f64,
    pub per_axis: Vec<usize>,
    pub n_mc: usize,
    pub n_functions: usize,
    pub seed: u64,
}

impl RateConfig {
    /// Lattices chosen so `K` spans about two decades.
    pub fn default_for(d: usize, alpha: f64) -> Self {
        let per_axis = match d {
            1 => vec![9, 17, 33, 65, 129, 257],
            2 => vec![5, 9, 17, 33, 65],
            3 => vec![3, 5, 9, 17],
            _ => vec![3, 4, 5, 6, 7],
        };
        RateConfig {
            d,
            alpha,
            per_axis,
            n_mc: 10_000,
            n_functions: 10,
            seed: 0,
        }
    }
}

fn draws(dim: usize, alpha: f64, n: usize, seed: u64) -> Result<Vec<HolderFunction>> {
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one function draw".into()));
    }
    (0..n as u64).map(|i| HolderFunction::random(dim, alpha, draw_seed(seed, i))).collect()
}

/// Interpolation error of hat PoUs on `[0, 1]^d`; the squared error should
/// fall like `K^{-2α/d}`.
pub fn rate_experiment(cfg: &RateConfig) -> Result<RateResult> {
    let fs = draws(cfg.d, cfg.alpha, cfg.n_functions, cfg.seed)?;
    let targets: Vec<_> = fs.iter().map(|f| move |x: &[f64]| f.eval(x)).collect();
    error_curve(&format!("rate_d{}", cfg.d), cfg.d, &cfg.per_axis, cfg.n_mc, &targets, cfg.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseConfig {
    pub d: usize,
    pub s: usize,
    pub alpha: f64,
    /// Lattice sizes on the relevant `s`-dimensional subspace.
    pub subspace_per_axis: Vec<usize>,
    /// Lattice sizes on the full `d`-cube (control run).
    pub ambient_per_axis: Vec<usize>,
    pub n_mc: usize,
    pub n_functions: usize,
    pub seed: u64,
}

impl SparseConfig {
    pub fn default_for(d: usize, s: usize, alpha: f64) -> Self {
        SparseConfig {
            d,
            s,
            alpha,
            subspace_per_axis: RateConfig::default_for(s, alpha).per_axis,
            ambient_per_axis: RateConfig::default_for(d, alpha).per_axis,
            n_mc: 10_000,
            n_functions: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseResult {
    pub subspace: RateResult,
    pub ambient: RateResult,
}

/// `f(x) = g(x_S)` with `S` the first `s` coordinates. The oracle lattice
/// lives on `S`; the control lattice covers all `d` coordinates.
pub fn sparse_rate_experiment(cfg: &SparseConfig) -> Result<SparseResult> {
    if cfg.s == 0 || cfg.s > cfg.d {
        return Err(Error::InvalidConfig(format!("need 1 <= s <= d, got s = {}, d = {}", cfg.s, cfg.d)));
    }
    let gs = draws(cfg.s, cfg.alpha, cfg.n_functions, cfg.seed)?;
    let sub: Vec<_> = gs.iter().map(|g| move |x: &[f64]| g.eval(x)).collect();
    let s = cfg.s;
    let full: Vec<_> = gs.iter().map(|g| move |x: &[f64]| g.eval(&x[..s])).collect();
    Ok(SparseResult {
        subspace: error_curve(&format!("sparse_subspace_s{}", cfg.s), cfg.s, &cfg.subspace_per_axis, cfg.n_mc, &sub, cfg.seed)?,
        ambient: error_curve(&format!("sparse_ambient_d{}", cfg.d), cfg.d, &cfg.ambient_per_axis, cfg.n_mc, &full, cfg.seed)?,
    })
}

/// Smooth embeddings of `[0, 1]^{d0}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embedding {
    /// One turn of a helix in R³.
    Helix,
    /// A patch of a torus in R³.
    TorusPatch,
    /// `[0, 1]^{d0}` itself.
    Flat(usize),
}

impl Embedding {
    pub fn intrinsic_dim(&self) -> usize {
        match self {
            Embedding::Helix => 1,
            Embedding::TorusPatch => 2,
            Embedding::Flat(d) => *d,
        }
    }

    pub fn natural_ambient(&self) -> usize {
        match self {
            Embedding::Helix | Embedding::TorusPatch => 3,
            Embedding::Flat(d) => *d,
        }
    }

    pub fn map(&self, t: &[f64]) -> Vec<f64> {
        use std::f64::consts::TAU;
        match self {
            Embedding::Helix => vec![0.4 * (TAU * t[0]).cos(), 0.4 * (TAU * t[0]).sin(), t[0]],
            Embedding::TorusPatch => {
                let (u, v) = (0.5 * TAU * t[0], 0.5 * TAU * t[1]);
                let ring = 1.0 + 0.4 * v.cos();
                vec![ring * u.cos(), ring * u.sin(), 0.4 * v.sin()]
            }
            Embedding::Flat(_) => t.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldConfig {
    pub embedding: Embedding,
    /// Ambient dimension after zero padding (at least the natural one).
    pub ambient: usize,
    pub alpha: f64,
    pub per_axis: Vec<usize>,
    pub n_mc: usize,
    pub n_functions: usize,
    pub seed: u64,
}

impl ManifoldConfig {
    pub fn default_for(embedding: Embedding, alpha: f64) -> Self {
        ManifoldConfig {
            embedding,
            ambient: embedding.natural_ambient(),
            alpha,
            per_axis: RateConfig::default_for(embedding.intrinsic_dim(), alpha).per_axis,
            n_mc: 10_000,
            n_functions: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldResult {
    pub rate: RateResult,
    /// Sampled bounds on `‖γ(t) − γ(t')‖ / ‖t − t'‖`.
    pub lipschitz_lower: f64,
    pub lipschitz_upper: f64,
}

/// Ambient Hölder functions restricted to an embedded cube, interpolated on
/// a lattice in intrinsic coordinates. Target slope `−2α/d0`.
pub fn manifold_rate_experiment(cfg: &ManifoldConfig) -> Result<ManifoldResult> {
    let emb = cfg.embedding;
    if cfg.ambient < emb.natural_ambient() {
        return Err(Error::InvalidConfig(format!(
            "ambient dimension {} is below the embedding's {}",
            cfg.ambient,
            emb.natural_ambient()
        )));
    }
    let d0 = emb.intrinsic_dim();
    let pad = cfg.ambient;
    let embed = move |t: &[f64]| {
        let mut y = emb.map(t);
        y.resize(pad, 0.0);
        y
    };
    let fs = draws(pad, cfg.alpha, cfg.n_functions, cfg.seed)?;
    let targets: Vec<_> = fs.iter().map(|f| move |t: &[f64]| f.eval(&embed(t))).collect();
    let rate = error_curve(&format!("manifold_d0{}_D{}", d0, pad), d0, &cfg.per_axis, cfg.n_mc, &targets, cfg.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed(cfg.seed, 77));
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for _ in 0..20_000 {
        let a: Vec<f64> = (0..d0).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..d0).map(|_| rng.random::<f64>()).collect();
        let dt = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let (ga, gb) = (embed(&a), embed(&b));
        let dg = ga.iter().zip(&gb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        if dt > 1e-9 {
            lo = lo.min(dg / dt);
            hi = hi.max(dg / dt);
        }
    }
    Ok(ManifoldResult {
        rate,
        lipschitz_lower: lo,
        lipschitz_upper: hi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    pub d: usize,
    pub alpha: f64,
    pub n_list: Vec<usize>,
    /// Candidate lattice sizes per axis.
    pub per_axis: Vec<usize>,
    pub noise_sd: f64,
    pub n_functions: usize,
    /// Noisy training sets per function and sample size.
    pub n_reps: usize,
    pub n_mc: usize,
    /// Ridge added to the normal equations, relative to `N / K`.
    pub ridge: f64,
    pub seed: u64,
}

impl BalanceConfig {
    pub fn default_for(d: usize, alpha: f64) -> Self {
        let per_axis = match d {
            1 => geometric_grid(3, 160, 1.08),
            _ => geometric_grid(2, 48, 1.1),
        };
        let n_list = match d {
            1 => vec![250, 500, 1000, 2000, 4000, 8000, 16000, 32000],
            _ => vec![1000, 2000, 4000, 8000, 16000, 32000],
        };
        BalanceConfig {
            d,
            alpha,
            n_list,
            per_axis,
            noise_sd: 0.1,
            n_functions: 10,
            n_reps: 4,
            n_mc: 10_000,
            ridge: 1e-6,
            seed: 0,
        }
    }
}

/// Strictly increasing integers from `lo` to `hi`, spaced by about `ratio`.
pub fn geometric_grid(lo: usize, hi: usize, ratio: f64) -> Vec<usize> {
    let mut out = vec![lo];
    let mut v = lo as f64;
    while *out.last().unwrap() < hi {
        v *= ratio;
        let next = (v.round() as usize).max(out.last().unwrap() + 1).min(hi);
        out.push(next);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub n: usize,
    pub k: usize,
    /// Mean squared L² error of the fitted estimator.
    pub risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceResult {
    pub rows: Vec<BalanceRow>,
    /// `(N, K*)` pairs.
    pub k_star: Vec<(usize, usize)>,
    /// OLS slope of `ln K*` on `ln N`.
    pub exponent: f64,
}

/// Normal equations of the hat least-squares fit. Neighbours differ by at
/// most one in each axis, so each row stores `3^d` entries.
struct HatSystem {
    offsets: Vec<isize>,
    diag_slot: usize,
    entries: Vec<f64>,
    rhs: Vec<f64>,
}

impl HatSystem {
    fn assemble(lattice: PouLattice, xs: &[Vec<f64>], ys: &[f64]) -> Self {
        let d = lattice.d;
        let m = lattice.per_axis as isize;
        let n_off = 3usize.pow(d as u32);
        let mut offsets = Vec::with_capacity(n_off);
        for code in 0..n_off {
            let mut rest = code;
            let mut off = 0isize;
            let mut stride = 1isize;
            for _ in 0..d {
                off += ((rest % 3) as isize - 1) * stride;
                rest /= 3;
                stride *= m;
            }
            offsets.push(off);
        }
        let diag_slot = (n_off - 1) / 2;
        let k = lattice.n_windows();
        let mut entries = vec![0.0; k * n_off];
        let mut rhs = vec![0.0; k];
        for (x, y) in xs.iter().zip(ys) {
            let w = lattice.weights(x);
            for &(i, wi) in &w {
                rhs[i] += wi * y;
                for &(j, wj) in &w {
                    let slot = Self::slot_of(&lattice, i, j);
                    entries[i * n_off + slot] += wi * wj;
                }
            }
        }
        HatSystem {
            offsets,
            diag_slot,
            entries,
            rhs,
        }
    }

    fn slot_of(lattice: &PouLattice, i: usize, j: usize) -> usize {
        let m = lattice.per_axis;
        let (mut a, mut b) = (i, j);
        let mut code = 0;
        let mut pow = 1;
        for _ in 0..lattice.d {
            let delta = (b % m) as isize - (a % m) as isize;
            code += ((delta + 1) as usize) * pow;
            pow *= 3;
            a /= m;
            b /= m;
        }
        code
    }

    fn apply(&self, v: &[f64], ridge: f64, out: &mut [f64]) {
        let n_off = self.offsets.len();
        for i in 0..v.len() {
            let mut s = ridge * v[i];
            for (slot, off) in self.offsets.iter().enumerate() {
                let a = self.entries[i * n_off + slot];
                if a != 0.0 {
                    s += a * v[(i as isize + off) as usize];
                }
            }
            out[i] = s;
        }
    }

    /// Jacobi-preconditioned conjugate gradients.
    fn solve(&self, ridge: f64) -> Vec<f64> {
        let k = self.rhs.len();
        let n_off = self.offsets.len();
        let precond: Vec<f64> = (0..k).map(|i| 1.0 / (self.entries[i * n_off + self.diag_slot] + ridge)).collect();
        let mut x = vec![0.0; k];
        let mut r = self.rhs.clone();
        let mut z: Vec<f64> = r.iter().zip(&precond).map(|(a, b)| a * b).collect();
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let target = 1e-24 * self.rhs.iter().map(|v| v * v).sum::<f64>().max(1e-300);
        let mut ap = vec![0.0; k];
        for _ in 0..(10 * k + 50) {
            if r.iter().map(|v| v * v).sum::<f64>() <= target {
                break;
            }
            self.apply(&p, ridge, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                break;
            }
            let step = rz / pap;
            for i in 0..k {
                x[i] += step * p[i];
                r[i] -= step * ap[i];
            }
            for i in 0..k {
                z[i] = r[i] * precond[i];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..k {
                p[i] = z[i] + beta * p[i];
            }
        }
        x
    }
}

/// Least-squares coefficients of the hat expansion on a noisy sample.
pub fn fit_hat_least_squares(lattice: PouLattice, xs: &[Vec<f64>], ys: &[f64], ridge: f64) -> Vec<f64> {
    let sys = HatSystem::assemble(lattice, xs, ys);
    let scale = xs.len() as f64 / lattice.n_windows() as f64;
    sys.solve(ridge * scale.max(1e-12))
}

/// For each `N`, the `K` minimizing the measured risk of the hat
/// least-squares estimator, and the OLS exponent of `K*` against `N`.
pub fn balance_experiment(cfg: &BalanceConfig) -> Result<BalanceResult> {
    check_alpha(cfg.alpha)?;
    if cfg.n_list.len() < 3 {
        return Err(Error::InvalidConfig("need >= 3 values in the sample-size list".into()));
    }
    if cfg.per_axis.len() < 3 {
        return Err(Error::InvalidConfig("need >= 3 candidate lattice sizes".into()));
    }
    if cfg.n_reps == 0 || cfg.n_mc == 0 {
        return Err(Error::InvalidConfig("n_reps and n_mc must be positive".into()));
    }
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let fs = draws(cfg.d, cfg.alpha, cfg.n_functions, cfg.seed)?;
    let lattices: Vec<PouLattice> = cfg.per_axis.iter().map(|&m| PouLattice::new(cfg.d, m)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize, usize)> = (0..cfg.n_list.len())
        .flat_map(|ni| (0..fs.len()).flat_map(move |fi| (0..cfg.n_reps).map(move |r| (ni, fi, r))))
        .collect();
    // One risk curve over the candidate lattices per (N, function, rep).
    let curves: Vec<(usize, Vec<f64>)> = jobs
        .par_iter()
        .map(|&(ni, fi, rep)| {
            let n = cfg.n_list[ni];
            let f = &fs[fi];
            let job_seed = draw_seed(cfg.seed, ((ni * 1_000 + fi) * 1_000 + rep) as u64 + 5_000);
            let xs = uniform_points(n, cfg.d, job_seed);
            let mut rng = ChaCha8Rng::seed_from_u64(job_seed ^ 0xA5A5);
            let ys: Vec<f64> = xs.iter().map(|x| f.eval(x) + noise.sample(&mut rng)).collect();
            let test = uniform_points(cfg.n_mc, cfg.d, job_seed ^ 0x5A5A);
            let truth: Vec<f64> = test.iter().map(|x| f.eval(x)).collect();
            let risks = lattices
                .iter()
                .map(|&l| {
                    let c = fit_hat_least_squares(l, &xs, &ys, cfg.ridge);
                    let s: f64 = test
                        .iter()
                        .zip(&truth)
                        .map(|(x, t)| {
                            let fx: f64 = l.weights(x).into_iter().map(|(j, w)| w * c[j]).sum();
                            (fx - t) * (fx - t)
                        })
                        .sum();
                    s / cfg.n_mc as f64
                })
                .collect();
            (ni, risks)
        })
        .collect();
    let mut rows = Vec::new();
    let mut k_star = Vec::new();
    for (ni, &n) in cfg.n_list.iter().enumerate() {
        let mut avg = vec![0.0; lattices.len()];
        let mut count = 0.0;
        for (_, c) in curves.iter().filter(|(i, _)| *i == ni) {
            for (a, v) in avg.iter_mut().zip(c) {
                *a += v;
            }
            count += 1.0;
        }
        for a in &mut avg {
            *a /= count;
        }
        let best = crate::gbdt::argmin_first(&avg).unwrap_or(0);
        for (l, r) in lattices.iter().zip(&avg) {
            rows.push(BalanceRow {
                n,
                k: l.n_windows(),
                risk: *r,
            });
        }
        k_star.push((n, lattices[best].n_windows()));
    }
    let ln_n: Vec<f64> = k_star.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ln_k: Vec<f64> = k_star.iter().map(|(_, k)| (*k as f64).ln()).collect();
    Ok(BalanceResult {
        rows,
        k_star,
        exponent: stats::ols_line(&ln_n, &ln_k).0,
    })
}

impl RateResult {
    /// Long format: `experiment,k,mesh,mse,stderr`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        for r in &self.rows {
            w.write_record([
                self.label.clone(),
                r.k.to_string(),
                format!("{:.17e}", r.mesh),
                format!("{:.17e}", r.mse),
                format!("{:.17e}", r.stderr),
            ])?;
        }
        Ok(())
    }
}

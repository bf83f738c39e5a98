//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the library's numerical helpers.
#![allow(dead_code)]

use std::path::PathBuf;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn phi_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF. Inside |x| ≤ 5 the 50-term series
/// `½ + φ(x) Σ x^{2n+1} / (2n+1)!!`; outside, the asymptotic tail
/// `φ(x)/|x| (1 − x⁻² + 3x⁻⁴ − 15x⁻⁶ + 105x⁻⁸)`.
pub fn phi_cdf(x: f64) -> f64 {
    if x.abs() <= 5.0 {
        let mut term = x;
        let mut sum = x;
        for n in 1..50 {
            term *= x * x / (2 * n + 1) as f64;
            sum += term;
        }
        0.5 + phi_pdf(x) * sum
    } else {
        let u = 1.0 / (x * x);
        let tail = phi_pdf(x) / x.abs() * (1.0 - u + 3.0 * u * u - 15.0 * u * u * u + 105.0 * u * u * u * u);
        if x > 0.0 {
            1.0 - tail
        } else {
            tail
        }
    }
}

/// Composite Simpson rule on `[a, b]` with at most `h_max` spacing.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, h_max: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut n = ((b - a) / h_max).ceil() as usize;
    n += n % 2;
    n = n.max(2);
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// `(weight, mean, sd)` triples.
pub type Mix = Vec<(f64, f64, f64)>;

pub fn mix_pdf(m: &Mix, y: f64) -> f64 {
    m.iter().map(|&(w, mu, sd)| w * phi_pdf((y - mu) / sd) / sd).sum()
}

pub fn mix_cdf(m: &Mix, y: f64) -> f64 {
    m.iter().map(|&(w, mu, sd)| w * phi_cdf((y - mu) / sd)).sum()
}

/// Integration window covering every component to ±14 sd.
pub fn window(m: &Mix, extra: &[f64]) -> (f64, f64, f64) {
    let lo = m.iter().map(|c| c.1 - 14.0 * c.2).chain(extra.iter().copied()).fold(f64::INFINITY, f64::min);
    let hi = m.iter().map(|c| c.1 + 14.0 * c.2).chain(extra.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    let sd_min = m.iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
    (lo, hi, sd_min / 40.0)
}

pub fn quad_mass(m: &Mix) -> f64 {
    let (lo, hi, h) = window(m, &[]);
    simpson(|y| mix_pdf(m, y), lo, hi, h)
}

/// `∫ (F(z) − 1{z ≥ y})² dz`, split at the jump.
pub fn quad_crps(m: &Mix, y: f64) -> f64 {
    let (lo, hi, h) = window(m, &[y]);
    let left = simpson(|z| mix_cdf(m, z).powi(2), lo, y, h);
    let right = simpson(|z| (1.0 - mix_cdf(m, z)).powi(2), y, hi, h);
    left + right
}

/// Least squares line `y ≈ a p + b` from the first-order conditions alone:
/// for fixed `a` the best `b` is the mean residual, and the profiled slope
/// derivative is nondecreasing in `a`, so its root is found by bisection.
pub fn least_squares_line(p: &[f64], y: &[f64]) -> (f64, f64) {
    let n = p.len() as f64;
    let b_of = |a: f64| y.iter().zip(p).map(|(yi, pi)| yi - a * pi).sum::<f64>() / n;
    let slope = |a: f64| {
        let b = b_of(a);
        p.iter().zip(y).map(|(pi, yi)| pi * (a * pi + b - yi)).sum::<f64>()
    };
    let (mut lo, mut hi) = (-1.0, 1.0);
    while slope(lo) > 0.0 {
        lo *= 2.0;
    }
    while slope(hi) < 0.0 {
        hi *= 2.0;
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if slope(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = 0.5 * (lo + hi);
    (a, b_of(a))
}

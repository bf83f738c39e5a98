//! Hand-written forward/backward primitives and a flat parameter store.
//!
//! There is no tape. Each model composes these kernels explicitly and calls
//! the matching `*_backward` in reverse order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

/// Named parameter arrays with same-shape gradient buffers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "StoreRepr", into = "StoreRepr")]
pub struct ParamStore {
    params: Vec<Param>,
}

#[derive(Serialize, Deserialize)]
struct StoreRepr {
    params: Vec<Param>,
}

impl From<StoreRepr> for ParamStore {
    fn from(r: StoreRepr) -> Self {
        let mut params = r.params;
        for p in &mut params {
            p.grad = vec![0.0; p.value.len()];
        }
        ParamStore { params }
    }
}

impl From<ParamStore> for StoreRepr {
    fn from(s: ParamStore) -> Self {
        StoreRepr { params: s.params }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its id.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> usize {
        let len: usize = shape.iter().product();
        assert_eq!(len, value.len(), "shape/value length mismatch");
        self.params.push(Param {
            name: name.into(),
            shape: shape.to_vec(),
            grad: vec![0.0; len],
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn value(&self, id: usize) -> &[f64] {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.params[id].value
    }

    pub fn grad(&self, id: usize) -> &[f64] {
        &self.params[id].grad
    }

    pub fn grad_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.params[id].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `other`'s gradients into this store (same layout assumed).
    pub fn accumulate_grads(&mut self, other: &[Vec<f64>]) {
        for (p, g) in self.params.iter_mut().zip(other) {
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    /// Zeroed gradient buffers shaped like this store.
    pub fn grad_buffers(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.value.len()]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: store.grad_buffers(),
            v: store.grad_buffers(),
        }
    }

    /// Bias-corrected Adam update from the stored gradients, which are then
    /// zeroed. A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for p in &store.params {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.value[j] -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
                p.grad[j] = 0.0;
            }
        }
        debug_assert!(store.all_finite());
        Ok(())
    }
}

/// `out = W x + b` with `W` row-major `out_dim × x.len()`.
pub fn dense_forward(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    debug_assert_eq!(w.len(), out.len() * n_in);
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
        let mut acc = *bias;
        for (a, xi) in row.iter().zip(x) {
            acc += a * xi;
        }
        *o = acc;
    }
}

/// Accumulates `dW += dout xᵀ`, `db += dout` and, if requested, `dx += Wᵀ dout`.
pub fn dense_backward(
    w: &[f64],
    x: &[f64],
    dout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let n_in = x.len();
    for (o, &d) in dout.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        gb[o] += d;
        let row = &mut gw[o * n_in..(o + 1) * n_in];
        for (g, xi) in row.iter_mut().zip(x) {
            *g += d * xi;
        }
    }
    if let Some(dx) = dx {
        for (o, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (dxi, wi) in dx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                *dxi += d * wi;
            }
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// LayerNorm without gain or bias. Returns the output and `1/sqrt(var+eps)`.
pub fn layer_norm(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

pub fn layer_norm_backward(y: &[f64], inv_std: f64, dy: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let mean_dy = dy.iter().sum::<f64>() / n;
    let mean_dy_y = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
    dy.iter()
        .zip(y)
        .map(|(d, yi)| inv_std * (d - mean_dy - yi * mean_dy_y))
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Vector-Jacobian product of softmax: `dx = p ⊙ (dp − ⟨p, dp⟩)`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - dot)).collect()
}

/// `log Σ exp(terms)` with max-shift. `-inf` entries are allowed; all `-inf`
/// is an empty mixture.
pub fn log_sum_exp(terms: &[f64]) -> Result<f64> {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || terms.is_empty() {
        return Err(Error::EmptyMixture);
    }
    let s: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    Ok(max + s.ln())
}

/// Gradient of [`log_sum_exp`] with respect to each term.
pub fn log_sum_exp_grad(terms: &[f64]) -> Vec<f64> {
    softmax(terms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    pub fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Coordinates whose step-`h` and step-`h/2` estimates disagree by more than
    /// this relative amount are reported as unresolved instead of compared.
    pub convergence_tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-4,
            floor: 1e-6,
            convergence_tol: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub unresolved: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn unresolved(&self) -> usize {
        self.params.iter().map(|p| p.unresolved).sum()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }
}

/// Compares `analytic` (laid out like `store`) against Richardson-extrapolated
/// central differences of `f`.
///
/// `f` returns the scalar and a branch signature (which top-k set, which clamp
/// side, and so on). A coordinate is unresolved when any perturbation changes
/// the signature or when the finite-difference estimate has not converged.
pub fn grad_check<F>(store: &ParamStore, analytic: &[Vec<f64>], mut f: F, opts: GradCheckOptions) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> (f64, u64),
{
    let mut work = store.clone();
    let (_, base_sig) = f(&work);
    let mut out = Vec::with_capacity(store.len());
    for id in 0..store.len() {
        let mut check = ParamCheck {
            name: store.params[id].name.clone(),
            max_rel_err: 0.0,
            checked: 0,
            unresolved: 0,
        };
        for j in 0..store.params[id].value.len() {
            let orig = work.params[id].value[j];
            let mut eval = |delta: f64, work: &mut ParamStore| {
                work.params[id].value[j] = orig + delta;
                let r = f(work);
                work.params[id].value[j] = orig;
                r
            };
            let h = opts.h;
            let (fp, sp) = eval(h, &mut work);
            let (fm, sm) = eval(-h, &mut work);
            let (fp2, sp2) = eval(h / 2.0, &mut work);
            let (fm2, sm2) = eval(-h / 2.0, &mut work);
            if [sp, sm, sp2, sm2].iter().any(|s| *s != base_sig) {
                check.unresolved += 1;
                continue;
            }
            let d1 = (fp - fm) / (2.0 * h);
            let d2 = (fp2 - fm2) / h;
            let scale = d1.abs().max(d2.abs()).max(opts.floor);
            if (d1 - d2).abs() > opts.convergence_tol * scale {
                check.unresolved += 1;
                continue;
            }
            let numeric = (4.0 * d2 - d1) / 3.0;
            let a = analytic[id][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            check.max_rel_err = check.max_rel_err.max(err);
            check.checked += 1;
        }
        out.push(check);
    }
    GradCheckReport { params: out }
}

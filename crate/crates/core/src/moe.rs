//! The mixture-of-experts density model.
//!
//! Inputs are the standardized augmented features `x̄` plus the z-scored anchor
//! mean. Gating runs on a LayerNorm latent: a Gaussian metric window over
//! learnable centers is fused in log space with dot-product router logits,
//! then sparsified to the top `k` experts with a little uniform smoothing.
//! Each active expert is a one-hidden-layer MDN emitting `C` Gaussian
//! components whose means, in the default mode, are corrections to the anchor.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Matrix;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, ParamStore};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    /// Component mean = anchor + Δ.
    #[default]
    AnchorDelta,
    /// Component mean = anchor; experts shape only weights and widths.
    AnchorOnly,
    /// Component mean predicted directly.
    Free,
}

impl CouplingMode {
    pub fn needs_anchor(self) -> bool {
        !matches!(self, CouplingMode::Free)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeConfig {
    pub latent_dim: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub n_components: usize,
    pub hidden: usize,
    pub router_dim: usize,
    pub temperature: f64,
    pub smoothing: f64,
    pub weight_floor: f64,
    pub stab: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub log_scale_min: f64,
    pub log_scale_max: f64,
    pub layer_norm_eps: f64,
    pub mode: CouplingMode,
    pub activation: Activation,
    /// When false the router logits are identically zero and gating relies on
    /// the metric window alone.
    pub use_router: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            latent_dim: 2,
            n_experts: 8,
            top_k: 2,
            n_components: 3,
            hidden: 128,
            router_dim: 16,
            temperature: 1.0,
            smoothing: 0.05,
            weight_floor: 1e-12,
            stab: 1e-12,
            sigma_min: 0.05,
            sigma_max: 1.0,
            log_scale_min: -3.0,
            log_scale_max: 3.0,
            layer_norm_eps: nn::LAYER_NORM_EPS,
            mode: CouplingMode::AnchorDelta,
            activation: Activation::Tanh,
            use_router: true,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.latent_dim == 0 || self.n_components == 0 || self.hidden == 0 || self.router_dim == 0 {
            return bad("latent_dim, n_components, hidden and router_dim must be positive");
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return bad("need 1 <= top_k <= n_experts");
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return bad("need 0 < sigma_min < sigma_max");
        }
        if !(self.smoothing >= 0.0 && self.smoothing < 1.0) {
            return bad("smoothing must lie in [0, 1)");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.log_scale_min < self.log_scale_max) || !(self.layer_norm_eps > 0.0) {
            return bad("log-scale bounds must be ordered and layer_norm_eps positive");
        }
        if !(self.weight_floor > 0.0) || self.stab < 0.0 {
            return bad("weight_floor must be positive and stab non-negative");
        }
        Ok(())
    }
}

/// Regularizer coefficients of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Penalties {
    pub scale: f64,
    pub delta: f64,
    pub entropy: f64,
    pub load: f64,
}

impl Default for Penalties {
    fn default() -> Self {
        Penalties {
            scale: 1e-4,
            delta: 1e-4,
            entropy: 1e-3,
            load: 1e-2,
        }
    }
}

impl Penalties {
    pub fn none() -> Self {
        Penalties {
            scale: 0.0,
            delta: 0.0,
            entropy: 0.0,
            load: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Flat Gaussian mixture in z-units.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureDensity {
    pub components: Vec<Component>,
}

impl MixtureDensity {
    pub fn new(components: Vec<Component>) -> Self {
        MixtureDensity { components }
    }

    pub fn weight_sum(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    pub fn pdf(&self, y: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * stats::normal_pdf((y - c.mean) / c.sd) / c.sd)
            .sum()
    }

    pub fn log_pdf(&self, y: f64) -> Result<f64> {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + stats::normal_log_pdf(y, c.mean, c.sd))
            .collect();
        nn::log_sum_exp(&terms)
    }

    pub fn cdf(&self, y: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * stats::normal_cdf((y - c.mean) / c.sd))
            .sum()
    }

    /// `Σ w μ / Σ w`, evaluated relative to the first mean so that a mixture
    /// whose means all coincide returns that mean exactly.
    pub fn mean(&self) -> f64 {
        let pivot = self.components[0].mean;
        let mut num = 0.0;
        let mut den = 0.0;
        for c in &self.components {
            num += c.weight * (c.mean - pivot);
            den += c.weight;
        }
        pivot + num / den
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let den = self.weight_sum();
        self.components
            .iter()
            .map(|c| c.weight * (c.sd * c.sd + (c.mean - m) * (c.mean - m)))
            .sum::<f64>()
            / den
    }

    /// Inverse CDF by bisection.
    pub fn quantile(&self, p: f64) -> f64 {
        let total = self.weight_sum();
        let target = p * total;
        let lo_edge = self.components.iter().map(|c| c.mean - 40.0 * c.sd).fold(f64::INFINITY, f64::min);
        let hi_edge = self.components.iter().map(|c| c.mean + 40.0 * c.sd).fold(f64::NEG_INFINITY, f64::max);
        let (mut lo, mut hi) = (lo_edge, hi_edge);
        for _ in 0..200 {
            let mid = lo + (hi - lo) / 2.0;
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo + (hi - lo) / 2.0
    }

    /// Rows of `weight,mean,sd`.
    pub fn to_csv_rows(&self) -> Vec<[f64; 3]> {
        self.components.iter().map(|c| [c.weight, c.mean, c.sd]).collect()
    }
}

/// Sparse, smoothed gate vector over all experts.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    /// Gate per expert; zero outside `active`.
    pub weights: Vec<f64>,
    /// Active experts in ascending index order.
    pub active: Vec<usize>,
    /// Fused pre-sparsification gate.
    pub alpha: Vec<f64>,
}

/// Indices of the `k` largest entries; ties prefer the lower index. Returned
/// in ascending index order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Log window weights: unnormalized `log w̃_j = −½ Σ ((z − c_j)/s_j)²` and the
/// normalized `log w_j`.
pub fn window_log_weights(z: &[f64], centers: &[f64], log_scales: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = z.len();
    let raw: Vec<f64> = centers
        .chunks_exact(d)
        .zip(log_scales.chunks_exact(d))
        .map(|(c, ls)| {
            -0.5 * z
                .iter()
                .zip(c)
                .zip(ls)
                .map(|((zi, ci), li)| {
                    let u = (zi - ci) * (-li).exp();
                    u * u
                })
                .sum::<f64>()
        })
        .collect();
    let lse = nn::log_sum_exp(&raw).expect("finite window terms");
    let normalized = raw.iter().map(|v| v - lse).collect();
    (raw, normalized)
}

/// Router logits `⟨W_q z, k_j⟩ / (√d_r τ)`. Also returns the query `W_q z`.
pub fn router_logits(z: &[f64], w_q: &[f64], keys: &[f64], router_dim: usize, temperature: f64) -> (Vec<f64>, Vec<f64>) {
    let mut q = vec![0.0; router_dim];
    nn::dense_forward(w_q, &vec![0.0; router_dim], z, &mut q);
    let scale = 1.0 / ((router_dim as f64).sqrt() * temperature);
    let ell = keys
        .chunks_exact(router_dim)
        .map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    (ell, q)
}

/// Log-space fusion `α = softmax(log(w ∨ ε_w) + ℓ)`, top-k on `α`, then
/// renormalization over the active set with smoothing mass `ε` spread evenly.
pub fn fuse_gates(log_w: &[f64], ell: &[f64], top_k: usize, smoothing: f64, weight_floor: f64, stab: f64) -> GateVector {
    let floor = weight_floor.ln();
    let logits: Vec<f64> = log_w.iter().zip(ell).map(|(lw, l)| lw.max(floor) + l).collect();
    let alpha = nn::softmax(&logits);
    let active = top_k_indices(&alpha, top_k);
    let mass: f64 = active.iter().map(|&j| alpha[j]).sum();
    let mut weights = vec![0.0; alpha.len()];
    let k = active.len() as f64;
    for &j in &active {
        weights[j] = (1.0 - smoothing) * alpha[j] / (mass + stab) + smoothing / k;
    }
    GateVector { weights, active, alpha }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertIds {
    pub w1: usize,
    pub b1: usize,
    pub w_pi: usize,
    pub b_pi: usize,
    pub w_mu: usize,
    pub b_mu: usize,
    pub w_t: usize,
    pub b_t: usize,
}

/// Parameter ids inside the model's [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub proj_w: usize,
    pub proj_b: usize,
    pub centers: usize,
    pub log_scales: usize,
    pub w_q: usize,
    pub keys: usize,
    pub experts: Vec<ExpertIds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeModel {
    pub config: MoeConfig,
    pub d_in: usize,
    pub store: ParamStore,
    pub layout: Layout,
}

#[derive(Debug, Clone)]
struct ExpertPass {
    expert: usize,
    hidden: Vec<f64>,
    log_pi: Vec<f64>,
    head: Vec<f64>,
    sigma: Vec<f64>,
    inside: Vec<bool>,
    mean: Vec<f64>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct Forward {
    z: Vec<f64>,
    inv_std: f64,
    log_w: Vec<f64>,
    q: Vec<f64>,
    pub gate: GateVector,
    experts: Vec<ExpertPass>,
}

impl Forward {
    pub fn latent(&self) -> &[f64] {
        &self.z
    }

    pub fn density(&self) -> MixtureDensity {
        let mut comps = Vec::new();
        for e in &self.experts {
            let g = self.gate.weights[e.expert];
            for c in 0..e.mean.len() {
                comps.push(Component {
                    weight: g * e.log_pi[c].exp(),
                    mean: e.mean[c],
                    sd: e.sigma[c],
                });
            }
        }
        MixtureDensity::new(comps)
    }

    /// Raw Δ (or free-mean) head outputs of the active experts.
    pub fn head_outputs(&self) -> Vec<f64> {
        self.experts.iter().flat_map(|e| e.head.iter().copied()).collect()
    }

    fn hash_branches<H: Hasher>(&self, floor: f64, h: &mut H) {
        self.gate.active.hash(h);
        for e in &self.experts {
            e.inside.hash(h);
        }
        for lw in &self.log_w {
            (*lw > floor).hash(h);
        }
    }
}

/// Objective value and its pieces for one batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveParts {
    pub total: f64,
    pub nll: f64,
    pub scale: f64,
    pub delta: f64,
    pub entropy: f64,
    pub load: f64,
    /// Mean gate per expert over the batch.
    pub usage: Vec<f64>,
    /// Hash of every discrete branch taken (top-k sets, clamp sides, floors).
    #[serde(skip)]
    pub signature: u64,
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

// Rows per parallel gradient chunk. Fixed so the reduction order does not
// depend on the thread count.
const GRAD_CHUNK: usize = 64;

impl MoeModel {
    /// Fresh parameters. Window centers are seeded by k-means++ over the
    /// initial projection of `latent_samples` when given, otherwise drawn
    /// from a standard normal.
    pub fn new(config: MoeConfig, d_in: usize, seed: u64, latent_samples: Option<&Matrix>) -> Result<Self> {
        config.validate()?;
        if d_in == 0 {
            return Err(Error::InvalidConfig("model needs at least one input feature".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dl, k, c, h, dr) = (
            config.latent_dim,
            config.n_experts,
            config.n_components,
            config.hidden,
            config.router_dim,
        );
        let mut store = ParamStore::new();
        let in_bound = 1.0 / (d_in as f64).sqrt();
        let proj_w = store.add("proj.w", &[dl, d_in], uniform_vec(&mut rng, dl * d_in, in_bound));
        let proj_b = store.add("proj.b", &[dl], uniform_vec(&mut rng, dl, in_bound));
        let centers = store.add("window.centers", &[k, dl], vec![0.0; k * dl]);
        let log_scales = store.add("window.log_scales", &[k, dl], vec![0.0; k * dl]);
        let w_q = store.add("router.w_q", &[dr, dl], uniform_vec(&mut rng, dr * dl, 1.0 / (dl as f64).sqrt()));
        let keys = store.add("router.keys", &[k, dr], uniform_vec(&mut rng, k * dr, 1.0 / (dr as f64).sqrt()));
        let h_bound = 1.0 / (h as f64).sqrt();
        let t_bias = (config.sigma_min * config.sigma_max).sqrt().ln();
        let mut experts = Vec::with_capacity(k);
        for j in 0..k {
            let w1 = store.add(format!("expert{j}.w1"), &[h, d_in], uniform_vec(&mut rng, h * d_in, in_bound));
            let b1 = store.add(format!("expert{j}.b1"), &[h], uniform_vec(&mut rng, h, in_bound));
            let w_pi = store.add(format!("expert{j}.pi.w"), &[c, h], uniform_vec(&mut rng, c * h, h_bound));
            let b_pi = store.add(format!("expert{j}.pi.b"), &[c], vec![0.0; c]);
            let (mu_w, mu_b) = match config.mode {
                CouplingMode::Free => (uniform_vec(&mut rng, c * h, h_bound), uniform_vec(&mut rng, c, h_bound)),
                _ => (vec![0.0; c * h], vec![0.0; c]),
            };
            let w_mu = store.add(format!("expert{j}.mu.w"), &[c, h], mu_w);
            let b_mu = store.add(format!("expert{j}.mu.b"), &[c], mu_b);
            let w_t = store.add(format!("expert{j}.t.w"), &[c, h], uniform_vec(&mut rng, c * h, h_bound));
            let b_t = store.add(format!("expert{j}.t.b"), &[c], vec![t_bias; c]);
            experts.push(ExpertIds {
                w1,
                b1,
                w_pi,
                b_pi,
                w_mu,
                b_mu,
                w_t,
                b_t,
            });
        }
        let mut model = MoeModel {
            config,
            d_in,
            store,
            layout: Layout {
                proj_w,
                proj_b,
                centers,
                log_scales,
                w_q,
                keys,
                experts,
            },
        };
        let init_centers = match latent_samples {
            Some(xs) if xs.rows() > 0 => {
                if xs.cols() != d_in {
                    return Err(Error::DimensionMismatch {
                        expected: d_in,
                        got: xs.cols(),
                    });
                }
                let latents: Vec<Vec<f64>> = xs.iter_rows().map(|r| model.project(r).0).collect();
                kmeans_pp(&latents, k, &mut rng)
            }
            _ => (0..k * dl).map(|_| StandardNormal.sample(&mut rng)).collect(),
        };
        model.store.value_mut(centers).copy_from_slice(&init_centers);
        Ok(model)
    }

    /// `z = LayerNorm(W_φ x + b_φ)` and the LayerNorm inverse std.
    pub fn project(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut a = vec![0.0; self.config.latent_dim];
        nn::dense_forward(self.store.value(self.layout.proj_w), self.store.value(self.layout.proj_b), x, &mut a);
        nn::layer_norm(&a, self.config.layer_norm_eps)
    }

    pub fn gates(&self, x: &[f64]) -> Result<GateVector> {
        self.check_input(x, None)?;
        let (z, _) = self.project(x);
        Ok(self.gates_from_latent(&z).0)
    }

    fn gates_from_latent(&self, z: &[f64]) -> (GateVector, Vec<f64>, Vec<f64>) {
        let cfg = &self.config;
        let (_, log_w) = window_log_weights(z, self.store.value(self.layout.centers), self.store.value(self.layout.log_scales));
        let (ell, q) = if cfg.use_router {
            router_logits(z, self.store.value(self.layout.w_q), self.store.value(self.layout.keys), cfg.router_dim, cfg.temperature)
        } else {
            (vec![0.0; cfg.n_experts], vec![0.0; cfg.router_dim])
        };
        let gate = fuse_gates(&log_w, &ell, cfg.top_k, cfg.smoothing, cfg.weight_floor, cfg.stab);
        (gate, log_w, q)
    }

    fn check_input(&self, x: &[f64], anchor: Option<f64>) -> Result<()> {
        if x.len() != self.d_in {
            return Err(Error::DimensionMismatch {
                expected: self.d_in,
                got: x.len(),
            });
        }
        if self.config.mode.needs_anchor() && anchor.is_none() {
            return Err(Error::InvalidConfig(format!("{:?} mode needs an anchor", self.config.mode)));
        }
        Ok(())
    }

    /// Forward pass for one expert: hidden activations, log mixing weights,
    /// raw mean head, clamped widths and effective means.
    fn expert_pass(&self, j: usize, x: &[f64], anchor: Option<f64>) -> ExpertPass {
        let cfg = &self.config;
        let ids = self.layout.experts[j];
        let s = &self.store;
        let mut hidden = vec![0.0; cfg.hidden];
        nn::dense_forward(s.value(ids.w1), s.value(ids.b1), x, &mut hidden);
        hidden.iter_mut().for_each(|v| *v = cfg.activation.apply(*v));
        let c = cfg.n_components;
        let mut logits = vec![0.0; c];
        let mut head = vec![0.0; c];
        let mut t = vec![0.0; c];
        nn::dense_forward(s.value(ids.w_pi), s.value(ids.b_pi), &hidden, &mut logits);
        nn::dense_forward(s.value(ids.w_mu), s.value(ids.b_mu), &hidden, &mut head);
        nn::dense_forward(s.value(ids.w_t), s.value(ids.b_t), &hidden, &mut t);
        let lse = nn::log_sum_exp(&logits).expect("finite logits");
        let log_pi = logits.iter().map(|l| l - lse).collect();
        let mut sigma = Vec::with_capacity(c);
        let mut inside = Vec::with_capacity(c);
        for tc in &t {
            let e = tc.exp();
            inside.push(e > cfg.sigma_min && e < cfg.sigma_max);
            sigma.push(e.clamp(cfg.sigma_min, cfg.sigma_max));
        }
        let mean = match cfg.mode {
            CouplingMode::AnchorDelta => {
                let a = anchor.expect("checked");
                head.iter().map(|d| a + d).collect()
            }
            CouplingMode::AnchorOnly => vec![anchor.expect("checked"); c],
            CouplingMode::Free => head.clone(),
        };
        ExpertPass {
            expert: j,
            hidden,
            log_pi,
            head,
            sigma,
            inside,
            mean,
        }
    }

    pub fn forward(&self, x: &[f64], anchor: Option<f64>) -> Result<Forward> {
        self.check_input(x, anchor)?;
        let (z, inv_std) = self.project(x);
        let (gate, log_w, q) = self.gates_from_latent(&z);
        let experts = gate.active.iter().map(|&j| self.expert_pass(j, x, anchor)).collect();
        Ok(Forward {
            z,
            inv_std,
            log_w,
            q,
            gate,
            experts,
        })
    }

    /// The `(π, μ_eff, σ)` triples of expert `j` regardless of gating.
    pub fn expert_forward(&self, j: usize, x: &[f64], anchor: Option<f64>) -> Result<Vec<(f64, f64, f64)>> {
        self.check_input(x, anchor)?;
        let e = self.expert_pass(j, x, anchor);
        Ok((0..self.config.n_components)
            .map(|c| (e.log_pi[c].exp(), e.mean[c], e.sigma[c]))
            .collect())
    }

    pub fn density(&self, x: &[f64], anchor: Option<f64>) -> Result<MixtureDensity> {
        Ok(self.forward(x, anchor)?.density())
    }

    fn anchor_at(&self, anchors: Option<&[f64]>, i: usize) -> Option<f64> {
        if self.config.mode.needs_anchor() {
            anchors.map(|a| a[i])
        } else {
            None
        }
    }

    fn check_batch(&self, x: &Matrix, anchors: Option<&[f64]>) -> Result<()> {
        if let Some(a) = anchors {
            if a.len() != x.rows() {
                return Err(Error::DimensionMismatch {
                    expected: x.rows(),
                    got: a.len(),
                });
            }
        }
        Ok(())
    }

    pub fn predict_densities(&self, x: &Matrix, anchors: Option<&[f64]>) -> Result<Vec<MixtureDensity>> {
        self.check_batch(x, anchors)?;
        (0..x.rows())
            .into_par_iter()
            .map(|i| self.density(x.row(i), self.anchor_at(anchors, i)))
            .collect()
    }

    /// Clamps the window log-scales into their allowed box.
    pub fn project_constraints(&mut self) {
        let (lo, hi) = (self.config.log_scale_min, self.config.log_scale_max);
        for v in self.store.value_mut(self.layout.log_scales) {
            *v = v.clamp(lo, hi);
        }
    }

    /// Router parameter count `|W_q| + |{k_j}|`.
    pub fn router_size(&self) -> usize {
        self.store.value(self.layout.w_q).len() + self.store.value(self.layout.keys).len()
    }

    /// Regularized objective over `rows`; accumulates its gradient into
    /// `grads` (laid out like `self.store`) when given.
    ///
    /// mean NLL + λ_s Σ‖log s‖² + λ_Δ mean(Δ²) + λ_ent mean(Σ ᾱ log ᾱ)
    /// + λ_load K Σ_j (mean ᾱ_j − 1/K)²
    pub fn objective(
        &self,
        x: &Matrix,
        anchors: Option<&[f64]>,
        y: &[f64],
        rows: &[usize],
        pen: &Penalties,
        grads: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<ObjectiveParts> {
        self.check_batch(x, anchors)?;
        if y.len() != x.rows() {
            return Err(Error::DimensionMismatch {
                expected: x.rows(),
                got: y.len(),
            });
        }
        if rows.is_empty() {
            return Err(Error::InvalidData("objective needs a non-empty batch".into()));
        }
        let cfg = &self.config;
        let n = rows.len() as f64;
        let kk = cfg.n_experts;
        let passes: Vec<Forward> = rows
            .par_iter()
            .map(|&r| self.forward(x.row(r), self.anchor_at(anchors, r)))
            .collect::<Result<_>>()?;

        let mut usage = vec![0.0; kk];
        let mut entropy = 0.0;
        let mut delta = 0.0;
        for p in &passes {
            for &j in &p.gate.active {
                let g = p.gate.weights[j];
                usage[j] += g;
                entropy += g * g.ln();
            }
            if cfg.mode == CouplingMode::AnchorDelta {
                let heads = p.head_outputs();
                delta += heads.iter().map(|d| d * d).sum::<f64>() / heads.len() as f64;
            }
        }
        usage.iter_mut().for_each(|u| *u /= n);
        entropy /= n;
        delta /= n;
        let uniform = 1.0 / kk as f64;
        let load = kk as f64 * usage.iter().map(|u| (u - uniform) * (u - uniform)).sum::<f64>();
        let log_s = self.store.value(self.layout.log_scales);
        let scale = log_s.iter().map(|v| v * v).sum::<f64>();
        let dgate_load: Vec<f64> = usage
            .iter()
            .map(|u| pen.load * kk as f64 * 2.0 * (u - uniform) / n)
            .collect();

        let want_grads = grads.is_some();
        let per_chunk: Vec<(f64, Option<Vec<Vec<f64>>>)> = rows
            .par_chunks(GRAD_CHUNK)
            .zip(passes.par_chunks(GRAD_CHUNK))
            .map(|(rs, ps)| {
                let mut local = want_grads.then(|| self.store.grad_buffers());
                let mut nll = 0.0;
                for (&r, p) in rs.iter().zip(ps) {
                    nll += self.sample_backward(
                        x.row(r),
                        y[r],
                        p,
                        n,
                        pen,
                        &dgate_load,
                        local.as_mut(),
                    )?;
                }
                Ok((nll, local))
            })
            .collect::<Result<_>>()?;
        let mut nll = 0.0;
        let mut grads = grads;
        for (v, g) in per_chunk {
            nll += v;
            if let (Some(dst), Some(src)) = (grads.as_deref_mut(), g) {
                for (a, b) in dst.iter_mut().zip(src) {
                    for (u, w) in a.iter_mut().zip(b) {
                        *u += w;
                    }
                }
            }
        }
        nll /= n;
        if let Some(dst) = grads {
            for (g, v) in dst[self.layout.log_scales].iter_mut().zip(log_s) {
                *g += 2.0 * pen.scale * v;
            }
        }
        let mut hasher = DefaultHasher::new();
        let floor = cfg.weight_floor.ln();
        for p in &passes {
            p.hash_branches(floor, &mut hasher);
        }
        let total = nll + pen.scale * scale + pen.delta * delta + pen.entropy * entropy + pen.load * load;
        Ok(ObjectiveParts {
            total,
            nll,
            scale,
            delta,
            entropy,
            load,
            usage,
            signature: hasher.finish(),
        })
    }

    /// Per-sample NLL; adds the gradient of (NLL + per-sample penalties)/n.
    #[allow(clippy::too_many_arguments)]
    fn sample_backward(
        &self,
        x: &[f64],
        y: f64,
        p: &Forward,
        n: f64,
        pen: &Penalties,
        dgate_load: &[f64],
        grads: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<f64> {
        let cfg = &self.config;
        let c_n = cfg.n_components;
        let mut terms = Vec::with_capacity(p.experts.len() * c_n);
        for e in &p.experts {
            let lg = p.gate.weights[e.expert].ln();
            for c in 0..c_n {
                terms.push(lg + e.log_pi[c] + stats::normal_log_pdf(y, e.mean[c], e.sigma[c]));
            }
        }
        let lse = nn::log_sum_exp(&terms)?;
        let Some(g) = grads else {
            return Ok(-lse);
        };
        let resp = nn::softmax(&terms);
        let s = &self.store;
        let n_heads = (p.experts.len() * c_n) as f64;
        let mut dgate = vec![0.0; cfg.n_experts];
        for (ei, e) in p.experts.iter().enumerate() {
            let j = e.expert;
            let ids = self.layout.experts[j];
            let gj = p.gate.weights[j];
            let r = &resp[ei * c_n..(ei + 1) * c_n];
            let dterm: Vec<f64> = r.iter().map(|v| -v / n).collect();
            let sum_dterm: f64 = dterm.iter().sum();
            dgate[j] += sum_dterm / gj + pen.entropy / n * (gj.ln() + 1.0) + dgate_load[j];

            let pi: Vec<f64> = e.log_pi.iter().map(|v| v.exp()).collect();
            let dlogits: Vec<f64> = (0..c_n).map(|c| dterm[c] - pi[c] * sum_dterm).collect();
            let mut dhead = vec![0.0; c_n];
            let mut dt = vec![0.0; c_n];
            for c in 0..c_n {
                let sd = e.sigma[c];
                let res = y - e.mean[c];
                let dmean = dterm[c] * res / (sd * sd);
                let dsd = dterm[c] * (-1.0 / sd + res * res / (sd * sd * sd));
                if e.inside[c] {
                    dt[c] = dsd * sd;
                }
                dhead[c] = match cfg.mode {
                    CouplingMode::AnchorDelta => dmean + pen.delta * 2.0 * e.head[c] / (n * n_heads),
                    CouplingMode::Free => dmean,
                    CouplingMode::AnchorOnly => 0.0,
                };
            }
            let mut dh = vec![0.0; cfg.hidden];
            {
                let (w_pi, w_mu, w_t) = (s.value(ids.w_pi), s.value(ids.w_mu), s.value(ids.w_t));
                let (gw, gb) = pair_mut(g, ids.w_pi, ids.b_pi);
                nn::dense_backward(w_pi, &e.hidden, &dlogits, gw, gb, Some(&mut dh));
                let (gw, gb) = pair_mut(g, ids.w_mu, ids.b_mu);
                nn::dense_backward(w_mu, &e.hidden, &dhead, gw, gb, Some(&mut dh));
                let (gw, gb) = pair_mut(g, ids.w_t, ids.b_t);
                nn::dense_backward(w_t, &e.hidden, &dt, gw, gb, Some(&mut dh));
            }
            let dpre: Vec<f64> = dh
                .iter()
                .zip(&e.hidden)
                .map(|(d, h)| d * cfg.activation.derivative_from_output(*h))
                .collect();
            let (gw, gb) = pair_mut(g, ids.w1, ids.b1);
            nn::dense_backward(s.value(ids.w1), x, &dpre, gw, gb, None);
        }

        // Gate sparsification and smoothing; the mask itself is constant.
        let alpha = &p.gate.alpha;
        let mass: f64 = p.gate.active.iter().map(|&j| alpha[j]).sum::<f64>() + cfg.stab;
        let cross: f64 = p.gate.active.iter().map(|&j| dgate[j] * alpha[j]).sum::<f64>() / (mass * mass);
        let mut dalpha = vec![0.0; cfg.n_experts];
        for &j in &p.gate.active {
            dalpha[j] = (1.0 - cfg.smoothing) * (dgate[j] / mass - cross);
        }
        let dlogits = nn::softmax_backward(alpha, &dalpha);

        // Window weights behind the floor.
        let floor = cfg.weight_floor.ln();
        let dlogw: Vec<f64> = dlogits
            .iter()
            .zip(&p.log_w)
            .map(|(d, lw)| if *lw > floor { *d } else { 0.0 })
            .collect();
        let sum_dlogw: f64 = dlogw.iter().sum();
        let dl = cfg.latent_dim;
        let mut dz = vec![0.0; dl];
        {
            let centers = s.value(self.layout.centers);
            let log_s = s.value(self.layout.log_scales);
            let (gc, gs) = pair_mut(g, self.layout.centers, self.layout.log_scales);
            for j in 0..cfg.n_experts {
                let draw = dlogw[j] - p.log_w[j].exp() * sum_dlogw;
                if draw == 0.0 {
                    continue;
                }
                for l in 0..dl {
                    let idx = j * dl + l;
                    let inv = (-log_s[idx]).exp();
                    let u = (p.z[l] - centers[idx]) * inv;
                    dz[l] -= draw * u * inv;
                    gc[idx] += draw * u * inv;
                    gs[idx] += draw * u * u;
                }
            }
        }

        if cfg.use_router {
            let dr = cfg.router_dim;
            let coef = 1.0 / ((dr as f64).sqrt() * cfg.temperature);
            let keys = s.value(self.layout.keys);
            let mut dq = vec![0.0; dr];
            {
                let gk = &mut g[self.layout.keys];
                for j in 0..cfg.n_experts {
                    let dj = dlogits[j] * coef;
                    if dj == 0.0 {
                        continue;
                    }
                    for m in 0..dr {
                        gk[j * dr + m] += dj * p.q[m];
                        dq[m] += dj * keys[j * dr + m];
                    }
                }
            }
            let mut unused_bias = vec![0.0; dr];
            nn::dense_backward(s.value(self.layout.w_q), &p.z, &dq, &mut g[self.layout.w_q], &mut unused_bias, Some(&mut dz));
        }

        let da = nn::layer_norm_backward(&p.z, p.inv_std, &dz);
        let (gw, gb) = pair_mut(g, self.layout.proj_w, self.layout.proj_b);
        nn::dense_backward(s.value(self.layout.proj_w), x, &da, gw, gb, None);
        Ok(-lse)
    }
}

/// Two distinct mutable gradient buffers, `a < b`.
fn pair_mut(g: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a < b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// k-means++ seeding over `points`; each chosen center gets a tiny jitter so
/// that duplicated latents still yield distinct centers.
fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = points[0].len();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..points.len())].clone());
    let mut dist2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, w) in dist2.iter().enumerate() {
                if u < *w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (dd, p) in dist2.iter_mut().zip(points) {
            *dd = dd.min(sq_dist(p, &c));
        }
        centers.push(c);
    }
    let mut flat = Vec::with_capacity(k * d);
    for c in centers {
        for v in c {
            let jitter: f64 = StandardNormal.sample(rng);
            flat.push(v + 1e-2 * jitter);
        }
    }
    flat
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

//! Optimization of the MoE objective and the two-phase schedule: pick the
//! best epoch count on a validation fold, then retrain from that checkpoint
//! on the merged fold for exactly that many epochs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Matrix;
use crate::error::{Error, Result};
use crate::gbdt::argmin_first;
use crate::moe::{MoeModel, ObjectiveParts, Penalties};
use crate::nn::{AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Datasets up to this many rows train full-batch.
    pub full_batch_max: usize,
    pub batch_size: usize,
    pub penalties: Penalties,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 400,
            full_batch_max: 2048,
            batch_size: 256,
            penalties: Penalties::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "need learning_rate > 0, max_epochs >= 1 and batch_size >= 1".into(),
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Standardized inputs, z-scored anchors and z-scored targets for one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldData {
    pub x: Matrix,
    pub anchor: Option<Vec<f64>>,
    pub y: Vec<f64>,
}

impl FoldData {
    pub fn new(x: Matrix, anchor: Option<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if y.len() != x.rows() || anchor.as_ref().is_some_and(|a| a.len() != x.rows()) {
            return Err(Error::DimensionMismatch {
                expected: x.rows(),
                got: y.len(),
            });
        }
        if x.rows() == 0 {
            return Err(Error::InvalidData("empty fold".into()));
        }
        Ok(FoldData { x, anchor, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn anchors(&self) -> Option<&[f64]> {
        self.anchor.as_deref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Regularized objective averaged over the epoch's batches (pre-step).
    pub train_objective: f64,
    pub train_nll: f64,
    pub va_nll: Option<f64>,
    pub scale: f64,
    pub delta: f64,
    pub entropy: f64,
    pub load: f64,
    pub usage: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    /// Number of optimization epochs recorded (the epoch-0 row is not one).
    pub fn epochs_run(&self) -> usize {
        self.records.iter().filter(|r| r.epoch > 0).count()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let k = self.records.first().map_or(0, |r| r.usage.len());
        let mut header: Vec<String> = ["epoch", "train_objective", "train_nll", "va_nll", "scale", "delta", "entropy", "load"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..k).map(|j| format!("usage_{j}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                r.train_objective.to_string(),
                r.train_nll.to_string(),
                r.va_nll.map_or(String::new(), |v| v.to_string()),
                r.scale.to_string(),
                r.delta.to_string(),
                r.entropy.to_string(),
                r.load.to_string(),
            ];
            row.extend(r.usage.iter().map(|u| u.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<trace>".into(),
            source: e,
        })?;
        Ok(())
    }
}

/// Mean NLL of `data` under `model` (no penalties, no gradient).
pub fn evaluate_nll(model: &MoeModel, data: &FoldData) -> Result<f64> {
    let rows: Vec<usize> = (0..data.len()).collect();
    Ok(model
        .objective(&data.x, data.anchors(), &data.y, &rows, &Penalties::none(), None)?
        .nll)
}

fn record_from(epoch: usize, parts: &[(ObjectiveParts, usize)], va_nll: Option<f64>) -> EpochRecord {
    let total: usize = parts.iter().map(|(_, n)| n).sum();
    let avg = |f: &dyn Fn(&ObjectiveParts) -> f64| parts.iter().map(|(p, n)| f(p) * *n as f64).sum::<f64>() / total as f64;
    let k = parts[0].0.usage.len();
    let usage = (0..k).map(|j| avg(&|p: &ObjectiveParts| p.usage[j])).collect();
    EpochRecord {
        epoch,
        train_objective: avg(&|p| p.total),
        train_nll: avg(&|p| p.nll),
        va_nll,
        scale: avg(&|p| p.scale),
        delta: avg(&|p| p.delta),
        entropy: avg(&|p| p.entropy),
        load: avg(&|p| p.load),
        usage,
    }
}

/// Record for an epoch without a validation score.
pub fn record_summary(epoch: usize, parts: &[(ObjectiveParts, usize)]) -> EpochRecord {
    record_from(epoch, parts, None)
}

/// Drives epochs over one fold with a persistent optimizer and shuffle stream.
pub struct Trainer<'a> {
    data: &'a FoldData,
    config: TrainConfig,
    adam: AdamState,
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &MoeModel, data: &'a FoldData, config: TrainConfig, stream: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        Ok(Trainer {
            data,
            config,
            adam: AdamState::new(&model.store, config.adam()),
            rng,
            order: (0..data.len()).collect(),
        })
    }

    fn batches(&mut self) -> Vec<Vec<usize>> {
        if self.data.len() <= self.config.full_batch_max {
            return vec![self.order.clone()];
        }
        self.order.shuffle(&mut self.rng);
        self.order.chunks(self.config.batch_size).map(|c| c.to_vec()).collect()
    }

    /// One pass over the fold; returns each batch's pre-step objective.
    pub fn epoch(&mut self, model: &mut MoeModel, epoch: usize) -> Result<Vec<(ObjectiveParts, usize)>> {
        let mut out = Vec::new();
        for batch in self.batches() {
            let mut grads = model.store.grad_buffers();
            let parts = model.objective(
                &self.data.x,
                self.data.anchors(),
                &self.data.y,
                &batch,
                &self.config.penalties,
                Some(&mut grads),
            )?;
            if !parts.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("objective is {}", parts.total),
                });
            }
            model.store.zero_grad();
            model.store.accumulate_grads(&grads);
            self.adam.step(&mut model.store).map_err(|e| Error::Divergence {
                epoch,
                detail: e.to_string(),
            })?;
            model.project_constraints();
            out.push((parts, batch.len()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Phase1Result {
    pub best_epoch: usize,
    pub checkpoint: MoeModel,
    pub trace: TrainTrace,
}

/// Trains on `tr` for `max_epochs`, scoring `va` before training and after
/// every epoch. The best epoch may be 0 (the initialization); ties go to the
/// earlier epoch.
pub fn train_phase1(tr: &FoldData, va: &FoldData, init: &MoeModel, config: &TrainConfig) -> Result<Phase1Result> {
    let mut model = init.clone();
    let mut trainer = Trainer::new(&model, tr, *config, 1)?;
    let mut trace = TrainTrace::default();
    let rows: Vec<usize> = (0..tr.len()).collect();
    let init_parts = model.objective(&tr.x, tr.anchors(), &tr.y, &rows, &config.penalties, None)?;
    let va0 = evaluate_nll(&model, va)?;
    trace.records.push(record_from(0, &[(init_parts, tr.len())], Some(va0)));
    let mut va_curve = vec![va0];
    let mut checkpoint = model.clone();
    for epoch in 1..=config.max_epochs {
        let parts = trainer.epoch(&mut model, epoch)?;
        let va_nll = evaluate_nll(&model, va)?;
        if !va_nll.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("validation NLL is {va_nll}"),
            });
        }
        trace.records.push(record_from(epoch, &parts, Some(va_nll)));
        let best_so_far = va_curve.iter().copied().fold(f64::INFINITY, f64::min);
        if va_nll < best_so_far {
            checkpoint = model.clone();
        }
        va_curve.push(va_nll);
    }
    let best_epoch = argmin_first(&va_curve).expect("non-empty curve");
    Ok(Phase1Result {
        best_epoch,
        checkpoint,
        trace,
    })
}

/// Continues from `checkpoint` with a fresh optimizer for exactly `epochs`
/// epochs on `tv`.
pub fn train_phase2(tv: &FoldData, checkpoint: &MoeModel, epochs: usize, config: &TrainConfig) -> Result<(MoeModel, TrainTrace)> {
    let mut model = checkpoint.clone();
    let mut trainer = Trainer::new(&model, tv, *config, 2)?;
    let mut trace = TrainTrace::default();
    for epoch in 1..=epochs {
        let parts = trainer.epoch(&mut model, epoch)?;
        trace.records.push(record_from(epoch, &parts, None));
    }
    Ok((model, trace))
}

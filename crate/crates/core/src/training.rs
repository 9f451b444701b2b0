//! Normalization, loss, optimization, and best-checkpoint selection.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::SnapshotSample;
use crate::error::{Error, Result};
use crate::evaluation::{predict_counts, MapeAccumulator};
use crate::hiam::{EncoderInput, Hiam, ModelConfig, Session};
use crate::nncore::{load_checkpoint, save_checkpoint, ParameterSet, Tape, Var};
use crate::topology::MetroGraph;

pub const STD_FLOOR: f64 = 1e-6;

/// Global Z-score statistics for the OD family (IOD, UOD, OD) and for DO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub od_mean: f64,
    pub od_std: f64,
    pub do_mean: f64,
    pub do_std: f64,
}

#[derive(Default)]
struct Moments {
    count: usize,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn add(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            self.count += 1;
            self.sum += v;
            self.sum_sq += v * v;
        }
    }

    fn finish(&self) -> (f64, f64) {
        if self.count == 0 {
            return (0.0, STD_FLOOR);
        }
        let mean = self.sum / self.count as f64;
        let var = (self.sum_sq / self.count as f64 - mean * mean).max(0.0);
        (mean, var.sqrt().max(STD_FLOOR))
    }
}

/// Fits statistics on the matrices reachable from `samples`, counting each
/// shared matrix once.
pub fn fit_norm_stats(samples: &[SnapshotSample]) -> Result<NormStats> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no training samples to fit normalization".into()));
    }
    let mut seen = HashSet::new();
    let mut od = Moments::default();
    let mut do_ = Moments::default();
    let mut fresh = |p: *const ()| seen.insert(p as usize);
    for s in samples {
        for step in &s.inputs {
            if fresh(Arc::as_ptr(&step.observed) as *const ()) {
                let o = &step.observed;
                od.add(o.iod.iter().chain(o.uod_long.iter()).chain(o.uod_short.iter()).copied());
            }
            if fresh(Arc::as_ptr(&step.do_) as *const ()) {
                do_.add(step.do_.iter().copied());
            }
        }
        for t in &s.targets {
            if fresh(Arc::as_ptr(&t.od) as *const ()) {
                od.add(t.od.iter().copied());
            }
            if fresh(Arc::as_ptr(&t.do_) as *const ()) {
                do_.add(t.do_.iter().copied());
            }
        }
    }
    let (od_mean, od_std) = od.finish();
    let (do_mean, do_std) = do_.finish();
    Ok(NormStats { od_mean, od_std, do_mean, do_std })
}

/// The transform actually applied: the mean snapped to a `2^-24` grid and the
/// standard deviation rounded to a power of two. Both operations are then exact
/// in binary floating point, so counts survive a normalize/denormalize round
/// trip bit for bit.
fn affine(mean: f64, std: f64) -> (f64, f64) {
    const GRID: f64 = (1u64 << 24) as f64;
    ((mean * GRID).round() / GRID, 2f64.powi(std.log2().round() as i32))
}

fn forward(a: &Array2<f64>, (shift, scale): (f64, f64)) -> Array2<f64> {
    a.mapv(|v| (v - shift) / scale)
}

fn inverse(a: &Array2<f64>, (shift, scale): (f64, f64)) -> Array2<f64> {
    a.mapv(|v| v * scale + shift)
}

impl NormStats {
    pub fn od_transform(&self) -> (f64, f64) {
        affine(self.od_mean, self.od_std)
    }

    pub fn do_transform(&self) -> (f64, f64) {
        affine(self.do_mean, self.do_std)
    }

    pub fn normalize_od(&self, a: &Array2<f64>) -> Array2<f64> {
        forward(a, self.od_transform())
    }

    pub fn normalize_do(&self, a: &Array2<f64>) -> Array2<f64> {
        forward(a, self.do_transform())
    }

    pub fn denormalize_od(&self, a: &Array2<f64>) -> Array2<f64> {
        inverse(a, self.od_transform())
    }

    pub fn denormalize_do(&self, a: &Array2<f64>) -> Array2<f64> {
        inverse(a, self.do_transform())
    }
}

/// Normalized encoder inputs of one sample. The raw unfinished-order vector
/// uses the OD-family statistics.
pub fn prepare_inputs(sample: &SnapshotSample, norm: &NormStats) -> Vec<EncoderInput> {
    sample
        .inputs
        .iter()
        .map(|step| {
            let o = &step.observed;
            let u = o.u.view().insert_axis(ndarray::Axis(1)).to_owned();
            EncoderInput {
                iod: norm.normalize_od(&o.iod),
                u: norm.normalize_od(&u),
                uod_long: norm.normalize_od(&o.uod_long),
                uod_short: norm.normalize_od(&o.uod_short),
                do_: norm.normalize_do(&step.do_),
            }
        })
        .collect()
}

/// A sample with normalized inputs and targets, ready for repeated passes.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub inputs: Vec<EncoderInput>,
    pub od_targets: Vec<Array2<f64>>,
    pub do_targets: Vec<Array2<f64>>,
}

pub fn prepare(samples: &[SnapshotSample], norm: &NormStats) -> Vec<PreparedSample> {
    samples
        .par_iter()
        .map(|s| PreparedSample {
            inputs: prepare_inputs(s, norm),
            od_targets: s.targets.iter().map(|t| norm.normalize_od(&t.od)).collect(),
            do_targets: s.targets.iter().map(|t| norm.normalize_do(&t.do_)).collect(),
        })
        .collect()
}

fn mean_abs(preds: &[ArrayView2<f64>], targets: &[ArrayView2<f64>]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Dimension(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in preds.iter().zip(targets) {
        if p.dim() != t.dim() {
            return Err(Error::Dimension(format!("prediction {:?} vs target {:?}", p.dim(), t.dim())));
        }
        sum += p.iter().zip(t.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += p.len();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Mean absolute error over horizons and entries, OD and DO weighted equally.
pub fn mae_loss(
    od_preds: &[ArrayView2<f64>],
    do_preds: &[ArrayView2<f64>],
    od_targets: &[ArrayView2<f64>],
    do_targets: &[ArrayView2<f64>],
) -> Result<f64> {
    Ok(0.5 * mean_abs(od_preds, od_targets)? + 0.5 * mean_abs(do_preds, do_targets)?)
}

/// The same loss recorded on a tape. Horizons share a shape, so the mean of
/// per-horizon means equals the pooled mean.
pub fn mae_loss_var(tape: &mut Tape, od: &[Var], do_: &[Var], od_t: &[Array2<f64>], do_t: &[Array2<f64>]) -> Var {
    let mut terms = Vec::with_capacity(od.len() + do_.len());
    for (preds, targets) in [(od, od_t), (do_, do_t)] {
        for (&p, t) in preds.iter().zip(targets) {
            let t = tape.constant(t.clone());
            terms.push(tape.mean_abs_diff(p, t));
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    tape.scale(total, 0.5 / od.len() as f64)
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients(model: &Hiam, graph: &MetroGraph, sample: &PreparedSample) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut session: Session<'_> = model.session(graph)?;
    let (od, do_) = session.run(&sample.inputs)?;
    let loss = mae_loss_var(&mut session.tape, &od, &do_, &sample.od_targets, &sample.do_targets);
    let value = session.tape.scalar(loss);
    let grads = session.tape.backward(loss);
    Ok((value, model.params().gradients(&grads, session.param_vars())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// `lr = base * factor^floor(epoch / every)`.
    StepDecay,
    /// Constant for `hold_epochs`, then step decay counted from the end of the hold.
    HoldThenDecay { hold_epochs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            epochs: 300,
            base_lr: 1e-3,
            decay_factor: 0.2,
            decay_every_epochs: 20,
            schedule: LrSchedule::StepDecay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.decay_every_epochs == 0 {
            return Err(Error::Config("batch_size, epochs and decay_every_epochs must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.decay_factor > 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config("learning rate must be >= 0, decay factor and epsilon > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam moment decays must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let decays = match self.schedule {
            LrSchedule::StepDecay => epoch / self.decay_every_epochs,
            LrSchedule::HoldThenDecay { hold_epochs } if epoch < hold_epochs => 0,
            LrSchedule::HoldThenDecay { hold_epochs } => 1 + (epoch - hold_epochs) / self.decay_every_epochs,
        };
        self.base_lr * self.decay_factor.powi(decays as i32)
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ParameterSet, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<_> = params.values().iter().map(|v| Array2::zeros(v.dim())).collect();
        Self { beta1, beta2, epsilon, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn update(&mut self, params: &mut ParameterSet, grads: &[Array2<f64>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mape_od_mean: Option<f64>,
    pub val_mape_do_mean: Option<f64>,
}

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("step,epoch,train_loss,val_mape_od_mean,val_mape_do_mean\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            r.epoch,
            r.train_loss,
            cell(r.val_mape_od_mean),
            cell(r.val_mape_do_mean)
        );
    }
    out
}

pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize().enumerate() {
        rows.push(rec.map_err(|e: csv::Error| Error::parse(path, i + 2, e.to_string()))?);
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation score.
    pub best: Hiam,
    pub best_epoch: usize,
    /// Mean of the OD and DO validation MAPE at `best_epoch`.
    pub best_score: f64,
    /// Parameters after the last step.
    pub last: ParameterSet,
    pub history: Vec<HistoryRow>,
}

/// Mean validation MAPE over horizons for OD and DO.
pub fn validation_mape(
    model: &Hiam,
    graph: &MetroGraph,
    norm: &NormStats,
    samples: &[SnapshotSample],
) -> Result<(Option<f64>, Option<f64>)> {
    let m = model.config().m;
    let forecasts = predict_counts(model, graph, norm, samples)?;
    let mut od = MapeAccumulator::new(m);
    let mut do_ = MapeAccumulator::new(m);
    for (f, s) in forecasts.iter().zip(samples) {
        for (h, t) in s.targets.iter().enumerate() {
            od.add(h, f.od[h].view(), t.od.view());
            do_.add(h, f.do_[h].view(), t.do_.view());
        }
    }
    Ok((od.mean(), do_.mean()))
}

/// Trains a freshly initialized model (seeded by `cfg.seed`) and keeps the
/// parameters with the best validation MAPE.
pub fn train(
    model_cfg: &ModelConfig,
    graph: &MetroGraph,
    train_samples: &[SnapshotSample],
    val_samples: &[SnapshotSample],
    norm: &NormStats,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_from(Hiam::new(model_cfg.clone(), cfg.seed)?, graph, train_samples, val_samples, norm, cfg)
}

pub fn train_from(
    mut model: Hiam,
    graph: &MetroGraph,
    train_samples: &[SnapshotSample],
    val_samples: &[SnapshotSample],
    norm: &NormStats,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_samples.is_empty() {
        return Err(Error::InsufficientData("training split has no samples".into()));
    }
    if val_samples.is_empty() {
        return Err(Error::InsufficientData("validation split has no samples".into()));
    }
    let prepared = prepare(train_samples, norm);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(model.params(), cfg.beta1, cfg.beta2, cfg.epsilon);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParameterSet)> = None;
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|max| step >= max) {
                break 'epochs;
            }
            // Per-sample results are collected in batch order, so the sum is
            // independent of thread scheduling.
            let results: Vec<(f64, Vec<Array2<f64>>)> = batch
                .par_iter()
                .map(|&i| sample_gradients(&model, graph, &prepared[i]))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            let mut grads: Vec<Array2<f64>> = model.params().values().iter().map(|v| Array2::zeros(v.dim())).collect();
            for (l, g) in &results {
                loss += l;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    *acc += gi;
                }
            }
            loss *= scale;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, epoch, loss });
            }
            grads.iter_mut().for_each(|g| *g *= scale);
            adam.update(model.params_mut(), &grads, lr);
            history.push(HistoryRow { step, epoch, train_loss: loss, val_mape_od_mean: None, val_mape_do_mean: None });
            step += 1;
        }

        let (od, do_) = validation_mape(&model, graph, norm, val_samples)?;
        if let Some(last) = history.last_mut() {
            last.val_mape_od_mean = od;
            last.val_mape_do_mean = do_;
        }
        let score = match (od, do_) {
            (Some(a), Some(b)) => 0.5 * (a + b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => f64::INFINITY,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e}, train loss {:.5}, val MAPE od {:?} do {:?}",
            history.last().map_or(f64::NAN, |r| r.train_loss),
            od,
            do_
        );
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, model.params().clone()));
        }
    }

    let last = model.params().clone();
    let (best_score, best_epoch, params) = best.unwrap_or((f64::INFINITY, 0, last.clone()));
    let best_model = Hiam::with_params(model.config().clone(), params)?;
    Ok(TrainOutcome { best: best_model, best_epoch, best_score, last, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub norm: NormStats,
    pub epoch: usize,
    pub val_score: Option<f64>,
}

pub fn save_model(path: &Path, model: &Hiam, norm: &NormStats, epoch: usize, val_score: f64) -> Result<()> {
    let manifest = CheckpointManifest {
        model: model.config().clone(),
        norm: *norm,
        epoch,
        val_score: val_score.is_finite().then_some(val_score),
    };
    let json = serde_json::to_value(&manifest).expect("manifest serializes");
    save_checkpoint(path, &json, model.params())
}

pub fn load_model(path: &Path) -> Result<(Hiam, CheckpointManifest)> {
    let (json, params) = load_checkpoint(path)?;
    let manifest: CheckpointManifest =
        serde_json::from_value(json).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let model = Hiam::with_params(manifest.model.clone(), params)?;
    Ok((model, manifest))
}

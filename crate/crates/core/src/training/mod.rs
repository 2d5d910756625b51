//! Losses, Adam, the training and evaluation loops, checkpoints and the
//! gradient verification suite.

mod checkpoint;
mod gradcheck;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{destandardize, WindowDataset};
use crate::error::{shape_err, Error, Result};
use crate::model::{ChannelStats, ModeModel};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{check_gradients, gradient_check_suite, GradCheckReport, ParamCheck};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_reg: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 10,
            lambda_reg: 0.01,
            early_stop_patience: 5,
            seed: 0,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return fail(format!("lr: must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!("betas: must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps: must be positive, got {}", self.eps));
        }
        if !(self.lambda_reg >= 0.0) {
            return fail(format!("lambda_reg: must be ≥ 0, got {}", self.lambda_reg));
        }
        if self.batch_size == 0 {
            return fail("batch_size: must be at least 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail(format!("clip_norm: must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Mean squared error over `H·V` per sample, averaged over the batch.
pub fn loss_pred(g: &mut Graph, yhat: Var, y: Var) -> Result<Var> {
    let diff = g.sub(yhat, y)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// `λ·Σₜ ‖h_t − h_{t−1}‖²` over `hidden: [B×L×d]`, averaged over the batch.
pub fn loss_reg(g: &mut Graph, hidden: Var, lambda: f64) -> Result<Var> {
    let s = g.shape(hidden).to_vec();
    if s.len() != 3 {
        return shape_err("loss_reg", format!("hidden {s:?}"));
    }
    if s[1] < 2 || lambda == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let d = g.time_diff(hidden)?;
    let sq = g.square(d);
    let total = g.sum(sq);
    Ok(g.scale(total, lambda / s[0] as f64))
}

pub fn loss_total(g: &mut Graph, pred: Var, reg: Var) -> Result<Var> {
    g.add(pred, reg)
}

/// Adam moments, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, after optional global-norm clipping.
/// Returns the gradient norm before clipping.
pub fn adam_step(store: &mut ParamStore, opt: &mut OptimState, cfg: &TrainConfig) -> f64 {
    let norm = store.grad_norm();
    let scale = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    opt.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(opt.step as i32);
    for ((p, m), v) in store.iter_mut().zip(&mut opt.m).zip(&mut opt.v) {
        if !p.trainable {
            continue;
        }
        let (pv, g) = (p.value.data_mut(), p.grad.data());
        for i in 0..g.len() {
            let gi = g[i] * scale;
            let mi = &mut m.data_mut()[i];
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            let mhat = *mi / bc1;
            let vi = &mut v.data_mut()[i];
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let vhat = *vi / bc2;
            pv[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    norm
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub seconds: f64,
    /// State-transition multiply-adds spent in this epoch's forwards.
    pub op_count: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub optim: OptimState,
    pub stopped_early: bool,
}

/// Loss of one batch on a fresh graph; returns `(graph, loss, pred_loss, op_count)`.
fn batch_loss(model: &ModeModel, x: Tensor, y: Tensor, dt: Option<&Tensor>, lambda: f64) -> Result<(Graph, Var, u64)> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let yv = g.constant(y);
    let f = model.forward(&mut g, xv, dt)?;
    let lp = loss_pred(&mut g, f.pred, yv)?;
    let loss = match f.hidden {
        Some(h) if lambda > 0.0 => {
            let lr = loss_reg(&mut g, h, lambda)?;
            loss_total(&mut g, lp, lr)?
        }
        _ => lp,
    };
    Ok((g, loss, f.counter.transition_macs + f.counter.dense_transition_macs))
}

/// Trains `model` in place on standardized windows and leaves it holding
/// the best-by-validation weights (by training loss without `val`).
pub fn train(
    model: &mut ModeModel,
    train_set: &WindowDataset,
    val: Option<&WindowDataset>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut opt = OptimState::new(&model.store);
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ops) = (0.0, 0u64);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y, dt) = train_set.batch(chunk);
            let (g, loss, n_ops) = batch_loss(model, x, y, dt.as_ref(), cfg.lambda_reg)?;
            let lv = g.scalar(loss).map_err(|e| Error::Diverged {
                step: opt.step as usize,
                batch: bi,
                msg: format!("epoch {epoch}: {e}"),
            })?;
            model.store.zero_grads();
            g.backward(loss, &mut model.store)?;
            let gn = adam_step(&mut model.store, &mut opt, cfg);
            if !gn.is_finite() {
                return Err(Error::Diverged {
                    step: opt.step as usize,
                    batch: bi,
                    msg: format!("epoch {epoch}: gradient norm {gn}"),
                });
            }
            loss_sum += lv * chunk.len() as f64;
            ops += n_ops;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let (val_mse, val_mae) = match val {
            Some(v) if !v.is_empty() => {
                let m = evaluate(model, v)?;
                (m.window_mse, m.window_mae)
            }
            _ => (f64::NAN, f64::NAN),
        };
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_mse,
            val_mae,
            seconds: started.elapsed().as_secs_f64(),
            op_count: ops,
        };
        on_epoch(&rec);
        records.push(rec);
        let metric = if val_mse.is_finite() { val_mse } else { train_loss };
        if best.as_ref().is_none_or(|(b, _, _)| metric < *b) {
            best = Some((metric, epoch, model.store.iter().map(|p| p.value.clone()).collect()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_metric, best_epoch) = match best {
        Some((m, e, values)) => {
            for (p, v) in model.store.iter_mut().zip(values) {
                p.value = v;
            }
            (Some(m), Some(e))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        records,
        best_epoch,
        best_metric,
        optim: opt,
        stopped_early,
    })
}

/// Forecast errors on three scales.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Raw-scale error divided by the training split's per-channel std.
    pub mse: f64,
    pub mae: f64,
    /// De-normalized predictions against raw targets.
    pub raw_mse: f64,
    pub raw_mae: f64,
    /// On the per-window standardized scale the model works in.
    pub window_mse: f64,
    pub window_mae: f64,
}

/// `(mse, mae)` of `pred` against `target`, each channel's error divided by
/// `scale[c]` when given.
pub fn error_metrics(pred: &Tensor, target: &Tensor, scale: Option<&[f64]>) -> Result<(f64, f64)> {
    if pred.shape() != target.shape() {
        return shape_err("error_metrics", format!("{:?} vs {:?}", pred.shape(), target.shape()));
    }
    if pred.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    let v = pred.last_dim();
    let (mut se, mut ae) = (0.0, 0.0);
    for (i, (p, t)) in pred.data().iter().zip(target.data()).enumerate() {
        let e = (p - t) / scale.map_or(1.0, |s| s[i % v]);
        se += e * e;
        ae += e.abs();
    }
    let n = pred.len() as f64;
    Ok((se / n, ae / n))
}

/// Predictions `[M×H×V]` on the dataset's (standardized) scale.
pub fn predict_dataset(model: &ModeModel, ds: &WindowDataset, batch: usize) -> Result<Tensor> {
    let mut out = Vec::with_capacity(ds.targets.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _, dt) = ds.batch(chunk);
        out.extend_from_slice(model.predict(&x, dt.as_ref())?.data());
    }
    Tensor::new(ds.targets.shape().to_vec(), out)
}

pub fn evaluate(model: &ModeModel, ds: &WindowDataset) -> Result<EvalMetrics> {
    if ds.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let pred = predict_dataset(model, ds, 256)?;
    let (window_mse, window_mae) = error_metrics(&pred, &ds.targets, None)?;
    let (raw_pred, raw_target) = match &ds.stats {
        Some(st) => (destandardize(&pred, st)?, destandardize(&ds.targets, st)?),
        None => (pred, ds.targets.clone()),
    };
    let (raw_mse, raw_mae) = error_metrics(&raw_pred, &raw_target, None)?;
    let (mse, mae) = match &model.norm_stats {
        Some(ChannelStats { std, .. }) => error_metrics(&raw_pred, &raw_target, Some(std))?,
        None => (raw_mse, raw_mae),
    };
    Ok(EvalMetrics {
        mse,
        mae,
        raw_mse,
        raw_mae,
        window_mse,
        window_mae,
    })
}

/// Mean over windows of `Σₜ ‖h_t − h_{t−1}‖²` for the last scanning block.
pub fn hidden_roughness(model: &ModeModel, ds: &WindowDataset) -> Result<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(256) {
        let (x, _, dt) = ds.batch(chunk);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let f = model.forward(&mut g, xv, dt.as_ref())?;
        let h = f.hidden.ok_or_else(|| Error::Config("model has no scanning block".into()))?;
        let r = loss_reg(&mut g, h, chunk.len() as f64)?;
        total += g.scalar(r)?;
    }
    Ok(total / ds.len().max(1) as f64)
}

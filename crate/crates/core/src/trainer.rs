//! Adam, forecast metrics and the epoch loop with early stopping.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Role, SampleBatch, Splits};
use crate::embedding::StepTime;
use crate::error::{Error, Result};
use crate::model::HstMixer;
use crate::tensor::{save_checkpoint, ParamStore, Scalar, Tape, Tensor};

/// Targets below this magnitude are left out of MAPE.
pub const MAPE_FLOOR: f64 = 0.1;
pub const DEFAULT_CLIP: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(DEFAULT_CLIP),
        }
    }
}

/// Moment buffers, one per parameter in store order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<S: Scalar>(store: &ParamStore<S>, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Adam {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update from the gradients held in `store`.
    /// Parameters without a gradient are left alone. Returns the gradient
    /// norm before clipping.
    pub fn step<S: Scalar>(&mut self, store: &mut ParamStore<S>) -> Result<f64> {
        if store.len() != self.m.len() {
            return Err(Error::invalid("adam", "parameter store changed since construction"));
        }
        let mut sq = 0.0f64;
        for (_, name, t) in store.iter() {
            if let Some(g) = t.grad() {
                for &x in g {
                    let x = x.as_f64();
                    if !x.is_finite() {
                        return Err(Error::Numeric(format!("non-finite gradient in {name}")));
                    }
                    sq += x * x;
                }
            }
        }
        let norm = sq.sqrt();
        let factor = match self.cfg.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let AdamConfig {
            lr, beta1, beta2, eps, ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            let Some(g) = t.grad().map(|g| g.iter().map(|x| x.as_f64() * factor).collect::<Vec<_>>()) else {
                continue;
            };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                *p = S::of(p.as_f64() - update);
            }
        }
        Ok(norm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HorizonMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
    /// Index `j` covers forecast step `j + 1`.
    pub horizons: Vec<HorizonMetrics>,
}

/// Running sums for [`Metrics`] over `[B, N, T_pred]` batches, accumulated
/// in a fixed order.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    abs: Vec<f64>,
    sq: Vec<f64>,
    ape: Vec<f64>,
    count: Vec<usize>,
    ape_count: Vec<usize>,
}

impl MetricAccumulator {
    pub fn new(horizon: usize) -> Self {
        MetricAccumulator {
            abs: vec![0.0; horizon],
            sq: vec![0.0; horizon],
            ape: vec![0.0; horizon],
            count: vec![0; horizon],
            ape_count: vec![0; horizon],
        }
    }

    pub fn push<S: Scalar, T: Scalar>(&mut self, pred: &Tensor<S>, target: &Tensor<T>) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::shape("metrics", pred.shape(), target.shape()));
        }
        let h = self.abs.len();
        if pred.shape().last() != Some(&h) {
            return Err(Error::shape("metrics", pred.shape(), &[h]));
        }
        for (i, (p, y)) in pred.data().iter().zip(target.data()).enumerate() {
            let j = i % h;
            let (p, y) = (p.as_f64(), y.as_f64());
            let e = (p - y).abs();
            self.abs[j] += e;
            self.sq[j] += e * e;
            self.count[j] += 1;
            if y.abs() >= MAPE_FLOOR {
                self.ape[j] += e / y.abs();
                self.ape_count[j] += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<Metrics> {
        let total: usize = self.count.iter().sum();
        if total == 0 {
            return Err(Error::Data("no samples to evaluate".into()));
        }
        let ratio = |s: f64, c: usize| if c == 0 { 0.0 } else { s / c as f64 };
        let horizons = (0..self.abs.len())
            .map(|j| HorizonMetrics {
                mae: ratio(self.abs[j], self.count[j]),
                rmse: ratio(self.sq[j], self.count[j]).sqrt(),
                mape: 100.0 * ratio(self.ape[j], self.ape_count[j]),
            })
            .collect();
        let sum = |v: &[f64]| v.iter().sum::<f64>();
        Ok(Metrics {
            mae: sum(&self.abs) / total as f64,
            rmse: (sum(&self.sq) / total as f64).sqrt(),
            mape: 100.0 * ratio(sum(&self.ape), self.ape_count.iter().sum()),
            horizons,
        })
    }
}

pub fn metrics<S: Scalar, T: Scalar>(pred: &Tensor<S>, target: &Tensor<T>) -> Result<Metrics> {
    let h = *pred.shape().last().unwrap_or(&0);
    let mut acc = MetricAccumulator::new(h);
    acc.push(pred, target)?;
    acc.finish()
}

fn cast_batch<S: Scalar>(b: &SampleBatch) -> (Tensor<S>, Tensor<S>) {
    (b.x.cast(), b.y.cast())
}

/// Metrics of the model's de-normalised forecasts over every window of a
/// split.
pub fn evaluate<S: Scalar>(model: &HstMixer<S>, splits: &Splits, role: Role, batch_size: usize) -> Result<Metrics> {
    let cfg = model.config();
    let (t, tp) = (cfg.input_steps, cfg.output_steps);
    let starts = splits.windows(role, t, tp, 1)?;
    let mut acc = MetricAccumulator::new(tp);
    for chunk in starts.chunks(batch_size.max(1)) {
        let b = splits.batch(chunk, t, tp);
        let (x, _) = cast_batch::<S>(&b);
        let pred = model.predict(&x, &b.times)?;
        acc.push(&pred, &b.y)?;
    }
    acc.finish()
}

/// Mean training objective over a split without updating anything.
pub fn mean_loss<S: Scalar>(model: &HstMixer<S>, splits: &Splits, role: Role, batch_size: usize) -> Result<f64> {
    let cfg = model.config();
    let (t, tp) = (cfg.input_steps, cfg.output_steps);
    let starts = splits.windows(role, t, tp, 1)?;
    let (mut sum, mut weight) = (0.0, 0usize);
    for chunk in starts.chunks(batch_size.max(1)) {
        let b = splits.batch(chunk, t, tp);
        let (x, y) = cast_batch::<S>(&b);
        let mut tape = Tape::new();
        let state = model.forward(&mut tape, &x, &b.times)?;
        let loss = model.net.loss(&mut tape, &state, &y)?;
        sum += tape.item(loss.total).as_f64() * chunk.len() as f64;
        weight += chunk.len();
    }
    Ok(sum / weight.max(1) as f64)
}

/// Forward, backward and one optimiser update on a single batch. Returns
/// the loss before the update.
pub fn train_step<S: Scalar>(
    model: &mut HstMixer<S>,
    adam: &mut Adam,
    x: &Tensor<S>,
    y: &Tensor<S>,
    times: &[StepTime],
) -> Result<f64> {
    let mut tape = Tape::new();
    let state = model.net.forward(&mut tape, &model.params, x, times)?;
    let loss = model.net.loss(&mut tape, &state, y)?;
    let value = tape.item(loss.total).as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value}")));
    }
    let grads = tape.backward(loss.total)?;
    model.params.absorb_grads(&tape, &grads);
    adam.step(&mut model.params)?;
    model.params.zero_grads();
    Ok(value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Offset between consecutive training windows.
    pub stride: usize,
    /// Where the best parameters are written, if anywhere.
    pub checkpoint: Option<PathBuf>,
    /// Tab-separated per-epoch log.
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            patience: 5,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
            stride: 1,
            checkpoint: None,
            log: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 0 is the untrained state.
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Metrics,
    pub seconds: f64,
}

impl EpochLog {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
            self.epoch, self.train_loss, self.val.mae, self.val.rmse, self.val.mape, self.seconds
        )
    }
}

pub const LOG_HEADER: &str = "epoch\ttrain_loss\tval_mae\tval_rmse\tval_mape\tseconds";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept; 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub steps: u64,
    pub stopped_early: bool,
}

/// Trains on the training windows, tracking validation MAE. The model ends
/// up holding the best parameters seen. Its de-normalisation is taken from
/// `splits`.
pub fn train(model: &mut HstMixer<f32>, splits: &Splits, cfg: &TrainConfig) -> Result<TrainReport> {
    let (t, tp) = (model.config().input_steps, model.config().output_steps);
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    model.set_normalization(&splits.norm.mean, &splits.norm.std)?;
    let mut log = match &cfg.log {
        Some(p) => {
            let mut f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
            writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(p, e))?;
            Some((f, p))
        }
        None => None,
    };
    let mut emit = |entry: &EpochLog| -> Result<()> {
        if let Some((f, p)) = log.as_mut() {
            writeln!(f, "{}", entry.tsv()).map_err(|e| Error::io(p.as_path(), e))?;
        }
        Ok(())
    };

    let mut starts = splits.windows(Role::Train, t, tp, cfg.stride)?;
    let clock = Instant::now();
    let initial = EpochLog {
        epoch: 0,
        train_loss: mean_loss(model, splits, Role::Train, cfg.batch_size)?,
        val: evaluate(model, splits, Role::Val, cfg.batch_size)?,
        seconds: clock.elapsed().as_secs_f64(),
    };
    emit(&initial)?;
    let mut report = TrainReport {
        best_epoch: 0,
        best_val_mae: initial.val.mae,
        epochs: vec![initial],
        steps: 0,
        stopped_early: false,
    };
    let mut best: Option<ParamStore<f32>> = None;
    let mut adam = Adam::new(&model.params, cfg.adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        let clock = Instant::now();
        starts.shuffle(&mut rng);
        let (mut sum, mut weight) = (0.0, 0usize);
        for chunk in starts.chunks(cfg.batch_size) {
            let b = splits.batch(chunk, t, tp);
            let loss = match train_step(model, &mut adam, &b.x, &b.y, &b.times) {
                Ok(v) => v,
                Err(Error::Numeric(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        last_good: (epoch > 1).then(|| epoch - 1),
                    })
                }
                Err(e) => return Err(e),
            };
            sum += loss * chunk.len() as f64;
            weight += chunk.len();
        }
        let val = evaluate(model, splits, Role::Val, cfg.batch_size)?;
        if !val.mae.is_finite() {
            return Err(Error::Diverged {
                epoch,
                last_good: (epoch > 1).then(|| epoch - 1),
            });
        }
        let entry = EpochLog {
            epoch,
            train_loss: sum / weight as f64,
            val,
            seconds: clock.elapsed().as_secs_f64(),
        };
        emit(&entry)?;
        // The untrained state never counts as the best epoch.
        let improved = best.is_none() || entry.val.mae < report.best_val_mae;
        if improved {
            report.best_epoch = epoch;
            report.best_val_mae = entry.val.mae;
            best = Some(model.params.clone());
            if let Some(p) = &cfg.checkpoint {
                save_checkpoint(&model.params, p)?;
            }
            stale = 0;
        } else {
            stale += 1;
        }
        report.epochs.push(entry);
        report.steps = adam.steps();
        if cfg.patience > 0 && stale >= cfg.patience {
            report.stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    match best {
        Some(params) => model.params = params,
        None => {
            if let Some(p) = &cfg.checkpoint {
                save_checkpoint(&model.params, p)?;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests;

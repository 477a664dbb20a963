//! Joint training over the three tasks.
//!
//! Batches are drawn from a mixed pool, per-task losses are combined with
//! dynamic weights (epoch-wise softmax over loss descent ratios), and
//! parameters follow a decoupled-weight-decay adaptive-moment update under a
//! warmup + cosine learning-rate schedule.
//!
//! Everything is deterministic: batch streams are addressed by
//! `(seed, epoch, step)`, gradient accumulation runs over a fixed number of
//! chunks in index order, so a run is bit-reproducible for any worker count
//! and can resume from a checkpoint mid-way without drift.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{batch_gradients, BatchGradients, ModelConfig, ModelParams, Scalar};
use crate::rng::{self, Domain};
use crate::sequence::{mixed_batch_sampler, IclSequence, Task, TaskPools};

/// Number of tasks sharing the model.
pub const N_TASKS: usize = 3;
/// Gradient accumulation chunks; fixed so the reduction order never depends
/// on the thread count.
const GRAD_CHUNKS: usize = 4;

/// Which loss positions contribute to training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// Every demonstration prefix (the default).
    AllPositions,
    /// Only the final query position.
    FinalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub dwa_temperature: f64,
    pub task_proportions: [f64; 3],
    /// Demonstrations per precoding training sequence.
    pub train_shots: usize,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss_mode: LossMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 50,
            steps_per_epoch: 100,
            peak_lr: 3e-4,
            min_lr: 1e-5,
            warmup_steps: 200,
            weight_decay: 0.01,
            dwa_temperature: 2.0,
            task_proportions: [1.0, 1.0, 1.0],
            train_shots: 8,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss_mode: LossMode::AllPositions,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.steps_per_epoch < 1 {
            return Err(Error::config("batch_size and steps_per_epoch must be >= 1"));
        }
        if self.epochs > 0 && self.warmup_steps >= self.total_steps() {
            return Err(Error::config("warmup_steps must be below the total step count"));
        }
        if !(self.dwa_temperature > 0.0) {
            return Err(Error::config("dwa_temperature must be positive"));
        }
        let sum: f64 = self.task_proportions.iter().sum();
        if !(sum > 0.0) || self.task_proportions.iter().any(|&p| p < 0.0) {
            return Err(Error::config("task proportions must be non-negative and sum > 0"));
        }
        if !(self.peak_lr >= 0.0 && self.min_lr >= 0.0 && self.grad_clip > 0.0) {
            return Err(Error::config("rates must be non-negative, grad_clip positive"));
        }
        Ok(())
    }
}

/// Dynamic task weights from per-epoch loss histories: before two completed
/// epochs all weights are one; afterwards `w = n * softmax(r / temperature)`
/// with `r_t = L_t(e-1) / L_t(e-2)`. Degenerate histories (zero, negative or
/// non-finite losses) contribute a neutral ratio of one.
pub fn dwa_weights(loss_history: &[Vec<f64>], temperature: f64) -> Vec<f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    let n = loss_history.len();
    if n == 0 {
        return Vec::new();
    }
    if loss_history.iter().any(|h| h.len() < 2) {
        return vec![1.0; n];
    }
    let ratios: Vec<f64> = loss_history
        .iter()
        .map(|h| {
            let last = h[h.len() - 1];
            let prev = h[h.len() - 2];
            let r = last / prev;
            if last <= 0.0 || prev <= 0.0 || !r.is_finite() {
                log::warn!("degenerate loss history (last={last}, prev={prev}); using ratio 1");
                1.0
            } else {
                r
            }
        })
        .collect();
    let exps: Vec<f64> = ratios.iter().map(|r| (r / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| n as f64 * e / total).collect()
}

/// Warmup + cosine schedule: linear `0 -> peak` over `warmup_steps`, then
/// cosine from `peak` down to `min_lr` at the final step.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps();
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = total.saturating_sub(cfg.warmup_steps).max(1);
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    cfg.min_lr
        + (cfg.peak_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// Full training state: parameters, optimizer moments, counters and the
/// per-task loss record driving the dynamic weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Scalar> {
    pub params: ModelParams<T>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub step: usize,
    pub epoch: usize,
    /// Per-epoch mean loss per task, `loss_history[epoch][task]`.
    pub loss_history: Vec<[f64; 3]>,
    pub dwa_weights: [f64; 3],
    /// Token normalization scalars per task (recorded for evaluation).
    pub norm_scales: [f64; 3],
    /// SNR points present in the precoding training data.
    pub train_snrs_db: Vec<f64>,
    epoch_loss_sum: [f64; 3],
    epoch_loss_count: [usize; 3],
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model_cfg: &ModelConfig, seed: u64, pools: &TaskPools) -> Result<Self> {
        let params = ModelParams::init(model_cfg, seed)?;
        let n = params.n_params();
        let mut snrs: Vec<f64> = pools.p1.snrs_db.clone();
        snrs.extend_from_slice(&pools.p2.snrs_db);
        snrs.sort_by(f64::total_cmp);
        snrs.dedup();
        Ok(TrainState {
            params,
            adam_m: vec![T::zero(); n],
            adam_v: vec![T::zero(); n],
            step: 0,
            epoch: 0,
            loss_history: Vec::new(),
            dwa_weights: [1.0; 3],
            norm_scales: [pools.p1.scale, pools.p2.scale, pools.p3.scale],
            train_snrs_db: snrs,
            epoch_loss_sum: [0.0; 3],
            epoch_loss_count: [0; 3],
        })
    }

    /// Rebuilds a state from checkpointed pieces.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        params: ModelParams<T>,
        adam_m: Vec<T>,
        adam_v: Vec<T>,
        step: usize,
        epoch: usize,
        loss_history: Vec<[f64; 3]>,
        dwa_weights: [f64; 3],
        norm_scales: [f64; 3],
        train_snrs_db: Vec<f64>,
    ) -> Self {
        TrainState {
            params,
            adam_m,
            adam_v,
            step,
            epoch,
            loss_history,
            dwa_weights,
            norm_scales,
            train_snrs_db,
            epoch_loss_sum: [0.0; 3],
            epoch_loss_count: [0; 3],
        }
    }
}

/// Per-epoch summary emitted by [`train_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: [f64; 3],
    pub dwa_weights: [f64; 3],
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

/// One optimization step on a mixed batch: total loss is the dynamic-weighted
/// sum of per-task batch means (absent tasks are skipped), followed by a
/// clipped adaptive-moment update with decoupled weight decay at
/// `lr_schedule(step)`.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &[IclSequence],
    cfg: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::config("batch must be non-empty"));
    }
    let trimmed: Vec<IclSequence>;
    let batch = match cfg.loss_mode {
        LossMode::AllPositions => batch,
        LossMode::FinalOnly => {
            trimmed = batch
                .iter()
                .map(|s| {
                    let mut s = s.clone();
                    s.loss_positions = vec![s.query_position()];
                    s
                })
                .collect();
            &trimmed
        }
    };

    // Weight each sequence so the total is sum_t w_t * mean(task t losses).
    let mut task_counts = [0usize; 3];
    for seq in batch {
        task_counts[seq.task.index()] += 1;
    }
    let weights: Vec<f64> = batch
        .iter()
        .map(|seq| {
            let t = seq.task.index();
            state.dwa_weights[t] / task_counts[t] as f64
        })
        .collect();

    // Fixed chunking keeps the accumulation order independent of threads.
    let chunk_size = batch.len().div_ceil(GRAD_CHUNKS);
    let results: Vec<Result<BatchGradients<T>>> = batch
        .par_chunks(chunk_size)
        .zip(weights.par_chunks(chunk_size))
        .map(|(seqs, w)| batch_gradients(seqs, w, &state.params))
        .collect();

    let n = state.params.n_params();
    let mut grad = vec![T::zero(); n];
    let mut total_loss = 0.0;
    let mut seq_idx = 0usize;
    for res in results {
        let part = match res {
            Ok(p) => p,
            Err(e) => {
                // Find the offending sequence for the report.
                for (off, seq) in batch[seq_idx..].iter().enumerate() {
                    if crate::model::gradients(seq, &state.params).is_err() {
                        return Err(Error::Solver(format!(
                            "non-finite loss at batch sequence {} ({e})",
                            seq_idx + off
                        )));
                    }
                }
                return Err(e);
            }
        };
        for (g, p) in grad.iter_mut().zip(part.grad.iter()) {
            *g += *p;
        }
        total_loss += part.total_loss.as_f64();
        for loss in &part.per_seq_loss {
            let l = loss.as_f64();
            if !l.is_finite() {
                return Err(Error::Solver(format!(
                    "non-finite loss at batch sequence {seq_idx}"
                )));
            }
            let t = batch[seq_idx].task.index();
            state.epoch_loss_sum[t] += l;
            state.epoch_loss_count[t] += 1;
            seq_idx += 1;
        }
    }
    if !total_loss.is_finite() {
        return Err(Error::non_finite("batch loss"));
    }

    adamw_update(state, &grad, lr_schedule(state.step, cfg), cfg);
    state.step += 1;
    Ok(total_loss)
}

fn adamw_update<T: Scalar>(state: &mut TrainState<T>, grad: &[T], lr: f64, cfg: &TrainConfig) {
    let norm_sq: f64 = grad.iter().map(|&g| g.as_f64() * g.as_f64()).sum();
    let clip = if norm_sq.sqrt() > cfg.grad_clip {
        cfg.grad_clip / norm_sq.sqrt()
    } else {
        1.0
    };
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_m_b1, one_m_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let clip_t = T::from_f64(clip);
    let inv_bc1 = T::from_f64(1.0 / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(cfg.adam_eps);
    let lr_t = T::from_f64(lr);
    let wd = T::from_f64(lr * cfg.weight_decay);
    for i in 0..grad.len() {
        let g = grad[i] * clip_t;
        state.adam_m[i] = b1 * state.adam_m[i] + one_m_b1 * g;
        state.adam_v[i] = b2 * state.adam_v[i] + one_m_b2 * g * g;
        let m_hat = state.adam_m[i] * inv_bc1;
        let v_hat = state.adam_v[i] * inv_bc2;
        let p = state.params.data[i];
        state.params.data[i] = p - lr_t * (m_hat / (v_hat.sqrt() + eps)) - wd * p;
    }
}

/// Runs `epochs x steps_per_epoch` steps from the given state (supports
/// resuming: pass a checkpointed state and the remaining epochs run with
/// identical batches). Dynamic weights update at every epoch start;
/// `on_epoch` fires after each epoch with the fresh record, which is the
/// hook for CSV logging and checkpointing.
pub fn train_with<T: Scalar>(
    state: &mut TrainState<T>,
    pools: &TaskPools,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState<T>, &EpochRecord) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    for task in Task::ALL {
        let len = match task {
            Task::P1 => pools.p1.len(),
            Task::P2 => pools.p2.len(),
            Task::P3 => pools.p3.len(),
        };
        if cfg.task_proportions[task.index()] > 0.0 && len == 0 {
            return Err(Error::config(format!(
                "task {} has positive proportion but an empty dataset",
                task.name()
            )));
        }
    }

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let history: Vec<Vec<f64>> = (0..N_TASKS)
            .map(|t| state.loss_history.iter().map(|e| e[t]).collect())
            .collect();
        let w = dwa_weights(&history, cfg.dwa_temperature);
        state.dwa_weights = [w[0], w[1], w[2]];
        state.epoch_loss_sum = [0.0; 3];
        state.epoch_loss_count = [0; 3];

        let mut lr_last = 0.0;
        for s in 0..cfg.steps_per_epoch {
            let mut stream =
                rng::stream(Domain::Sampler, cfg.seed, &[epoch as u64, s as u64]);
            let batch = mixed_batch_sampler(
                pools,
                cfg.batch_size,
                cfg.train_shots,
                cfg.task_proportions,
                &mut stream,
            )?;
            lr_last = lr_schedule(state.step, cfg);
            train_step(state, &batch, cfg)?;
        }

        let mut task_loss = [f64::NAN; 3];
        for t in 0..N_TASKS {
            if state.epoch_loss_count[t] > 0 {
                task_loss[t] = state.epoch_loss_sum[t] / state.epoch_loss_count[t] as f64;
            }
        }
        state.loss_history.push(task_loss);
        state.epoch += 1;
        let record = EpochRecord {
            epoch,
            task_loss,
            dwa_weights: state.dwa_weights,
            lr: lr_last,
        };
        on_epoch(state, &record)?;
    }
    Ok(())
}

/// [`train_with`] without an epoch hook.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    pools: &TaskPools,
    cfg: &TrainConfig,
) -> Result<()> {
    train_with(state, pools, cfg, |_, _| Ok(()))
}

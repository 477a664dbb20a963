//! Token packing and in-context sequence assembly.
//!
//! Complex matrices become real token vectors (`[vec(Re); vec(Im)]`, column
//! major), and tasks become alternating input/label sequences:
//!
//! - Precoding (`P1`/`P2`): `x_1, y_1, ..., x_l, y_l, x_{l+1}` — `l`
//!   demonstration pairs followed by the query channel. The query's own label
//!   is carried out of band (`query_target`) so it can never leak into the
//!   prompt.
//! - Prediction (`P3`): overlapping slot pairs `s_0, s_1, s_1, s_2, ...,
//!   s_{T-1}, s_T`; each pair maps one slot to the next, and the final pair
//!   is the query.
//!
//! The loss is evaluated at every input position (the prefix objective), so
//! one stored sequence trains all shot counts at once.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use crate::channel::ChannelSample;
use crate::error::{Error, Result};

/// The three tasks sharing one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Task {
    /// Weighted sum-rate precoding.
    P1,
    /// Max-min SINR balancing precoding.
    P2,
    /// Next-slot channel prediction.
    P3,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::P1, Task::P2, Task::P3];

    pub fn index(self) -> usize {
        match self {
            Task::P1 => 0,
            Task::P2 => 1,
            Task::P3 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::P1 => "P1",
            Task::P2 => "P2",
            Task::P3 => "P3",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P1" | "p1" => Ok(Task::P1),
            "P2" | "p2" => Ok(Task::P2),
            "P3" | "p3" => Ok(Task::P3),
            other => Err(Error::config(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Input,
    Label,
}

/// One real-valued token.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub values: Vec<f64>,
    pub role: TokenRole,
}

/// A task-tagged alternating token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct IclSequence {
    pub task: Task,
    pub tokens: Vec<Token>,
    /// Demonstration pairs for `P1`/`P2`; slot pairs for `P3`.
    pub shots: usize,
    /// Positions whose model output is compared against the next label.
    pub loss_positions: Vec<usize>,
    /// Label for the final loss position when it is not part of `tokens`
    /// (precoding sequences end at the query input).
    pub query_target: Option<Vec<f64>>,
}

impl IclSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.first().map_or(0, |t| t.values.len())
    }

    /// Index of the query input (always the last loss position).
    pub fn query_position(&self) -> usize {
        *self.loss_positions.last().expect("sequences have loss positions")
    }

    /// Regression target for a loss position: the following label token, or
    /// the out-of-band query target at the final position.
    pub fn target_for(&self, position: usize) -> Option<&[f64]> {
        if position + 1 < self.tokens.len() {
            Some(&self.tokens[position + 1].values)
        } else {
            self.query_target.as_deref()
        }
    }

    /// True when every loss position has a target (required for training).
    pub fn fully_labeled(&self) -> bool {
        self.loss_positions.iter().all(|&p| self.target_for(p).is_some())
    }
}

/// Packs a complex matrix into `[vec(Re X); vec(Im X)]`, column major.
pub fn pack_complex(x: &DMatrix<Complex64>) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(2 * n);
    out.extend(x.iter().map(|c| c.re));
    out.extend(x.iter().map(|c| c.im));
    out
}

/// Exact inverse of [`pack_complex`].
pub fn unpack_complex(values: &[f64], n_t: usize, k_users: usize) -> Result<DMatrix<Complex64>> {
    let n = n_t * k_users;
    if values.len() != 2 * n {
        return Err(Error::shape(format!(
            "packed length {} does not match 2*{n_t}*{k_users}",
            values.len()
        )));
    }
    let (re, im) = values.split_at(n);
    Ok(DMatrix::from_fn(n_t, k_users, |i, j| {
        let idx = j * n_t + i;
        Complex64::new(re[idx], im[idx])
    }))
}

fn scaled_token(values: Vec<f64>, role: TokenRole, scale: f64) -> Token {
    let inv = 1.0 / scale;
    Token {
        values: values.into_iter().map(|v| v * inv).collect(),
        role,
    }
}

/// Builds an `l`-shot precoding sequence from solved demonstration pairs and
/// a query channel. All tokens are divided by `scale`. The query's label, if
/// known, goes to `query_target` (scaled as well) rather than the prompt.
pub fn build_precoding_sequence(
    task: Task,
    demos: &[(DMatrix<Complex64>, DMatrix<Complex64>)],
    query: &DMatrix<Complex64>,
    query_label: Option<&DMatrix<Complex64>>,
    scale: f64,
) -> Result<IclSequence> {
    if task == Task::P3 {
        return Err(Error::Sequence("precoding sequences are P1 or P2".into()));
    }
    if !(scale > 0.0) {
        return Err(Error::Sequence("normalization scale must be positive".into()));
    }
    let shape = query.shape();
    let mut tokens = Vec::with_capacity(2 * demos.len() + 1);
    for (h, w) in demos {
        if h.shape() != shape || w.shape() != shape {
            return Err(Error::Sequence(format!(
                "demo shape {:?}/{:?} differs from query shape {:?}",
                h.shape(),
                w.shape(),
                shape
            )));
        }
        tokens.push(scaled_token(pack_complex(h), TokenRole::Input, scale));
        tokens.push(scaled_token(pack_complex(w), TokenRole::Label, scale));
    }
    tokens.push(scaled_token(pack_complex(query), TokenRole::Input, scale));
    let loss_positions = (0..tokens.len()).step_by(2).collect();
    Ok(IclSequence {
        task,
        tokens,
        shots: demos.len(),
        loss_positions,
        query_target: query_label
            .map(|w| scaled_token(pack_complex(w), TokenRole::Label, scale).values),
    })
}

/// Builds the full prediction sequence from a trajectory: one overlapping
/// pair per slot transition, the last pair being the query. `T` history
/// slots give `2T` tokens and `T` loss positions.
pub fn build_prediction_sequence(history: &ChannelSample, scale: f64) -> Result<IclSequence> {
    let pairs = history.history.len().saturating_sub(1);
    build_prediction_sequence_with_pairs(history, pairs, scale)
}

/// As [`build_prediction_sequence`], keeping only the last `pairs` slot
/// transitions (the final one is the query; the preceding `pairs - 1` act as
/// demonstrations).
pub fn build_prediction_sequence_with_pairs(
    history: &ChannelSample,
    pairs: usize,
    scale: f64,
) -> Result<IclSequence> {
    if history.history.len() < 2 {
        return Err(Error::Sequence(
            "prediction needs at least two slots of history".into(),
        ));
    }
    if !(scale > 0.0) {
        return Err(Error::Sequence("normalization scale must be positive".into()));
    }
    if pairs < 1 || pairs + 1 > history.history.len() {
        return Err(Error::Sequence(format!(
            "cannot take {pairs} slot pairs from {} slots",
            history.history.len()
        )));
    }
    let start = history.history.len() - pairs - 1;
    let slots = &history.history[start..];
    let mut tokens = Vec::with_capacity(2 * pairs);
    for w in slots.windows(2) {
        tokens.push(scaled_token(pack_complex(&w[0]), TokenRole::Input, scale));
        tokens.push(scaled_token(pack_complex(&w[1]), TokenRole::Label, scale));
    }
    let loss_positions = (0..tokens.len()).step_by(2).collect();
    Ok(IclSequence {
        task: Task::P3,
        tokens,
        shots: pairs,
        loss_positions,
        query_target: None,
    })
}

/// A labeled pool of precoding instances demonstrations are drawn from.
/// Demonstrations must match the query's SNR: the channel token does not
/// encode the noise level, so the context is the only way the model can see
/// it.
#[derive(Debug, Clone)]
pub struct PrecodingPool {
    pub task: Task,
    pub channels: Vec<DMatrix<Complex64>>,
    /// Solver outputs after exact-power projection.
    pub labels: Vec<DMatrix<Complex64>>,
    pub snrs_db: Vec<f64>,
    /// Per-dataset token normalization scalar.
    pub scale: f64,
    groups: BTreeMap<i64, Vec<usize>>,
}

fn snr_key(snr_db: f64) -> i64 {
    (snr_db * 1e6).round() as i64
}

impl PrecodingPool {
    pub fn new(
        task: Task,
        channels: Vec<DMatrix<Complex64>>,
        labels: Vec<DMatrix<Complex64>>,
        snrs_db: Vec<f64>,
        scale: f64,
    ) -> Result<Self> {
        if task == Task::P3 {
            return Err(Error::Sequence("precoding pools are P1 or P2".into()));
        }
        if channels.len() != labels.len() || channels.len() != snrs_db.len() {
            return Err(Error::Sequence("pool fields must have equal length".into()));
        }
        let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, &snr) in snrs_db.iter().enumerate() {
            groups.entry(snr_key(snr)).or_default().push(i);
        }
        Ok(PrecodingPool {
            task,
            channels,
            labels,
            snrs_db,
            scale,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Indices sharing the sample's SNR.
    pub fn snr_group(&self, snr_db: f64) -> &[usize] {
        self.groups.get(&snr_key(snr_db)).map_or(&[], Vec::as_slice)
    }

    /// Label token for sample `i`: the stored precoder rescaled to Frobenius
    /// norm `sqrt(n_t * k_users)`. Regression targets are therefore beam
    /// directions with unit per-entry RMS — the same scale at every SNR and
    /// the same scale as the channel tokens — and the exact power returns at
    /// inference through the final projection.
    pub fn label_direction(&self, i: usize) -> DMatrix<Complex64> {
        let p_max = 10f64.powf(self.snrs_db[i] / 10.0);
        let entries = self.labels[i].len() as f64;
        &self.labels[i] * Complex64::new((entries / p_max).sqrt(), 0.0)
    }

    /// Assembles a sequence for query index `q` with `shots` distinct
    /// demonstrations drawn from the same-SNR group, never including the
    /// query itself (repeats would leak a later target into the prompt).
    pub fn sequence_for_query<R: Rng>(
        &self,
        q: usize,
        shots: usize,
        rng: &mut R,
        with_target: bool,
    ) -> Result<IclSequence> {
        let group = self.snr_group(self.snrs_db[q]);
        if group.len() <= shots {
            return Err(Error::Sequence(format!(
                "SNR group of sample {q} has {} entries, too small for {shots} demonstrations",
                group.len()
            )));
        }
        let mut chosen = Vec::with_capacity(shots);
        while chosen.len() < shots {
            let cand = group[rng.gen_range(0..group.len())];
            if cand != q && !chosen.contains(&cand) {
                chosen.push(cand);
            }
        }
        let demos: Vec<_> = chosen
            .iter()
            .map(|&i| (self.channels[i].clone(), self.label_direction(i)))
            .collect();
        let target = if with_target {
            Some(self.label_direction(q))
        } else {
            None
        };
        build_precoding_sequence(
            self.task,
            &demos,
            &self.channels[q],
            target.as_ref(),
            self.scale,
        )
    }
}

/// A pool of channel trajectories for the prediction task.
#[derive(Debug, Clone)]
pub struct PredictionPool {
    pub samples: Vec<ChannelSample>,
    pub scale: f64,
}

impl PredictionPool {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// The three task pools a training run draws from.
#[derive(Debug, Clone)]
pub struct TaskPools {
    pub p1: PrecodingPool,
    pub p2: PrecodingPool,
    pub p3: PredictionPool,
}

impl TaskPools {
    fn pool_len(&self, task: Task) -> usize {
        match task {
            Task::P1 => self.p1.len(),
            Task::P2 => self.p2.len(),
            Task::P3 => self.p3.len(),
        }
    }
}

/// Draws a mixed-task batch. Tasks are sampled per sequence with the given
/// proportions; precoding sequences get `shots` demonstrations, prediction
/// sequences use their full history. Fully deterministic under the caller's
/// stream.
pub fn mixed_batch_sampler<R: Rng>(
    pools: &TaskPools,
    batch_size: usize,
    shots: usize,
    proportions: [f64; 3],
    rng: &mut R,
) -> Result<Vec<IclSequence>> {
    if batch_size < 1 {
        return Err(Error::Sequence("batch_size must be >= 1".into()));
    }
    let total: f64 = proportions.iter().sum();
    if !(total > 0.0) || proportions.iter().any(|&p| p < 0.0) {
        return Err(Error::Sequence(
            "task proportions must be non-negative and sum > 0".into(),
        ));
    }
    for task in Task::ALL {
        if proportions[task.index()] > 0.0 && pools.pool_len(task) == 0 {
            return Err(Error::Sequence(format!(
                "task {} requested but its dataset is empty",
                task.name()
            )));
        }
    }

    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let draw: f64 = rng.gen_range(0.0..total);
        let task = if draw < proportions[0] {
            Task::P1
        } else if draw < proportions[0] + proportions[1] {
            Task::P2
        } else {
            Task::P3
        };
        let seq = match task {
            Task::P1 => {
                let q = rng.gen_range(0..pools.p1.len());
                pools.p1.sequence_for_query(q, shots, rng, true)?
            }
            Task::P2 => {
                let q = rng.gen_range(0..pools.p2.len());
                pools.p2.sequence_for_query(q, shots, rng, true)?
            }
            Task::P3 => {
                let s = rng.gen_range(0..pools.p3.len());
                build_prediction_sequence(&pools.p3.samples[s], pools.p3.scale)?
            }
        };
        batch.push(seq);
    }
    Ok(batch)
}

/// RMS of the real and imaginary channel entries, the per-dataset token
/// normalization scalar.
pub fn channel_rms<'a>(matrices: impl Iterator<Item = &'a DMatrix<Complex64>>) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for m in matrices {
        for c in m.iter() {
            acc += c.re * c.re + c.im * c.im;
            count += 2;
        }
    }
    if count == 0 {
        1.0
    } else {
        (acc / count as f64).sqrt()
    }
}

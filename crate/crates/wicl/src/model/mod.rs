//! Causal decoder-only transformer with exact reverse-mode gradients.
//!
//! The backbone is a linear token encoder, `n_layers` pre-normalized blocks
//! (multi-head attention with rotary positions, gated feed-forward), and a
//! linear output head. Everything is generic over the scalar type: normal
//! runs use `f32`, the finite-difference gradient suite uses `f64`.

pub mod rope;

mod net;

pub use net::{batch_gradients, forward, gradients, sequence_loss, BatchGradients, PackedBatch};

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Element type of model parameters and activations.
pub trait Scalar:
    num_traits::Float
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub max_positions: usize,
    /// Real token length, `2 * n_t * k_users`.
    pub token_dim: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 4 layers, 4 heads, 128-dim embeddings.
    pub fn desk(token_dim: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ffn: 512,
            max_positions: 64,
            token_dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 1 || self.n_heads < 1 || self.max_positions < 1 {
            return Err(Error::config("layer/head/position counts must be >= 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config("d_model must be divisible by n_heads"));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config("head dimension must be even for rotary pairs"));
        }
        if self.token_dim < 1 || self.d_ffn < 1 {
            return Err(Error::config("token_dim and d_ffn must be >= 1"));
        }
        Ok(())
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Deterministic tensor order; checkpoints store blocks in exactly this
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

/// Indices of one block's tensors within the layout.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerIndices {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn_norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ffn;
        let t = cfg.token_dim;
        let mut entries = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, rows: usize, cols: usize| {
            entries.push(ParamEntry {
                name,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        };
        push("encoder.weight".into(), d, t);
        push("encoder.bias".into(), 1, d);
        for l in 0..cfg.n_layers {
            push(format!("layers.{l}.attn_norm.gain"), 1, d);
            push(format!("layers.{l}.attn.wq"), d, d);
            push(format!("layers.{l}.attn.wk"), d, d);
            push(format!("layers.{l}.attn.wv"), d, d);
            push(format!("layers.{l}.attn.wo"), d, d);
            push(format!("layers.{l}.ffn_norm.gain"), 1, d);
            push(format!("layers.{l}.ffn.w_gate"), f, d);
            push(format!("layers.{l}.ffn.w_up"), f, d);
            push(format!("layers.{l}.ffn.w_down"), d, f);
        }
        push("head.weight".into(), t, d);
        push("head.bias".into(), 1, t);
        let total = offset;
        ParamLayout { entries, total }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub(crate) fn layer(&self, l: usize) -> LayerIndices {
        let base = 2 + l * 9;
        LayerIndices {
            attn_norm: base,
            wq: base + 1,
            wk: base + 2,
            wv: base + 3,
            wo: base + 4,
            ffn_norm: base + 5,
            w_gate: base + 6,
            w_up: base + 7,
            w_down: base + 8,
        }
    }

    pub(crate) fn encoder_weight(&self) -> usize {
        0
    }
    pub(crate) fn encoder_bias(&self) -> usize {
        1
    }
    pub(crate) fn head_weight(&self) -> usize {
        self.entries.len() - 2
    }
    pub(crate) fn head_bias(&self) -> usize {
        self.entries.len() - 1
    }
}

/// Model parameters in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub cfg: ModelConfig,
    pub layout: ParamLayout,
    pub data: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Truncated-normal initialization (std 0.02, clipped at two sigma),
    /// residual-feeding projections scaled down by `1/sqrt(2 n_layers)`,
    /// biases zero, normalization gains one. Deterministic in `seed`, and
    /// identical across scalar types up to rounding.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(cfg);
        let mut data = vec![T::zero(); layout.total];
        let residual_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        for (idx, entry) in layout.entries.iter().enumerate() {
            let slice = &mut data[entry.offset..entry.offset + entry.len()];
            if entry.name.ends_with(".gain") {
                slice.fill(T::one());
            } else if entry.name.ends_with(".bias") {
                // already zero
            } else {
                let std = if entry.name.ends_with("attn.wo")
                    || entry.name.ends_with("ffn.w_down")
                {
                    0.02 * residual_scale
                } else {
                    0.02
                };
                let mut r = rng::stream(Domain::ModelInit, seed, &[idx as u64]);
                for v in slice.iter_mut() {
                    let z = loop {
                        let z: f64 = StandardNormal.sample(&mut r);
                        if z.abs() <= 2.0 {
                            break z;
                        }
                    };
                    *v = T::from_f64(z * std);
                }
            }
        }
        Ok(ModelParams {
            cfg: cfg.clone(),
            layout,
            data,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn tensor(&self, index: usize) -> ArrayView2<'_, T> {
        let e = &self.layout.entries[index];
        ArrayView2::from_shape((e.rows, e.cols), &self.data[e.offset..e.offset + e.len()])
            .expect("layout shapes are consistent")
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<ArrayView2<'_, T>> {
        self.layout.index_of(name).map(|i| self.tensor(i))
    }

    pub fn tensor_mut_by_name(&mut self, name: &str) -> Option<ArrayViewMut2<'_, T>> {
        let i = self.layout.index_of(name)?;
        let e = self.layout.entries[i].clone();
        Some(
            ArrayViewMut2::from_shape(
                (e.rows, e.cols),
                &mut self.data[e.offset..e.offset + e.len()],
            )
            .expect("layout shapes are consistent"),
        )
    }

    /// Convert between scalar types (f64 -> f32 rounds, f32 -> f64 is exact).
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Linear token encoder: `W_e x + b_e`.
pub fn encode_input<T: Scalar>(x: &[T], params: &ModelParams<T>) -> Result<Array1<T>> {
    if x.len() != params.cfg.token_dim {
        return Err(Error::shape(format!(
            "token length {} != token_dim {}",
            x.len(),
            params.cfg.token_dim
        )));
    }
    let w = params.tensor(params.layout.encoder_weight());
    let b = params.tensor(params.layout.encoder_bias());
    let xv = ndarray::ArrayView1::from(x);
    Ok(w.dot(&xv) + b.row(0))
}

/// Linear output head: `W_o h + b_o`.
pub fn decode_output<T: Scalar>(h: &[T], params: &ModelParams<T>) -> Result<Array1<T>> {
    if h.len() != params.cfg.d_model {
        return Err(Error::shape(format!(
            "hidden length {} != d_model {}",
            h.len(),
            params.cfg.d_model
        )));
    }
    let w = params.tensor(params.layout.head_weight());
    let b = params.tensor(params.layout.head_bias());
    let hv = ndarray::ArrayView1::from(h);
    Ok(w.dot(&hv) + b.row(0))
}

/// Gated feed-forward on one vector: `W_down (swish(W_gate h) * (W_up h))`,
/// no biases.
pub fn ffn<T: Scalar>(
    h: &[T],
    w_gate: &ArrayView2<T>,
    w_up: &ArrayView2<T>,
    w_down: &ArrayView2<T>,
) -> Array1<T> {
    let hv = ndarray::ArrayView1::from(h);
    let gate = w_gate.dot(&hv);
    let up = w_up.dot(&hv);
    let activated = ndarray::Zip::from(&gate)
        .and(&up)
        .map_collect(|&g, &u| net::swish(g) * u);
    w_down.dot(&activated)
}

/// Single-head causal attention with rotary positions applied at positions
/// `0..len`: `softmax(rope(Q) rope(K)^T / sqrt(d_k), causal) V`.
pub fn causal_attention<T: Scalar>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
) -> Result<Array2<T>> {
    let (len, d_k) = q.dim();
    if k.dim() != (len, d_k) || v.nrows() != len {
        return Err(Error::shape("Q, K, V must agree on sequence length"));
    }
    let table = rope::RopeTable::<T>::new(d_k, len)?;
    let mut qr = q.clone();
    let mut kr = k.clone();
    for m in 0..len {
        table.rotate_row(qr.row_mut(m), m);
        table.rotate_row(kr.row_mut(m), m);
    }
    let scale = T::from_f64(1.0 / (d_k as f64).sqrt());
    let mut out = Array2::zeros((len, v.ncols()));
    let mut probs = vec![T::zero(); len];
    for i in 0..len {
        net::causal_softmax_row(&qr.view(), &kr.view(), i, scale, &mut probs[..=i]);
        for (j, &p) in probs[..=i].iter().enumerate() {
            out.row_mut(i).scaled_add(p, &v.row(j));
        }
    }
    Ok(out)
}

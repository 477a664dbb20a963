//! The forward/backward engine.
//!
//! Sequences in a batch are packed into one position-major matrix; all
//! position-wise maps (encoder, norms, projections, feed-forward, head) run
//! on the packed matrix while attention runs per sequence and head.
//! Backward mirrors forward exactly, so gradients are exact reverse-mode
//! derivatives of the loss, not approximations.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Zip};

use super::rope::RopeTable;
use super::{ModelParams, ParamLayout, Scalar};
use crate::error::{Error, Result};
use crate::sequence::IclSequence;

const RMS_EPS: f64 = 1e-6;

pub(crate) fn swish<T: Scalar>(g: T) -> T {
    g / (T::one() + (-g).exp())
}

fn swish_prime<T: Scalar>(g: T) -> T {
    let sig = T::one() / (T::one() + (-g).exp());
    sig * (T::one() + g * (T::one() - sig))
}

/// One regression target inside a packed batch.
struct LossTerm<T> {
    row: usize,
    seq: usize,
    target: Array1<T>,
    /// `1 / (loss positions in the sequence * token_dim)`.
    inv_count: T,
}

/// A batch of sequences packed position-major.
pub struct PackedBatch<T> {
    pub tokens: Array2<T>,
    pub ranges: Vec<std::ops::Range<usize>>,
    loss_terms: Vec<LossTerm<T>>,
    /// Weight of each sequence's mean loss in the batch total.
    weights: Vec<T>,
}

impl<T: Scalar> PackedBatch<T> {
    pub fn new(
        seqs: &[&IclSequence],
        weights: &[f64],
        token_dim: usize,
        max_positions: usize,
        require_targets: bool,
    ) -> Result<Self> {
        if seqs.is_empty() || seqs.len() != weights.len() {
            return Err(Error::shape("batch and weights must be non-empty and equal"));
        }
        let total: usize = seqs.iter().map(|s| s.len()).sum();
        let mut tokens = Array2::zeros((total, token_dim));
        let mut ranges = Vec::with_capacity(seqs.len());
        let mut loss_terms = Vec::new();
        let mut offset = 0usize;
        for (si, seq) in seqs.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Sequence("empty sequence in batch".into()));
            }
            if seq.len() > max_positions {
                return Err(Error::Sequence(format!(
                    "sequence length {} exceeds max_positions {max_positions}",
                    seq.len()
                )));
            }
            if seq.loss_positions.is_empty() {
                return Err(Error::Sequence("sequence has no loss positions".into()));
            }
            for (p, tok) in seq.tokens.iter().enumerate() {
                if tok.values.len() != token_dim {
                    return Err(Error::shape(format!(
                        "token length {} != token_dim {token_dim}",
                        tok.values.len()
                    )));
                }
                for (j, &v) in tok.values.iter().enumerate() {
                    tokens[(offset + p, j)] = T::from_f64(v);
                }
            }
            let inv_count =
                T::from_f64(1.0 / (seq.loss_positions.len() as f64 * token_dim as f64));
            for &p in &seq.loss_positions {
                match seq.target_for(p) {
                    Some(target) => loss_terms.push(LossTerm {
                        row: offset + p,
                        seq: si,
                        target: Array1::from_iter(target.iter().map(|&v| T::from_f64(v))),
                        inv_count,
                    }),
                    None if require_targets => {
                        return Err(Error::Sequence(format!(
                            "loss position {p} has no target"
                        )))
                    }
                    None => {}
                }
            }
            ranges.push(offset..offset + seq.len());
            offset += seq.len();
        }
        Ok(PackedBatch {
            tokens,
            ranges,
            loss_terms,
            weights: weights.iter().map(|&w| T::from_f64(w)).collect(),
        })
    }
}

struct LayerCache<T> {
    /// Input residual stream of this layer.
    x_input: Array2<T>,
    normed_attn: Array2<T>,
    rms_attn: Vec<T>,
    q_rot: Array2<T>,
    k_rot: Array2<T>,
    value: Array2<T>,
    /// Softmax probabilities, one `len x len` lower-triangular matrix per
    /// (sequence, head).
    probs: Vec<Array2<T>>,
    attn_concat: Array2<T>,
    x_after_attn: Array2<T>,
    normed_ffn: Array2<T>,
    rms_ffn: Vec<T>,
    gate: Array2<T>,
    up: Array2<T>,
    activated: Array2<T>,
}

struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    final_hidden: Array2<T>,
}

/// Softmax over the causal prefix `j <= i` of attention logits for row `i`.
/// `out` must have length `i + 1`.
pub(crate) fn causal_softmax_row<T: Scalar>(
    q_rot: &ArrayView2<T>,
    k_rot: &ArrayView2<T>,
    i: usize,
    scale: T,
    out: &mut [T],
) {
    let qi = q_rot.row(i);
    let mut max = T::neg_infinity();
    for (j, o) in out.iter_mut().enumerate() {
        *o = qi.dot(&k_rot.row(j)) * scale;
        if *o > max {
            max = *o;
        }
    }
    let mut sum = T::zero();
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn rmsnorm<T: Scalar>(x: &Array2<T>, gain: &ArrayView2<T>) -> (Array2<T>, Vec<T>) {
    let d = x.ncols();
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(RMS_EPS);
    let mut out = Array2::zeros(x.raw_dim());
    let mut rms = Vec::with_capacity(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
        let r = (ms + eps).sqrt();
        rms.push(r);
        let inv_r = T::one() / r;
        let g = gain.row(0);
        for j in 0..d {
            out[(i, j)] = row[j] * g[j] * inv_r;
        }
    }
    (out, rms)
}

/// dX and dGain of the RMS normalization, given upstream dY.
fn rmsnorm_backward<T: Scalar>(
    dy: &Array2<T>,
    x: &Array2<T>,
    gain: &ArrayView2<T>,
    rms: &[T],
    dgain: &mut ArrayViewMut2<T>,
) -> Array2<T> {
    let d = x.ncols();
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dx = Array2::zeros(x.raw_dim());
    let g = gain.row(0);
    for i in 0..x.nrows() {
        let r = rms[i];
        let inv_r = T::one() / r;
        let inv_r3 = inv_r * inv_r * inv_r;
        let mut dot = T::zero();
        for j in 0..d {
            let a = dy[(i, j)] * g[j];
            dot += a * x[(i, j)];
            dgain[(0, j)] += dy[(i, j)] * x[(i, j)] * inv_r;
        }
        let c = dot * inv_d * inv_r3;
        for j in 0..d {
            let a = dy[(i, j)] * g[j];
            dx[(i, j)] = a * inv_r - x[(i, j)] * c;
        }
    }
    dx
}

fn check_finite<T: Scalar>(x: &Array2<T>, context: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        Err(Error::non_finite(context))
    } else {
        Ok(())
    }
}

fn forward_packed<T: Scalar>(
    batch: &PackedBatch<T>,
    params: &ModelParams<T>,
) -> Result<(Array2<T>, ForwardCache<T>)> {
    let cfg = &params.cfg;
    let layout = &params.layout;
    let rope = RopeTable::<T>::new(cfg.head_dim(), cfg.max_positions)?;
    let n_heads = cfg.n_heads;
    let d_k = cfg.head_dim();
    let scale = T::from_f64(1.0 / (d_k as f64).sqrt());

    // Encoder.
    let w_e = params.tensor(layout.encoder_weight());
    let b_e = params.tensor(layout.encoder_bias());
    let mut x = batch.tokens.dot(&w_e.t());
    x += &b_e.row(0);
    check_finite(&x, "encoder output")?;

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let li = layout.layer(l);

        // Attention block.
        let (normed_attn, rms_attn) = rmsnorm(&x, &params.tensor(li.attn_norm));
        let mut q = normed_attn.dot(&params.tensor(li.wq).t());
        let mut k = normed_attn.dot(&params.tensor(li.wk).t());
        let value = normed_attn.dot(&params.tensor(li.wv).t());
        for range in &batch.ranges {
            for (local, row) in range.clone().enumerate() {
                for h in 0..n_heads {
                    let cols = h * d_k..(h + 1) * d_k;
                    rope.rotate_row(q.slice_mut(s![row, cols.clone()]), local);
                    rope.rotate_row(k.slice_mut(s![row, cols]), local);
                }
            }
        }

        let mut attn_concat: Array2<T> = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(batch.ranges.len() * n_heads);
        for range in &batch.ranges {
            let len = range.len();
            for h in 0..n_heads {
                let cols = h * d_k..(h + 1) * d_k;
                let q_h = q.slice(s![range.clone(), cols.clone()]);
                let k_h = k.slice(s![range.clone(), cols.clone()]);
                let v_h = value.slice(s![range.clone(), cols.clone()]);
                let mut p = Array2::zeros((len, len));
                let mut row_buf = vec![T::zero(); len];
                for i in 0..len {
                    causal_softmax_row(&q_h, &k_h, i, scale, &mut row_buf[..=i]);
                    for (j, &pv) in row_buf[..=i].iter().enumerate() {
                        p[(i, j)] = pv;
                    }
                }
                let mut out_h = attn_concat.slice_mut(s![range.clone(), cols]);
                general_mat_mul(T::one(), &p, &v_h, T::zero(), &mut out_h);
                probs.push(p);
            }
        }
        let attn_out = attn_concat.dot(&params.tensor(li.wo).t());
        let x_after_attn = &x + &attn_out;

        // Feed-forward block.
        let (normed_ffn, rms_ffn) = rmsnorm(&x_after_attn, &params.tensor(li.ffn_norm));
        let gate = normed_ffn.dot(&params.tensor(li.w_gate).t());
        let up = normed_ffn.dot(&params.tensor(li.w_up).t());
        let activated = Zip::from(&gate).and(&up).map_collect(|&g, &u| swish(g) * u);
        let ffn_out = activated.dot(&params.tensor(li.w_down).t());
        let x_next = &x_after_attn + &ffn_out;
        check_finite(&x_next, &format!("layer {l}"))?;

        layers.push(LayerCache {
            x_input: x,
            normed_attn,
            rms_attn,
            q_rot: q,
            k_rot: k,
            value,
            probs,
            attn_concat,
            x_after_attn,
            normed_ffn,
            rms_ffn,
            gate,
            up,
            activated,
        });
        x = x_next;
    }

    // Head.
    let w_h = params.tensor(layout.head_weight());
    let b_h = params.tensor(layout.head_bias());
    let mut outputs = x.dot(&w_h.t());
    outputs += &b_h.row(0);
    check_finite(&outputs, "head output")?;

    Ok((
        outputs,
        ForwardCache {
            layers,
            final_hidden: x,
        },
    ))
}

/// Total weighted loss, per-sequence mean losses, and the gradient of the
/// total with respect to the raw outputs.
fn loss_packed<T: Scalar>(
    outputs: &Array2<T>,
    batch: &PackedBatch<T>,
) -> (T, Vec<T>, Array2<T>) {
    let mut per_seq = vec![T::zero(); batch.ranges.len()];
    let mut d_out = Array2::zeros(outputs.raw_dim());
    let two = T::from_f64(2.0);
    for term in &batch.loss_terms {
        let row = outputs.row(term.row);
        let w = batch.weights[term.seq];
        let mut acc = T::zero();
        for (j, &t) in term.target.iter().enumerate() {
            let diff = row[j] - t;
            acc += diff * diff;
            d_out[(term.row, j)] = two * diff * term.inv_count * w;
        }
        per_seq[term.seq] += acc * term.inv_count;
    }
    let total = per_seq
        .iter()
        .zip(batch.weights.iter())
        .map(|(&l, &w)| l * w)
        .sum();
    (total, per_seq, d_out)
}

fn grad_view_mut<'a, T: Scalar>(
    layout: &ParamLayout,
    grad: &'a mut [T],
    index: usize,
) -> ArrayViewMut2<'a, T> {
    let e = &layout.entries[index];
    ArrayViewMut2::from_shape((e.rows, e.cols), &mut grad[e.offset..e.offset + e.len()])
        .expect("layout shapes are consistent")
}

fn backward_packed<T: Scalar>(
    batch: &PackedBatch<T>,
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    d_outputs: &Array2<T>,
) -> Result<Vec<T>> {
    let cfg = &params.cfg;
    let layout = &params.layout;
    let rope = RopeTable::<T>::new(cfg.head_dim(), cfg.max_positions)?;
    let n_heads = cfg.n_heads;
    let d_k = cfg.head_dim();
    let scale = T::from_f64(1.0 / (d_k as f64).sqrt());
    let mut grad = vec![T::zero(); layout.total];

    // Head.
    {
        let mut d_w = grad_view_mut(layout, &mut grad, layout.head_weight());
        general_mat_mul(T::one(), &d_outputs.t(), &cache.final_hidden, T::one(), &mut d_w);
    }
    {
        let mut d_b = grad_view_mut(layout, &mut grad, layout.head_bias());
        for (j, col) in d_outputs.columns().into_iter().enumerate() {
            d_b[(0, j)] += col.sum();
        }
    }
    let mut dx = d_outputs.dot(&params.tensor(layout.head_weight()));

    for l in (0..cfg.n_layers).rev() {
        let li = layout.layer(l);
        let lc = &cache.layers[l];

        // Feed-forward block backward.
        let d_act = dx.dot(&params.tensor(li.w_down));
        {
            let mut d_wd = grad_view_mut(layout, &mut grad, li.w_down);
            general_mat_mul(T::one(), &dx.t(), &lc.activated, T::one(), &mut d_wd);
        }
        let d_gate = Zip::from(&d_act)
            .and(&lc.up)
            .and(&lc.gate)
            .map_collect(|&da, &u, &g| da * u * swish_prime(g));
        let d_up = Zip::from(&d_act)
            .and(&lc.gate)
            .map_collect(|&da, &g| da * swish(g));
        let mut d_normed = d_gate.dot(&params.tensor(li.w_gate));
        d_normed += &d_up.dot(&params.tensor(li.w_up));
        {
            let mut d_wg = grad_view_mut(layout, &mut grad, li.w_gate);
            general_mat_mul(T::one(), &d_gate.t(), &lc.normed_ffn, T::one(), &mut d_wg);
            let mut d_wu = grad_view_mut(layout, &mut grad, li.w_up);
            general_mat_mul(T::one(), &d_up.t(), &lc.normed_ffn, T::one(), &mut d_wu);
        }
        let d_from_norm = {
            let mut d_gain = grad_view_mut(layout, &mut grad, li.ffn_norm);
            rmsnorm_backward(
                &d_normed,
                &lc.x_after_attn,
                &params.tensor(li.ffn_norm),
                &lc.rms_ffn,
                &mut d_gain,
            )
        };
        // Residual: d(x_after_attn) = dx (skip path) + norm path.
        let mut dx_attn = dx;
        dx_attn += &d_from_norm;

        // Attention block backward.
        let d_concat = dx_attn.dot(&params.tensor(li.wo));
        {
            let mut d_wo = grad_view_mut(layout, &mut grad, li.wo);
            general_mat_mul(T::one(), &dx_attn.t(), &lc.attn_concat, T::one(), &mut d_wo);
        }
        let mut d_q = Array2::zeros(d_concat.raw_dim());
        let mut d_k_mat = Array2::zeros(d_concat.raw_dim());
        let mut d_v = Array2::zeros(d_concat.raw_dim());
        for (ri, range) in batch.ranges.iter().enumerate() {
            let len = range.len();
            for h in 0..n_heads {
                let cols = h * d_k..(h + 1) * d_k;
                let p = &lc.probs[ri * n_heads + h];
                let d_out_h = d_concat.slice(s![range.clone(), cols.clone()]);
                let v_h = lc.value.slice(s![range.clone(), cols.clone()]);
                let q_h = lc.q_rot.slice(s![range.clone(), cols.clone()]);
                let k_h = lc.k_rot.slice(s![range.clone(), cols.clone()]);

                // dV += P^T dOut
                {
                    let mut d_v_h = d_v.slice_mut(s![range.clone(), cols.clone()]);
                    general_mat_mul(T::one(), &p.t(), &d_out_h, T::one(), &mut d_v_h);
                }
                // Softmax backward: dS = P (dP - rowsum(dP o P)).
                let d_p = d_out_h.dot(&v_h.t());
                let mut d_s = Array2::zeros((len, len));
                for i in 0..len {
                    let mut inner = T::zero();
                    for j in 0..=i {
                        inner += d_p[(i, j)] * p[(i, j)];
                    }
                    for j in 0..=i {
                        d_s[(i, j)] = p[(i, j)] * (d_p[(i, j)] - inner);
                    }
                }
                {
                    let mut d_q_h = d_q.slice_mut(s![range.clone(), cols.clone()]);
                    general_mat_mul(scale, &d_s, &k_h, T::one(), &mut d_q_h);
                    let mut d_k_h = d_k_mat.slice_mut(s![range.clone(), cols]);
                    general_mat_mul(scale, &d_s.t(), &q_h, T::one(), &mut d_k_h);
                }
            }
        }
        // Undo the rotations (their transpose).
        for range in &batch.ranges {
            for (local, row) in range.clone().enumerate() {
                for h in 0..n_heads {
                    let cols = h * d_k..(h + 1) * d_k;
                    rope.rotate_row_inverse(d_q.slice_mut(s![row, cols.clone()]), local);
                    rope.rotate_row_inverse(d_k_mat.slice_mut(s![row, cols]), local);
                }
            }
        }
        let mut d_normed_attn = d_q.dot(&params.tensor(li.wq));
        d_normed_attn += &d_k_mat.dot(&params.tensor(li.wk));
        d_normed_attn += &d_v.dot(&params.tensor(li.wv));
        {
            let mut d_wq = grad_view_mut(layout, &mut grad, li.wq);
            general_mat_mul(T::one(), &d_q.t(), &lc.normed_attn, T::one(), &mut d_wq);
            let mut d_wk = grad_view_mut(layout, &mut grad, li.wk);
            general_mat_mul(T::one(), &d_k_mat.t(), &lc.normed_attn, T::one(), &mut d_wk);
            let mut d_wv = grad_view_mut(layout, &mut grad, li.wv);
            general_mat_mul(T::one(), &d_v.t(), &lc.normed_attn, T::one(), &mut d_wv);
        }
        let x_before = &lc.x_input;
        let d_from_attn_norm = {
            let mut d_gain = grad_view_mut(layout, &mut grad, li.attn_norm);
            rmsnorm_backward(
                &d_normed_attn,
                x_before,
                &params.tensor(li.attn_norm),
                &lc.rms_attn,
                &mut d_gain,
            )
        };
        dx = dx_attn;
        dx += &d_from_attn_norm;
    }

    // Encoder.
    {
        let mut d_we = grad_view_mut(layout, &mut grad, layout.encoder_weight());
        general_mat_mul(T::one(), &dx.t(), &batch.tokens, T::one(), &mut d_we);
        let mut d_be = grad_view_mut(layout, &mut grad, layout.encoder_bias());
        for (j, col) in dx.columns().into_iter().enumerate() {
            d_be[(0, j)] += col.sum();
        }
    }

    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("gradients"));
    }
    Ok(grad)
}

pub struct BatchGradients<T> {
    pub total_loss: T,
    pub per_seq_loss: Vec<T>,
    pub grad: Vec<T>,
}

/// Outputs for every position of one sequence (rows are positions).
pub fn forward<T: Scalar>(seq: &IclSequence, params: &ModelParams<T>) -> Result<Array2<T>> {
    let batch = PackedBatch::new(
        &[seq],
        &[1.0],
        params.cfg.token_dim,
        params.cfg.max_positions,
        false,
    )?;
    let (outputs, _) = forward_packed(&batch, params)?;
    Ok(outputs)
}

/// Mean squared error between outputs at loss positions and their targets,
/// averaged over positions and dimensions.
pub fn sequence_loss<T: Scalar>(outputs: &Array2<T>, seq: &IclSequence) -> Result<T> {
    if seq.loss_positions.is_empty() {
        return Err(Error::Sequence("sequence has no loss positions".into()));
    }
    if outputs.nrows() != seq.len() {
        return Err(Error::shape("outputs and sequence length differ"));
    }
    let d = outputs.ncols();
    let mut acc = T::zero();
    for &p in &seq.loss_positions {
        let target = seq
            .target_for(p)
            .ok_or_else(|| Error::Sequence(format!("loss position {p} has no target")))?;
        if target.len() != d {
            return Err(Error::shape("target and output dimensions differ"));
        }
        let row = outputs.row(p);
        for (j, &t) in target.iter().enumerate() {
            let diff = row[j] - T::from_f64(t);
            acc += diff * diff;
        }
    }
    Ok(acc / T::from_f64((seq.loss_positions.len() * d) as f64))
}

/// Loss and exact gradient for one sequence.
pub fn gradients<T: Scalar>(
    seq: &IclSequence,
    params: &ModelParams<T>,
) -> Result<(T, Vec<T>)> {
    let out = batch_gradients(std::slice::from_ref(seq), &[1.0], params)?;
    Ok((out.total_loss, out.grad))
}

/// Loss and exact gradient of `sum_s weights[s] * mean_loss(seq_s)`.
pub fn batch_gradients<T: Scalar>(
    seqs: &[IclSequence],
    weights: &[f64],
    params: &ModelParams<T>,
) -> Result<BatchGradients<T>> {
    let refs: Vec<&IclSequence> = seqs.iter().collect();
    let batch = PackedBatch::new(
        &refs,
        weights,
        params.cfg.token_dim,
        params.cfg.max_positions,
        true,
    )?;
    let (outputs, cache) = forward_packed(&batch, params)?;
    let (total_loss, per_seq_loss, d_outputs) = loss_packed(&outputs, &batch);
    let grad = backward_packed(&batch, params, &cache, &d_outputs)?;
    Ok(BatchGradients {
        total_loss,
        per_seq_loss,
        grad,
    })
}

//! Rotary position embedding.
//!
//! Consecutive dimension pairs `(2i, 2i+1)` of a head vector at position `m`
//! are rotated by `m * theta_i` with `theta_i = 10000^(-2(i-1)/d_k)` for
//! `i = 1..d_k/2`. Rotations are orthogonal, and attention logits between
//! rotated queries and keys depend only on the position difference.

use ndarray::ArrayViewMut1;

use super::Scalar;
use crate::error::{Error, Result};

/// Precomputed sines/cosines for every position up to `max_positions`.
#[derive(Debug, Clone)]
pub struct RopeTable<T> {
    pub head_dim: usize,
    pub max_positions: usize,
    /// `angles[i]` is `theta_{i+1}`, strictly decreasing.
    pub angles: Vec<f64>,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(head_dim: usize, max_positions: usize) -> Result<Self> {
        if head_dim % 2 != 0 || head_dim == 0 {
            return Err(Error::config("rotary pairs need an even head dimension"));
        }
        let half = head_dim / 2;
        let angles: Vec<f64> = (0..half)
            .map(|i| 10000f64.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for m in 0..max_positions {
            for &a in &angles {
                let phi = m as f64 * a;
                cos.push(T::from_f64(phi.cos()));
                sin.push(T::from_f64(phi.sin()));
            }
        }
        Ok(RopeTable {
            head_dim,
            max_positions,
            angles,
            cos,
            sin,
        })
    }

    /// Rotates one head vector in place at position `m`.
    pub fn rotate_row(&self, mut row: ArrayViewMut1<'_, T>, m: usize) {
        debug_assert!(m < self.max_positions);
        let half = self.head_dim / 2;
        let base = m * half;
        for i in 0..half {
            let (c, s) = (self.cos[base + i], self.sin[base + i]);
            let a = row[2 * i];
            let b = row[2 * i + 1];
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }

    /// Inverse rotation (transpose of the block rotation).
    pub fn rotate_row_inverse(&self, mut row: ArrayViewMut1<'_, T>, m: usize) {
        debug_assert!(m < self.max_positions);
        let half = self.head_dim / 2;
        let base = m * half;
        for i in 0..half {
            let (c, s) = (self.cos[base + i], self.sin[base + i]);
            let a = row[2 * i];
            let b = row[2 * i + 1];
            row[2 * i] = a * c + b * s;
            row[2 * i + 1] = b * c - a * s;
        }
    }
}

/// Rotates a head vector at position `m` (the standalone form of the
/// operation; the angle set derives from the vector length).
pub fn rope_rotate<T: Scalar>(v: &[T], m: usize) -> Result<Vec<T>> {
    if v.len() % 2 != 0 || v.is_empty() {
        return Err(Error::config("rotary pairs need an even head dimension"));
    }
    let half = v.len() / 2;
    let mut out = v.to_vec();
    for i in 0..half {
        let theta = 10000f64.powf(-2.0 * i as f64 / v.len() as f64);
        let phi = m as f64 * theta;
        let (c, s) = (T::from_f64(phi.cos()), T::from_f64(phi.sin()));
        let a = v[2 * i];
        let b = v[2 * i + 1];
        out[2 * i] = a * c - b * s;
        out[2 * i + 1] = a * s + b * c;
    }
    Ok(out)
}

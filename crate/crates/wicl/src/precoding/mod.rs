//! Downlink multi-user precoding: SINR/rate arithmetic, closed-form
//! baselines, and the iterative solvers used to label training data.
//!
//! Solvers are pure functions of their inputs and deterministic: identical
//! problems yield identical precoders bit for bit.

mod balancing;
mod wmmse;

pub use balancing::{balanced_level_oracle, sinr_balancing_precoder};
pub use wmmse::{wmmse_precoder, wmmse_precoder_traced};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// One precoding instance: channels, noise, budget and per-user weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecodingProblem {
    /// Channel matrix, `n_t x k_users`, column `k` is user `k`.
    pub channel: DMatrix<Complex64>,
    /// Noise variance in W.
    pub sigma2: f64,
    /// Sum power budget in W.
    pub p_max: f64,
    /// Rate weights (sum-rate objective).
    pub alpha: DVector<f64>,
    /// SINR priority weights (balancing objective).
    pub rho: DVector<f64>,
}

impl PrecodingProblem {
    /// Problem with unit rate and priority weights.
    pub fn new(channel: DMatrix<Complex64>, sigma2: f64, p_max: f64) -> Self {
        let k = channel.ncols();
        PrecodingProblem {
            channel,
            sigma2,
            p_max,
            alpha: DVector::from_element(k, 1.0),
            rho: DVector::from_element(k, 1.0),
        }
    }

    pub fn n_t(&self) -> usize {
        self.channel.nrows()
    }

    pub fn k_users(&self) -> usize {
        self.channel.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() != self.k_users() || self.rho.len() != self.k_users() {
            return Err(Error::shape("weight vectors must have k_users entries"));
        }
        if self.alpha.iter().chain(self.rho.iter()).any(|&w| !(w > 0.0)) {
            return Err(Error::config("all weights must be positive"));
        }
        if !(self.p_max > 0.0 && self.sigma2 > 0.0) {
            return Err(Error::config("p_max and sigma2 must be positive"));
        }
        if self.channel.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::non_finite("channel matrix"));
        }
        Ok(())
    }
}

/// Iteration controls for the iterative solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Relative objective-change stopping tolerance.
    pub tol: f64,
    /// Deterministic initializations for the sum-rate solver (matched
    /// filter, then zero forcing, then seeded random starts). Ignored by the
    /// balancing solver, whose fixed point is start-independent.
    pub restarts: usize,
}

impl SolverOptions {
    pub fn wmmse_default() -> Self {
        SolverOptions {
            max_iters: 200,
            tol: 1e-6,
            restarts: 6,
        }
    }

    pub fn balancing_default() -> Self {
        SolverOptions {
            max_iters: 500,
            tol: 1e-6,
            restarts: 1,
        }
    }
}

/// A precoding matrix with its objective value and solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecodingSolution {
    /// Precoder, `n_t x k_users`, column `k` serves user `k`.
    pub precoder: DMatrix<Complex64>,
    /// Sum rate in bit/s/Hz (P1 solvers) or balanced level `min_k gamma_k /
    /// rho_k` (P2 solver).
    pub objective: f64,
    pub iterations: usize,
    /// Final convergence measure (relative objective change, or weighted-SINR
    /// spread for balancing).
    pub residual: f64,
    /// False when the iteration cap was hit before reaching tolerance; the
    /// best iterate is still returned.
    pub converged: bool,
}

/// Received SINR of user `k` under precoder `w`:
/// `|h_k^H w_k|^2 / (sum_{i != k} |h_k^H w_i|^2 + sigma2)`.
pub fn sinr(problem: &PrecodingProblem, precoder: &DMatrix<Complex64>, k: usize) -> f64 {
    let h_k = problem.channel.column(k);
    let mut signal = 0.0;
    let mut interference = 0.0;
    for i in 0..precoder.ncols() {
        let gain = h_k.dotc(&precoder.column(i)).norm_sqr();
        if i == k {
            signal = gain;
        } else {
            interference += gain;
        }
    }
    signal / (interference + problem.sigma2)
}

/// All per-user SINRs at once.
pub fn sinrs(problem: &PrecodingProblem, precoder: &DMatrix<Complex64>) -> Vec<f64> {
    (0..problem.k_users()).map(|k| sinr(problem, precoder, k)).collect()
}

/// Weighted sum rate `sum_k alpha_k log2(1 + gamma_k)` in bit/s/Hz.
pub fn sum_rate(problem: &PrecodingProblem, precoder: &DMatrix<Complex64>) -> f64 {
    (0..problem.k_users())
        .map(|k| problem.alpha[k] * (1.0 + sinr(problem, precoder, k)).log2())
        .sum()
}

/// Minimum per-user rate `min_k log2(1 + gamma_k)`.
pub fn min_rate(problem: &PrecodingProblem, precoder: &DMatrix<Complex64>) -> f64 {
    (0..problem.k_users())
        .map(|k| (1.0 + sinr(problem, precoder, k)).log2())
        .fold(f64::INFINITY, f64::min)
}

/// Balanced level `min_k gamma_k / rho_k`.
pub fn balanced_level(problem: &PrecodingProblem, precoder: &DMatrix<Complex64>) -> f64 {
    (0..problem.k_users())
        .map(|k| sinr(problem, precoder, k) / problem.rho[k])
        .fold(f64::INFINITY, f64::min)
}

/// Scales a precoder to exact total power: `W * sqrt(p_max) / ||W||_F`.
pub fn project_power(precoder: &DMatrix<Complex64>, p_max: f64) -> Result<DMatrix<Complex64>> {
    let norm = precoder.norm();
    if norm == 0.0 {
        return Err(Error::Solver("cannot project an all-zero precoder".into()));
    }
    Ok(precoder * Complex64::new(p_max.sqrt() / norm, 0.0))
}

/// Rotates each column so `h_k^H w_k` is real and non-negative. This picks a
/// canonical representative among the phase-equivalent optima (all SINRs are
/// invariant under per-column phase rotation) so labels are a
/// better-conditioned regression target.
pub fn canonicalize_phases(
    channel: &DMatrix<Complex64>,
    precoder: &mut DMatrix<Complex64>,
) {
    for k in 0..precoder.ncols() {
        let gain = channel.column(k).dotc(&precoder.column(k));
        let mag = gain.norm();
        if mag > 0.0 {
            let rot = gain.conj() / mag;
            let col = precoder.column(k) * rot;
            precoder.set_column(k, &col);
        }
    }
}

/// Maximum-ratio transmission: beams along each user's channel, equal power
/// split. Users with a zero channel get a zero beam and their power share is
/// redistributed.
pub fn mrt_precoder(problem: &PrecodingProblem) -> Result<PrecodingSolution> {
    problem.validate()?;
    let k_users = problem.k_users();
    let active: Vec<usize> = (0..k_users)
        .filter(|&k| problem.channel.column(k).norm() > 0.0)
        .collect();
    if active.is_empty() {
        return Err(Error::Solver("all channels are zero".into()));
    }
    let per_user = problem.p_max / active.len() as f64;
    let mut precoder = DMatrix::from_element(problem.n_t(), k_users, Complex64::new(0.0, 0.0));
    for &k in &active {
        let h_k = problem.channel.column(k);
        let col = h_k * Complex64::new(per_user.sqrt() / h_k.norm(), 0.0);
        precoder.set_column(k, &col);
    }
    canonicalize_phases(&problem.channel, &mut precoder);
    let objective = sum_rate(problem, &precoder);
    Ok(PrecodingSolution {
        precoder,
        objective,
        iterations: 0,
        residual: 0.0,
        converged: true,
    })
}

/// Zero-forcing: beams along the columns of `H (H^H H)^{-1}`, normalized to
/// equal per-user power. Fails on rank-deficient channels.
pub fn zf_precoder(problem: &PrecodingProblem) -> Result<PrecodingSolution> {
    problem.validate()?;
    let h = &problem.channel;
    let k_users = problem.k_users();
    let gram = h.adjoint() * h;
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::Solver("zero-forcing requires full column rank".into()))?;
    let raw = h * inv;
    let per_user = problem.p_max / k_users as f64;
    let mut precoder = DMatrix::from_element(problem.n_t(), k_users, Complex64::new(0.0, 0.0));
    for k in 0..k_users {
        let col = raw.column(k);
        let norm = col.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Solver("zero-forcing produced a degenerate beam".into()));
        }
        let scaled = col * Complex64::new(per_user.sqrt() / norm, 0.0);
        precoder.set_column(k, &scaled);
    }
    canonicalize_phases(&problem.channel, &mut precoder);
    let objective = sum_rate(problem, &precoder);
    Ok(PrecodingSolution {
        precoder,
        objective,
        iterations: 0,
        residual: 0.0,
        converged: true,
    })
}

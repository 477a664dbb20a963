//! Weighted-MMSE block-coordinate ascent for weighted sum-rate maximization.
//!
//! Each iteration cycles scalar MMSE receivers, MSE weights, and the transmit
//! update `w_k = alpha_k lambda_k u_k (sum_i alpha_i lambda_i |u_i|^2 h_i
//! h_i^H + mu I)^{-1} h_k`, with `mu >= 0` chosen by bisection so the sum
//! power meets the budget (or `mu = 0` when the unconstrained update is
//! already inside it). The weighted sum rate never decreases across
//! iterations.

use nalgebra::{Cholesky, DMatrix};
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};

use super::{
    canonicalize_phases, mrt_precoder, project_power, sum_rate, zf_precoder, PrecodingProblem,
    PrecodingSolution, SolverOptions,
};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Floor on the MSE before inversion; caps per-user SINR near 1e15.
const MSE_FLOOR: f64 = 1e-15;
const BISECT_ITERS: usize = 100;

/// Solves the weighted sum-rate problem. See [`wmmse_precoder_traced`] for
/// the per-iteration objective trace.
pub fn wmmse_precoder(
    problem: &PrecodingProblem,
    opts: SolverOptions,
) -> Result<PrecodingSolution> {
    wmmse_precoder_traced(problem, opts).map(|(solution, _)| solution)
}

/// Deterministic initializations: matched filter, zero forcing when the
/// channel has full column rank, and seeded random precoders up to
/// `opts.restarts` in total. Block-coordinate ascent only finds a stationary
/// point of the start it is given; starting from several basins and keeping
/// the best consistently reaches the multi-start ascent optimum.
fn initializations(problem: &PrecodingProblem, opts: SolverOptions) -> Vec<DMatrix<Complex64>> {
    let mut inits = Vec::with_capacity(opts.restarts.max(1));
    if let Ok(mrt) = mrt_precoder(problem) {
        inits.push(mrt.precoder);
    }
    if inits.len() < opts.restarts {
        if let Ok(zf) = zf_precoder(problem) {
            inits.push(zf.precoder);
        }
    }
    let mut index = 0u64;
    while inits.len() < opts.restarts {
        let mut stream = rng::stream(Domain::Solver, index, &[]);
        let raw = DMatrix::from_fn(problem.n_t(), problem.k_users(), |_, _| {
            let re: f64 = StandardNormal.sample(&mut stream);
            let im: f64 = StandardNormal.sample(&mut stream);
            Complex64::new(re, im)
        });
        if let Ok(w) = project_power(&raw, problem.p_max) {
            inits.push(w);
        }
        index += 1;
    }
    inits
}

/// As [`wmmse_precoder`], also returning the objective after the
/// initialization and after every iteration of the winning start (the
/// sequence is non-decreasing).
pub fn wmmse_precoder_traced(
    problem: &PrecodingProblem,
    opts: SolverOptions,
) -> Result<(PrecodingSolution, Vec<f64>)> {
    problem.validate()?;
    let mut best: Option<(PrecodingSolution, Vec<f64>)> = None;
    for init in initializations(problem, opts) {
        let run = wmmse_from(problem, opts, init)?;
        if best.as_ref().is_none_or(|(b, _)| run.0.objective > b.objective) {
            best = Some(run);
        }
    }
    best.ok_or_else(|| Error::Solver("no usable initialization".into()))
}

fn wmmse_from(
    problem: &PrecodingProblem,
    opts: SolverOptions,
    init: DMatrix<Complex64>,
) -> Result<(PrecodingSolution, Vec<f64>)> {
    let k_users = problem.k_users();
    let h = &problem.channel;

    let mut precoder = init;
    let mut objective = sum_rate(problem, &precoder);
    let mut trace = vec![objective];
    let mut residual = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iters {
        iterations = iter + 1;

        // Receiver scalars and MSE weights for the current precoder.
        let mut receivers = vec![Complex64::new(0.0, 0.0); k_users];
        let mut weights = vec![0.0; k_users];
        for k in 0..k_users {
            let h_k = h.column(k);
            let mut total = problem.sigma2;
            for i in 0..k_users {
                total += h_k.dotc(&precoder.column(i)).norm_sqr();
            }
            let direct = h_k.dotc(&precoder.column(k));
            let u_k = direct / total;
            let mse = (1.0 - (u_k.conj() * direct).re).max(MSE_FLOOR);
            receivers[k] = u_k;
            weights[k] = 1.0 / mse;
        }

        // Transmit update coefficients: quadratic term a_k, linear term b_k.
        let quad: Vec<f64> = (0..k_users)
            .map(|k| problem.alpha[k] * weights[k] * receivers[k].norm_sqr())
            .collect();
        let lin: Vec<Complex64> = (0..k_users)
            .map(|k| receivers[k] * (problem.alpha[k] * weights[k]))
            .collect();
        let active: Vec<usize> = (0..k_users).filter(|&k| quad[k] > 0.0).collect();
        if active.is_empty() {
            return Err(Error::Solver("all receivers vanished".into()));
        }

        precoder = transmit_update(problem, &active, &quad, &lin)?;
        if precoder.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::non_finite(format!("wmmse iterate {iter}")));
        }

        let new_objective = sum_rate(problem, &precoder);
        residual = (new_objective - objective).abs() / objective.abs().max(1e-12);
        objective = new_objective;
        trace.push(objective);
        if residual < opts.tol {
            converged = true;
            break;
        }
    }

    canonicalize_phases(h, &mut precoder);
    let objective = sum_rate(problem, &precoder);
    Ok((
        PrecodingSolution {
            precoder,
            objective,
            iterations,
            residual,
            converged,
        },
        trace,
    ))
}

/// Minimizes the weighted-MSE transmit subproblem under the power budget.
fn transmit_update(
    problem: &PrecodingProblem,
    active: &[usize],
    quad: &[f64],
    lin: &[Complex64],
) -> Result<DMatrix<Complex64>> {
    let h = &problem.channel;
    let h_act = {
        let cols: Vec<_> = active.iter().map(|&k| h.column(k).into_owned()).collect();
        DMatrix::from_columns(&cols)
    };

    // Unconstrained stationary point (mu = 0). The quadratic-term matrix is
    // rank-deficient when |active| < n_t, but the targets lie in its range,
    // so the minimum-norm solution follows from a small Gram solve.
    if let Some(precoder) = interior_solution(problem, active, &h_act, quad, lin) {
        if precoder.norm_squared() <= problem.p_max {
            return Ok(precoder);
        }
    }

    // Power constraint active: bisect the multiplier. Beam power decreases
    // monotonically in mu, and at mu_hi it is provably below budget.
    let gram_trace: f64 = active
        .iter()
        .enumerate()
        .map(|(j, &k)| lin[k].norm_sqr() * h_act.column(j).norm_squared())
        .sum();
    let mut lo = 0.0;
    let mut hi = (gram_trace / problem.p_max).sqrt().max(f64::MIN_POSITIVE);
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match beam_power(problem, active, &h_act, quad, lin, mid) {
            Some(p) if p > problem.p_max => lo = mid,
            Some(_) => hi = mid,
            None => lo = mid,
        }
    }
    solve_beams(problem, active, &h_act, quad, lin, hi)
        .ok_or_else(|| Error::Solver("transmit update factorization failed".into()))
}

fn quad_matrix(
    active: &[usize],
    h_act: &DMatrix<Complex64>,
    quad: &[f64],
    mu: f64,
) -> DMatrix<Complex64> {
    let n_t = h_act.nrows();
    let mut a = DMatrix::from_diagonal_element(n_t, n_t, Complex64::new(mu, 0.0));
    for (j, &k) in active.iter().enumerate() {
        let col = h_act.column(j);
        // a += quad[k] * h_k h_k^H
        a.gerc(Complex64::new(quad[k], 0.0), &col, &col, Complex64::new(1.0, 0.0));
    }
    a
}

fn solve_beams(
    problem: &PrecodingProblem,
    active: &[usize],
    h_act: &DMatrix<Complex64>,
    quad: &[f64],
    lin: &[Complex64],
    mu: f64,
) -> Option<DMatrix<Complex64>> {
    let a = quad_matrix(active, h_act, quad, mu);
    let chol = Cholesky::new(a)?;
    let solved = chol.solve(h_act);
    let mut precoder = DMatrix::from_element(
        problem.n_t(),
        problem.k_users(),
        Complex64::new(0.0, 0.0),
    );
    for (j, &k) in active.iter().enumerate() {
        let col = solved.column(j) * lin[k];
        precoder.set_column(k, &col);
    }
    Some(precoder)
}

fn beam_power(
    problem: &PrecodingProblem,
    active: &[usize],
    h_act: &DMatrix<Complex64>,
    quad: &[f64],
    lin: &[Complex64],
    mu: f64,
) -> Option<f64> {
    solve_beams(problem, active, h_act, quad, lin, mu).map(|w| w.norm_squared())
}

/// Minimum-norm unconstrained update: `w_k = (b_k / a_k) H (H^H H)^{-1} e_k`
/// over the active users.
fn interior_solution(
    problem: &PrecodingProblem,
    active: &[usize],
    h_act: &DMatrix<Complex64>,
    quad: &[f64],
    lin: &[Complex64],
) -> Option<DMatrix<Complex64>> {
    let gram = h_act.adjoint() * h_act;
    let inv = gram.try_inverse()?;
    let dirs = h_act * inv;
    let mut precoder = DMatrix::from_element(
        problem.n_t(),
        problem.k_users(),
        Complex64::new(0.0, 0.0),
    );
    for (j, &k) in active.iter().enumerate() {
        let col = dirs.column(j) * (lin[k] / quad[k]);
        precoder.set_column(k, &col);
    }
    Some(precoder)
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_channel;
    use super::super::{mrt_precoder, zf_precoder, PrecodingProblem};
    use super::*;
    use nalgebra::DVector;
    use approx::assert_relative_eq;

    #[test]
    fn single_user_matched_filter_rate() {
        // ||h||^2 = 2, p_max = 1, sigma2 = 1: capacity log2(3).
        let h = DMatrix::from_column_slice(2, 1, &[Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)]);
        let p = PrecodingProblem::new(h.clone(), 1.0, 1.0);
        let sol = wmmse_precoder(&p, SolverOptions::wmmse_default()).unwrap();
        assert_relative_eq!(sol.objective, 3f64.log2(), max_relative = 1e-9);
        assert_relative_eq!(sol.precoder.norm_squared(), 1.0, max_relative = 1e-9);
        let corr = h.column(0).dotc(&sol.precoder.column(0)).norm()
            / (h.norm() * sol.precoder.norm());
        assert_relative_eq!(corr, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn beats_mrt_and_zf() {
        for seed in 0..25u64 {
            let h = random_channel(4, 2, 300 + seed);
            let p = PrecodingProblem::new(h, 1.0, 10.0);
            let sol = wmmse_precoder(&p, SolverOptions::wmmse_default()).unwrap();
            let mrt = mrt_precoder(&p).unwrap().objective;
            let zf = zf_precoder(&p).unwrap().objective;
            assert!(
                sol.objective >= mrt.max(zf) - 1e-6,
                "seed {seed}: wmmse {} vs mrt {mrt} zf {zf}",
                sol.objective
            );
        }
    }

    #[test]
    fn objective_trace_is_monotone() {
        for seed in 0..10u64 {
            let h = random_channel(8, 4, 400 + seed);
            let p = PrecodingProblem::new(h, 1.0, 100.0);
            let (_, trace) = wmmse_precoder_traced(&p, SolverOptions::wmmse_default()).unwrap();
            for w in trace.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0),
                    "seed {seed}: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn respects_power_budget() {
        for seed in 0..10u64 {
            let h = random_channel(4, 3, 500 + seed);
            let p = PrecodingProblem::new(h, 1.0, 3.0);
            let sol = wmmse_precoder(&p, SolverOptions::wmmse_default()).unwrap();
            assert!(sol.precoder.norm_squared() <= 3.0 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn phase_rotated_channel_same_objective() {
        let h = random_channel(4, 2, 600);
        let p = PrecodingProblem::new(h.clone(), 1.0, 10.0);
        let base = wmmse_precoder(&p, SolverOptions::wmmse_default()).unwrap();
        let mut h_rot = h;
        let rot = Complex64::from_polar(1.0, 1.234);
        let col = h_rot.column(1) * rot;
        h_rot.set_column(1, &col);
        let p_rot = PrecodingProblem::new(h_rot.clone(), 1.0, 10.0);
        let rotated = wmmse_precoder(&p_rot, SolverOptions::wmmse_default()).unwrap();
        assert_relative_eq!(base.objective, rotated.objective, max_relative = 1e-9);
        for k in 0..2 {
            let a = h_rot.column(k).dotc(&rotated.precoder.column(k)).norm();
            let b = p.channel.column(k).dotc(&base.precoder.column(k)).norm();
            assert_relative_eq!(a, b, max_relative = 1e-6);
        }
    }

    #[test]
    fn zero_channel_user_gets_zero_beam() {
        let mut h = random_channel(4, 2, 700);
        h.set_column(1, &DVector::from_element(4, Complex64::new(0.0, 0.0)));
        let p = PrecodingProblem::new(h, 1.0, 4.0);
        let sol = wmmse_precoder(&p, SolverOptions::wmmse_default()).unwrap();
        assert_eq!(sol.precoder.column(1).norm(), 0.0);
        assert!(sol.objective > 0.0);
    }

    #[test]
    fn weak_user_starved_at_high_snr() {
        // Sparsity tendency: under full spatial load, a 10x weaker channel
        // should receive under 5% of the power on average when sum rate is
        // the objective.
        let mut share_sum = 0.0;
        let n = 200;
        for seed in 0..n {
            let mut h = random_channel(4, 4, 10_000 + seed);
            let weak = h.column(3) * Complex64::new(0.1, 0.0);
            h.set_column(3, &weak);
            let p = PrecodingProblem::new(h, 1.0, 100.0);
            let sol = wmmse_precoder(&p, SolverOptions::wmmse_default()).unwrap();
            share_sum += sol.precoder.column(3).norm_squared() / sol.precoder.norm_squared();
        }
        let mean_share = share_sum / n as f64;
        assert!(mean_share < 0.05, "mean weak-user power share {mean_share}");
    }
}

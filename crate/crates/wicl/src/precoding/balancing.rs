//! Max-min weighted SINR balancing under a sum power budget.
//!
//! The solver works through uplink-downlink duality: a normalized fixed-point
//! iteration balances the dual uplink powers against MMSE receive gains, the
//! converged uplink covariance yields the downlink beam directions, and the
//! downlink powers are then rebalanced exactly for those directions. The
//! independent oracle instead bisects the target level and decides
//! feasibility per level with a monotone power-control iteration.

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;

use super::{canonicalize_phases, sinrs, PrecodingProblem, PrecodingSolution, SolverOptions};
use crate::error::{Error, Result};

const ORACLE_REL_TOL: f64 = 1e-6;
const ORACLE_BISECT_CAP: usize = 200;
const FEASIBILITY_ITERS: usize = 5000;
const DOWNLINK_BISECT_ITERS: usize = 200;

/// Per-unit-power uplink SINRs with MMSE receivers, leaving each user's own
/// contribution out of the covariance:
/// `g_k = h_k^H (sigma2 I + sum_{j != k} q_j h_j h_j^H)^{-1} h_k`.
fn uplink_gains(problem: &PrecodingProblem, q: &[f64]) -> Option<Vec<f64>> {
    let h = &problem.channel;
    let n_t = problem.n_t();
    let mut cov = DMatrix::from_diagonal_element(n_t, n_t, Complex64::new(problem.sigma2, 0.0));
    for (j, &qj) in q.iter().enumerate() {
        let col = h.column(j);
        cov.gerc(Complex64::new(qj, 0.0), &col, &col, Complex64::new(1.0, 0.0));
    }
    let chol = Cholesky::new(cov)?;
    let solved = chol.solve(h);
    let gains = (0..problem.k_users())
        .map(|k| {
            let c = h.column(k).dotc(&solved.column(k)).re;
            // Sherman-Morrison removal of the user's own rank-one term.
            c / (1.0 - q[k] * c).max(f64::MIN_POSITIVE)
        })
        .collect();
    Some(gains)
}

fn check_channels(problem: &PrecodingProblem) -> Result<()> {
    problem.validate()?;
    for k in 0..problem.k_users() {
        if problem.channel.column(k).norm() == 0.0 {
            return Err(Error::Solver(format!(
                "balancing infeasible: user {k} has a zero channel"
            )));
        }
    }
    Ok(())
}

/// Solves the max-min weighted SINR problem. At convergence all weighted
/// SINRs are equal, the power budget is tight, and the objective is the
/// balanced level `min_k gamma_k / rho_k`. A hit iteration cap is reported
/// through `converged = false` with the best iterate returned.
pub fn sinr_balancing_precoder(
    problem: &PrecodingProblem,
    opts: SolverOptions,
) -> Result<PrecodingSolution> {
    check_channels(problem)?;
    let k_users = problem.k_users();
    let h = &problem.channel;

    // Normalized fixed point on the dual uplink powers.
    let mut q = vec![problem.p_max / k_users as f64; k_users];
    let mut level_prev = 0.0;
    let mut fixed_point_converged = false;
    let mut iterations = 0;
    for iter in 0..opts.max_iters {
        iterations = iter + 1;
        let gains = uplink_gains(problem, &q)
            .ok_or_else(|| Error::Solver("uplink covariance factorization failed".into()))?;
        let inv_sum: f64 = (0..k_users).map(|k| problem.rho[k] / gains[k]).sum();
        let level = problem.p_max / inv_sum;
        for k in 0..k_users {
            q[k] = level * problem.rho[k] / gains[k];
        }
        let rel = (level - level_prev).abs() / level.abs().max(1e-300);
        level_prev = level;
        if rel < opts.tol {
            fixed_point_converged = true;
            break;
        }
    }

    // Downlink beam directions from the converged uplink covariance.
    let n_t = problem.n_t();
    let mut cov = DMatrix::from_diagonal_element(n_t, n_t, Complex64::new(problem.sigma2, 0.0));
    for (j, &qj) in q.iter().enumerate() {
        let col = h.column(j);
        cov.gerc(Complex64::new(qj, 0.0), &col, &col, Complex64::new(1.0, 0.0));
    }
    let chol = Cholesky::new(cov)
        .ok_or_else(|| Error::Solver("uplink covariance factorization failed".into()))?;
    let solved = chol.solve(h);
    let mut directions = Vec::with_capacity(k_users);
    for k in 0..k_users {
        let d = solved.column(k).into_owned();
        let norm = d.norm();
        if norm == 0.0 {
            return Err(Error::Solver("degenerate beam direction".into()));
        }
        directions.push(d / Complex64::new(norm, 0.0));
    }

    // Exact downlink power rebalance for these directions.
    let powers = downlink_powers(problem, &directions)?;
    let mut precoder = DMatrix::from_element(n_t, k_users, Complex64::new(0.0, 0.0));
    for k in 0..k_users {
        let col = &directions[k] * Complex64::new(powers[k].sqrt(), 0.0);
        precoder.set_column(k, &col);
    }
    canonicalize_phases(h, &mut precoder);

    let weighted: Vec<f64> = sinrs(problem, &precoder)
        .iter()
        .zip(problem.rho.iter())
        .map(|(g, r)| g / r)
        .collect();
    let min_w = weighted.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_w = weighted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let spread = (max_w - min_w) / min_w.max(1e-300);

    Ok(PrecodingSolution {
        precoder,
        objective: min_w,
        iterations,
        residual: spread,
        converged: fixed_point_converged && spread <= opts.tol,
    })
}

/// For fixed unit beam directions, finds the powers that equalize the
/// weighted SINRs at the highest level whose total power fits the budget.
/// The balance equations are linear in the powers for a given level, and the
/// total power is monotone in the level, so bisection is exact.
fn downlink_powers(
    problem: &PrecodingProblem,
    directions: &[DVector<Complex64>],
) -> Result<Vec<f64>> {
    let k_users = problem.k_users();
    let h = &problem.channel;
    let gain = |k: usize, j: usize| h.column(k).dotc(&directions[j]).norm_sqr();

    // p_k G_kk = t rho_k (sum_{j != k} p_j G_kj + sigma2)
    let mut coupling = DMatrix::zeros(k_users, k_users);
    let mut noise = DVector::zeros(k_users);
    for k in 0..k_users {
        let g_kk = gain(k, k);
        if g_kk <= 0.0 {
            return Err(Error::Solver("beam orthogonal to its own user".into()));
        }
        for j in 0..k_users {
            if j != k {
                coupling[(k, j)] = problem.rho[k] * gain(k, j) / g_kk;
            }
        }
        noise[k] = problem.rho[k] * problem.sigma2 / g_kk;
    }

    let solve_level = |t: f64| -> Option<DVector<f64>> {
        let a = DMatrix::identity(k_users, k_users) - &coupling * t;
        let p = a.lu().solve(&(&noise * t))?;
        if p.iter().all(|&x| x.is_finite() && x >= 0.0) {
            Some(p)
        } else {
            None
        }
    };

    // Bracket: grow until the level is infeasible or over budget.
    let mut lo = 0.0;
    let mut hi = 1.0;
    for _ in 0..200 {
        match solve_level(hi) {
            Some(p) if p.sum() <= problem.p_max => {
                lo = hi;
                hi *= 2.0;
            }
            _ => break,
        }
    }
    for _ in 0..DOWNLINK_BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match solve_level(mid) {
            Some(p) if p.sum() <= problem.p_max => lo = mid,
            _ => hi = mid,
        }
    }
    let p = solve_level(lo).ok_or_else(|| Error::Solver("downlink power solve failed".into()))?;
    Ok(p.iter().cloned().collect())
}

/// Independent verification route for the balanced level: bisection over the
/// target level, deciding feasibility per level with the monotone power
/// iteration `q_k <- t rho_k / g_k(q)` started from zero. Returns the highest
/// provably feasible level to 1e-6 relative.
pub fn balanced_level_oracle(problem: &PrecodingProblem) -> Result<f64> {
    check_channels(problem)?;
    let k_users = problem.k_users();

    let feasible = |t: f64| -> bool {
        let mut q = vec![0.0; k_users];
        for _ in 0..FEASIBILITY_ITERS {
            let gains = match uplink_gains(problem, &q) {
                Some(g) => g,
                None => return false,
            };
            let mut max_rel = 0.0f64;
            let mut total = 0.0;
            for k in 0..k_users {
                let next = t * problem.rho[k] / gains[k];
                max_rel = max_rel.max((next - q[k]).abs() / next.abs().max(1e-300));
                q[k] = next;
                total += next;
            }
            if total > problem.p_max {
                return false;
            }
            if max_rel < 1e-10 {
                return true;
            }
        }
        true
    };

    // The balanced level cannot exceed any user's single-user SINR.
    let single_user_cap = (0..k_users)
        .map(|k| {
            problem.p_max * problem.channel.column(k).norm_squared()
                / (problem.sigma2 * problem.rho[k])
        })
        .fold(f64::INFINITY, f64::min);
    let mut lo = 0.0;
    let mut hi = single_user_cap * (1.0 + 1e-9) + f64::MIN_POSITIVE;
    for _ in 0..ORACLE_BISECT_CAP {
        if hi - lo <= ORACLE_REL_TOL * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_channel;
    use super::super::balanced_level;
    use super::*;
    use approx::assert_relative_eq;

    fn solve(problem: &PrecodingProblem) -> PrecodingSolution {
        sinr_balancing_precoder(problem, SolverOptions::balancing_default()).unwrap()
    }

    #[test]
    fn single_user_full_power_matched_filter() {
        let h = random_channel(4, 1, 42);
        let p = PrecodingProblem::new(h.clone(), 1.0, 2.0);
        let sol = solve(&p);
        let expect = 2.0 * h.norm_squared() / 1.0;
        assert_relative_eq!(sol.objective, expect, max_relative = 1e-9);
        assert_relative_eq!(sol.precoder.norm_squared(), 2.0, max_relative = 1e-9);
        let corr =
            h.column(0).dotc(&sol.precoder.column(0)).norm() / (h.norm() * sol.precoder.norm());
        assert_relative_eq!(corr, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn orthogonal_equal_norm_channels_split_power() {
        let s = 3f64.sqrt();
        let h = DMatrix::from_column_slice(
            2,
            2,
            &[
                Complex64::new(s, 0.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, s),
            ],
        );
        let p = PrecodingProblem::new(h, 2.0, 4.0);
        let sol = solve(&p);
        // Each user: (p_max/2) ||h||^2 / sigma2 = 2 * 3 / 2 = 3.
        assert_relative_eq!(sol.objective, 3.0, max_relative = 1e-8);
        for k in 0..2 {
            assert_relative_eq!(sol.precoder.column(k).norm_squared(), 2.0, max_relative = 1e-8);
        }
    }

    #[test]
    fn balanced_and_tight_on_random_instances() {
        for seed in 0..10u64 {
            let h = random_channel(2, 2, 900 + seed);
            let p = PrecodingProblem::new(h, 1.0, 10.0);
            let sol = solve(&p);
            assert!(sol.converged, "seed {seed}");
            assert!(sol.residual <= 1e-6, "seed {seed}: spread {}", sol.residual);
            assert_relative_eq!(sol.precoder.norm_squared(), 10.0, max_relative = 1e-6);
            assert_relative_eq!(
                sol.objective,
                balanced_level(&p, &sol.precoder),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn matches_bisection_oracle() {
        for seed in 0..6u64 {
            let h = random_channel(2, 2, 1000 + seed);
            let p = PrecodingProblem::new(h, 1.0, 5.0);
            let sol = solve(&p);
            let oracle = balanced_level_oracle(&p).unwrap();
            assert_relative_eq!(sol.objective, oracle, max_relative = 1e-4);
        }
    }

    #[test]
    fn oracle_single_user_closed_form() {
        let h = random_channel(3, 1, 1100);
        let p = PrecodingProblem::new(h.clone(), 1.0, 2.0);
        let oracle = balanced_level_oracle(&p).unwrap();
        assert_relative_eq!(oracle, 2.0 * h.norm_squared(), max_relative = 1e-5);
    }

    #[test]
    fn priorities_shift_the_balance() {
        let h = random_channel(4, 2, 1200);
        let mut p = PrecodingProblem::new(h, 1.0, 10.0);
        p.rho = DVector::from_vec(vec![1.0, 4.0]);
        let sol = solve(&p);
        let g = sinrs(&p, &sol.precoder);
        // gamma_2 / gamma_1 = rho_2 / rho_1 at the balanced point.
        assert_relative_eq!(g[1] / g[0], 4.0, max_relative = 1e-5);
    }

    #[test]
    fn zero_channel_is_signaled() {
        let mut h = random_channel(4, 2, 1300);
        h.set_column(0, &DVector::from_element(4, Complex64::new(0.0, 0.0)));
        let p = PrecodingProblem::new(h, 1.0, 1.0);
        assert!(sinr_balancing_precoder(&p, SolverOptions::balancing_default()).is_err());
        assert!(balanced_level_oracle(&p).is_err());
    }

    #[test]
    fn more_users_than_antennas_still_balances() {
        let h = random_channel(2, 3, 1400);
        let p = PrecodingProblem::new(h, 1.0, 10.0);
        let sol = solve(&p);
        assert!(sol.objective > 0.0);
        assert!(sol.residual <= 1e-6);
    }
}

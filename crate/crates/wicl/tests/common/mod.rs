//! Shared test oracles, independent of the library's solver paths.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use wicl::precoding::{sum_rate, PrecodingProblem};
use wicl::rng::{self, Domain};

pub fn random_channel(n_t: usize, k: usize, seed: u64) -> DMatrix<Complex64> {
    let mut r = rng::stream(Domain::Eval, seed, &[n_t as u64, k as u64, 0xc0de]);
    DMatrix::from_fn(n_t, k, |_, _| {
        let re: f64 = StandardNormal.sample(&mut r);
        let im: f64 = StandardNormal.sample(&mut r);
        Complex64::new(re, im) / 2f64.sqrt()
    })
}

/// Euclidean (Wirtinger) ascent direction of the weighted sum rate in the
/// precoder columns.
fn sum_rate_gradient(problem: &PrecodingProblem, w: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let k_users = problem.k_users();
    let h = &problem.channel;
    let ln2 = std::f64::consts::LN_2;
    // Per-user signal and interference-plus-noise terms.
    let mut signal = vec![0.0; k_users];
    let mut denom = vec![0.0; k_users];
    for k in 0..k_users {
        let h_k = h.column(k);
        let mut interference = problem.sigma2;
        for i in 0..k_users {
            let g = h_k.dotc(&w.column(i)).norm_sqr();
            if i == k {
                signal[k] = g;
            } else {
                interference += g;
            }
        }
        denom[k] = interference;
    }
    let mut grad = DMatrix::from_element(problem.n_t(), k_users, Complex64::new(0.0, 0.0));
    for j in 0..k_users {
        let mut col = nalgebra::DVector::from_element(problem.n_t(), Complex64::new(0.0, 0.0));
        for k in 0..k_users {
            let gamma = signal[k] / denom[k];
            let coeff = if k == j {
                problem.alpha[k] / (ln2 * (1.0 + gamma) * denom[k])
            } else {
                -problem.alpha[k] * gamma / (ln2 * (1.0 + gamma) * denom[k])
            };
            let h_k = h.column(k);
            let inner = h_k.dotc(&w.column(j));
            col.axpy(Complex64::new(coeff, 0.0) * inner, &h_k, Complex64::new(1.0, 0.0));
        }
        grad.set_column(j, &col);
    }
    grad
}

fn project_ball(w: &mut DMatrix<Complex64>, p_max: f64) {
    let power = w.norm_squared();
    if power > p_max {
        *w *= Complex64::new((p_max / power).sqrt(), 0.0);
    }
}

fn ascend(problem: &PrecodingProblem, mut w: DMatrix<Complex64>, iters: usize) -> f64 {
    project_ball(&mut w, problem.p_max);
    let mut obj = sum_rate(problem, &w);
    let mut step = 0.1 * problem.p_max;
    for _ in 0..iters {
        let grad = sum_rate_gradient(problem, &w);
        let mut improved = false;
        for _ in 0..40 {
            let mut cand = &w + &grad * Complex64::new(step, 0.0);
            project_ball(&mut cand, problem.p_max);
            let cand_obj = sum_rate(problem, &cand);
            if cand_obj > obj {
                w = cand;
                obj = cand_obj;
                step *= 1.5;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved || step < 1e-14 {
            break;
        }
    }
    obj
}

/// Multi-start projected-gradient ascent on the weighted sum rate: the
/// independent optimality reference for the iterative solver. Returns the
/// best objective over `restarts` random starts plus a matched-filter start.
pub fn projected_gradient_sum_rate(
    problem: &PrecodingProblem,
    restarts: usize,
    seed: u64,
) -> f64 {
    let mut best = f64::NEG_INFINITY;
    // Matched-filter start.
    let mut mf = problem.channel.clone();
    let scale = (problem.p_max / mf.norm_squared()).sqrt();
    mf *= Complex64::new(scale, 0.0);
    best = best.max(ascend(problem, mf, 600));
    for r in 0..restarts {
        let mut stream = rng::stream(Domain::Eval, seed, &[r as u64, 0x9fad]);
        let w0 = DMatrix::from_fn(problem.n_t(), problem.k_users(), |_, _| {
            let re: f64 = StandardNormal.sample(&mut stream);
            let im: f64 = StandardNormal.sample(&mut stream);
            Complex64::new(re, im)
        });
        best = best.max(ascend(problem, w0, 600));
    }
    best
}

/// The oracle's own gradient is validated against finite differences; with
/// a broken gradient the ascent would silently under-optimize.
pub fn self_check_gradient() {
    let h = random_channel(3, 2, 0xfeed);
    let problem = PrecodingProblem::new(h, 1.0, 4.0);
    let w = random_channel(3, 2, 0xbeef);
    let grad = sum_rate_gradient(&problem, &w);
    let eps = 1e-6;
    for idx in 0..w.len() {
        for part in 0..2 {
            let mut up = w.clone();
            let mut down = w.clone();
            let delta = if part == 0 {
                Complex64::new(eps, 0.0)
            } else {
                Complex64::new(0.0, eps)
            };
            up[idx] += delta;
            down[idx] -= delta;
            let fd = (sum_rate(&problem, &up) - sum_rate(&problem, &down)) / (2.0 * eps);
            // Wirtinger convention: d/dRe = 2 Re(grad), d/dIm = 2 Im(grad).
            let an = if part == 0 { 2.0 * grad[idx].re } else { 2.0 * grad[idx].im };
            assert!(
                (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()).max(1.0),
                "oracle gradient mismatch at {idx}/{part}: fd {fd}, analytic {an}"
            );
        }
    }
}

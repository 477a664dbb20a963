//! Compares the precoding solvers on one random instance: matched filter,
//! zero forcing, the weighted-MMSE sum-rate solver and max-min SINR
//! balancing, with the balancing level cross-checked against its bisection
//! oracle.
//!
//! Run: `cargo run -p wicl --release --example precoding_solvers`

use wicl::channel::{generate_dataset, SystemConfig};
use wicl::precoding::*;

fn main() {
    let cfg = SystemConfig::default().with_snr_db(10.0);
    let sample = &generate_dataset(&cfg, 1, [30.0, 30.0], &[10.0], 1, 7).unwrap()[0];
    let problem = PrecodingProblem::new(sample.precoding_channel().clone(), cfg.sigma2, cfg.p_max);
    println!(
        "instance: {}x{} channel, p_max {:.1} W, sigma2 {:.1} W",
        problem.n_t(),
        problem.k_users(),
        problem.p_max,
        problem.sigma2
    );

    let mrt = mrt_precoder(&problem).unwrap();
    let zf = zf_precoder(&problem).unwrap();
    let (wmmse, trace) = wmmse_precoder_traced(&problem, SolverOptions::wmmse_default()).unwrap();
    let balanced = sinr_balancing_precoder(&problem, SolverOptions::balancing_default()).unwrap();

    println!("\n{:<12} {:>12} {:>12} {:>10}", "solver", "sum rate", "min rate", "iters");
    for (name, sol) in [("mrt", &mrt), ("zf", &zf), ("wmmse", &wmmse)] {
        println!(
            "{:<12} {:>12.4} {:>12.4} {:>10}",
            name,
            sum_rate(&problem, &sol.precoder),
            min_rate(&problem, &sol.precoder),
            sol.iterations
        );
    }
    println!(
        "{:<12} {:>12.4} {:>12.4} {:>10}",
        "balancing",
        sum_rate(&problem, &balanced.precoder),
        min_rate(&problem, &balanced.precoder),
        balanced.iterations
    );

    println!(
        "\nwmmse objective trace: start {:.4}, end {:.4} over {} evaluations (never decreasing)",
        trace.first().unwrap(),
        trace.last().unwrap(),
        trace.len()
    );
    let oracle = balanced_level_oracle(&problem).unwrap();
    println!(
        "balanced level {:.6} vs bisection oracle {:.6} (relative gap {:.2e})",
        balanced.objective,
        oracle,
        (balanced.objective - oracle).abs() / oracle
    );
    let sinrs = sinrs(&problem, &balanced.precoder);
    println!("balanced per-user SINRs: {sinrs:.4?}");
}

//! Synthesizes time-varying multipath channels and prints their structure:
//! Doppler spread, delay spread, temporal correlation, and the unit-gain
//! normalization.
//!
//! Run: `cargo run -p wicl --release --example channel_synthesis`

use wicl::channel::{sample_path_set, synthesize_channel, steering_vector, SystemConfig};
use wicl::rng::{self, Domain};

fn main() {
    let cfg = SystemConfig::default();
    println!(
        "array {}x{} ({} antennas), {} users, carrier {:.2} GHz, slot {:.1} ms",
        cfg.n_h,
        cfg.n_v,
        cfg.n_t(),
        cfg.k_users,
        cfg.f_c / 1e9,
        cfg.slot_duration * 1e3
    );

    // Steering vectors are unit-modulus per antenna.
    let a = steering_vector(0.7, -0.15, &cfg);
    println!(
        "steering entry moduli: min {:.12}, max {:.12}",
        a.iter().map(|e| e.norm()).fold(f64::INFINITY, f64::min),
        a.iter().map(|e| e.norm()).fold(0.0f64, f64::max),
    );

    for velocity in [0.0, 30.0, 100.0] {
        let mut stream = rng::stream(Domain::PathSet, 1, &[velocity as u64]);
        let paths = sample_path_set(&mut stream, &cfg, velocity);
        let max_doppler = paths
            .iter_paths()
            .map(|p| p.doppler.abs())
            .fold(0.0f64, f64::max);
        let mean_delay = paths.iter_paths().map(|p| p.delay).sum::<f64>()
            / paths.iter_paths().count() as f64;

        // Temporal autocorrelation over one slot.
        let h0 = synthesize_channel(&paths, 0.0, cfg.f_c, &cfg);
        let h1 = synthesize_channel(&paths, cfg.slot_duration, cfg.f_c, &cfg);
        let corr = h0.dotc(&h1).norm() / (h0.norm() * h1.norm());
        println!(
            "v = {velocity:>5.1} km/h: gain^2 sum {:.6}, max |doppler| {max_doppler:7.1} Hz, \
             mean delay {:.0} ns, slot correlation {corr:.5}",
            paths.total_gain_sq(),
            mean_delay * 1e9,
        );
    }
}

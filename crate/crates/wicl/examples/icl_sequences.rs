//! Shows how tasks become token sequences: packing complex matrices into
//! real vectors, demonstration/query layout for precoding, and the
//! overlapping pair layout for prediction.
//!
//! Run: `cargo run -p wicl --release --example icl_sequences`

use wicl::channel::{generate_dataset, SystemConfig};
use wicl::precoding::{wmmse_precoder, PrecodingProblem, SolverOptions};
use wicl::sequence::*;

fn main() {
    let cfg = SystemConfig {
        n_h: 2,
        n_v: 2,
        k_users: 2,
        ..SystemConfig::default()
    };
    let samples = generate_dataset(&cfg, 4, [40.0, 40.0], &[10.0], 4, 3).unwrap();

    // Pack/unpack round trip.
    let h = samples[0].precoding_channel();
    let packed = pack_complex(h);
    println!(
        "packed {}x{} channel -> {} reals (first four: {:?})",
        h.nrows(),
        h.ncols(),
        packed.len(),
        &packed[..4]
    );
    assert_eq!(&unpack_complex(&packed, h.nrows(), h.ncols()).unwrap(), h);

    // A 2-shot precoding sequence with solved labels.
    let solve = |h: &nalgebra::DMatrix<num_complex::Complex64>| {
        let p = PrecodingProblem::new(h.clone(), 1.0, 10.0);
        wmmse_precoder(&p, SolverOptions::wmmse_default()).unwrap().precoder
    };
    let demos: Vec<_> = samples[..2]
        .iter()
        .map(|s| {
            let h = s.precoding_channel().clone();
            let w = solve(&h);
            (h, w)
        })
        .collect();
    let query = samples[2].precoding_channel();
    let seq = build_precoding_sequence(Task::P1, &demos, query, None, 1.0).unwrap();
    println!("\nprecoding sequence: task {:?}, {} shots", seq.task, seq.shots);
    for (i, tok) in seq.tokens.iter().enumerate() {
        let marker = if seq.loss_positions.contains(&i) { "<- loss" } else { "" };
        println!("  position {i}: {:?} token {marker}", tok.role);
    }

    // The prediction layout: overlapping slot pairs.
    let pred = build_prediction_sequence(&samples[3], 1.0).unwrap();
    println!(
        "\nprediction sequence: {} tokens from {} slots, loss at {:?}",
        pred.len(),
        samples[3].history.len(),
        pred.loss_positions
    );
    println!(
        "overlap check: token 1 == token 2 -> {}",
        pred.tokens[1].values == pred.tokens[2].values
    );
}

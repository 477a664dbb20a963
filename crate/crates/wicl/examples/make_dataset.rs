//! Generates a small labeled dataset, writes it in the WDS1 format, reads it
//! back and verifies the round trip is bit-exact.
//!
//! Run: `cargo run -p wicl --release --example make_dataset`

use wicl::channel::{generate_dataset, SystemConfig};
use wicl::precoding::{project_power, wmmse_precoder, PrecodingProblem, SolverOptions};
use wicl::sequence::{channel_rms, Task};
use wicl::wds::{file_digest, Dataset};

fn main() {
    let cfg = SystemConfig::default();
    let samples = generate_dataset(&cfg, 16, [10.0, 100.0], &[0.0, 10.0, 20.0], 1, 42).unwrap();
    let labels: Vec<_> = samples
        .iter()
        .map(|s| {
            let p_max = 10f64.powf(s.snr_db / 10.0);
            let problem = PrecodingProblem::new(s.precoding_channel().clone(), 1.0, p_max);
            let sol = wmmse_precoder(&problem, SolverOptions::wmmse_default()).unwrap();
            project_power(&sol.precoder, p_max).unwrap()
        })
        .collect();
    let norm = channel_rms(samples.iter().flat_map(|s| s.history.iter()));
    let ds = Dataset::new(&cfg, Some(Task::P1), 1, 42, norm, samples, Some(labels)).unwrap();

    let dir = std::env::temp_dir().join("wicl_example");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("demo_p1.wds");
    ds.write(&path).unwrap();
    let bytes = std::fs::metadata(&path).unwrap().len();
    println!("wrote {path:?}: {bytes} bytes, sha256 {}", file_digest(&path).unwrap());

    let back = Dataset::read(&path).unwrap();
    println!(
        "read back: {} samples, task {:?}, norm scalar {:.4}, labels: {}",
        back.samples.len(),
        back.header.task,
        back.header.norm_scalar.unwrap(),
        back.labels.as_ref().map_or(0, Vec::len)
    );

    let rewritten = dir.join("demo_p1_rt.wds");
    back.write(&rewritten).unwrap();
    println!(
        "round trip bit-exact: {}",
        file_digest(&path).unwrap() == file_digest(&rewritten).unwrap()
    );
}

//! End-to-end miniature run: dataset generation with solver labels, joint
//! training, and all five report sweeps, driven by the same config machinery
//! as the `wicl` binary. Finishes in about a minute.
//!
//! Run: `cargo run -p wicl --release --example full_pipeline`

use wicl::experiment::*;

fn main() {
    let dir = std::env::temp_dir().join("wicl_pipeline_example");
    let _ = std::fs::remove_dir_all(&dir);
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = dir.clone();
    cfg.data.train_samples_per_task = 150;
    cfg.data.test_samples_per_task = 60;
    cfg.data.bucket_samples = 30;
    cfg.train.epochs = 4;
    cfg.train.steps_per_epoch = 50;
    cfg.train.warmup_steps = 40;
    cfg.train.batch_size = 16;
    cfg.eval.shots_grid = vec![0, 1, 4];

    println!("generating datasets with solver labels...");
    let manifest = cmd_gen_data(&cfg).unwrap();
    for entry in &manifest.files {
        println!("  {} ({} samples) sha256 {}...", entry.name, entry.n_samples, &entry.sha256[..12]);
    }

    println!("training...");
    let state = cmd_train(&cfg).unwrap();
    println!(
        "  {} steps, final per-task losses {:?}",
        state.step,
        state.loss_history.last().unwrap()
    );

    println!("evaluating all experiments...");
    for path in cmd_eval(&cfg, "all").unwrap() {
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        println!("  {:?}", path.file_name().unwrap());
        println!("    {}", lines.next().unwrap());
        if let Some(row) = lines.next() {
            println!("    {row}");
        }
    }
    println!("outputs under {dir:?}");
}

use std::time::Instant;
use wicl::experiment::*;

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = "/tmp/smoke/run".into();
    cfg.data.train_samples_per_task = 120;
    cfg.data.test_samples_per_task = 60;
    cfg.data.bucket_samples = 30;
    cfg.train.epochs = 2;
    cfg.train.steps_per_epoch = 10;
    cfg.train.warmup_steps = 5;
    cfg.train.batch_size = 16;

    let t0 = Instant::now();
    let manifest = cmd_gen_data(&cfg).unwrap();
    println!("gen-data: {} files in {:.1?}", manifest.files.len(), t0.elapsed());

    let t1 = Instant::now();
    let state = cmd_train(&cfg).unwrap();
    let steps = state.step;
    println!(
        "train: {} steps in {:.1?} ({:.0} ms/step), losses {:?}",
        steps,
        t1.elapsed(),
        t1.elapsed().as_millis() as f64 / steps as f64,
        state.loss_history.last().unwrap()
    );

    let t2 = Instant::now();
    let written = cmd_eval(&cfg, "all").unwrap();
    println!("eval: {} reports in {:.1?}", written.len(), t2.elapsed());
    for w in &written {
        let text = std::fs::read_to_string(w).unwrap();
        println!("--- {:?}: {} lines, head: {}", w.file_name().unwrap(), text.lines().count(),
                 text.lines().next().unwrap());
    }
}

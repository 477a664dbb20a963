//! Overfits a small model on a fixed batch of mixed-task sequences and
//! prints the loss trajectory — a fast sanity check that gradients,
//! optimizer and loss weighting cooperate.
//!
//! Run: `cargo run -p wicl --release --example train_tiny`

use wicl::channel::{generate_dataset, SystemConfig};
use wicl::model::ModelConfig;
use wicl::precoding::{
    project_power, sinr_balancing_precoder, wmmse_precoder, PrecodingProblem, SolverOptions,
};
use wicl::rng::{self, Domain};
use wicl::sequence::*;
use wicl::train::{train_step, TrainConfig, TrainState};

fn main() {
    let sys = SystemConfig {
        n_h: 2,
        n_v: 2,
        k_users: 2,
        ..SystemConfig::default()
    };
    let samples = generate_dataset(&sys, 12, [10.0, 100.0], &[10.0], 4, 11).unwrap();
    let scale = channel_rms(samples.iter().flat_map(|s| s.history.iter()));
    let channels: Vec<_> = samples.iter().map(|s| s.precoding_channel().clone()).collect();
    let snrs = vec![10.0; samples.len()];
    let label = |task: Task| -> Vec<_> {
        channels
            .iter()
            .map(|h| {
                let p = PrecodingProblem::new(h.clone(), 1.0, 10.0);
                let w = match task {
                    Task::P1 => wmmse_precoder(&p, SolverOptions::wmmse_default()).unwrap().precoder,
                    _ => sinr_balancing_precoder(&p, SolverOptions::balancing_default())
                        .unwrap()
                        .precoder,
                };
                project_power(&w, 10.0).unwrap()
            })
            .collect()
    };
    let pools = TaskPools {
        p1: PrecodingPool::new(Task::P1, channels.clone(), label(Task::P1), snrs.clone(), scale)
            .unwrap(),
        p2: PrecodingPool::new(Task::P2, channels, label(Task::P2), snrs, scale).unwrap(),
        p3: PredictionPool { samples, scale },
    };

    let model_cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 64,
        d_ffn: 256,
        max_positions: 32,
        token_dim: sys.token_dim(),
    };
    let cfg = TrainConfig {
        epochs: 6,
        steps_per_epoch: 100,
        warmup_steps: 50,
        peak_lr: 2e-3,
        min_lr: 2e-4,
        weight_decay: 0.0,
        batch_size: 16,
        train_shots: 3,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut stream = rng::stream(Domain::Sampler, 1, &[0]);
    let batch = mixed_batch_sampler(&pools, 16, 3, [1.0, 1.0, 1.0], &mut stream).unwrap();
    let mut state = TrainState::<f32>::new(&model_cfg, 1, &pools).unwrap();
    println!(
        "overfitting {} fixed sequences, {} parameters",
        batch.len(),
        state.params.n_params()
    );
    for step in 0..600 {
        let loss = train_step(&mut state, &batch, &cfg).unwrap();
        if step % 100 == 0 || step == 599 {
            println!("step {step:>4}: total loss {loss:.3e}");
        }
    }
}

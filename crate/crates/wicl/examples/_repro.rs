use wicl::channel::{generate_dataset, SystemConfig};
use wicl::model::ModelConfig;
use wicl::precoding::*;
use wicl::sequence::*;
use wicl::train::*;

fn main() {
    let sys = SystemConfig { n_h: 2, n_v: 2, k_users: 2, ..SystemConfig::default() };
    let samples = generate_dataset(&sys, 24, [10.0, 100.0], &[0.0, 10.0], 4, 17).unwrap();
    let scale = channel_rms(samples.iter().flat_map(|s| s.history.iter()));
    let channels: Vec<_> = samples.iter().map(|s| s.precoding_channel().clone()).collect();
    let snrs: Vec<f64> = samples.iter().map(|s| s.snr_db).collect();
    let solve = |task: Task| -> Vec<_> {
        channels.iter().zip(snrs.iter()).map(|(h, &snr)| {
            let p_max = 10f64.powf(snr / 10.0);
            let p = PrecodingProblem::new(h.clone(), 1.0, p_max);
            let w = match task {
                Task::P1 => wmmse_precoder(&p, SolverOptions::wmmse_default()).unwrap().precoder,
                _ => sinr_balancing_precoder(&p, SolverOptions::balancing_default()).unwrap().precoder,
            };
            project_power(&w, p_max).unwrap()
        }).collect()
    };
    let p1l = solve(Task::P1);
    let p2l = solve(Task::P2);
    let pools = TaskPools {
        p1: PrecodingPool::new(Task::P1, channels.clone(), p1l, snrs.clone(), scale).unwrap(),
        p2: PrecodingPool::new(Task::P2, channels, p2l, snrs, scale).unwrap(),
        p3: PredictionPool { samples, scale },
    };
    let mc = ModelConfig { n_layers: 2, n_heads: 2, d_model: 32, d_ffn: 64, max_positions: 32, token_dim: sys.token_dim() };
    let cfg = TrainConfig { batch_size: 8, epochs: 1, steps_per_epoch: 6, warmup_steps: 4, train_shots: 2, seed: 5, ..TrainConfig::default() };
    for trial in 0..3 {
        let mut st = TrainState::<f32>::new(&mc, 5, &pools).unwrap();
        train(&mut st, &pools, &cfg).unwrap();
        println!("trial {trial}: history {:?}", st.loss_history.iter().map(|r| format!("{:.17e} {:.17e} {:.17e}", r[0], r[1], r[2])).collect::<Vec<_>>());
    }
}

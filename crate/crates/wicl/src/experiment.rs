//! Config-driven experiment runs: dataset generation with solver labels,
//! training, and report evaluation. The `wicl` binary is a thin wrapper
//! around the three `cmd_*` functions here.
//!
//! Every command is a pure function of its config file and input files:
//! rerunning with the same inputs produces byte-identical outputs.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{generate_dataset, ChannelSample, SystemConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::eval::{
    eval_min_rate_vs_snr, eval_nmse_vs_velocity, eval_shots_sweep, eval_sum_rate_vs_snr,
    eval_unseen_snr, EvalReport, Evaluator,
};
use crate::model::ModelConfig;
use crate::precoding::{
    project_power, sinr_balancing_precoder, wmmse_precoder, PrecodingProblem, SolverOptions,
};
use crate::sequence::{channel_rms, PrecodingPool, PredictionPool, Task, TaskPools};
use crate::train::{dwa_weights, lr_schedule, train_with, TrainConfig, TrainState};
use crate::wds::{file_digest, Dataset};

/// Dataset sizes and scenario grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_samples_per_task: usize,
    pub test_samples_per_task: usize,
    pub bucket_samples: usize,
    pub velocity_range: [f64; 2],
    pub train_snrs_db: Vec<f64>,
    pub eval_snrs_db: Vec<f64>,
    pub velocity_buckets: Vec<f64>,
    /// History slots for precoding datasets (the current slot is appended).
    pub t_history_precoding: usize,
    /// History slots for prediction datasets; 9 supports the 8-shot sweep.
    pub t_history_prediction: usize,
    pub solver_max_iters: usize,
    pub solver_tol: f64,
    pub solver_restarts: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_samples_per_task: 4000,
            test_samples_per_task: 500,
            bucket_samples: 300,
            velocity_range: [10.0, 100.0],
            train_snrs_db: vec![0.0, 10.0, 20.0, 30.0],
            eval_snrs_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            velocity_buckets: vec![0.0, 10.0, 30.0, 50.0, 70.0, 100.0],
            t_history_precoding: 1,
            t_history_prediction: 9,
            solver_max_iters: 200,
            solver_tol: 1e-6,
            solver_restarts: 6,
        }
    }
}

/// Architecture section; the token dimension always derives from the system
/// geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub max_positions: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ffn: 512,
            max_positions: 64,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, sys: &SystemConfig) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            max_positions: self.max_positions,
            token_dim: sys.token_dim(),
        }
    }
}

/// Report settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub shots_grid: Vec<usize>,
    /// Headline demonstration count for the SNR sweeps.
    pub eval_shots: usize,
    /// Context pairs for the velocity sweep (demonstrations before the
    /// query).
    pub fig9_shots: usize,
    pub heldout_snrs_db: Vec<f64>,
    pub shots_sweep_snr_db: f64,
    /// Emit gnuplot-style whitespace CSVs instead of comma CSVs.
    pub gnuplot: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            shots_grid: vec![0, 1, 2, 4, 8],
            eval_shots: 4,
            fig9_shots: 8,
            heldout_snrs_db: vec![5.0, 15.0, 25.0],
            shots_sweep_snr_db: 10.0,
            gnuplot: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset directory; defaults to `<out_dir>/data`. Point several runs
    /// at one directory to share generated datasets.
    pub data_dir: Option<PathBuf>,
    pub system: SystemConfig,
    pub model: ModelSection,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("wicl-run"),
            data_dir: None,
            system: SystemConfig::default(),
            model: ModelSection::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {path:?}: {e}")))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.train.validate()?;
        self.model
            .to_model_config(&self.system)
            .validate()?;
        if self.data.train_samples_per_task < 1 || self.data.test_samples_per_task < 1 {
            return Err(Error::config("dataset sizes must be >= 1"));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out_dir.join("reports")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoint.wcp")
    }

    pub fn dataset_path(&self, name: &str) -> PathBuf {
        self.data_dir().join(format!("{name}.wds"))
    }

    /// Writes the fully resolved config next to the outputs, so every run is
    /// self-describing.
    pub fn write_resolved(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("cannot serialize config: {e}")))?;
        std::fs::write(self.out_dir.join("config_resolved.toml"), text)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub task: Task,
    pub n_samples: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenManifest {
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

fn solve_labels(
    samples: &[ChannelSample],
    task: Task,
    opts: SolverOptions,
) -> Result<Vec<DMatrix<Complex64>>> {
    samples
        .par_iter()
        .map(|s| {
            let p_max = 10f64.powf(s.snr_db / 10.0);
            let problem = PrecodingProblem::new(s.precoding_channel().clone(), 1.0, p_max);
            let solution = match task {
                Task::P1 => wmmse_precoder(&problem, opts)?,
                Task::P2 => sinr_balancing_precoder(&problem, opts)?,
                Task::P3 => unreachable!("prediction needs no solver labels"),
            };
            project_power(&solution.precoder, p_max)
        })
        .collect()
}

fn dataset_seed(base: u64, index: u64) -> u64 {
    base.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Generates all task datasets with solver labels and writes the digest
/// manifest. Deterministic: the same config yields byte-identical files.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<GenManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(cfg.data_dir())?;
    cfg.write_resolved()?;
    let sys = &cfg.system;
    let d = &cfg.data;
    let opts = SolverOptions {
        max_iters: d.solver_max_iters,
        tol: d.solver_tol,
        restarts: d.solver_restarts,
    };
    let mut entries = Vec::new();
    let mut write = |name: &str,
                     task: Task,
                     t_history: usize,
                     seed: u64,
                     samples: Vec<ChannelSample>,
                     labels: Option<Vec<DMatrix<Complex64>>>|
     -> Result<()> {
        let norm = channel_rms(samples.iter().flat_map(|s| s.history.iter()));
        let ds = Dataset::new(sys, Some(task), t_history, seed, norm, samples, labels)?;
        let path = cfg.dataset_path(name);
        ds.write(&path)?;
        entries.push(ManifestEntry {
            name: name.into(),
            file: path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            task,
            n_samples: ds.samples.len(),
            sha256: file_digest(&path)?,
        });
        Ok(())
    };

    // Precoding datasets: training at the trained SNR set, test across the
    // full evaluation grid.
    let specs: [(&str, Task, usize, &[f64]); 4] = [
        ("p1_train", Task::P1, d.train_samples_per_task, &d.train_snrs_db),
        ("p1_test", Task::P1, d.test_samples_per_task, &d.eval_snrs_db),
        ("p2_train", Task::P2, d.train_samples_per_task, &d.train_snrs_db),
        ("p2_test", Task::P2, d.test_samples_per_task, &d.eval_snrs_db),
    ];
    for (i, (name, task, n, snrs)) in specs.into_iter().enumerate() {
        let seed = dataset_seed(cfg.seed, i as u64);
        let samples = generate_dataset(
            sys,
            n,
            d.velocity_range,
            snrs,
            d.t_history_precoding,
            seed,
        )?;
        let labels = solve_labels(&samples, task, opts)?;
        write(name, task, d.t_history_precoding, seed, samples, Some(labels))?;
    }

    // Prediction datasets: train/test across the velocity range plus one
    // test set per velocity bucket.
    for (i, (name, n, vr)) in [
        ("p3_train", d.train_samples_per_task, d.velocity_range),
        ("p3_test", d.test_samples_per_task, d.velocity_range),
    ]
    .into_iter()
    .enumerate()
    {
        let seed = dataset_seed(cfg.seed, 4 + i as u64);
        let samples =
            generate_dataset(sys, n, vr, &d.train_snrs_db, d.t_history_prediction, seed)?;
        write(name, Task::P3, d.t_history_prediction, seed, samples, None)?;
    }
    for (i, &v) in d.velocity_buckets.iter().enumerate() {
        let seed = dataset_seed(cfg.seed, 6 + i as u64);
        let samples = generate_dataset(
            sys,
            d.bucket_samples,
            [v, v],
            &d.train_snrs_db,
            d.t_history_prediction,
            seed,
        )?;
        write(
            &format!("p3_test_v{}", v.round() as i64),
            Task::P3,
            d.t_history_prediction,
            seed,
            samples,
            None,
        )?;
    }

    let manifest = GenManifest {
        seed: cfg.seed,
        files: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(cfg.data_dir().join("manifest.json"), json)?;
    Ok(manifest)
}

fn load_precoding_pool(cfg: &ExperimentConfig, name: &str, task: Task) -> Result<PrecodingPool> {
    let ds = Dataset::read(&cfg.dataset_path(name))?;
    let labels = ds
        .labels
        .clone()
        .ok_or_else(|| Error::Dataset(format!("{name} carries no labels")))?;
    let channels: Vec<DMatrix<Complex64>> = ds
        .samples
        .iter()
        .map(|s| s.precoding_channel().clone())
        .collect();
    let snrs: Vec<f64> = ds.samples.iter().map(|s| s.snr_db).collect();
    let scale = ds.header.norm_scalar.unwrap_or(1.0);
    PrecodingPool::new(task, channels, labels, snrs, scale)
}

fn load_prediction_pool(cfg: &ExperimentConfig, name: &str) -> Result<PredictionPool> {
    let ds = Dataset::read(&cfg.dataset_path(name))?;
    Ok(PredictionPool {
        scale: ds.header.norm_scalar.unwrap_or(1.0),
        samples: ds.samples,
    })
}

fn load_train_pools(cfg: &ExperimentConfig) -> Result<TaskPools> {
    Ok(TaskPools {
        p1: load_precoding_pool(cfg, "p1_train", Task::P1)?,
        p2: load_precoding_pool(cfg, "p2_train", Task::P2)?,
        p3: load_prediction_pool(cfg, "p3_train")?,
    })
}

/// Rebuilds the loss CSV from the state's authoritative loss history;
/// the dynamic weights and learning rates are pure functions of it, so a
/// resumed run writes exactly the bytes an uninterrupted run would.
fn write_loss_csv(cfg: &ExperimentConfig, state: &TrainState<f32>) -> Result<()> {
    let mut csv = String::from("epoch,loss_p1,loss_p2,loss_p3,w_p1,w_p2,w_p3,lr\n");
    for (e, losses) in state.loss_history.iter().enumerate() {
        let history: Vec<Vec<f64>> = (0..3)
            .map(|t| state.loss_history[..e].iter().map(|r| r[t]).collect())
            .collect();
        let w = dwa_weights(&history, cfg.train.dwa_temperature);
        let lr = lr_schedule((e + 1) * cfg.train.steps_per_epoch - 1, &cfg.train);
        csv.push_str(&format!(
            "{e},{:.9e},{:.9e},{:.9e},{:.9},{:.9},{:.9},{:.9e}\n",
            losses[0], losses[1], losses[2], w[0], w[1], w[2], lr
        ));
    }
    std::fs::write(cfg.out_dir.join("loss.csv"), csv)?;
    Ok(())
}

/// Trains (or resumes) and writes the checkpoint, loss CSV and resolved
/// config. Returns the final state.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainState<f32>> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    cfg.write_resolved()?;
    let pools = load_train_pools(cfg)?;
    let model_cfg = cfg.model.to_model_config(&cfg.system);

    let ckpt = cfg.checkpoint_path();
    let mut state: TrainState<f32> = if ckpt.exists() {
        let (state, manifest) = load_checkpoint(&ckpt)?;
        if manifest.model != model_cfg {
            return Err(Error::config(
                "existing checkpoint was trained with a different architecture",
            ));
        }
        log::info!("resuming from epoch {}", state.epoch);
        state
    } else {
        TrainState::new(&model_cfg, cfg.train.seed, &pools)?
    };

    let result = train_with(&mut state, &pools, &cfg.train, |s, record| {
        log::info!(
            "epoch {}: losses {:?} weights {:?} lr {:.3e}",
            record.epoch,
            record.task_loss,
            record.dwa_weights,
            record.lr
        );
        // Checkpoint after every epoch; an aborted run resumes here.
        save_checkpoint(&ckpt, s, cfg.train.seed)
    });
    // Even on failure the last good epoch is checkpointed; surface the error
    // after persisting the record of what completed.
    write_loss_csv(cfg, &state)?;
    result?;
    save_checkpoint(&ckpt, &state, cfg.train.seed)?;
    Ok(state)
}

pub const EXPERIMENT_IDS: [&str; 6] = ["fig7", "fig8", "fig9", "shots", "fig13", "all"];

/// Runs one (or all) of the report sweeps against the trained checkpoint and
/// writes one CSV per report.
pub fn cmd_eval(cfg: &ExperimentConfig, experiment: &str) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if !EXPERIMENT_IDS.contains(&experiment) {
        return Err(Error::Eval(format!(
            "unknown experiment '{experiment}'; valid ids: {}",
            EXPERIMENT_IDS.join(", ")
        )));
    }
    let ckpt_path = cfg.checkpoint_path();
    if !ckpt_path.exists() {
        return Err(Error::Checkpoint(format!(
            "no checkpoint at {ckpt_path:?}; run `wicl train` first"
        )));
    }
    let (state, manifest) = load_checkpoint(&ckpt_path)?;
    std::fs::create_dir_all(cfg.reports_dir())?;

    let ev = Evaluator {
        params: &state.params,
        sys: &cfg.system,
        scales: manifest.norm_scales,
        seed: cfg.seed,
    };
    let ids: Vec<&str> = if experiment == "all" {
        vec!["fig7", "fig8", "fig9", "shots", "fig13"]
    } else {
        vec![experiment]
    };

    let mut written = Vec::new();
    for id in ids {
        let report: EvalReport = match id {
            "fig7" => {
                let pool = load_precoding_pool(cfg, "p1_test", Task::P1)?;
                eval_sum_rate_vs_snr(
                    &ev,
                    &pool,
                    &cfg.data.eval_snrs_db,
                    &[0, cfg.eval.eval_shots],
                )?
            }
            "fig8" => {
                let pool = load_precoding_pool(cfg, "p2_test", Task::P2)?;
                eval_min_rate_vs_snr(
                    &ev,
                    &pool,
                    &cfg.data.eval_snrs_db,
                    &[0, cfg.eval.eval_shots],
                )?
            }
            "fig9" => {
                let buckets: Vec<(f64, PredictionPool)> = cfg
                    .data
                    .velocity_buckets
                    .iter()
                    .map(|&v| {
                        let pool = load_prediction_pool(
                            cfg,
                            &format!("p3_test_v{}", v.round() as i64),
                        )?;
                        Ok((v, pool))
                    })
                    .collect::<Result<_>>()?;
                eval_nmse_vs_velocity(&ev, &buckets, cfg.eval.fig9_shots)?
            }
            "shots" => {
                let p1 = load_precoding_pool(cfg, "p1_test", Task::P1)?;
                let p2 = load_precoding_pool(cfg, "p2_test", Task::P2)?;
                let p3 = load_prediction_pool(cfg, "p3_test")?;
                eval_shots_sweep(
                    &ev,
                    &p1,
                    &p2,
                    &p3,
                    &cfg.eval.shots_grid,
                    cfg.eval.shots_sweep_snr_db,
                )?
            }
            "fig13" => {
                let pool = load_precoding_pool(cfg, "p1_test", Task::P1)?;
                eval_unseen_snr(
                    &ev,
                    &pool,
                    &manifest.train_snrs_db,
                    &cfg.eval.heldout_snrs_db,
                    cfg.eval.eval_shots,
                )?
            }
            _ => unreachable!("validated above"),
        };
        let path = cfg.reports_dir().join(format!("{id}.csv"));
        report.write_csv(&path, cfg.eval.gnuplot)?;
        written.push(path);
    }
    Ok(written)
}

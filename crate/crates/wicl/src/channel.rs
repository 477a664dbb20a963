//! Cluster-based multipath MIMO channel synthesis.
//!
//! A channel between the array and one user is a sum over clusters and paths
//! of complex gains with per-path Doppler, delay, phase and arrival angles,
//! steered across a uniform planar array. Datasets of short channel
//! trajectories are generated reproducibly: sample `i` of a dataset is a pure
//! function of `(seed, i)`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Default cluster count.
pub const DEFAULT_CLUSTERS: usize = 21;
/// Default paths per cluster.
pub const DEFAULT_PATHS_PER_CLUSTER: usize = 20;

/// Mean cluster delay for the synthetic dispersion law (300 ns, urban-macro
/// like).
const CLUSTER_DELAY_MEAN_S: f64 = 300e-9;
/// Per-path delay jitter around the cluster delay (+-10 ns).
const PATH_DELAY_JITTER_S: f64 = 10e-9;
/// Cluster power decay per delay rank, in dB.
const CLUSTER_DECAY_DB_PER_RANK: f64 = 3.0;
/// Elevation spread: uniform on [-pi/6, pi/6].
const ELEVATION_MAX: f64 = std::f64::consts::FRAC_PI_6;

/// Array geometry, carrier plan, user count and power budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Horizontal antennas of the planar array.
    pub n_h: usize,
    /// Vertical antennas of the planar array.
    pub n_v: usize,
    /// Single-antenna users served simultaneously.
    pub k_users: usize,
    /// Center frequency in Hz.
    pub f_c: f64,
    /// Subcarrier spacing in Hz.
    pub delta_f: f64,
    /// Number of subcarriers in the band.
    pub m_subcarriers: usize,
    /// Horizontal antenna spacing in meters.
    pub d_h: f64,
    /// Vertical antenna spacing in meters.
    pub d_v: f64,
    /// Slot duration in seconds.
    pub slot_duration: f64,
    /// Transmit power budget in W.
    pub p_max: f64,
    /// Noise variance in W.
    pub sigma2: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let f_c = 2.4e9;
        let half_wavelength = SPEED_OF_LIGHT / (2.0 * f_c);
        SystemConfig {
            n_h: 4,
            n_v: 4,
            k_users: 4,
            f_c,
            delta_f: 180e3,
            m_subcarriers: 48,
            d_h: half_wavelength,
            d_v: half_wavelength,
            slot_duration: 0.5e-3,
            p_max: 10.0,
            sigma2: 1.0,
        }
    }
}

impl SystemConfig {
    /// Total transmit antennas `n_h * n_v`.
    pub fn n_t(&self) -> usize {
        self.n_h * self.n_v
    }

    /// Real token length for one `n_t x k_users` complex matrix.
    pub fn token_dim(&self) -> usize {
        2 * self.n_t() * self.k_users
    }

    /// Noise fixed at 1 W; the power budget carries the SNR.
    pub fn with_snr_db(mut self, snr_db: f64) -> Self {
        self.sigma2 = 1.0;
        self.p_max = 10f64.powf(snr_db / 10.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_h < 1 || self.n_v < 1 || self.k_users < 1 || self.m_subcarriers < 1 {
            return Err(Error::config("antenna/user/subcarrier counts must be >= 1"));
        }
        if !(self.f_c > 0.0 && self.delta_f > 0.0 && self.slot_duration > 0.0) {
            return Err(Error::config("frequencies and slot duration must be positive"));
        }
        if !(self.d_h > 0.0 && self.d_v > 0.0) {
            return Err(Error::config("antenna spacings must be positive"));
        }
        if !(self.p_max > 0.0 && self.sigma2 > 0.0) {
            return Err(Error::config("p_max and sigma2 must be positive"));
        }
        Ok(())
    }
}

/// One propagation path.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// Complex gain.
    pub beta: Complex64,
    /// Doppler shift in Hz.
    pub doppler: f64,
    /// Delay in seconds.
    pub delay: f64,
    /// Random phase in [0, 2*pi).
    pub phase: f64,
    /// Azimuth angle of arrival in radians.
    pub azimuth: f64,
    /// Elevation angle of arrival in radians.
    pub elevation: f64,
}

/// One cluster of paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub paths: Vec<Path>,
}

/// All random path parameters realizing one user's channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub clusters: Vec<Cluster>,
}

impl PathSet {
    pub fn iter_paths(&self) -> impl Iterator<Item = &Path> {
        self.clusters.iter().flat_map(|c| c.paths.iter())
    }

    /// Sum of squared gain magnitudes; 1.0 after normalization.
    pub fn total_gain_sq(&self) -> f64 {
        self.iter_paths().map(|p| p.beta.norm_sqr()).sum()
    }
}

/// A short channel trajectory with scenario metadata. `history[j]` is the
/// channel matrix at slot `t - T + j`, so the last entry is the current slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    /// `t_history + 1` matrices, each `n_t x k_users`.
    pub history: Vec<DMatrix<Complex64>>,
    /// User speed in km/h.
    pub velocity: f64,
    /// Scenario SNR in dB.
    pub snr_db: f64,
    /// Sample index within its dataset (the counter part of the stream
    /// address).
    pub seed: u64,
}

impl ChannelSample {
    /// Matrices observable at prediction time: everything except the final
    /// slot.
    pub fn observed(&self) -> &[DMatrix<Complex64>] {
        &self.history[..self.history.len() - 1]
    }

    /// Ground-truth matrix for the current slot.
    pub fn target(&self) -> &DMatrix<Complex64> {
        self.history.last().expect("history is never empty")
    }

    /// The channel the precoding tasks operate on (current slot).
    pub fn precoding_channel(&self) -> &DMatrix<Complex64> {
        self.target()
    }
}

/// Planar-array steering vector for an arrival direction, evaluated at the
/// center frequency. The horizontal factor uses `sin(elevation)*cos(azimuth)`
/// and the vertical factor `sin(azimuth)`; the full vector is their Kronecker
/// product, horizontal index major.
pub fn steering_vector(azimuth: f64, elevation: f64, cfg: &SystemConfig) -> DVector<Complex64> {
    let k_h = 2.0 * std::f64::consts::PI * cfg.f_c * cfg.d_h * elevation.sin() * azimuth.cos()
        / SPEED_OF_LIGHT;
    let k_v = 2.0 * std::f64::consts::PI * cfg.f_c * cfg.d_v * azimuth.sin() / SPEED_OF_LIGHT;
    let a_h = DVector::from_fn(cfg.n_h, |i, _| Complex64::from_polar(1.0, k_h * i as f64));
    let a_v = DVector::from_fn(cfg.n_v, |i, _| Complex64::from_polar(1.0, k_v * i as f64));
    a_h.kronecker(&a_v)
}

/// Draws one user's path set. Cluster delays are exponential with per-path
/// jitter, cluster powers decay 3 dB per delay rank, per-path gains are
/// complex Gaussian within the cluster power, and the whole set is scaled so
/// the squared gains sum to one (unit average per-antenna channel gain).
/// Doppler is `v * f_c * cos(psi) / c` with an i.i.d. direction angle per
/// path.
pub fn sample_path_set<R: Rng>(rng: &mut R, cfg: &SystemConfig, velocity_kmh: f64) -> PathSet {
    sample_path_set_sized(
        rng,
        cfg,
        velocity_kmh,
        DEFAULT_CLUSTERS,
        DEFAULT_PATHS_PER_CLUSTER,
    )
}

/// As [`sample_path_set`], with explicit cluster/path counts.
pub fn sample_path_set_sized<R: Rng>(
    rng: &mut R,
    cfg: &SystemConfig,
    velocity_kmh: f64,
    n_clusters: usize,
    paths_per_cluster: usize,
) -> PathSet {
    assert!(velocity_kmh >= 0.0, "velocity must be non-negative");
    let delay_dist = Exp::new(1.0 / CLUSTER_DELAY_MEAN_S).expect("positive rate");
    let doppler_max = (velocity_kmh / 3.6) * cfg.f_c / SPEED_OF_LIGHT;

    // Cluster delays first, so power ranks are known before path draws.
    let delays: Vec<f64> = (0..n_clusters).map(|_| delay_dist.sample(rng)).collect();
    let mut rank: Vec<usize> = (0..n_clusters).collect();
    rank.sort_by(|&a, &b| delays[a].total_cmp(&delays[b]));
    let mut cluster_power = vec![0.0; n_clusters];
    for (r, &c) in rank.iter().enumerate() {
        cluster_power[c] = 10f64.powf(-CLUSTER_DECAY_DB_PER_RANK * r as f64 / 10.0);
    }

    let mut clusters = Vec::with_capacity(n_clusters);
    for c in 0..n_clusters {
        let sigma_path = (cluster_power[c] / paths_per_cluster as f64).sqrt();
        let mut paths = Vec::with_capacity(paths_per_cluster);
        for _ in 0..paths_per_cluster {
            let jitter = rng.gen_range(-PATH_DELAY_JITTER_S..=PATH_DELAY_JITTER_S);
            let g_re: f64 = StandardNormal.sample(rng);
            let g_im: f64 = StandardNormal.sample(rng);
            let beta = Complex64::new(g_re, g_im) * (sigma_path / 2f64.sqrt());
            let azimuth = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let elevation = rng.gen_range(-ELEVATION_MAX..=ELEVATION_MAX);
            let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            let psi = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            paths.push(Path {
                beta,
                doppler: doppler_max * psi.cos(),
                delay: (delays[c] + jitter).max(0.0),
                phase,
                azimuth,
                elevation,
            });
        }
        clusters.push(Cluster { paths });
    }

    let mut set = PathSet { clusters };
    let total = set.total_gain_sq();
    if total > 0.0 {
        let scale = (1.0 / total).sqrt();
        for cluster in &mut set.clusters {
            for path in &mut cluster.paths {
                path.beta *= scale;
            }
        }
    }
    set
}

/// Evaluates the double path sum at time `t` and frequency `f`:
/// `sum_paths beta * exp(j*(2*pi*(doppler*t - f*delay) + phase)) * a(az, el)`.
pub fn synthesize_channel(
    paths: &PathSet,
    t: f64,
    f: f64,
    cfg: &SystemConfig,
) -> DVector<Complex64> {
    let mut h = DVector::from_element(cfg.n_t(), Complex64::new(0.0, 0.0));
    for path in paths.iter_paths() {
        let arg = 2.0 * std::f64::consts::PI * (path.doppler * t - f * path.delay) + path.phase;
        let scalar = path.beta * Complex64::from_polar(1.0, arg);
        let a = steering_vector(path.azimuth, path.elevation, cfg);
        h.zip_apply(&a, |hi, ai| *hi += scalar * ai);
    }
    h
}

/// Generates `n_samples` independent channel trajectories. Sample `i` draws
/// its velocity uniformly from `velocity_range`, its SNR uniformly from
/// `snr_set`, and one path set per user, all from streams addressed by
/// `(seed, i)`; slot `j` is synthesized at time `j * slot_duration` on the
/// center frequency. Each sample holds `t_history + 1` slots.
pub fn generate_dataset(
    cfg: &SystemConfig,
    n_samples: usize,
    velocity_range: [f64; 2],
    snr_set: &[f64],
    t_history: usize,
    seed: u64,
) -> Result<Vec<ChannelSample>> {
    cfg.validate()?;
    if t_history < 1 {
        return Err(Error::config("t_history must be >= 1"));
    }
    if n_samples < 1 {
        return Err(Error::config("n_samples must be >= 1"));
    }
    let [v_lo, v_hi] = velocity_range;
    if !(0.0 <= v_lo && v_lo <= v_hi) {
        return Err(Error::config("velocity range must satisfy 0 <= v_lo <= v_hi"));
    }
    if snr_set.is_empty() {
        return Err(Error::config("snr_set must be non-empty"));
    }

    let samples = (0..n_samples)
        .into_par_iter()
        .map(|i| generate_sample(cfg, i as u64, velocity_range, snr_set, t_history, seed))
        .collect();
    Ok(samples)
}

fn generate_sample(
    cfg: &SystemConfig,
    index: u64,
    [v_lo, v_hi]: [f64; 2],
    snr_set: &[f64],
    t_history: usize,
    seed: u64,
) -> ChannelSample {
    let mut meta_rng = rng::stream(Domain::Dataset, seed, &[index]);
    let velocity = if v_lo == v_hi {
        v_lo
    } else {
        Uniform::new(v_lo, v_hi).sample(&mut meta_rng)
    };
    let snr_db = snr_set[meta_rng.gen_range(0..snr_set.len())];

    let path_sets: Vec<PathSet> = (0..cfg.k_users)
        .map(|k| {
            let mut user_rng = rng::stream(Domain::PathSet, seed, &[index, k as u64]);
            sample_path_set(&mut user_rng, cfg, velocity)
        })
        .collect();

    let n_t = cfg.n_t();
    let history = (0..=t_history)
        .map(|j| {
            let t = j as f64 * cfg.slot_duration;
            let mut h = DMatrix::from_element(n_t, cfg.k_users, Complex64::new(0.0, 0.0));
            for (k, paths) in path_sets.iter().enumerate() {
                h.set_column(k, &synthesize_channel(paths, t, cfg.f_c, cfg));
            }
            h
        })
        .collect();

    ChannelSample {
        history,
        velocity,
        snr_db,
        seed: index,
    }
}

//! Metrics and experiment sweeps.
//!
//! Every sweep produces an [`EvalReport`]: a grid, one or more curves with
//! per-point means and standard errors, and optional per-point annotation
//! columns. Reports serialize to CSV deterministically (fixed seed in,
//! identical bytes out). Model precoders are power-projected before any
//! metric touches them, and demonstration pairs never include the query.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::channel::SystemConfig;
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::precoding::{
    min_rate, project_power, sum_rate, PrecodingProblem,
};
use crate::rng::{self, Domain};
use crate::sequence::{
    build_prediction_sequence_with_pairs, unpack_complex, PrecodingPool, PredictionPool, Task,
};

/// Normalized squared error `||predicted - actual||_F^2 / ||actual||_F^2`.
pub fn nmse(predicted: &DMatrix<Complex64>, actual: &DMatrix<Complex64>) -> Result<f64> {
    if predicted.shape() != actual.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs actual {:?}",
            predicted.shape(),
            actual.shape()
        )));
    }
    let denom = actual.norm_squared();
    if denom == 0.0 {
        return Err(Error::Eval("actual matrix is zero".into()));
    }
    Ok((predicted - actual).norm_squared() / denom)
}

/// Channel-aging baseline: predict the next slot as the last observed one.
pub fn last_value_baseline(history: &[DMatrix<Complex64>]) -> Result<&DMatrix<Complex64>> {
    history
        .last()
        .ok_or_else(|| Error::Eval("empty history".into()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl CurvePoint {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return CurvePoint {
                mean: f64::NAN,
                std_err: f64::NAN,
                n: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        CurvePoint {
            mean,
            std_err: (var / n as f64).sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub name: String,
    pub points: Vec<CurvePoint>,
}

/// One experiment's sweep results.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub experiment: String,
    pub sweep_variable: String,
    pub grid: Vec<f64>,
    pub curves: Vec<Curve>,
    /// Extra per-point columns (e.g. an unseen-SNR flag).
    pub annotations: Vec<(String, Vec<f64>)>,
    pub shots: Vec<usize>,
    pub sample_count: usize,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if !self.grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Eval("grid must be strictly increasing".into()));
        }
        if self.sample_count < 1 {
            return Err(Error::Eval("sample count must be >= 1".into()));
        }
        for c in &self.curves {
            if c.points.len() != self.grid.len() {
                return Err(Error::Eval(format!(
                    "curve '{}' has {} points for a {}-point grid",
                    c.name,
                    c.points.len(),
                    self.grid.len()
                )));
            }
        }
        Ok(())
    }

    pub fn curve(&self, name: &str) -> Option<&Curve> {
        self.curves.iter().find(|c| c.name == name)
    }

    /// CSV: one header row naming the sweep variable and per-curve mean/se
    /// columns, one row per grid point. The gnuplot layout comments the
    /// header and separates with spaces.
    pub fn to_csv(&self, gnuplot: bool) -> String {
        let sep = if gnuplot { " " } else { "," };
        let mut head = vec![self.sweep_variable.clone()];
        for c in &self.curves {
            head.push(format!("{}_mean", c.name));
            head.push(format!("{}_se", c.name));
        }
        for (name, _) in &self.annotations {
            head.push(name.clone());
        }
        let mut out = String::new();
        if gnuplot {
            out.push_str("# ");
        }
        out.push_str(&head.join(sep));
        out.push('\n');
        for (i, g) in self.grid.iter().enumerate() {
            let mut row = vec![format!("{g}")];
            for c in &self.curves {
                row.push(format!("{:.9e}", c.points[i].mean));
                row.push(format!("{:.9e}", c.points[i].std_err));
            }
            for (_, vals) in &self.annotations {
                row.push(format!("{}", vals[i]));
            }
            out.push_str(&row.join(sep));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path, gnuplot: bool) -> Result<()> {
        std::fs::write(path, self.to_csv(gnuplot))?;
        Ok(())
    }
}

/// Everything needed to evaluate a trained model.
pub struct Evaluator<'a> {
    pub params: &'a ModelParams<f32>,
    pub sys: &'a SystemConfig,
    /// Token normalization scalars per task, from the training datasets.
    pub scales: [f64; 3],
    pub seed: u64,
}

impl<'a> Evaluator<'a> {
    /// Per-query metric values for a precoding task at one SNR: builds the
    /// in-context sequence (demos drawn from the pool, disjoint from the
    /// query), runs the model, projects the predicted precoder to the power
    /// budget and applies `metric`.
    fn precoding_values(
        &self,
        pool: &PrecodingPool,
        snr_db: f64,
        shots: usize,
        metric: impl Fn(&PrecodingProblem, &DMatrix<Complex64>) -> f64 + Sync,
    ) -> Result<Vec<f64>> {
        let queries = pool.snr_group(snr_db);
        if queries.is_empty() {
            return Err(Error::Eval(format!("no test samples at {snr_db} dB")));
        }
        if queries.len() <= shots {
            return Err(Error::Eval(format!(
                "{} samples at {snr_db} dB cannot supply {shots} demonstrations",
                queries.len()
            )));
        }
        let scale = self.scales[pool.task.index()];
        let p_max = 10f64.powf(snr_db / 10.0);
        queries
            .par_iter()
            .map(|&q| {
                let mut stream = rng::stream(
                    Domain::Eval,
                    self.seed,
                    &[pool.task.index() as u64, shots as u64, q as u64],
                );
                let mut seq = pool.sequence_for_query(q, shots, &mut stream, false)?;
                // Evaluation normalizes with the training scalar.
                rescale(&mut seq, pool.scale, scale);
                let outputs = forward::<f32>(&seq, self.params)?;
                let row = outputs.row(seq.query_position());
                let values: Vec<f64> = row.iter().map(|&v| v as f64 * scale).collect();
                let w_raw = unpack_complex(&values, self.sys.n_t(), self.sys.k_users)?;
                let w = project_power(&w_raw, p_max)?;
                let problem = PrecodingProblem::new(pool.channels[q].clone(), 1.0, p_max);
                Ok(metric(&problem, &w))
            })
            .collect()
    }

    /// Baseline metric values from the stored solver labels.
    fn label_values(
        &self,
        pool: &PrecodingPool,
        snr_db: f64,
        metric: impl Fn(&PrecodingProblem, &DMatrix<Complex64>) -> f64 + Sync,
    ) -> Result<Vec<f64>> {
        let queries = pool.snr_group(snr_db);
        if queries.is_empty() {
            return Err(Error::Eval(format!("no test samples at {snr_db} dB")));
        }
        let p_max = 10f64.powf(snr_db / 10.0);
        Ok(queries
            .par_iter()
            .map(|&q| {
                let problem = PrecodingProblem::new(pool.channels[q].clone(), 1.0, p_max);
                metric(&problem, &pool.labels[q])
            })
            .collect())
    }

    /// Per-sample prediction NMSE with `pairs` slot transitions of context.
    fn prediction_values(&self, pool: &PredictionPool, pairs: usize) -> Result<Vec<f64>> {
        if pool.is_empty() {
            return Err(Error::Eval("prediction pool is empty".into()));
        }
        let scale = self.scales[Task::P3.index()];
        pool.samples
            .par_iter()
            .map(|sample| {
                let mut seq = build_prediction_sequence_with_pairs(sample, pairs, pool.scale)?;
                rescale(&mut seq, pool.scale, scale);
                let outputs = forward::<f32>(&seq, self.params)?;
                let row = outputs.row(seq.query_position());
                let values: Vec<f64> = row.iter().map(|&v| v as f64 * scale).collect();
                let predicted = unpack_complex(&values, self.sys.n_t(), self.sys.k_users)?;
                nmse(&predicted, sample.target())
            })
            .collect()
    }
}

fn rescale(seq: &mut crate::sequence::IclSequence, built_with: f64, wanted: f64) {
    if built_with == wanted {
        return;
    }
    let f = built_with / wanted;
    for t in &mut seq.tokens {
        for v in &mut t.values {
            *v *= f;
        }
    }
    if let Some(t) = &mut seq.query_target {
        for v in t.iter_mut() {
            *v *= f;
        }
    }
}

/// Sum rate versus SNR (the P1 sweep): model curves at the requested shot
/// counts against the stored solver labels.
pub fn eval_sum_rate_vs_snr(
    ev: &Evaluator,
    pool: &PrecodingPool,
    snr_grid: &[f64],
    shots: &[usize],
) -> Result<EvalReport> {
    precoding_sweep(ev, pool, snr_grid, shots, "fig7_sum_rate_vs_snr", "wmmse", sum_rate)
}

/// Minimum user rate versus SNR (the P2 sweep) against the balancing labels.
pub fn eval_min_rate_vs_snr(
    ev: &Evaluator,
    pool: &PrecodingPool,
    snr_grid: &[f64],
    shots: &[usize],
) -> Result<EvalReport> {
    precoding_sweep(
        ev,
        pool,
        snr_grid,
        shots,
        "fig8_min_rate_vs_snr",
        "balancing",
        min_rate,
    )
}

fn precoding_sweep(
    ev: &Evaluator,
    pool: &PrecodingPool,
    snr_grid: &[f64],
    shots: &[usize],
    experiment: &str,
    baseline_name: &str,
    metric: impl Fn(&PrecodingProblem, &DMatrix<Complex64>) -> f64 + Sync + Copy,
) -> Result<EvalReport> {
    let mut curves: Vec<Curve> = shots
        .iter()
        .map(|&k| Curve {
            name: format!("model_{k}shot"),
            points: Vec::new(),
        })
        .collect();
    let mut baseline = Curve {
        name: baseline_name.into(),
        points: Vec::new(),
    };
    let mut sample_count = usize::MAX;
    for &snr in snr_grid {
        for (ci, &k) in shots.iter().enumerate() {
            let vals = ev.precoding_values(pool, snr, k, metric)?;
            sample_count = sample_count.min(vals.len());
            curves[ci].points.push(CurvePoint::from_values(&vals));
        }
        let base = ev.label_values(pool, snr, metric)?;
        baseline.points.push(CurvePoint::from_values(&base));
    }
    curves.push(baseline);
    let report = EvalReport {
        experiment: experiment.into(),
        sweep_variable: "snr_db".into(),
        grid: snr_grid.to_vec(),
        curves,
        annotations: Vec::new(),
        shots: shots.to_vec(),
        sample_count,
    };
    report.validate()?;
    Ok(report)
}

/// Prediction NMSE versus user velocity: the trained model (with
/// `shots`-pair context) against the last-value baseline, one bucket per
/// velocity.
pub fn eval_nmse_vs_velocity(
    ev: &Evaluator,
    buckets: &[(f64, PredictionPool)],
    shots: usize,
) -> Result<EvalReport> {
    if buckets.is_empty() {
        return Err(Error::Eval("no velocity buckets".into()));
    }
    let mut model = Curve {
        name: "model".into(),
        points: Vec::new(),
    };
    let mut baseline = Curve {
        name: "last_value".into(),
        points: Vec::new(),
    };
    let mut sample_count = usize::MAX;
    for (_, pool) in buckets {
        let pairs = context_pairs(pool, shots)?;
        let vals = ev.prediction_values(pool, pairs)?;
        sample_count = sample_count.min(vals.len());
        model.points.push(CurvePoint::from_values(&vals));
        let base: Vec<f64> = pool
            .samples
            .iter()
            .map(|s| {
                let last = last_value_baseline(s.observed())?;
                nmse(last, s.target())
            })
            .collect::<Result<_>>()?;
        baseline.points.push(CurvePoint::from_values(&base));
    }
    let report = EvalReport {
        experiment: "fig9_nmse_vs_velocity".into(),
        sweep_variable: "velocity_kmh".into(),
        grid: buckets.iter().map(|(v, _)| *v).collect(),
        curves: vec![model, baseline],
        annotations: Vec::new(),
        shots: vec![shots],
        sample_count,
    };
    report.validate()?;
    Ok(report)
}

/// Demonstration pairs available plus the query pair, clipped to history.
fn context_pairs(pool: &PredictionPool, shots: usize) -> Result<usize> {
    let slots = pool
        .samples
        .first()
        .map(|s| s.history.len())
        .unwrap_or(0);
    if slots < 2 {
        return Err(Error::Eval("prediction samples need at least two slots".into()));
    }
    let max_pairs = slots - 1;
    if shots + 1 > max_pairs {
        return Err(Error::Eval(format!(
            "{shots} demonstrations need {} slot pairs, history provides {max_pairs}",
            shots + 1
        )));
    }
    Ok(shots + 1)
}

/// All three tasks' metrics versus the number of demonstration pairs.
pub fn eval_shots_sweep(
    ev: &Evaluator,
    p1: &PrecodingPool,
    p2: &PrecodingPool,
    p3: &PredictionPool,
    shot_grid: &[usize],
    snr_db: f64,
) -> Result<EvalReport> {
    let mut curves = vec![
        Curve { name: "p1_sum_rate".into(), points: Vec::new() },
        Curve { name: "p2_min_rate".into(), points: Vec::new() },
        Curve { name: "p3_nmse".into(), points: Vec::new() },
        Curve { name: "p1_wmmse".into(), points: Vec::new() },
        Curve { name: "p2_balancing".into(), points: Vec::new() },
        Curve { name: "p3_last_value".into(), points: Vec::new() },
    ];
    let p1_base = CurvePoint::from_values(&ev.label_values(p1, snr_db, sum_rate)?);
    let p2_base = CurvePoint::from_values(&ev.label_values(p2, snr_db, min_rate)?);
    let p3_base = CurvePoint::from_values(
        &p3.samples
            .iter()
            .map(|s| nmse(last_value_baseline(s.observed())?, s.target()))
            .collect::<Result<Vec<_>>>()?,
    );
    let mut sample_count = usize::MAX;
    for &k in shot_grid {
        let v1 = ev.precoding_values(p1, snr_db, k, sum_rate)?;
        let v2 = ev.precoding_values(p2, snr_db, k, min_rate)?;
        let v3 = ev.prediction_values(p3, context_pairs(p3, k)?)?;
        sample_count = sample_count.min(v1.len()).min(v2.len()).min(v3.len());
        curves[0].points.push(CurvePoint::from_values(&v1));
        curves[1].points.push(CurvePoint::from_values(&v2));
        curves[2].points.push(CurvePoint::from_values(&v3));
        curves[3].points.push(p1_base);
        curves[4].points.push(p2_base);
        curves[5].points.push(p3_base);
    }
    let report = EvalReport {
        experiment: "figs10_12_shots_sweep".into(),
        sweep_variable: "shots".into(),
        grid: shot_grid.iter().map(|&k| k as f64).collect(),
        curves,
        annotations: Vec::new(),
        shots: shot_grid.to_vec(),
        sample_count,
    };
    report.validate()?;
    Ok(report)
}

/// P1 sum rate on SNR points excluded from training, alongside the trained
/// points for context. The baseline is solved fresh per sample (it always
/// is; labels at held-out SNRs exist in the test set). Held-out points are
/// flagged in the `held_out` column.
pub fn eval_unseen_snr(
    ev: &Evaluator,
    pool: &PrecodingPool,
    trained_snrs: &[f64],
    heldout_snrs: &[f64],
    shots: usize,
) -> Result<EvalReport> {
    for h in heldout_snrs {
        if trained_snrs.iter().any(|t| (t - h).abs() < 1e-9) {
            return Err(Error::Eval(format!(
                "requested held-out point {h} dB was part of training"
            )));
        }
    }
    let mut grid: Vec<f64> = trained_snrs.iter().chain(heldout_snrs).cloned().collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let flags: Vec<f64> = grid
        .iter()
        .map(|g| {
            if heldout_snrs.iter().any(|h| (h - g).abs() < 1e-9) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mut model = Curve {
        name: format!("model_{shots}shot"),
        points: Vec::new(),
    };
    let mut baseline = Curve {
        name: "wmmse".into(),
        points: Vec::new(),
    };
    let mut sample_count = usize::MAX;
    for &snr in &grid {
        let vals = ev.precoding_values(pool, snr, shots, sum_rate)?;
        sample_count = sample_count.min(vals.len());
        model.points.push(CurvePoint::from_values(&vals));
        baseline
            .points
            .push(CurvePoint::from_values(&ev.label_values(pool, snr, sum_rate)?));
    }
    let report = EvalReport {
        experiment: "fig13_unseen_snr".into(),
        sweep_variable: "snr_db".into(),
        grid,
        curves: vec![model, baseline],
        annotations: vec![("held_out".into(), flags)],
        shots: vec![shots],
        sample_count,
    };
    report.validate()?;
    Ok(report)
}

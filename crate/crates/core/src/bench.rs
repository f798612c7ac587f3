//! Latency and accuracy comparison across compression schemes.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::metrics::{EvalReport, LatencyStats, MetricError};
use crate::model::ModelWeights;
use crate::quant::{self, QuantError, Scheme};
use crate::tensor::Tensor;
use crate::train;

pub const DEFAULT_WARMUP: usize = 5;
pub const DEFAULT_RUNS: usize = 20;
pub const THREADS_ENV: &str = "VEINPIPE_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("bench needs a non-empty evaluation split")]
    EmptyEval,
    #[error("runs must be at least 1")]
    NoRuns,
    #[error("thread pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub schemes: Vec<Scheme>,
    pub warmup: usize,
    pub runs: usize,
    pub threads: usize,
    pub batch_size: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            schemes: Scheme::ALL.to_vec(),
            warmup: DEFAULT_WARMUP,
            runs: DEFAULT_RUNS,
            threads: 1,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeRow {
    pub scheme: Scheme,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
    pub model_bytes: usize,
    pub median_latency_s: f64,
    pub fps: f64,
    pub runs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEnvironment {
    pub threads: usize,
    pub input_size: usize,
    pub warmup: usize,
    pub runs: usize,
    pub eval_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub environment: BenchEnvironment,
    pub rows: Vec<SchemeRow>,
}

/// Median of `v`; the mean of the two middle values for even lengths.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Calls `run` `warmup + runs` times; each call returns its own elapsed
/// seconds. Warmup results are discarded.
pub fn measure(warmup: usize, runs: usize, mut run: impl FnMut() -> f64) -> (LatencyStats, Vec<f64>) {
    for _ in 0..warmup {
        run();
    }
    let times: Vec<f64> = (0..runs).map(|_| run()).collect();
    (LatencyStats::from_median(median(&times), runs), times)
}

fn time_once(f: impl FnOnce()) -> f64 {
    let t = Instant::now();
    f();
    t.elapsed().as_secs_f64()
}

/// Thread count from `VEINPIPE_THREADS` when set and valid.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Benchmarks each requested scheme: single-image latency on the first
/// evaluation sample and the metric suite over the whole evaluation split.
/// Integer schemes calibrate on `calib`; without it they are marked skipped.
pub fn run_bench(
    weights: &ModelWeights,
    eval_set: &[Sample],
    calib: &[Sample],
    opts: &BenchOptions,
) -> Result<BenchReport, BenchError> {
    if eval_set.is_empty() {
        return Err(BenchError::EmptyEval);
    }
    if opts.runs == 0 {
        return Err(BenchError::NoRuns);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| BenchError::Pool(e.to_string()))?;
    pool.install(|| {
        let table = if calib.is_empty() {
            None
        } else {
            let batches: Vec<Tensor<f32>> = calib
                .chunks(opts.batch_size.max(1))
                .map(|c| {
                    let refs: Vec<&Sample> = c.iter().collect();
                    train::batch_tensors(&refs).0.cast()
                })
                .collect();
            Some(quant::calibrate(weights, &batches)?)
        };
        let probe = {
            let (x, _, _) = train::batch_tensors(&[&eval_set[0]]);
            x.cast::<f32>()
        };
        let mut rows = Vec::with_capacity(opts.schemes.len());
        for &scheme in &opts.schemes {
            if scheme.needs_calibration() && table.is_none() {
                rows.push(SchemeRow {
                    scheme,
                    skipped: Some("no calibration data".into()),
                    model_bytes: 0,
                    median_latency_s: 0.0,
                    fps: 0.0,
                    runs: 0,
                    eval: None,
                });
                continue;
            }
            let q = quant::apply_scheme(weights, scheme, table.as_ref())?;
            let model_bytes = q.to_bytes().len();
            q.runtime()?;
            let mut err = None;
            let (lat, _) = measure(opts.warmup, opts.runs, || {
                time_once(|| {
                    if let Err(e) = quant::quantized_forward(&q, &probe) {
                        err = Some(e);
                    }
                })
            });
            if let Some(e) = err {
                return Err(e.into());
            }
            let eval = train::evaluate_with(eval_set, opts.batch_size, |x| {
                quant::quantized_forward(&q, x).map_err(BenchError::from)
            })?;
            log::info!("{scheme}: {:.3} ms, IoU {:.4}", lat.median_s * 1e3, eval.iou);
            rows.push(SchemeRow {
                scheme,
                skipped: None,
                model_bytes,
                median_latency_s: lat.median_s,
                fps: lat.fps,
                runs: lat.runs,
                eval: Some(eval),
            });
        }
        Ok(BenchReport {
            environment: BenchEnvironment {
                threads: opts.threads.max(1),
                input_size: weights.config.input_size,
                warmup: opts.warmup,
                runs: opts.runs,
                eval_samples: eval_set.len(),
            },
            rows,
        })
    })
}

/// Aligned plain-text rendering of a report.
pub fn render_table(r: &BenchReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "threads {}  input {}×{}  warmup {}  runs {}  eval samples {}",
        r.environment.threads,
        r.environment.input_size,
        r.environment.input_size,
        r.environment.warmup,
        r.environment.runs,
        r.environment.eval_samples
    );
    let _ = writeln!(
        s,
        "{:<15} {:>10} {:>11} {:>9} {:>7} {:>7} {:>8} {:>9} {:>9}",
        "scheme", "size (KB)", "median (ms)", "FPS", "IoU", "Dice", "PSNR", "MSE", "MAE"
    );
    for row in &r.rows {
        match &row.eval {
            None => {
                let why = row.skipped.as_deref().unwrap_or("not run");
                let _ = writeln!(s, "{:<15} skipped: {why}", row.scheme.name());
            }
            Some(e) => {
                let _ = writeln!(
                    s,
                    "{:<15} {:>10.1} {:>11.3} {:>9.2} {:>7.4} {:>7.4} {:>8.2} {:>9.5} {:>9.5}",
                    row.scheme.name(),
                    row.model_bytes as f64 / 1024.0,
                    row.median_latency_s * 1e3,
                    row.fps,
                    e.iou,
                    e.dice,
                    e.psnr_db,
                    e.mse,
                    e.mae
                );
            }
        }
    }
    s
}

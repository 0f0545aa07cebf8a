//! Batch-1 forward latency measurement and teacher/student comparison.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GazeModel;
use crate::tensor::Tensor;

pub const DEFAULT_RUNS: usize = 1000;
pub const DEFAULT_WARMUP: usize = 20;
pub const DEFAULT_THREADS: usize = 1;
const INPUT_SEED: u64 = 0x5eed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub model: String,
    pub input_shape: Vec<usize>,
    pub n_runs: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub host: String,
    pub threads: usize,
}

/// Nearest-rank percentile of ascending `sorted`.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn host_descriptor() -> String {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{} {cores} cores",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

impl LatencyReport {
    /// Summary of per-run timings in milliseconds.
    pub fn from_samples(
        model: &str,
        input_shape: &[usize],
        samples_ms: &[f64],
        warmup: usize,
        threads: usize,
    ) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::InvalidArgument(
                "latency report needs at least one run".into(),
            ));
        }
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = samples_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            model: model.to_string(),
            input_shape: input_shape.to_vec(),
            n_runs: samples_ms.len(),
            warmup,
            mean_ms: mean,
            std_ms: var.sqrt(),
            p50_ms: percentile(&sorted, 50.0),
            p99_ms: percentile(&sorted, 99.0),
            host: host_descriptor(),
            threads,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("latency report: {e}")))
    }
}

/// `run,ms` rows, one per timed run.
pub fn samples_csv(samples_ms: &[f64]) -> String {
    let mut out = String::from("run,ms\n");
    for (i, s) in samples_ms.iter().enumerate() {
        let _ = writeln!(out, "{i},{s}");
    }
    out
}

/// Times `n_runs` calls of `f` after `warmup` untimed calls.
pub fn time_runs(
    n_runs: usize,
    warmup: usize,
    mut f: impl FnMut() -> Result<()>,
) -> Result<Vec<f64>> {
    if n_runs == 0 {
        return Err(Error::InvalidArgument("n_runs must be at least 1".into()));
    }
    for _ in 0..warmup {
        f()?;
    }
    (0..n_runs)
        .map(|_| {
            let start = Instant::now();
            f()?;
            Ok(start.elapsed().as_secs_f64() * 1e3)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchOptions {
    pub n_runs: usize,
    pub warmup: usize,
    pub threads: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            n_runs: DEFAULT_RUNS,
            warmup: DEFAULT_WARMUP,
            threads: DEFAULT_THREADS,
        }
    }
}

/// Forward latency of `model` on one fixed-seed image of `input_shape`
/// (`1×C×H×W`), on a dedicated pool of `threads` workers. Returns the
/// report and the per-run samples.
pub fn measure_latency(
    name: &str,
    model: &GazeModel,
    input_shape: &[usize],
    options: BenchOptions,
) -> Result<(LatencyReport, Vec<f64>)> {
    if input_shape.len() != 4 || input_shape[0] != 1 {
        return Err(Error::InvalidArgument(format!(
            "latency input must be 1×C×H×W, got {input_shape:?}"
        )));
    }
    if options.threads == 0 {
        return Err(Error::InvalidArgument("threads must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(INPUT_SEED);
    let image = Tensor::rand_uniform(input_shape, 0.0, 1.0, &mut rng);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let samples = pool.install(|| {
        time_runs(options.n_runs, options.warmup, || {
            std::hint::black_box(model.forward_gaze(std::hint::black_box(&image))?);
            Ok(())
        })
    })?;
    let report =
        LatencyReport::from_samples(name, input_shape, &samples, options.warmup, options.threads)?;
    Ok((report, samples))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    /// `b.mean / a.mean`.
    pub ratio: f64,
    pub table: String,
}

pub fn compare(a: &LatencyReport, b: &LatencyReport) -> Comparison {
    let ratio = b.mean_ms / a.mean_ms;
    let mut table = format!(
        "{:<12} {:>8} {:>10} {:>10} {:>10} {:>10}\n",
        "model", "runs", "mean_ms", "std_ms", "p50_ms", "p99_ms"
    );
    for r in [a, b] {
        let _ = writeln!(
            table,
            "{:<12} {:>8} {:>10.3} {:>10.3} {:>10.3} {:>10.3}",
            r.model, r.n_runs, r.mean_ms, r.std_ms, r.p50_ms, r.p99_ms
        );
    }
    let _ = writeln!(table, "ratio {}/{} = {ratio:.3}", b.model, a.model);
    Comparison { ratio, table }
}

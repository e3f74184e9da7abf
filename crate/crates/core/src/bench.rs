//! Latency and throughput measurement of the full detection path.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub iters: usize,
    pub warmup: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            iters: 50,
            warmup: 5,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub iters: usize,
    pub warmup: usize,
    pub threads: usize,
    pub input_size: usize,
    pub neck_channels: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub fps: f64,
    pub model_size_bytes: usize,
    pub parameters: usize,
    pub arch: &'static str,
    pub os: &'static str,
    pub available_cores: usize,
}

/// Nearest-rank percentile of ascending `sorted`.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Fixed uniform-noise image at the model's input size.
pub fn synthetic_input(size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(Shape::new(1, 3, size, size), |_, _, _, _| rng.random_range(0.0..1.0))
}

pub fn run(model: &Model, config: &BenchConfig) -> Result<BenchReport> {
    if config.iters == 0 {
        return Err(Error::InvalidArgument("iters must be at least 1".into()));
    }
    if config.threads == 0 {
        return Err(Error::InvalidArgument("threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {} threads: {e}", config.threads)))?;
    let input = synthetic_input(model.config.input_size, config.seed);
    let mut times = pool.install(|| -> Result<Vec<f64>> {
        for _ in 0..config.warmup {
            model.detect(&input)?;
        }
        let mut times = Vec::with_capacity(config.iters);
        for _ in 0..config.iters {
            let t = Instant::now();
            std::hint::black_box(model.detect(&input)?);
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
        Ok(times)
    })?;
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median_ms = if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    };
    let store = model.to_store();
    Ok(BenchReport {
        iters: config.iters,
        warmup: config.warmup,
        threads: config.threads,
        input_size: model.config.input_size,
        neck_channels: model.config.neck_channels,
        mean_ms,
        median_ms,
        p95_ms: percentile(&times, 0.95),
        min_ms: times[0],
        max_ms: times[n - 1],
        fps: 1e3 / mean_ms,
        model_size_bytes: store.to_bytes()?.len(),
        parameters: store.names().iter().map(|k| store.get(k).unwrap().data.len()).sum(),
        arch: std::env::consts::ARCH,
        os: std::env::consts::OS,
        available_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
    })
}

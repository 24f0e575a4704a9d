use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hourglass::{count_macs, count_parameters, StackedHourglass};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    /// Seconds per timed forward pass, in run order.
    pub timings: Vec<f64>,
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub macs: u64,
    pub params: usize,
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Times eval-mode forward passes on one fixed random input on a single
/// thread. `warmup` runs are discarded.
pub fn bench(net: &StackedHourglass<f32>, iterations: usize, warmup: usize, seed: u64) -> Result<BenchReport> {
    if iterations < 3 {
        return Err(Error::Config(format!("bench needs at least 3 iterations, got {iterations}")));
    }
    let res = net.config().input_res;
    let input = Tensor::random_uniform([1, 3, res, res], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("cannot build bench thread pool: {e}")))?;
    let timings = pool.install(|| -> Result<Vec<f64>> {
        for _ in 0..warmup {
            net.infer(&input)?;
        }
        (0..iterations)
            .map(|_| {
                let start = Instant::now();
                net.infer(&input)?;
                Ok(start.elapsed().as_secs_f64())
            })
            .collect()
    })?;
    let mut sorted = timings.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(BenchReport {
        median: median(&sorted),
        p10: percentile(&sorted, 0.1),
        p90: percentile(&sorted, 0.9),
        timings,
        macs: count_macs(net)?,
        params: count_parameters(net)?,
    })
}

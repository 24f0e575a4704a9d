use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{heatmap_loss, AugmentParams, RmsProp, RmsPropConfig, Sample, SampleConfig};
use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::hourglass::StackedHourglass;
use crate::tensor::{NormMode, Tensor, BN_MOMENTUM};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment: bool,
    /// Fill a dataset smaller than one batch by repeating samples.
    pub pad_last_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 220,
            batch_size: 6,
            lr: 5e-4,
            seed: 0,
            augment: true,
            pad_last_batch: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Seconds since training started.
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub steps: u64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,wall_seconds\n");
        for r in &self.history {
            let _ = writeln!(out, "{},{:e},{:.3}", r.epoch, r.mean_loss, r.wall_seconds);
        }
        out
    }
}

/// Independent RNG stream for `(seed, a, b)`.
pub fn stream_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
    rng
}

/// Stacks samples into `(inputs, targets, weights)` batch tensors.
pub fn collate(batch: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<f32>)> {
    let inputs: Vec<Tensor<f32>> = batch.iter().map(|s| s.input().clone()).collect();
    let targets: Vec<Tensor<f32>> = batch.iter().map(|s| s.targets.clone()).collect();
    let weights = batch.iter().flat_map(|s| s.joint_weights.iter().copied()).collect();
    let stack = |items: Vec<Tensor<f32>>| -> Result<Tensor<f32>> {
        let n = items.len();
        let s = items[0].shape();
        let data: Vec<f32> = items.into_iter().flat_map(Tensor::into_vec).collect();
        Tensor::from_vec([n, s.channels, s.height, s.width], data)
    };
    Ok((stack(inputs)?, stack(targets)?, weights))
}

/// Loss of `net` on a batch without touching any state.
pub fn batch_loss(net: &StackedHourglass<f32>, batch: &[&Sample], mode: NormMode) -> Result<f64> {
    let (x, t, w) = collate(batch)?;
    let pass = net.forward(&x, mode)?;
    let (loss, _) = heatmap_loss(&pass.outputs(), &t, &w)?;
    Ok(loss as f64)
}

/// One forward/backward/update on a batch; returns the pre-update loss.
pub fn train_step(net: &mut StackedHourglass<f32>, optimizer: &mut RmsProp<f32>, batch: &[&Sample]) -> Result<f64> {
    let (x, t, w) = collate(batch)?;
    let pass = net.forward(&x, NormMode::Train)?;
    let (loss, grads) = heatmap_loss(&pass.outputs(), &t, &w)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss became {loss}")));
    }
    let grads = net.graph().backward(&pass, &grads.into_iter().map(Some).collect::<Vec<_>>())?;
    net.graph_mut().commit_running_stats(&pass, BN_MOMENTUM);
    optimizer.step(net.graph_mut(), &grads)?;
    Ok(loss as f64)
}

/// Batches of sample indices for one epoch, shuffled per `(seed, epoch)`.
fn epoch_batches(n: usize, config: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(config.seed, 0, epoch as u64));
    if n < config.batch_size {
        // only reachable with pad_last_batch
        let padded = (0..config.batch_size).map(|i| order[i % n]).collect();
        return vec![padded];
    }
    order.chunks(config.batch_size).map(<[usize]>::to_vec).collect()
}

/// Trains `net` in place with RMSProp on the per-stack heatmap loss.
///
/// Shuffling and augmentation draws derive from `config.seed`; the per-sample
/// augmentation stream depends on `(seed, epoch, sample index)` only. With an
/// `out_dir`, writes `final.lshg`, `best.lshg` (on each new best epoch) and
/// `loss.csv`.
pub fn train(
    net: &mut StackedHourglass<f32>,
    samples: &[Sample],
    sample_config: &SampleConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if samples.len() < config.batch_size && !config.pad_last_batch {
        return Err(Error::Config(format!(
            "{} samples do not fill one batch of {}; enable pad_last_batch to repeat samples",
            samples.len(),
            config.batch_size
        )));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut optimizer = RmsProp::new(
        net.graph(),
        RmsPropConfig {
            lr: config.lr,
            ..Default::default()
        },
    );
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    for epoch in 0..config.epochs {
        let augmented: Vec<Sample>;
        let epoch_samples = if config.augment {
            augmented = samples
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let params = AugmentParams::draw(&mut stream_rng(config.seed, epoch as u64 + 1, i as u64));
                    s.augmented(&params, sample_config)
                })
                .collect::<Result<_>>()?;
            &augmented[..]
        } else {
            samples
        };
        let mut total = 0.0;
        let batches = epoch_batches(samples.len(), config, epoch);
        for idx in &batches {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &epoch_samples[i]).collect();
            total += train_step(net, &mut optimizer, &batch)?;
        }
        let mean_loss = total / batches.len() as f64;
        report.history.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if mean_loss < best {
            best = mean_loss;
            report.best_epoch = Some(epoch + 1);
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join("best.lshg"), net)?;
            }
        }
    }
    report.steps = optimizer.steps;
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("final.lshg"), net)?;
        let path = dir.join("loss.csv");
        fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

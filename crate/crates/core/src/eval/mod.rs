//! Heatmap decoding, PCKh scoring and benchmarking.

pub mod bench;
pub mod decode;
pub mod pckh;

pub use bench::{bench, BenchReport};
pub use decode::{decode_heatmaps, DecodedJoint};
pub use pckh::{pckh, GroupScore, PckhReport, GROUPS};

use crate::error::Result;
use crate::hourglass::StackedHourglass;
use crate::pipeline::train::collate;
use crate::pipeline::{Sample, SampleConfig};
use crate::tensor::Tensor;

/// Decodes each sample's own targets; a perfect-prediction fixture.
pub fn decode_targets(samples: &[Sample], config: &SampleConfig, quarter_offset: bool) -> Result<Vec<Vec<DecodedJoint>>> {
    samples
        .iter()
        .map(|s| decode_heatmaps(&s.targets, 0, &s.crop.meta, config.stride(), quarter_offset))
        .collect()
}

/// Eval-mode predictions from the last stack, in original-image pixels.
pub fn predict_joints(
    net: &StackedHourglass<f32>,
    samples: &[Sample],
    config: &SampleConfig,
    batch_size: usize,
    quarter_offset: bool,
) -> Result<Vec<Vec<DecodedJoint>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _, _) = collate(&refs)?;
        let heads: Vec<Tensor<f32>> = net.infer(&x)?;
        let last = heads.last().expect("a network has at least one stack");
        for (n, s) in chunk.iter().enumerate() {
            out.push(decode_heatmaps(last, n, &s.crop.meta, config.stride(), quarter_offset)?);
        }
    }
    Ok(out)
}

/// Joint coordinates only, in the form [`pckh`] takes.
pub fn coordinates(decoded: &[Vec<DecodedJoint>]) -> Vec<Vec<[f64; 2]>> {
    decoded
        .iter()
        .map(|joints| joints.iter().map(|j| [j.x, j.y]).collect())
        .collect()
}

//! Data ingestion, preprocessing, targets and training.

pub mod annotation;
pub mod loss;
pub mod optim;
pub mod synth;
pub mod targets;
pub mod train;
pub mod transform;

use std::fs;
use std::path::Path;

use image::RgbImage;

pub use annotation::{Annotation, Joint, FLIP_PAIRS, JOINT_NAMES, NUM_JOINTS};
pub use loss::{heatmap_loss, masked_mse};
pub use optim::{RmsProp, RmsPropConfig};
pub use synth::make_synthetic_dataset;
pub use targets::make_targets;
pub use train::{train, TrainConfig, TrainReport};
pub use transform::{augment_crop, crop_and_resize, Affine2, AugmentParams, Crop};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ANNOTATION_FILE: &str = "annotations.jsonl";

/// Resolution and target settings shared by every sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleConfig {
    pub input_res: usize,
    pub heatmap_res: usize,
    pub sigma: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            input_res: 256,
            heatmap_res: 64,
            sigma: 1.0,
        }
    }
}

impl SampleConfig {
    /// Input pixels per heatmap cell.
    pub fn stride(&self) -> f64 {
        self.input_res as f64 / self.heatmap_res as f64
    }
}

/// A training example. Targets are always derived from `crop.joints`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub crop: Crop,
    /// `1×J×res×res`.
    pub targets: Tensor<f32>,
    pub joint_weights: Vec<f32>,
}

impl Sample {
    pub fn from_crop(crop: Crop, config: &SampleConfig) -> Self {
        let stride = config.stride();
        let grid: Vec<Joint> = crop
            .joints
            .iter()
            .map(|j| Joint::new(j.x / stride, j.y / stride, j.visible))
            .collect();
        let (targets, joint_weights) = make_targets(&grid, config.heatmap_res, config.sigma);
        Sample {
            crop,
            targets,
            joint_weights,
        }
    }

    pub fn prepare(image: &RgbImage, annotation: &Annotation, config: &SampleConfig) -> Result<Self> {
        let crop = crop_and_resize(image, annotation, config.input_res)?;
        Ok(Self::from_crop(crop, config))
    }

    /// Augments the crop, then regenerates targets from the moved joints.
    pub fn augmented(&self, params: &AugmentParams, config: &SampleConfig) -> Result<Self> {
        Ok(Self::from_crop(augment_crop(&self.crop, params)?, config))
    }

    pub fn input(&self) -> &Tensor<f32> {
        &self.crop.input
    }
}

/// Writes PNG images plus `annotations.jsonl` into `dir`.
pub fn write_dataset(dir: &Path, items: &[(RgbImage, Annotation)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (img, ann) in items {
        img.save(dir.join(&ann.image))?;
    }
    let annotations: Vec<Annotation> = items.iter().map(|(_, a)| a.clone()).collect();
    annotation::write_annotations(&dir.join(ANNOTATION_FILE), &annotations)
}

/// Reads `annotations.jsonl` and the images it names from `dir`.
pub fn load_dataset(dir: &Path) -> Result<Vec<(RgbImage, Annotation)>> {
    let annotations = annotation::parse_annotations(&dir.join(ANNOTATION_FILE))?;
    annotations
        .into_iter()
        .map(|a| {
            let path = dir.join(&a.image);
            let img = image::open(&path)
                .map_err(|e| match e {
                    image::ImageError::IoError(io) => Error::io(&path, io),
                    other => Error::Image(other),
                })?
                .to_rgb8();
            Ok((img, a))
        })
        .collect()
}

/// Crops every item into a sample.
pub fn prepare_samples(items: &[(RgbImage, Annotation)], config: &SampleConfig) -> Result<Vec<Sample>> {
    items.iter().map(|(img, a)| Sample::prepare(img, a, config)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_follow_joints() {
        let items = make_synthetic_dataset(2, 9);
        let cfg = SampleConfig::default();
        let s = Sample::prepare(&items[0].0, &items[0].1, &cfg).unwrap();
        assert_eq!(s.targets.shape().dims(), [1, 16, 64, 64]);
        for (k, j) in s.crop.joints.iter().enumerate() {
            let (cx, cy) = ((j.x / 4.0).round() as usize, (j.y / 4.0).round() as usize);
            assert_eq!(s.targets.at(0, k, cy, cx), 1.0);
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let items = make_synthetic_dataset(3, 2);
        write_dataset(dir.path(), &items).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), items);
    }
}

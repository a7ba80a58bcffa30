//! Datasets: the synthetic LogicShapes generator, loading of MVTec-style
//! folders and conversion of images into normalized model batches.

pub mod folder;
pub mod logicshapes;

use candle_core::{DType, Device, Tensor};
use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backbone::ImageBatch;
use crate::error::{config_err, Result};
use crate::par;

pub use folder::{load_folder_dataset, FolderDataset, FolderSample};
pub use logicshapes::{generate_logicshapes, verify_rules, LogicShapesSpec, Rule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Normal,
    Structural,
    Logical,
}

impl SampleKind {
    pub fn is_anomalous(self) -> bool {
        self != SampleKind::Normal
    }

    pub fn name(self) -> &'static str {
        match self {
            SampleKind::Normal => "normal",
            SampleKind::Structural => "structural",
            SampleKind::Logical => "logical",
        }
    }
}

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Per-channel mean and standard deviation of pixel values scaled to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl ChannelStats {
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut n = 0f64;
        for img in images {
            for p in img.pixels() {
                for c in 0..3 {
                    let v = p.0[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Self::default();
        }
        let mut out = Self {
            mean: [0.0; 3],
            std: [0.0; 3],
        };
        for c in 0..3 {
            out.mean[c] = sum[c] / n;
            out.std[c] = (sq[c] / n - out.mean[c] * out.mean[c]).max(0.0).sqrt().max(1e-6);
        }
        out
    }
}

/// Resizes (bilinear), scales to [0, 1] and normalizes one image into a
/// channel-first buffer of length `3 * resolution^2`.
pub fn preprocess_image(img: &RgbImage, resolution: usize, stats: &ChannelStats) -> Vec<f32> {
    let r = resolution as u32;
    let resized;
    let src = if img.width() == r && img.height() == r {
        img
    } else {
        resized = imageops::resize(img, r, r, FilterType::Triangle);
        &resized
    };
    let plane = resolution * resolution;
    let mut out = vec![0f32; 3 * plane];
    for (i, p) in src.pixels().enumerate() {
        for c in 0..3 {
            let v = p.0[c] as f64 / 255.0;
            out[c * plane + i] = ((v - stats.mean[c]) / stats.std[c]) as f32;
        }
    }
    out
}

/// Nearest-neighbour resize of a mask, binarized at half intensity.
pub fn preprocess_mask(mask: &GrayImage, resolution: usize) -> Vec<bool> {
    let r = resolution as u32;
    let resized = imageops::resize(mask, r, r, FilterType::Nearest);
    resized.pixels().map(|p| p.0[0] >= 128).collect()
}

/// Stacks preprocessed images into an `(N, 3, R, R)` batch.
pub fn to_batch(
    images: &[RgbImage],
    resolution: usize,
    stats: &ChannelStats,
    dtype: DType,
) -> Result<ImageBatch> {
    if resolution == 0 {
        return Err(config_err("resolution must be positive"));
    }
    let bufs = par::map_range(images.len(), |i| preprocess_image(&images[i], resolution, stats));
    let flat: Vec<f32> = bufs.into_iter().flatten().collect();
    let t = Tensor::from_vec(flat, (images.len(), 3, resolution, resolution), &Device::Cpu)?
        .to_dtype(dtype)?;
    ImageBatch::new(t)
}

//! Loading of MVTec-style dataset folders.
//!
//! ```text
//! root/train/good/*.png
//! root/test/<category>/*.png
//! root/ground_truth/<category>/<stem>_mask.png
//! root/stats.json            (optional)
//! ```
//!
//! `good` is the normal category. Categories whose name contains `logical`
//! are logical anomalies; every other category is structural.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use super::{ChannelStats, SampleKind};
use crate::error::{GlcfError, Result};
use crate::par;

#[derive(Debug, Clone)]
pub struct FolderSample {
    pub path: PathBuf,
    /// Path relative to the dataset root, with `/` separators.
    pub rel_path: String,
    pub category: String,
    pub kind: SampleKind,
    pub image: RgbImage,
    pub mask: Option<GrayImage>,
}

#[derive(Debug, Clone)]
pub struct FolderDataset {
    pub root: PathBuf,
    pub train: Vec<FolderSample>,
    pub test: Vec<FolderSample>,
    /// Contents of `stats.json`, if present.
    pub stats: Option<ChannelStats>,
}

impl FolderDataset {
    pub fn train_images(&self) -> Vec<RgbImage> {
        self.train.iter().map(|s| s.image.clone()).collect()
    }

    pub fn test_images(&self) -> Vec<RgbImage> {
        self.test.iter().map(|s| s.image.clone()).collect()
    }

    /// Stats to normalize with: `stats.json` if present, else ImageNet.
    pub fn channel_stats(&self) -> ChannelStats {
        self.stats.unwrap_or_default()
    }
}

pub fn kind_of_category(name: &str) -> SampleKind {
    if name == "good" {
        SampleKind::Normal
    } else if name.contains("logical") {
        SampleKind::Logical
    } else {
        SampleKind::Structural
    }
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "jpg" || e == "jpeg" || e == "bmp"
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| GlcfError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| GlcfError::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    image::open(path)
        .map(|i| i.to_luma8())
        .map_err(|e| GlcfError::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

struct Pending {
    path: PathBuf,
    rel: String,
    category: String,
    mask: Option<PathBuf>,
}

fn load_all(items: Vec<Pending>) -> Result<Vec<FolderSample>> {
    par::try_map_range(items.len(), |i| {
        let p = &items[i];
        Ok(FolderSample {
            path: p.path.clone(),
            rel_path: p.rel.clone(),
            category: p.category.clone(),
            kind: kind_of_category(&p.category),
            image: read_rgb(&p.path)?,
            mask: p.mask.as_deref().map(read_gray).transpose()?,
        })
    })
}

/// Loads a dataset folder. A missing `test` directory yields an empty test
/// split. Anomalous test images without a mask are reported together in one
/// error.
pub fn load_folder_dataset(root: &Path) -> Result<FolderDataset> {
    let train_dir = root.join("train").join("good");
    if !train_dir.is_dir() {
        return Err(GlcfError::MissingInput(format!(
            "{} has no train/good directory",
            root.display()
        )));
    }
    let mut train = Vec::new();
    for p in sorted_entries(&train_dir)?.into_iter().filter(|p| is_image(p)) {
        let rel = format!("train/good/{}", p.file_name().unwrap().to_string_lossy());
        train.push(Pending {
            path: p,
            rel,
            category: "good".into(),
            mask: None,
        });
    }
    if train.is_empty() {
        return Err(GlcfError::MissingInput(format!(
            "no training images in {}",
            train_dir.display()
        )));
    }

    let mut test = Vec::new();
    let mut missing = Vec::new();
    let test_dir = root.join("test");
    if test_dir.is_dir() {
        for cat_dir in sorted_entries(&test_dir)?.into_iter().filter(|p| p.is_dir()) {
            let category = cat_dir.file_name().unwrap().to_string_lossy().to_string();
            for p in sorted_entries(&cat_dir)?.into_iter().filter(|p| is_image(p)) {
                let stem = p.file_stem().unwrap().to_string_lossy().to_string();
                let name = p.file_name().unwrap().to_string_lossy().to_string();
                let mask = if category == "good" {
                    None
                } else {
                    let m = root
                        .join("ground_truth")
                        .join(&category)
                        .join(format!("{stem}_mask.png"));
                    if !m.is_file() {
                        missing.push(m.display().to_string());
                    }
                    Some(m)
                };
                test.push(Pending {
                    path: p,
                    rel: format!("test/{category}/{name}"),
                    category: category.clone(),
                    mask,
                });
            }
        }
        if !missing.is_empty() {
            return Err(GlcfError::MissingInput(format!(
                "{} ground-truth mask(s) missing: {}",
                missing.len(),
                missing.join(", ")
            )));
        }
    }

    let stats_path = root.join("stats.json");
    let stats = if stats_path.is_file() {
        let text = fs::read_to_string(&stats_path).map_err(|e| GlcfError::io(&stats_path, e))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };

    Ok(FolderDataset {
        root: root.to_path_buf(),
        train: load_all(train)?,
        test: load_all(test)?,
        stats,
    })
}

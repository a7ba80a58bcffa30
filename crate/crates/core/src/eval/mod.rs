//! Evaluation: metrics, scoring-rule variants and the experiment harness.

pub mod experiment;
pub mod metrics;
pub mod report;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ImageBatch;
use crate::data::SampleKind;
use crate::error::{contract_err, GlcfError, Result};
use crate::model::GlcfModel;
use crate::par;
use crate::scoring::{
    self, fuse_multiscale, fuse_scale, smooth_and_image_score, BranchMaps, FusionConfig, ScoreMap,
};
use crate::training::{calibrate_from_maps, pooled_moments, CalibrationStats, Moments};

pub use experiment::{run_experiment, ExperimentMode};
pub use metrics::{auroc, pixel_auroc, spro, SproConfig};
pub use report::{ExperimentReport, KindMetrics, VariantResult, REPORT_VERSION};

/// Labelled evaluation images with per-pixel ground truth at model resolution.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub images: ImageBatch,
    pub kinds: Vec<SampleKind>,
    /// Row-major masks, all false for normal images.
    pub masks: Vec<Vec<bool>>,
    pub names: Vec<String>,
}

impl TestSet {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

/// Network error maps for a set of images, computed with one forward pass.
#[derive(Debug, Clone)]
pub struct MapBundle {
    pub branch: Vec<BranchMaps>,
    /// `|Phi_L - Phi_G|^2` per scale.
    pub correspondence: Vec<[ScoreMap; 3]>,
}

pub fn collect_maps(model: &GlcfModel, images: &ImageBatch, chunk: usize) -> Result<MapBundle> {
    let mut branch = Vec::with_capacity(images.len());
    let mut correspondence = Vec::with_capacity(images.len());
    let mut start = 0;
    while start < images.len() {
        let len = chunk.max(1).min(images.len() - start);
        let b = ImageBatch {
            data: images.data.narrow(0, start, len)?,
        };
        let out = model.forward(&b)?;
        branch.extend(scoring::branch_maps_from_outputs(&out)?);
        correspondence.extend(scoring::correspondence_maps_from_outputs(&out)?);
        start += len;
    }
    Ok(MapBundle {
        branch,
        correspondence,
    })
}

/// How an image's maps become one anomaly map and score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringRule {
    /// Both estimation branches fused over all scales.
    Fused,
    LocalBranch,
    GlobalBranch,
    /// Fused branches at a single scale (0-based).
    SingleScale(usize),
    /// Raw correspondence discrepancy, calibrated and fused over scales.
    Correspondence,
}

impl ScoringRule {
    pub fn name(self) -> String {
        match self {
            ScoringRule::Fused => "fused".into(),
            ScoringRule::LocalBranch => "local".into(),
            ScoringRule::GlobalBranch => "global".into(),
            ScoringRule::SingleScale(i) => format!("scale{}", i + 1),
            ScoringRule::Correspondence => "correspondence".into(),
        }
    }
}

/// Calibration of the estimation branches, plus optional moments of the
/// correspondence maps. Serializes as the branch statistics with an extra
/// `correspondence` field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    #[serde(flatten)]
    pub branches: CalibrationStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correspondence: Option<[Moments; 3]>,
}

impl Calibration {
    pub fn from_train(train: &MapBundle) -> Result<Self> {
        let branches = calibrate_from_maps(&train.branch)?;
        let m = |i: usize| {
            pooled_moments(
                train.correspondence.iter().map(|m| m[i].data.as_slice()),
                &format!("correspondence scale {}", i + 1),
            )
        };
        Ok(Self {
            branches,
            correspondence: Some([m(0)?, m(1)?, m(2)?]),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| GlcfError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GlcfError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Smoothed anomaly map and image score of every image under `rule`.
pub fn apply_rule(
    bundle: &MapBundle,
    cal: &Calibration,
    fusion: &FusionConfig,
    rule: ScoringRule,
    out_size: (usize, usize),
) -> Result<Vec<(ScoreMap, f64)>> {
    fusion.validate()?;
    let corr_stats;
    let (cfg, stats, k) = match rule {
        ScoringRule::Fused => (fusion.clone(), &cal.branches, fusion.k),
        ScoringRule::LocalBranch => (
            FusionConfig {
                local_only: true,
                ..fusion.clone()
            },
            &cal.branches,
            fusion.k,
        ),
        ScoringRule::GlobalBranch => (
            FusionConfig {
                w_local: 0.0,
                w_global: 1.0,
                local_only: false,
                ..fusion.clone()
            },
            &cal.branches,
            fusion.k,
        ),
        ScoringRule::SingleScale(i) => {
            if i > 2 {
                return Err(contract_err(format!("scale index {i} out of range")));
            }
            let mut k = [0.0; 3];
            k[i] = 1.0;
            (fusion.clone(), &cal.branches, k)
        }
        ScoringRule::Correspondence => {
            let m = cal.correspondence.ok_or_else(|| {
                GlcfError::MissingInput("calibration has no correspondence statistics".into())
            })?;
            corr_stats = CalibrationStats { local: m, global: m };
            (
                FusionConfig {
                    local_only: true,
                    ..fusion.clone()
                },
                &corr_stats,
                fusion.k,
            )
        }
    };
    par::try_map_range(bundle.branch.len(), |n| {
        let per_scale: Vec<ScoreMap> = (0..3)
            .map(|i| match rule {
                ScoringRule::Correspondence => {
                    let c = &bundle.correspondence[n][i];
                    fuse_scale(c, c, stats, &cfg, i)
                }
                _ => fuse_scale(&bundle.branch[n].local[i], &bundle.branch[n].global[i], stats, &cfg, i),
            })
            .collect::<Result<_>>()?;
        let per_scale: [ScoreMap; 3] = per_scale.try_into().unwrap();
        let fused = fuse_multiscale(&per_scale, k, out_size)?;
        smooth_and_image_score(&fused, &cfg)
    })
}

/// Image AUROC, pixel AUROC and sPRO per anomaly kind for one scored variant.
/// Each kind is evaluated against the normal test images.
pub fn evaluate_variant(
    name: &str,
    test: &TestSet,
    scored: &[(ScoreMap, f64)],
    spro_cfg: &SproConfig,
) -> Result<VariantResult> {
    if scored.len() != test.len() {
        return Err(contract_err("scored set does not match the test set"));
    }
    let (h, w) = test.images.hw();
    let mut image = KindMetrics::default();
    let mut pixel = KindMetrics::default();
    let mut spro_m = KindMetrics::default();
    for kind in [SampleKind::Structural, SampleKind::Logical] {
        let idx: Vec<usize> = (0..test.len())
            .filter(|&i| test.kinds[i] == SampleKind::Normal || test.kinds[i] == kind)
            .collect();
        if !test.kinds.contains(&kind) {
            continue;
        }
        let scores: Vec<f64> = idx.iter().map(|&i| scored[i].1).collect();
        let labels: Vec<bool> = idx.iter().map(|&i| test.kinds[i] == kind).collect();
        let maps: Vec<&[f64]> = idx.iter().map(|&i| scored[i].0.data.as_slice()).collect();
        let masks: Vec<&[bool]> = idx.iter().map(|&i| test.masks[i].as_slice()).collect();
        let a = auroc(&scores, &labels)?;
        let p = pixel_auroc(&maps, &masks)?;
        let s = spro(&maps, &masks, h, w, spro_cfg)?;
        image.set(kind, a);
        pixel.set(kind, p);
        spro_m.set(kind, s);
    }
    Ok(VariantResult {
        name: name.to_string(),
        image_auroc: image.finish(),
        pixel_auroc: pixel.finish(),
        spro: spro_m.finish(),
    })
}

//! Inference-time scoring: per-scale branch error maps, calibrated fusion of
//! the two branches, multi-scale fusion at input resolution, Gaussian
//! smoothing and the image-level score.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{FeaturePyramid, ImageBatch};
use crate::error::{config_err, contract_err, GlcfError, Result};
use crate::model::{GlcfModel, Outputs};
use crate::par::{self, Parallelism};
use crate::training::CalibrationStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageScoreMode {
    Std,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub w_local: f64,
    pub w_global: f64,
    pub k: [f64; 3],
    pub gaussian_sigma: f64,
    pub image_score_mode: ImageScoreMode,
    pub local_only: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            w_local: 5.0,
            w_global: 1.0,
            k: [1.0, 3.0, 6.0],
            gaussian_sigma: 4.0,
            image_score_mode: ImageScoreMode::Std,
            local_only: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_local >= 0.0 && self.w_global >= 0.0) {
            return Err(config_err("fusion weights must be non-negative"));
        }
        if !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(config_err("gaussian_sigma must be positive"));
        }
        Ok(())
    }
}

/// Row-major 2-D map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(h * w, data.len(), "map data does not match {h}x{w}");
        Self { h, w, data }
    }

    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Self::new(h, w, vec![v; h * w])
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::new(self.h, self.w, self.data.iter().map(|v| v * k).collect())
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.data.len() as f64).sqrt()
    }
}

/// Per-scale squared-error maps of both branches for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchMaps {
    pub local: [ScoreMap; 3],
    pub global: [ScoreMap; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    pub per_scale_local: [ScoreMap; 3],
    pub per_scale_global: [ScoreMap; 3],
    pub fused_map: ScoreMap,
    pub smoothed_map: ScoreMap,
    pub image_score: f64,
}

/// Squared L2 distance over channels at every pixel, split per image.
pub fn sq_error_maps(a: &FeaturePyramid, b: &FeaturePyramid) -> Result<Vec<[ScoreMap; 3]>> {
    let mut per_level: Vec<Vec<ScoreMap>> = Vec::with_capacity(3);
    for (x, y) in a.levels.iter().zip(&b.levels) {
        if x.dims() != y.dims() {
            return Err(contract_err(format!(
                "feature shapes differ: {:?} vs {:?}",
                x.dims(),
                y.dims()
            )));
        }
        let (_, _, h, w) = x.dims4()?;
        let m = (x - y)?.sqr()?.sum(1)?.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        per_level.push(
            m.into_iter()
                .map(|img| ScoreMap::new(h, w, img.into_iter().flatten().collect()))
                .collect(),
        );
    }
    let l3 = per_level.pop().unwrap();
    let l2 = per_level.pop().unwrap();
    let l1 = per_level.pop().unwrap();
    Ok(l1
        .into_iter()
        .zip(l2)
        .zip(l3)
        .map(|((a, b), c)| [a, b, c])
        .collect())
}

pub fn branch_maps_from_outputs(out: &Outputs) -> Result<Vec<BranchMaps>> {
    let local = sq_error_maps(&out.local, &out.psi_l)?;
    let global = sq_error_maps(&out.phi_g, &out.psi_g)?;
    Ok(local
        .into_iter()
        .zip(global)
        .map(|(local, global)| BranchMaps { local, global })
        .collect())
}

/// Local-versus-correspondence error maps (the raw correspondence discrepancy).
pub fn correspondence_maps_from_outputs(out: &Outputs) -> Result<Vec<[ScoreMap; 3]>> {
    sq_error_maps(&out.local, &out.phi_g)
}

pub fn branch_anomaly_maps(model: &GlcfModel, batch: &ImageBatch) -> Result<Vec<BranchMaps>> {
    branch_maps_from_outputs(&model.forward(batch)?)
}

pub fn branch_anomaly_maps_chunked(
    model: &GlcfModel,
    images: &ImageBatch,
    chunk: usize,
) -> Result<Vec<BranchMaps>> {
    let mut all = Vec::with_capacity(images.len());
    let mut start = 0;
    while start < images.len() {
        let len = chunk.max(1).min(images.len() - start);
        let b = ImageBatch {
            data: images.data.narrow(0, start, len)?,
        };
        all.extend(branch_anomaly_maps(model, &b)?);
        start += len;
    }
    Ok(all)
}

/// Calibrated weighted sum of the two branch maps at scale `i` (0-based).
pub fn fuse_scale(
    al: &ScoreMap,
    ag: &ScoreMap,
    stats: &CalibrationStats,
    cfg: &FusionConfig,
    i: usize,
) -> Result<ScoreMap> {
    if (al.h, al.w) != (ag.h, ag.w) {
        return Err(contract_err("branch maps differ in shape"));
    }
    let (ml, mg) = match (stats.local.get(i), stats.global.get(i)) {
        (Some(l), Some(g)) => (*l, *g),
        _ => {
            return Err(GlcfError::MissingInput(format!(
                "no calibration statistics for scale {}",
                i + 1
            )))
        }
    };
    let data = if cfg.local_only {
        al.data.iter().map(|a| (a - ml.mu) / ml.sigma).collect()
    } else {
        al.data
            .iter()
            .zip(&ag.data)
            .map(|(a, g)| cfg.w_local * (a - ml.mu) / ml.sigma + cfg.w_global * (g - mg.mu) / mg.sigma)
            .collect()
    };
    Ok(ScoreMap::new(al.h, al.w, data))
}

/// Bilinear resize with half-pixel centers (edge-clamped sampling).
pub fn bilinear_resize(m: &ScoreMap, oh: usize, ow: usize) -> ScoreMap {
    if (m.h, m.w) == (oh, ow) {
        return m.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let rows = axis(oh, m.h);
    let cols = axis(ow, m.w);
    let mut data = Vec::with_capacity(oh * ow);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = m.at(r0, c0) * (1.0 - fc) + m.at(r0, c1) * fc;
            let bot = m.at(r1, c0) * (1.0 - fc) + m.at(r1, c1) * fc;
            data.push(top * (1.0 - fr) + bot * fr);
        }
    }
    ScoreMap::new(oh, ow, data)
}

/// Weighted sum of the per-scale maps resized to `out_size`, divided by 3.
pub fn fuse_multiscale(maps: &[ScoreMap; 3], k: [f64; 3], out_size: (usize, usize)) -> Result<ScoreMap> {
    let (oh, ow) = out_size;
    if let Some(m) = maps.iter().find(|m| m.h > oh || m.w > ow) {
        return Err(config_err(format!(
            "output size {oh}x{ow} is smaller than a {}x{} scale map",
            m.h, m.w
        )));
    }
    let mut acc = vec![0.0; oh * ow];
    for (m, k) in maps.iter().zip(k) {
        let r = bilinear_resize(m, oh, ow);
        for (a, v) in acc.iter_mut().zip(&r.data) {
            *a += k * v;
        }
    }
    Ok(ScoreMap::new(oh, ow, acc.into_iter().map(|v| v / 3.0).collect()))
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mirror index with the edge sample repeated (`d c b a | a b c d`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

pub fn gaussian_smooth(m: &ScoreMap, sigma: f64) -> ScoreMap {
    gaussian_smooth_with(par::current(), m, sigma)
}

/// Separable Gaussian filter, rows (then columns) processed in parallel.
pub fn gaussian_smooth_with(mode: Parallelism, m: &ScoreMap, sigma: f64) -> ScoreMap {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (m.h, m.w);

    let mut tmp = vec![0.0; h * w];
    par::for_each_chunk_mut(mode, &mut tmp, w, |row, out| {
        let src = &m.data[row * w..(row + 1) * w];
        for (c, o) in out.iter_mut().enumerate() {
            *o = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * src[reflect(c as isize + j as isize - r, w)])
                .sum();
        }
    });
    // Columns: work on the transpose so each column is a contiguous chunk.
    let mut t = vec![0.0; h * w];
    for rr in 0..h {
        for c in 0..w {
            t[c * h + rr] = tmp[rr * w + c];
        }
    }
    let mut tout = vec![0.0; h * w];
    par::for_each_chunk_mut(mode, &mut tout, h, |col, out| {
        let src = &t[col * h..(col + 1) * h];
        for (rr, o) in out.iter_mut().enumerate() {
            *o = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * src[reflect(rr as isize + j as isize - r, h)])
                .sum();
        }
    });
    let mut data = vec![0.0; h * w];
    for c in 0..w {
        for rr in 0..h {
            data[rr * w + c] = tout[c * h + rr];
        }
    }
    ScoreMap::new(h, w, data)
}

pub fn image_score(m: &ScoreMap, mode: ImageScoreMode) -> f64 {
    match mode {
        ImageScoreMode::Std => m.std(),
        ImageScoreMode::Max => m.max(),
    }
}

pub fn smooth_and_image_score(m: &ScoreMap, cfg: &FusionConfig) -> Result<(ScoreMap, f64)> {
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(GlcfError::NumericFault("anomaly map is not finite".into()));
    }
    let s = gaussian_smooth(m, cfg.gaussian_sigma);
    let score = image_score(&s, cfg.image_score_mode);
    Ok((s, score))
}

/// Full scoring chain for one image's branch maps.
pub fn score_branch_maps(
    maps: &BranchMaps,
    stats: &CalibrationStats,
    cfg: &FusionConfig,
    out_size: (usize, usize),
) -> Result<AnomalyResult> {
    let per_scale: Vec<ScoreMap> = (0..3)
        .map(|i| fuse_scale(&maps.local[i], &maps.global[i], stats, cfg, i))
        .collect::<Result<_>>()?;
    let per_scale: [ScoreMap; 3] = per_scale.try_into().unwrap();
    let fused_map = fuse_multiscale(&per_scale, cfg.k, out_size)?;
    let (smoothed_map, image_score) = smooth_and_image_score(&fused_map, cfg)?;
    Ok(AnomalyResult {
        per_scale_local: maps.local.clone(),
        per_scale_global: maps.global.clone(),
        fused_map,
        smoothed_map,
        image_score,
    })
}

/// Scores many images: network passes in chunks, map post-processing fanned
/// out across images.
pub fn score_images(
    model: &GlcfModel,
    stats: &CalibrationStats,
    cfg: &FusionConfig,
    images: &ImageBatch,
) -> Result<Vec<AnomalyResult>> {
    cfg.validate()?;
    let maps = branch_anomaly_maps_chunked(model, images, 32)?;
    let (h, w) = images.hw();
    par::try_map_range(maps.len(), |i| score_branch_maps(&maps[i], stats, cfg, (h, w)))
}

/// Converts a `(B, 3, H, W)` tensor to an image batch in the model's dtype.
pub fn to_model_batch(model: &GlcfModel, t: &Tensor) -> Result<ImageBatch> {
    ImageBatch::new(t.to_dtype(model.dtype())?)
}

//! Detection and localization metrics.
//!
//! AUROC is the exact Mann-Whitney statistic (ties count one half), not a
//! sampled curve. sPRO uses these conventions:
//!
//! * regions are the 4-connected components of each ground-truth mask;
//! * the threshold sweeps every distinct score value, a pixel is detected
//!   when `score >= t`;
//! * the false positive rate is measured over all pixels outside the masks;
//! * the curve starts at `(0, 0)` and is integrated with the trapezoid rule
//!   up to `fpr_limit` (interpolating the last segment), then divided by
//!   `fpr_limit`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{GlcfError, Result};

fn single_class(what: &str) -> GlcfError {
    GlcfError::Contract(format!("{what} needs at least one positive and one negative"))
}

/// Area under the ROC curve of `scores` against binary `labels`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(GlcfError::Contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(GlcfError::NumericFault("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(single_class("auroc"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Sum of (1-based) average ranks of the positives, kept doubled to stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let pos_in_group = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        // average rank = (i+1 + j+1) / 2
        rank_sum2 += pos_in_group * (i as u128 + j as u128 + 2);
        i = j + 1;
    }
    let p = n_pos as u128;
    // U doubled: 2*R - P(P+1)
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

/// AUROC over the pooled pixels of every map.
pub fn pixel_auroc(maps: &[&[f64]], masks: &[&[bool]]) -> Result<f64> {
    if maps.len() != masks.len() || maps.iter().zip(masks).any(|(m, k)| m.len() != k.len()) {
        return Err(GlcfError::Contract("map and mask shapes differ".into()));
    }
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    let labels: Vec<bool> = masks.iter().flat_map(|m| m.iter().copied()).collect();
    auroc(&scores, &labels).map_err(|e| match e {
        GlcfError::Contract(_) => single_class("pixel_auroc"),
        e => e,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SproConfig {
    pub saturation_fraction: f64,
    pub fpr_limit: f64,
}

impl Default for SproConfig {
    fn default() -> Self {
        Self {
            saturation_fraction: 1.0,
            fpr_limit: 0.05,
        }
    }
}

/// Labels the 4-connected components of a `h x w` mask. Background is 0,
/// components are numbered from 1 in raster order of their first pixel.
pub fn connected_components(mask: &[bool], h: usize, w: usize) -> (Vec<u32>, usize) {
    let mut label = vec![0u32; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask[q] && label[q] == 0 {
                    label[q] = next;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
    }
    (label, next as usize)
}

/// Saturated per-region overlap, normalized area up to `cfg.fpr_limit`.
/// Every map and mask is `h x w`.
pub fn spro(maps: &[&[f64]], masks: &[&[bool]], h: usize, w: usize, cfg: &SproConfig) -> Result<f64> {
    if !(cfg.fpr_limit > 0.0 && cfg.fpr_limit <= 1.0) {
        return Err(GlcfError::Config("fpr_limit must be in (0, 1]".into()));
    }
    if !(cfg.saturation_fraction > 0.0 && cfg.saturation_fraction <= 1.0) {
        return Err(GlcfError::Config("saturation_fraction must be in (0, 1]".into()));
    }
    if maps.len() != masks.len()
        || maps.iter().any(|m| m.len() != h * w)
        || masks.iter().any(|m| m.len() != h * w)
    {
        return Err(GlcfError::Contract("map and mask shapes differ".into()));
    }

    // Global region id per pixel (u32::MAX = background) and region sizes.
    let mut region_of = Vec::with_capacity(maps.len() * h * w);
    let mut sizes: Vec<usize> = Vec::new();
    for m in masks {
        let (lab, n) = connected_components(m, h, w);
        let base = sizes.len() as u32;
        sizes.extend(std::iter::repeat_n(0, n));
        for l in lab {
            if l == 0 {
                region_of.push(u32::MAX);
            } else {
                let g = base + l - 1;
                sizes[g as usize] += 1;
                region_of.push(g);
            }
        }
    }
    if sizes.is_empty() {
        return Err(GlcfError::Contract("spro needs at least one ground-truth region".into()));
    }
    let n_bg = region_of.iter().filter(|&&r| r == u32::MAX).count();
    if n_bg == 0 {
        return Err(GlcfError::Contract("spro needs at least one normal pixel".into()));
    }
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    if scores.iter().any(|s| s.is_nan()) {
        return Err(GlcfError::NumericFault("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));

    let caps: Vec<f64> = sizes
        .iter()
        .map(|&s| cfg.saturation_fraction * s as f64)
        .collect();
    let mut hits = vec![0usize; sizes.len()];
    let mut overlap_sum = 0.0;
    let mut fp = 0usize;
    let n_regions = sizes.len() as f64;
    let limit = cfg.fpr_limit;
    let (mut x0, mut y0) = (0.0f64, 0.0f64);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            let p = order[i];
            match region_of[p] {
                u32::MAX => fp += 1,
                r => {
                    let r = r as usize;
                    let before = (hits[r] as f64 / caps[r]).min(1.0);
                    hits[r] += 1;
                    overlap_sum += (hits[r] as f64 / caps[r]).min(1.0) - before;
                }
            }
            i += 1;
        }
        let x1 = fp as f64 / n_bg as f64;
        let y1 = overlap_sum / n_regions;
        if x1 >= limit {
            // Interpolate the segment at the limit and stop.
            let y_at = if x1 > x0 { y0 + (y1 - y0) * (limit - x0) / (x1 - x0) } else { y1 };
            area += (limit - x0) * (y0 + y_at) / 2.0;
            return Ok((area / limit).clamp(0.0, 1.0));
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
        x0 = x1;
        y0 = y1;
    }
    // Every pixel detected means fpr = 1 >= limit, so the loop always returns.
    unreachable!("sweep ended below the fpr limit")
}

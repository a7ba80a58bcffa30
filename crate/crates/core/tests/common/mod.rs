//! Independent reference implementations used by the integration tests.
//! Everything here is written with plain loops over `Vec`s, without the
//! tensor library or the crate's own helpers.

#![allow(dead_code)]

use candle_core::{Device, Tensor};
use glcf::backbone::FeaturePyramid;
use glcf::bottleneck::BottleneckConfig;
use glcf::model::ModelConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// `(B, C, H, W)` tensor as nested vectors.
pub fn to_4d(t: &Tensor) -> Vec<Vec<Vec<Vec<f64>>>> {
    let (b, c, h, w) = t.dims4().unwrap();
    let flat: Vec<f64> = t
        .to_dtype(candle_core::DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    (0..b)
        .map(|n| {
            (0..c)
                .map(|k| {
                    (0..h)
                        .map(|y| (0..w).map(|x| flat[((n * c + k) * h + y) * w + x]).collect())
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn random_pyramid(rng: &mut ChaCha8Rng, b: usize, shapes: &[(usize, usize, usize); 3]) -> FeaturePyramid {
    let level = |rng: &mut ChaCha8Rng, (c, h, w): (usize, usize, usize)| {
        let v: Vec<f32> = (0..b * c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::from_vec(v, (b, c, h, w), &Device::Cpu).unwrap()
    };
    FeaturePyramid {
        levels: [
            level(rng, shapes[0]),
            level(rng, shapes[1]),
            level(rng, shapes[2]),
        ],
    }
}

/// Batch mean of the per-sample sum over levels, pixels and channels.
pub fn oracle_pyramid_loss(a: &FeaturePyramid, b: &FeaturePyramid) -> f64 {
    let n = a.levels[0].dims()[0];
    let mut per_sample = vec![0.0; n];
    for l in 0..3 {
        let x = to_4d(&a.levels[l]);
        let y = to_4d(&b.levels[l]);
        for s in 0..n {
            for c in 0..x[s].len() {
                for h in 0..x[s][c].len() {
                    for w in 0..x[s][c][h].len() {
                        let d = x[s][c][h][w] - y[s][c][h][w];
                        per_sample[s] += d * d;
                    }
                }
            }
        }
    }
    per_sample.iter().sum::<f64>() / n as f64
}

/// Per-sample, per-level map of the squared channel distance.
pub fn oracle_error_maps(a: &FeaturePyramid, b: &FeaturePyramid) -> Vec<Vec<Vec<Vec<f64>>>> {
    let n = a.levels[0].dims()[0];
    let mut out = vec![Vec::new(); n];
    for l in 0..3 {
        let x = to_4d(&a.levels[l]);
        let y = to_4d(&b.levels[l]);
        for s in 0..n {
            let (c, h, w) = (x[s].len(), x[s][0].len(), x[s][0][0].len());
            let mut m = vec![vec![0.0; w]; h];
            for yy in 0..h {
                for xx in 0..w {
                    for k in 0..c {
                        let d = x[s][k][yy][xx] - y[s][k][yy][xx];
                        m[yy][xx] += d * d;
                    }
                }
            }
            out[s].push(m);
        }
    }
    out
}

pub fn oracle_fuse_scale(
    al: &[Vec<f64>],
    ag: &[Vec<f64>],
    (mu_l, sd_l): (f64, f64),
    (mu_g, sd_g): (f64, f64),
    (wl, wg): (f64, f64),
) -> Vec<Vec<f64>> {
    let mut out = al.to_vec();
    for y in 0..al.len() {
        for x in 0..al[0].len() {
            out[y][x] = wl * (al[y][x] - mu_l) / sd_l + wg * (ag[y][x] - mu_g) / sd_g;
        }
    }
    out
}

/// Bilinear sample of `m` at output pixel `(oy, ox)` of an `oh x ow` grid,
/// pixel centers aligned, coordinates clamped to the source.
pub fn oracle_bilinear_at(m: &[Vec<f64>], oh: usize, ow: usize, oy: usize, ox: usize) -> f64 {
    let (h, w) = (m.len(), m[0].len());
    let src = |o: usize, out_n: usize, in_n: usize| -> (usize, usize, f64) {
        let mut s = (o as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5;
        if s < 0.0 {
            s = 0.0;
        }
        let lo = s.floor() as usize;
        let lo = if lo > in_n - 1 { in_n - 1 } else { lo };
        let hi = if lo + 1 > in_n - 1 { in_n - 1 } else { lo + 1 };
        (lo, hi, s - lo as f64)
    };
    let (y0, y1, fy) = src(oy, oh, h);
    let (x0, x1, fx) = src(ox, ow, w);
    let a = m[y0][x0];
    let b = m[y0][x1];
    let c = m[y1][x0];
    let d = m[y1][x1];
    a * (1.0 - fy) * (1.0 - fx) + b * (1.0 - fy) * fx + c * fy * (1.0 - fx) + d * fy * fx
}

pub fn oracle_fuse_multiscale(maps: &[Vec<Vec<f64>>; 3], k: [f64; 3], oh: usize, ow: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; ow]; oh];
    for (y, row) in out.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..3 {
                s += k[i] * oracle_bilinear_at(&maps[i], oh, ow, y, x);
            }
            *v = s / 3.0;
        }
    }
    out
}

/// Mann-Whitney by explicit pair counting.
pub fn oracle_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            den += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / den
}

/// sPRO by recomputing every curve point from scratch at each distinct
/// threshold. Regions are found by flood fill over 4-neighbours.
pub fn oracle_spro(maps: &[Vec<f64>], masks: &[Vec<bool>], h: usize, w: usize, sat: f64, limit: f64) -> f64 {
    let mut regions: Vec<Vec<(usize, usize)>> = Vec::new();
    for (img, m) in masks.iter().enumerate() {
        let mut seen = vec![false; h * w];
        for p in 0..h * w {
            if !m[p] || seen[p] {
                continue;
            }
            let mut region = Vec::new();
            let mut queue = vec![p];
            seen[p] = true;
            while let Some(q) = queue.pop() {
                region.push((img, q));
                let (r, c) = ((q / w) as i64, (q % w) as i64);
                for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let nq = (nr as usize) * w + nc as usize;
                    if m[nq] && !seen[nq] {
                        seen[nq] = true;
                        queue.push(nq);
                    }
                }
            }
            regions.push(region);
        }
    }
    let mut thresholds: Vec<f64> = maps.iter().flatten().copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let negatives: usize = masks.iter().flatten().filter(|&&b| !b).count();
    let mut curve = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let mut fp = 0;
        for (img, m) in masks.iter().enumerate() {
            for p in 0..h * w {
                if !m[p] && maps[img][p] >= t {
                    fp += 1;
                }
            }
        }
        let mut overlap = 0.0;
        for r in &regions {
            let hit = r.iter().filter(|&&(img, p)| maps[img][p] >= t).count() as f64;
            overlap += (hit / (sat * r.len() as f64)).min(1.0);
        }
        curve.push((fp as f64 / negatives as f64, overlap / regions.len() as f64));
    }
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
        }
    }
    area / limit
}

/// A very small model for tests that need many forward passes.
pub fn tiny_model_config(resolution: usize) -> ModelConfig {
    let mut cfg = ModelConfig {
        resolution,
        ..Default::default()
    };
    cfg.backbone.stage_channels = [8, 16, 32, 64];
    cfg.backbone.stage_depths = [1, 1, 1, 1];
    cfg.bottleneck = BottleneckConfig {
        dim: 32,
        depth: 2,
        heads: 2,
        ..Default::default()
    };
    cfg
}

//! Writing anomaly maps and scores to disk.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use tiff::encoder::{colortype, TiffEncoder};

use crate::error::{GlcfError, Result};
use crate::scoring::ScoreMap;

/// Saves the raw map as a 32-bit float single-channel TIFF.
pub fn save_float_map(path: &Path, map: &ScoreMap) -> Result<()> {
    let file = File::create(path).map_err(|e| GlcfError::io(path, e))?;
    let tiff_err = |e: tiff::TiffError| GlcfError::io(path, std::io::Error::other(e));
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(tiff_err)?;
    let data: Vec<f32> = map.data.iter().map(|&v| v as f32).collect();
    enc.write_image::<colortype::Gray32Float>(map.w as u32, map.h as u32, &data)
        .map_err(tiff_err)
}

/// Reads back a map written by [`save_float_map`].
pub fn load_float_map(path: &Path) -> Result<ScoreMap> {
    let file = File::open(path).map_err(|e| GlcfError::io(path, e))?;
    let tiff_err = |e: tiff::TiffError| GlcfError::io(path, std::io::Error::other(e));
    let mut dec = tiff::decoder::Decoder::new(std::io::BufReader::new(file)).map_err(tiff_err)?;
    let (w, h) = dec.dimensions().map_err(tiff_err)?;
    match dec.read_image().map_err(tiff_err)? {
        tiff::decoder::DecodingResult::F32(v) => Ok(ScoreMap::new(
            h as usize,
            w as usize,
            v.into_iter().map(f64::from).collect(),
        )),
        _ => Err(GlcfError::UnsupportedFormat(format!(
            "{} is not a float32 map",
            path.display()
        ))),
    }
}

/// Blue-cyan-yellow-red ramp for `t` in [0, 1].
pub fn heat_color(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 0.5],
        [0.0, 0.5, 1.0],
        [0.3, 1.0, 0.7],
        [1.0, 0.9, 0.0],
        [0.8, 0.0, 0.0],
    ];
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = ((STOPS[i][c] * (1.0 - f) + STOPS[i + 1][c] * f) * 255.0).round() as u8;
    }
    out
}

/// 8-bit overlay: the map, min-max normalized and colorized, blended at
/// `alpha` over the image resized to the map's size.
pub fn overlay(image: &RgbImage, map: &ScoreMap, alpha: f64) -> RgbImage {
    let base = imageops::resize(image, map.w as u32, map.h as u32, FilterType::Triangle);
    let lo = map.data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(map.w as u32, map.h as u32, |x, y| {
        let v = map.at(y as usize, x as usize);
        let c = heat_color((v - lo) / span);
        let p = base.get_pixel(x, y).0;
        let mut out = [0u8; 3];
        for k in 0..3 {
            out[k] = (p[k] as f64 * (1.0 - alpha) + c[k] as f64 * alpha).round() as u8;
        }
        Rgb(out)
    })
}

pub fn save_overlay(path: &Path, image: &RgbImage, map: &ScoreMap) -> Result<()> {
    overlay(image, map, 0.5)
        .save(path)
        .map_err(|e| GlcfError::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

/// Per-image scores as `path,label,score`; an unknown label is left empty.
pub fn scores_csv(rows: &[(String, Option<u8>, f64)]) -> String {
    let mut s = String::from("path,label,score\n");
    for (path, label, score) in rows {
        let label = label.map(|l| l.to_string()).unwrap_or_default();
        s.push_str(&format!("{path},{label},{score}\n"));
    }
    s
}

//! Experiment report: versioned JSON, CSV tables and bar charts.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::SampleKind;
use crate::error::{contract_err, GlcfError, Result};

pub const REPORT_VERSION: u32 = 1;

/// One metric split by anomaly kind. `None` when the kind is absent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindMetrics {
    pub structural: Option<f64>,
    pub logical: Option<f64>,
    /// Mean over the kinds present.
    pub mean: Option<f64>,
}

impl KindMetrics {
    pub fn set(&mut self, kind: SampleKind, v: f64) {
        match kind {
            SampleKind::Structural => self.structural = Some(v),
            SampleKind::Logical => self.logical = Some(v),
            SampleKind::Normal => {}
        }
    }

    pub fn get(&self, kind: SampleKind) -> Option<f64> {
        match kind {
            SampleKind::Structural => self.structural,
            SampleKind::Logical => self.logical,
            SampleKind::Normal => None,
        }
    }

    pub fn finish(mut self) -> Self {
        let vals: Vec<f64> = [self.structural, self.logical].into_iter().flatten().collect();
        self.mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        self
    }

    fn values(&self) -> [Option<f64>; 3] {
        [self.structural, self.logical, self.mean]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantResult {
    pub name: String,
    pub image_auroc: KindMetrics,
    pub pixel_auroc: KindMetrics,
    pub spro: KindMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentReport {
    pub report_version: u32,
    pub mode: String,
    pub variants: Vec<VariantResult>,
    /// Resolved configuration the report was produced with.
    pub config: serde_json::Value,
    /// Wall-clock seconds; omitted in deterministic runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_seconds: Option<f64>,
}

impl ExperimentReport {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Schema check beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        if self.report_version != REPORT_VERSION {
            return Err(contract_err(format!(
                "unsupported report_version {}",
                self.report_version
            )));
        }
        if self.variants.is_empty() {
            return Err(contract_err("report has no variants"));
        }
        let mut seen = BTreeSet::new();
        for v in &self.variants {
            if !seen.insert(&v.name) {
                return Err(contract_err(format!("duplicate variant {}", v.name)));
            }
            for m in [&v.image_auroc, &v.pixel_auroc, &v.spro] {
                for x in m.values().into_iter().flatten() {
                    if !(0.0..=1.0).contains(&x) {
                        return Err(contract_err(format!("{}: metric {x} outside [0, 1]", v.name)));
                    }
                }
            }
        }
        if !self.config.is_object() {
            return Err(contract_err("config snapshot must be an object"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `variant,structural,logical,mean` for one metric.
    pub fn metric_csv(&self, metric: &str) -> Result<String> {
        let mut s = String::from("variant,structural,logical,mean\n");
        for v in &self.variants {
            let m = match metric {
                "image_auroc" => &v.image_auroc,
                "pixel_auroc" => &v.pixel_auroc,
                "spro" => &v.spro,
                other => return Err(contract_err(format!("unknown metric {other}"))),
            };
            let cell = |x: Option<f64>| x.map(|x| format!("{x:.6}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{}\n",
                v.name,
                cell(m.structural),
                cell(m.logical),
                cell(m.mean)
            ));
        }
        Ok(s)
    }

    /// Writes `report.json`, one CSV and one bar chart per metric.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| GlcfError::io(dir, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| GlcfError::io(&p, e))
        };
        write("report.json", self.to_json()?)?;
        for metric in ["image_auroc", "pixel_auroc", "spro"] {
            write(&format!("{metric}.csv"), self.metric_csv(metric)?)?;
            let groups: Vec<[f64; 2]> = self
                .variants
                .iter()
                .map(|v| {
                    let m = match metric {
                        "image_auroc" => &v.image_auroc,
                        "pixel_auroc" => &v.pixel_auroc,
                        _ => &v.spro,
                    };
                    [m.structural.unwrap_or(0.0), m.logical.unwrap_or(0.0)]
                })
                .collect();
            let p = dir.join(format!("{metric}.png"));
            bar_chart(&groups)
                .save(&p)
                .map_err(|e| GlcfError::Image { path: p.clone(), source: e })?;
        }
        Ok(())
    }
}

pub const STRUCTURAL_COLOR: [u8; 3] = [66, 113, 196];
pub const LOGICAL_COLOR: [u8; 3] = [230, 126, 34];

/// Grouped bar chart on a [0, 1] axis: one group per variant (in report
/// order), structural bar left, logical bar right, grid lines every 0.25.
pub fn bar_chart(groups: &[[f64; 2]]) -> RgbImage {
    const H: u32 = 240;
    const MARGIN: u32 = 20;
    const BAR: u32 = 18;
    const GAP: u32 = 16;
    let w = MARGIN * 2 + groups.len() as u32 * (2 * BAR + GAP);
    let mut img = RgbImage::from_pixel(w.max(2 * MARGIN + 1), H, Rgb([255, 255, 255]));
    let plot_h = H - 2 * MARGIN;
    let y_of = |v: f64| H - MARGIN - (v.clamp(0.0, 1.0) * plot_h as f64).round() as u32;
    for q in 0..=4 {
        let y = y_of(q as f64 / 4.0);
        let shade = if q == 0 { 0 } else { 215 };
        for x in MARGIN..img.width() - MARGIN {
            img.put_pixel(x, y, Rgb([shade; 3]));
        }
    }
    for (g, vals) in groups.iter().enumerate() {
        let x0 = MARGIN + GAP / 2 + g as u32 * (2 * BAR + GAP);
        for (b, (&v, color)) in vals.iter().zip([STRUCTURAL_COLOR, LOGICAL_COLOR]).enumerate() {
            let top = y_of(v);
            let left = x0 + b as u32 * BAR;
            for y in top..H - MARGIN {
                for x in left..left + BAR - 2 {
                    img.put_pixel(x, y, Rgb(color));
                }
            }
        }
    }
    img
}

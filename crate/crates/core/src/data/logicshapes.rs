//! LogicShapes: a synthetic scene dataset with explicit compositional rules.
//!
//! Each image is a grid of cells holding at most one coloured shape. Normal
//! scenes satisfy every rule. Structural anomalies corrupt the pixels of one
//! object locally; logical anomalies keep every object intact but break
//! exactly one rule (missing or extra object, swapped cells, wrong colour).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ChannelStats, SampleKind};
use crate::error::{config_err, GlcfError, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [220.0, 45.0, 45.0],
            Color::Green => [45.0, 175.0, 70.0],
            Color::Blue => [45.0, 75.0, 215.0],
            Color::Yellow => [230.0, 200.0, 50.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub shape: Shape,
    pub color: Color,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    ExactCount { shape: Shape, n: usize },
    CellBinding { cell: (usize, usize), shape: Shape, color: Color },
    ColorPairing { shape: Shape, color: Color },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogicShapesSpec {
    pub canvas: usize,
    pub grid: (usize, usize),
    pub vocabulary: Vec<VocabEntry>,
    pub rules: Vec<Rule>,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_structural: usize,
    pub n_test_logical: usize,
    pub seed: u64,
    /// Per-pixel Gaussian noise (in 8-bit intensity units).
    pub noise_std: f64,
}

impl Default for LogicShapesSpec {
    fn default() -> Self {
        let mut vocabulary = Vec::new();
        for shape in Shape::ALL {
            for color in Color::ALL {
                vocabulary.push(VocabEntry { shape, color });
            }
        }
        Self {
            canvas: 64,
            grid: (2, 2),
            vocabulary,
            rules: vec![
                Rule::ExactCount {
                    shape: Shape::Circle,
                    n: 2,
                },
                Rule::ExactCount {
                    shape: Shape::Square,
                    n: 1,
                },
                Rule::ColorPairing {
                    shape: Shape::Square,
                    color: Color::Blue,
                },
            ],
            n_train: 500,
            n_test_normal: 100,
            n_test_structural: 100,
            n_test_logical: 100,
            seed: 0,
            noise_std: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub cell: (usize, usize),
    pub shape: Shape,
    pub color: Color,
    /// Center in pixels.
    pub center: (f64, f64),
    /// Circumradius in pixels.
    pub size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub split: String,
    pub index: usize,
    pub file: String,
    pub mask_file: Option<String>,
    pub kind: SampleKind,
    pub violated_rule: Option<usize>,
    /// Name of the applied corruption or rule edit, if any.
    pub anomaly: Option<String>,
    pub objects: Vec<SceneObject>,
}

/// Ids (indices into `spec.rules`) of every rule the scene breaks.
pub fn verify_rules(objects: &[SceneObject], spec: &LogicShapesSpec) -> Vec<usize> {
    spec.rules
        .iter()
        .enumerate()
        .filter(|(_, r)| !rule_holds(r, objects))
        .map(|(i, _)| i)
        .collect()
}

fn rule_holds(rule: &Rule, objects: &[SceneObject]) -> bool {
    match *rule {
        Rule::ExactCount { shape, n } => objects.iter().filter(|o| o.shape == shape).count() == n,
        Rule::CellBinding { cell, shape, color } => objects
            .iter()
            .any(|o| o.cell == cell && o.shape == shape && o.color == color),
        Rule::ColorPairing { shape, color } => objects
            .iter()
            .filter(|o| o.shape == shape)
            .all(|o| o.color == color),
    }
}

/// Cell contents of a scene before geometry is sampled.
type Layout = BTreeMap<(usize, usize), (Shape, Color)>;

struct Plan<'a> {
    spec: &'a LogicShapesSpec,
    counts: BTreeMap<Shape, usize>,
    pairing: BTreeMap<Shape, Color>,
    bindings: BTreeMap<(usize, usize), (Shape, Color)>,
}

impl<'a> Plan<'a> {
    /// Validates the spec and proves the rules satisfiable by building the
    /// constraint tables a normal scene is sampled from.
    fn new(spec: &'a LogicShapesSpec) -> Result<Self> {
        let (rows, cols) = spec.grid;
        if rows == 0 || cols == 0 {
            return Err(config_err("grid must have at least one cell"));
        }
        if spec.canvas < 8 * rows.max(cols) {
            return Err(config_err("canvas is too small for the grid"));
        }
        let mut counts = BTreeMap::new();
        let mut pairing = BTreeMap::new();
        let mut bindings = BTreeMap::new();
        for r in &spec.rules {
            match *r {
                Rule::ExactCount { shape, n } => {
                    if counts.insert(shape, n).is_some_and(|m| m != n) {
                        return Err(config_err(format!("conflicting counts for {shape:?}")));
                    }
                }
                Rule::ColorPairing { shape, color } => {
                    if pairing.insert(shape, color).is_some_and(|c| c != color) {
                        return Err(config_err(format!("conflicting colours for {shape:?}")));
                    }
                }
                Rule::CellBinding { cell, shape, color } => {
                    if cell.0 >= rows || cell.1 >= cols {
                        return Err(config_err(format!("bound cell {cell:?} outside the grid")));
                    }
                    if bindings.insert(cell, (shape, color)).is_some_and(|b| b != (shape, color)) {
                        return Err(config_err(format!("conflicting bindings for cell {cell:?}")));
                    }
                }
            }
        }
        let plan = Self {
            spec,
            counts,
            pairing,
            bindings,
        };
        for (&cell, &(shape, color)) in &plan.bindings {
            if plan.pairing.get(&shape).is_some_and(|&c| c != color) {
                return Err(config_err(format!(
                    "binding at {cell:?} contradicts the colour pairing of {shape:?}"
                )));
            }
            if !plan.in_vocab(shape, color) {
                return Err(config_err(format!("binding at {cell:?} uses a pair outside the vocabulary")));
            }
        }
        let mut bound_counts: BTreeMap<Shape, usize> = BTreeMap::new();
        for (shape, _) in plan.bindings.values() {
            *bound_counts.entry(*shape).or_default() += 1;
        }
        let mut needed = 0;
        for (&shape, &n) in &plan.counts {
            let bound = bound_counts.get(&shape).copied().unwrap_or(0);
            if bound > n {
                return Err(config_err(format!("bindings place more than {n} {shape:?}")));
            }
            if n > bound && plan.colors_for(shape).is_empty() {
                return Err(config_err(format!("no vocabulary colour available for {shape:?}")));
            }
            needed += n - bound;
        }
        let free_cells = rows * cols - plan.bindings.len();
        if needed > free_cells {
            return Err(config_err(format!(
                "rules require {needed} objects but only {free_cells} cells are free"
            )));
        }
        Ok(plan)
    }

    fn in_vocab(&self, shape: Shape, color: Color) -> bool {
        self.spec
            .vocabulary
            .iter()
            .any(|v| v.shape == shape && v.color == color)
    }

    fn colors_for(&self, shape: Shape) -> Vec<Color> {
        Color::ALL
            .into_iter()
            .filter(|&c| self.in_vocab(shape, c))
            .filter(|c| self.pairing.get(&shape).is_none_or(|p| p == c))
            .collect()
    }

    /// Shapes not constrained by any count, usable as filler.
    fn free_shapes(&self) -> Vec<Shape> {
        Shape::ALL
            .into_iter()
            .filter(|s| !self.counts.contains_key(s) && !self.colors_for(*s).is_empty())
            .collect()
    }

    fn cells(&self) -> Vec<(usize, usize)> {
        let (rows, cols) = self.spec.grid;
        (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect()
    }

    fn normal_layout(&self, rng: &mut ChaCha8Rng) -> Layout {
        let mut layout: Layout = self.bindings.clone();
        let mut free: Vec<(usize, usize)> = self
            .cells()
            .into_iter()
            .filter(|c| !layout.contains_key(c))
            .collect();
        shuffle(&mut free, rng);
        let mut queue = Vec::new();
        for (&shape, &n) in &self.counts {
            let bound = layout.values().filter(|(s, _)| *s == shape).count();
            for _ in bound..n {
                queue.push(shape);
            }
        }
        let fillers = self.free_shapes();
        for cell in free {
            let shape = match queue.pop() {
                Some(s) => s,
                None if !fillers.is_empty() => fillers[rng.random_range(0..fillers.len())],
                None => continue,
            };
            let colors = self.colors_for(shape);
            layout.insert(cell, (shape, colors[rng.random_range(0..colors.len())]));
        }
        layout
    }

    /// Edits a normal layout so that exactly rule `rule_id` is violated.
    /// Returns the edit name and the affected cells, or `None` if this rule
    /// cannot be broken in isolation from this layout.
    fn break_rule(
        &self,
        layout: &mut Layout,
        rule_id: usize,
        rng: &mut ChaCha8Rng,
    ) -> Option<(String, Vec<(usize, usize)>)> {
        let unbound = |cell: &(usize, usize)| !self.bindings.contains_key(cell);
        match self.spec.rules[rule_id] {
            Rule::ExactCount { shape, .. } => {
                let mut options: Vec<(&str, (usize, usize))> = Vec::new();
                for (cell, (s, _)) in layout.iter() {
                    if !unbound(cell) {
                        continue;
                    }
                    if *s == shape {
                        options.push(("missing_object", *cell));
                    } else if !self.counts.contains_key(s) {
                        options.push(("extra_object", *cell));
                    }
                }
                for cell in self.cells() {
                    if unbound(&cell) && !layout.contains_key(&cell) {
                        options.push(("extra_object", cell));
                    }
                }
                let colors = self.colors_for(shape);
                options.retain(|(kind, _)| *kind == "missing_object" || !colors.is_empty());
                if options.is_empty() {
                    return None;
                }
                let (kind, cell) = options[rng.random_range(0..options.len())];
                if kind == "missing_object" {
                    layout.remove(&cell);
                } else {
                    layout.insert(cell, (shape, colors[rng.random_range(0..colors.len())]));
                }
                Some((kind.to_string(), vec![cell]))
            }
            Rule::ColorPairing { shape, color } => {
                let cells: Vec<(usize, usize)> = layout
                    .iter()
                    .filter(|(c, (s, _))| unbound(c) && *s == shape)
                    .map(|(c, _)| *c)
                    .collect();
                if cells.is_empty() {
                    return None;
                }
                let cell = cells[rng.random_range(0..cells.len())];
                let wrong: Vec<Color> = Color::ALL.into_iter().filter(|&c| c != color).collect();
                let c = wrong[rng.random_range(0..wrong.len())];
                layout.insert(cell, (shape, c));
                Some(("wrong_color".to_string(), vec![cell]))
            }
            Rule::CellBinding { cell, shape, color } => {
                let others: Vec<(usize, usize)> = self
                    .cells()
                    .into_iter()
                    .filter(|c| unbound(c) && layout.get(c) != Some(&(shape, color)))
                    .collect();
                if others.is_empty() {
                    return None;
                }
                let other = others[rng.random_range(0..others.len())];
                let a = layout.remove(&cell);
                let b = layout.remove(&other);
                if let Some(b) = b {
                    layout.insert(cell, b);
                }
                if let Some(a) = a {
                    layout.insert(other, a);
                }
                Some(("swapped_cells".to_string(), vec![cell, other]))
            }
        }
    }

    fn cell_rect(&self, cell: (usize, usize)) -> (usize, usize, usize, usize) {
        let (rows, cols) = self.spec.grid;
        let ch = self.spec.canvas / rows;
        let cw = self.spec.canvas / cols;
        (cell.0 * ch, cell.1 * cw, ch, cw)
    }

    fn place(&self, layout: &Layout, rng: &mut ChaCha8Rng) -> Vec<SceneObject> {
        layout
            .iter()
            .map(|(&cell, &(shape, color))| {
                let (y0, x0, ch, cw) = self.cell_rect(cell);
                let side = ch.min(cw) as f64;
                let size = side * rng.random_range(0.26..0.34);
                let jitter = side * 0.08;
                SceneObject {
                    cell,
                    shape,
                    color,
                    center: (
                        y0 as f64 + ch as f64 / 2.0 + rng.random_range(-jitter..jitter),
                        x0 as f64 + cw as f64 / 2.0 + rng.random_range(-jitter..jitter),
                    ),
                    size,
                }
            })
            .collect()
    }
}

fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

/// Point-in-shape test in pixel coordinates (y, x).
pub fn covers(o: &SceneObject, y: f64, x: f64) -> bool {
    let dy = y - o.center.0;
    let dx = x - o.center.1;
    let r = o.size;
    match o.shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => {
            let h = r * 0.8;
            dx.abs() <= h && dy.abs() <= h
        }
        Shape::Triangle => {
            // Upward triangle: apex at (-r), base at (+0.75r), half-width 0.95r.
            let top = -r;
            let base = 0.75 * r;
            if dy < top || dy > base {
                return false;
            }
            let t = (dy - top) / (base - top);
            dx.abs() <= 0.95 * r * t
        }
    }
}

const BACKGROUND: [f32; 3] = [205.0, 205.0, 200.0];
const SUPERSAMPLE: usize = 3;

/// Float RGB canvas, row-major.
struct Canvas {
    size: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn render(size: usize, objects: &[SceneObject]) -> Self {
        let mut px = vec![BACKGROUND; size * size];
        let s = SUPERSAMPLE as f64;
        for o in objects {
            let rgb = o.color.rgb();
            let r = o.size + 1.0;
            let y0 = (o.center.0 - r).floor().max(0.0) as usize;
            let y1 = ((o.center.0 + r).ceil() as usize).min(size - 1);
            let x0 = (o.center.1 - r).floor().max(0.0) as usize;
            let x1 = ((o.center.1 + r).ceil() as usize).min(size - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let mut hit = 0;
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let py = y as f64 + (sy as f64 + 0.5) / s;
                            let pxx = x as f64 + (sx as f64 + 0.5) / s;
                            if covers(o, py, pxx) {
                                hit += 1;
                            }
                        }
                    }
                    if hit > 0 {
                        let a = hit as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                        let p = &mut px[y * size + x];
                        for c in 0..3 {
                            p[c] = p[c] * (1.0 - a) + rgb[c] * a;
                        }
                    }
                }
            }
        }
        Self { size, px }
    }

    fn to_image(&self, rng: &mut ChaCha8Rng, noise_std: f64) -> RgbImage {
        let noise = Normal::new(0.0, noise_std.max(0.0)).unwrap();
        let mut img = RgbImage::new(self.size as u32, self.size as u32);
        for (i, p) in self.px.iter().enumerate() {
            let mut out = [0u8; 3];
            for c in 0..3 {
                let n = if noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                out[c] = (p[c] as f64 + n).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel((i % self.size) as u32, (i / self.size) as u32, Rgb(out));
        }
        img
    }
}

/// Applies a local corruption to one object, confined to its cell. Returns
/// the corruption name; `mask` receives every changed pixel.
fn corrupt(
    canvas: &mut Canvas,
    mask: &mut [bool],
    object: &SceneObject,
    cell: (usize, usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> String {
    let size = canvas.size;
    let (cy0, cx0, ch, cw) = cell;
    let in_cell = |y: usize, x: usize| y >= cy0 && y < cy0 + ch && x >= cx0 && x < cx0 + cw;
    let (oy, ox) = object.center;
    let r = object.size;
    let kind = rng.random_range(0..3);
    let mut paint = |y: usize, x: usize, rgb: [f32; 3]| {
        if y < size && x < size && in_cell(y, x) {
            canvas.px[y * size + x] = rgb;
            mask[y * size + x] = true;
        }
    };
    match kind {
        0 => {
            // Blob: ellipse of a foreign colour centred on the object.
            let by = oy + rng.random_range(-0.4..0.4) * r;
            let bx = ox + rng.random_range(-0.4..0.4) * r;
            let ry = r * rng.random_range(0.3..0.5);
            let rx = r * rng.random_range(0.3..0.5);
            let shade: f32 = rng.random_range(40.0..90.0);
            let rgb = [shade + 30.0, shade + 15.0, shade];
            for y in (by - ry).floor().max(0.0) as usize..=((by + ry).ceil() as usize).min(size - 1) {
                for x in (bx - rx).floor().max(0.0) as usize..=((bx + rx).ceil() as usize).min(size - 1) {
                    let dy = (y as f64 + 0.5 - by) / ry;
                    let dx = (x as f64 + 0.5 - bx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        paint(y, x, rgb);
                    }
                }
            }
            "blob".into()
        }
        1 => {
            // Scratch: thin dark segment through the object.
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let len = r * rng.random_range(1.4..2.0);
            let (dy, dx) = (angle.sin(), angle.cos());
            let steps = (len * 4.0) as usize;
            let shade: f32 = rng.random_range(20.0..60.0);
            for k in 0..=steps {
                let t = k as f64 / steps as f64 - 0.5;
                let y = oy + t * len * dy;
                let x = ox + t * len * dx;
                if y >= 0.0 && x >= 0.0 {
                    paint(y as usize, x as usize, [shade; 3]);
                    // one pixel thicker across the stroke
                    let y2 = y + 0.7 * dx;
                    let x2 = x - 0.7 * dy;
                    if y2 >= 0.0 && x2 >= 0.0 {
                        paint(y2 as usize, x2 as usize, [shade; 3]);
                    }
                }
            }
            "scratch".into()
        }
        _ => {
            // Texture patch: checkerboard of light and dark over part of the object.
            let half = (r * rng.random_range(0.45..0.7)).max(2.0);
            let py = oy + rng.random_range(-0.3..0.3) * r;
            let px = ox + rng.random_range(-0.3..0.3) * r;
            let y0 = (py - half).max(0.0) as usize;
            let x0 = (px - half).max(0.0) as usize;
            let y1 = ((py + half) as usize).min(size - 1);
            let x1 = ((px + half) as usize).min(size - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let v = if (y / 2 + x / 2) % 2 == 0 { 245.0 } else { 30.0 };
                    paint(y, x, [v; 3]);
                }
            }
            "texture".into()
        }
    }
}

/// One rendered sample.
pub struct GeneratedSample {
    pub meta: SampleMeta,
    pub image: RgbImage,
    pub mask: Option<GrayImage>,
}

fn sample_rng(seed: u64, split: &str, index: usize) -> ChaCha8Rng {
    let tag: u64 = match split {
        "train" => 1,
        "test_good" => 2,
        "test_structural" => 3,
        _ => 4,
    };
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9e3779b97f4a7c15)
            ^ tag.wrapping_mul(0xbf58476d1ce4e5b9)
            ^ (index as u64).wrapping_mul(0x94d049bb133111eb),
    )
}

fn split_dir(kind: SampleKind, train: bool) -> &'static str {
    match (train, kind) {
        (true, _) => "train/good",
        (false, SampleKind::Normal) => "test/good",
        (false, SampleKind::Structural) => "test/structural_anomalies",
        (false, SampleKind::Logical) => "test/logical_anomalies",
    }
}

/// Renders a single sample. Pure in `(spec, split, index)`.
pub fn generate_sample(
    spec: &LogicShapesSpec,
    kind: SampleKind,
    train: bool,
    index: usize,
) -> Result<GeneratedSample> {
    let plan = Plan::new(spec)?;
    let split_tag = match (train, kind) {
        (true, _) => "train",
        (false, SampleKind::Normal) => "test_good",
        (false, SampleKind::Structural) => "test_structural",
        (false, SampleKind::Logical) => "test_logical",
    };
    let mut rng = sample_rng(spec.seed, split_tag, index);
    let mut layout = plan.normal_layout(&mut rng);
    let mut violated_rule = None;
    let mut anomaly = None;
    let mut logical_cells = Vec::new();
    if kind == SampleKind::Logical {
        let mut ids: Vec<usize> = (0..spec.rules.len()).collect();
        shuffle(&mut ids, &mut rng);
        for id in ids {
            let mut trial = layout.clone();
            if let Some((name, cells)) = plan.break_rule(&mut trial, id, &mut rng) {
                layout = trial;
                violated_rule = Some(id);
                anomaly = Some(name);
                logical_cells = cells;
                break;
            }
        }
        if violated_rule.is_none() {
            return Err(config_err("no rule can be violated in isolation"));
        }
    }
    let objects = plan.place(&layout, &mut rng);
    let mut canvas = Canvas::render(spec.canvas, &objects);
    let size = spec.canvas;
    let mut mask = vec![false; size * size];
    match kind {
        SampleKind::Normal => {}
        SampleKind::Logical => {
            for cell in &logical_cells {
                let (y0, x0, ch, cw) = plan.cell_rect(*cell);
                for y in y0..y0 + ch {
                    for x in x0..x0 + cw {
                        mask[y * size + x] = true;
                    }
                }
            }
        }
        SampleKind::Structural => {
            if objects.is_empty() {
                return Err(config_err("structural anomalies need at least one object"));
            }
            let o = objects[rng.random_range(0..objects.len())];
            let name = corrupt(&mut canvas, &mut mask, &o, plan.cell_rect(o.cell), &mut rng);
            if !mask.iter().any(|&m| m) {
                // Corruption fell outside the cell; force a single-pixel mark at the centre.
                let (y, x) = (o.center.0 as usize, o.center.1 as usize);
                canvas.px[y * size + x] = [0.0; 3];
                mask[y * size + x] = true;
            }
            anomaly = Some(name);
        }
    }
    let image = canvas.to_image(&mut rng, spec.noise_std);
    let dir = split_dir(kind, train);
    let file = format!("{dir}/{index:03}.png");
    let mask_img = (kind != SampleKind::Normal).then(|| {
        GrayImage::from_fn(size as u32, size as u32, |x, y| {
            Luma([if mask[y as usize * size + x as usize] { 255 } else { 0 }])
        })
    });
    let mask_file = mask_img.as_ref().map(|_| {
        let gt = dir.replacen("test/", "ground_truth/", 1);
        format!("{gt}/{index:03}_mask.png")
    });
    Ok(GeneratedSample {
        meta: SampleMeta {
            split: if train { "train".into() } else { "test".into() },
            index,
            file,
            mask_file,
            kind,
            violated_rule,
            anomaly,
            objects,
        },
        image,
        mask: mask_img,
    })
}

/// Every sample of the dataset described by `spec`, in output order.
pub fn generate_all(spec: &LogicShapesSpec) -> Result<Vec<GeneratedSample>> {
    Plan::new(spec)?;
    let jobs: Vec<(SampleKind, bool, usize)> = (0..spec.n_train)
        .map(|i| (SampleKind::Normal, true, i))
        .chain((0..spec.n_test_normal).map(|i| (SampleKind::Normal, false, i)))
        .chain((0..spec.n_test_structural).map(|i| (SampleKind::Structural, false, i)))
        .chain((0..spec.n_test_logical).map(|i| (SampleKind::Logical, false, i)))
        .collect();
    par::try_map_range(jobs.len(), |j| {
        let (kind, train, i) = jobs[j];
        generate_sample(spec, kind, train, i)
    })
}

/// Writes the dataset in the MVTec-style layout plus `meta.jsonl`,
/// `stats.json` and `spec.json`. Nothing is written if the spec is invalid.
pub fn generate_logicshapes(spec: &LogicShapesSpec, out: &Path) -> Result<PathBuf> {
    if spec.n_train == 0 {
        return Err(config_err("n_train must be positive"));
    }
    let samples = generate_all(spec)?;
    let io = |p: &Path, e| GlcfError::io(p, e);
    for sub in [
        "train/good",
        "test/good",
        "test/structural_anomalies",
        "test/logical_anomalies",
        "ground_truth/structural_anomalies",
        "ground_truth/logical_anomalies",
    ] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| io(&d, e))?;
    }
    let mut meta = String::new();
    for s in &samples {
        let p = out.join(&s.meta.file);
        s.image
            .save(&p)
            .map_err(|e| GlcfError::Image { path: p.clone(), source: e })?;
        if let (Some(m), Some(f)) = (&s.mask, &s.meta.mask_file) {
            let p = out.join(f);
            m.save(&p)
                .map_err(|e| GlcfError::Image { path: p.clone(), source: e })?;
        }
        meta.push_str(&serde_json::to_string(&s.meta)?);
        meta.push('\n');
    }
    let p = out.join("meta.jsonl");
    fs::write(&p, meta).map_err(|e| io(&p, e))?;

    let train: Vec<&RgbImage> = samples
        .iter()
        .filter(|s| s.meta.split == "train")
        .map(|s| &s.image)
        .collect();
    let stats = ChannelStats::from_images(train.iter().copied());
    let p = out.join("stats.json");
    fs::write(&p, serde_json::to_string_pretty(&stats)?).map_err(|e| io(&p, e))?;
    let p = out.join("spec.json");
    fs::write(&p, serde_json::to_string_pretty(spec)?).map_err(|e| io(&p, e))?;
    Ok(out.to_path_buf())
}

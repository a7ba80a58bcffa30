//! Frozen hierarchical window-attention encoder producing the three-level
//! feature pyramid every other network is trained against.

use std::path::PathBuf;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::archive::TensorArchive;
use crate::error::{config_err, contract_err, Result};
use crate::nn::{ensure_finite, normalize_last, patchify, LayerNorm, Linear, ParamStore, Scope, WindowBlock};

pub const PREFIX: &str = "backbone.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSource {
    RandomFrozen { seed: u64 },
    Archive { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub stem_patch: usize,
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub attention_window: usize,
    pub source: WeightSource,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_patch: 4,
            stage_channels: [32, 64, 128, 256],
            stage_depths: [1, 1, 2, 1],
            attention_window: 4,
            source: WeightSource::RandomFrozen { seed: 0 },
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_patch == 0 {
            return Err(config_err("stem_patch must be positive"));
        }
        if self.stage_channels.contains(&0) {
            return Err(config_err("stage channel counts must be positive"));
        }
        if self.attention_window == 0 {
            return Err(config_err("attention_window must be positive"));
        }
        Ok(())
    }

    /// Spatial stride of level `i` (0-based) relative to the input.
    pub fn level_stride(&self, i: usize) -> usize {
        self.stem_patch << i
    }

    /// Input sizes must reduce to integer grids at all three tapped stages.
    pub fn input_divisor(&self) -> usize {
        self.level_stride(2)
    }

    pub fn level_shapes(&self, h: usize, w: usize) -> Result<[(usize, usize, usize); 3]> {
        let d = self.input_divisor();
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(config_err(format!(
                "input {h}x{w} is not divisible by {d} (stem patch {} times 4)",
                self.stem_patch
            )));
        }
        Ok(std::array::from_fn(|i| {
            let s = self.level_stride(i);
            (self.stage_channels[i], h / s, w / s)
        }))
    }

    pub fn seed(&self) -> u64 {
        match &self.source {
            WeightSource::RandomFrozen { seed } => *seed,
            WeightSource::Archive { .. } => 0,
        }
    }
}

/// Normalized image batch `(B, 3, H, W)`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub data: Tensor,
}

impl ImageBatch {
    pub fn new(data: Tensor) -> Result<Self> {
        let (_, c, _, _) = data.dims4()?;
        if c != 3 {
            return Err(contract_err(format!("expected 3 channels, got {c}")));
        }
        ensure_finite(&data, "image batch")?;
        Ok(Self { data })
    }

    pub fn len(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hw(&self) -> (usize, usize) {
        let d = self.data.dims();
        (d[2], d[3])
    }
}

/// Three feature maps, level `i` shaped `(B, C_i, H_i, W_i)` with each level
/// half the resolution of the previous one.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 3],
}

impl FeaturePyramid {
    pub fn new(levels: [Tensor; 3]) -> Result<Self> {
        let p = Self { levels };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        for i in 0..2 {
            let (_, _, h0, w0) = self.levels[i].dims4()?;
            let (_, _, h1, w1) = self.levels[i + 1].dims4()?;
            if h0 != 2 * h1 || w0 != 2 * w1 {
                return Err(contract_err(format!(
                    "pyramid levels {i} ({h0}x{w0}) and {} ({h1}x{w1}) do not halve",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn shapes(&self) -> [Vec<usize>; 3] {
        std::array::from_fn(|i| self.levels[i].dims().to_vec())
    }

    pub fn batch(&self) -> usize {
        self.levels[0].dims()[0]
    }

    pub fn detach(&self) -> Self {
        Self {
            levels: std::array::from_fn(|i| self.levels[i].detach()),
        }
    }

    /// Rows `idx` of every level.
    pub fn select(&self, idx: &Tensor) -> Result<Self> {
        Ok(Self {
            levels: [
                self.levels[0].index_select(idx, 0)?,
                self.levels[1].index_select(idx, 0)?,
                self.levels[2].index_select(idx, 0)?,
            ],
        })
    }

    pub fn cat(parts: &[FeaturePyramid]) -> Result<Self> {
        let level = |i: usize| -> Result<Tensor> {
            let ts: Vec<&Tensor> = parts.iter().map(|p| &p.levels[i]).collect();
            Ok(Tensor::cat(&ts, 0)?)
        };
        Ok(Self {
            levels: [level(0)?, level(1)?, level(2)?],
        })
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        for (i, l) in self.levels.iter().enumerate() {
            ensure_finite(l, &format!("{what} level {}", i + 1))?;
        }
        Ok(())
    }
}

struct Stage {
    merge: Option<(LayerNorm, Linear)>,
    blocks: Vec<WindowBlock>,
}

/// The frozen encoder. Its parameters live in a private store that is never
/// handed to an optimizer.
pub struct Backbone {
    cfg: BackboneConfig,
    store: ParamStore,
    stem: Linear,
    stem_norm: LayerNorm,
    stages: Vec<Stage>,
}

fn heads_for(channels: usize) -> usize {
    let h = (channels / 32).max(1);
    if channels.is_multiple_of(h) {
        h
    } else {
        1
    }
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed(), dtype);
        let mut s = Scope::new(&mut store, PREFIX);
        let p = cfg.stem_patch;
        let c = cfg.stage_channels;
        let stem = Linear::new(&mut s.sub("stem"), 3 * p * p, c[0])?;
        let stem_norm = LayerNorm::new(&mut s.sub("stem_norm"), c[0])?;
        let mut stages = Vec::with_capacity(3);
        for i in 0..3 {
            let mut ss = s.sub(&format!("stage{}", i + 1));
            let merge = if i > 0 {
                Some((
                    LayerNorm::new(&mut ss.sub("merge_norm"), 4 * c[i - 1])?,
                    Linear::with_bias(&mut ss.sub("merge"), 4 * c[i - 1], c[i], false)?,
                ))
            } else {
                None
            };
            let blocks = (0..cfg.stage_depths[i])
                .map(|d| {
                    let shift = if d % 2 == 1 { cfg.attention_window / 2 } else { 0 };
                    WindowBlock::new(
                        &mut ss.sub(&format!("block{d}")),
                        c[i],
                        heads_for(c[i]),
                        cfg.attention_window,
                        shift,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { merge, blocks });
        }
        let mut bb = Self {
            cfg: cfg.clone(),
            store,
            stem,
            stem_norm,
            stages,
        };
        if let WeightSource::Archive { path } = &cfg.source {
            let archive = TensorArchive::load(path)?;
            bb.store.import_from(&archive, PREFIX, true)?;
        }
        Ok(bb)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn digest(&self) -> Result<String> {
        self.store.digest()
    }

    /// Stage 1-3 outputs; each tap is layer-normalized over channels.
    pub fn extract_features(&self, batch: &ImageBatch) -> Result<FeaturePyramid> {
        let (h, w) = batch.hw();
        self.cfg.level_shapes(h, w)?;
        let x = batch.data.to_dtype(self.store.dtype())?.detach();
        let p = self.cfg.stem_patch;
        let b = x.dims()[0];
        let (gh, gw) = (h / p, w / p);
        let patches = patchify(&x.permute((0, 2, 3, 1))?.contiguous()?, p)?;
        let mut x = self
            .stem_norm
            .forward(&self.stem.forward(&patches)?)?
            .reshape((b, gh, gw, self.cfg.stage_channels[0]))?;
        let mut taps = Vec::with_capacity(3);
        for stage in &self.stages {
            if let Some((norm, lin)) = &stage.merge {
                let (_, hh, ww, _) = x.dims4()?;
                let merged = patchify(&x, 2)?.reshape((b, hh / 2, ww / 2, ()))?;
                x = lin.forward(&norm.forward(&merged)?)?;
            }
            for blk in &stage.blocks {
                x = blk.forward(&x)?;
            }
            taps.push(normalize_last(&x)?.permute((0, 3, 1, 2))?.contiguous()?);
        }
        let [l1, l2, l3]: [Tensor; 3] = taps.try_into().unwrap();
        let pyr = FeaturePyramid::new([l1.detach(), l2.detach(), l3.detach()])?;
        pyr.ensure_finite("backbone output")?;
        Ok(pyr)
    }

    /// Writes the backbone parameters as a standalone importable archive.
    pub fn export(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        self.store.export_into(&mut a)?;
        Ok(a)
    }
}

//! Decoder heads turning a token grid back into a feature pyramid shaped like
//! the backbone's. The same architecture is instantiated three times (global
//! correspondence, local estimation, global estimation) under distinct
//! parameter prefixes.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FeaturePyramid};
use crate::bottleneck::TokenGrid;
use crate::error::{config_err, contract_err, Result};
use crate::nn::{upsample2x_nearest, ConvBlock, Linear, Scope, WindowBlock};

pub const PHI_G: &str = "phi_g.";
pub const PSI_L: &str = "psi_l.";
pub const PSI_G: &str = "psi_g.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    Attention,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Blocks per decoder stage, ordered from the coarsest stage (3) to the finest (1).
    pub stage_depths: [usize; 3],
    pub mode: StageMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            stage_depths: [1, 1, 1],
            mode: StageMode::Attention,
        }
    }
}

enum StageBlock {
    Window(WindowBlock),
    Conv(ConvBlock),
}

impl StageBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            StageBlock::Window(b) => b.forward(x),
            StageBlock::Conv(b) => b.forward(x),
        }
    }
}

struct DecoderStage {
    input: Linear,
    blocks: Vec<StageBlock>,
    out: Linear,
}

pub struct Decoder {
    grid: (usize, usize),
    /// Coarse to fine: backbone levels 3, 2, 1.
    stages: Vec<DecoderStage>,
}

impl Decoder {
    pub fn new(
        s: &mut Scope,
        cfg: &DecoderConfig,
        backbone: &BackboneConfig,
        input_hw: (usize, usize),
        token_dim: usize,
    ) -> Result<Self> {
        let shapes = backbone.level_shapes(input_hw.0, input_hw.1)?;
        let grid = (shapes[2].1, shapes[2].2);
        let mut stages = Vec::with_capacity(3);
        let mut in_dim = token_dim;
        for (k, level) in [2usize, 1, 0].into_iter().enumerate() {
            let c = shapes[level].0;
            let mut ss = s.sub(&format!("stage{}", level + 1));
            let input = Linear::new(&mut ss.sub("input"), in_dim, c)?;
            let blocks = (0..cfg.stage_depths[k])
                .map(|d| -> Result<StageBlock> {
                    let mut bs = ss.sub(&format!("block{d}"));
                    Ok(match cfg.mode {
                        StageMode::Attention => {
                            let heads = (c / 32).max(1);
                            let heads = if c % heads == 0 { heads } else { 1 };
                            let shift = if d % 2 == 1 { backbone.attention_window / 2 } else { 0 };
                            StageBlock::Window(WindowBlock::new(
                                &mut bs,
                                c,
                                heads,
                                backbone.attention_window,
                                shift,
                            )?)
                        }
                        StageMode::Conv => StageBlock::Conv(ConvBlock::new(&mut bs, c)?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let out = Linear::new(&mut ss.sub("out"), c, c)?;
            stages.push(DecoderStage { input, blocks, out });
            in_dim = c;
        }
        Ok(Self { grid, stages })
    }

    pub fn decode_pyramid(&self, tokens: &TokenGrid) -> Result<FeaturePyramid> {
        if tokens.grid_shape != self.grid {
            return Err(config_err(format!(
                "token grid {:?} does not match the stage-3 grid {:?}",
                tokens.grid_shape, self.grid
            )));
        }
        let (b, n, d) = tokens.tokens.dims3()?;
        if n != self.grid.0 * self.grid.1 {
            return Err(contract_err("token count does not fill the grid"));
        }
        let mut x = tokens.tokens.reshape((b, self.grid.0, self.grid.1, d))?;
        let mut emitted = Vec::with_capacity(3);
        for (k, stage) in self.stages.iter().enumerate() {
            if k > 0 {
                x = upsample2x_nearest(&x)?;
            }
            x = stage.input.forward(&x)?;
            for blk in &stage.blocks {
                x = blk.forward(&x)?;
            }
            emitted.push(stage.out.forward(&x)?.permute((0, 3, 1, 2))?.contiguous()?);
        }
        let l1 = emitted.pop().unwrap();
        let l2 = emitted.pop().unwrap();
        let l3 = emitted.pop().unwrap();
        FeaturePyramid::new([l1, l2, l3])
    }
}

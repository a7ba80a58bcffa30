//! Semantic bottleneck: multi-scale patch embedding followed by the semantic
//! aggregation transformer that splits the token grid into a global semantic
//! representation (`theta`) and an original patch representation (`omega`).

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FeaturePyramid};
use crate::error::{config_err, contract_err, Result};
use crate::nn::{ensure_finite, mask_from_fn, patchify, Block, Init, Linear, Scope};

pub const PREFIX: &str = "bottleneck.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamVariant {
    /// Spatial semantic tokens before the encoder.
    Ps,
    /// A global token before the encoder, spatial tokens before the decoder.
    Pgs,
    /// Spatial tokens before both the encoder and the decoder.
    Pss,
    /// Single class token (ViT classification layout) broadcast back over the grid.
    NoSam,
    /// No bottleneck at all: stage-3 embedding fed to every head.
    NoSb,
}

impl SamVariant {
    pub const ALL: [SamVariant; 5] = [
        SamVariant::Ps,
        SamVariant::Pgs,
        SamVariant::Pss,
        SamVariant::NoSam,
        SamVariant::NoSb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamVariant::Ps => "PS",
            SamVariant::Pgs => "PGS",
            SamVariant::Pss => "PSS",
            SamVariant::NoSam => "no-SAM",
            SamVariant::NoSb => "no-SB",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ps" => Ok(SamVariant::Ps),
            "pgs" => Ok(SamVariant::Pgs),
            "pss" => Ok(SamVariant::Pss),
            "no_sam" => Ok(SamVariant::NoSam),
            "no_sb" => Ok(SamVariant::NoSb),
            other => Err(config_err(format!("unknown SAM variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BottleneckConfig {
    pub dim: usize,
    /// Total transformer blocks, split evenly between encoder and decoder.
    pub depth: usize,
    pub heads: usize,
    pub variant: SamVariant,
    pub patch_sizes: [usize; 3],
    /// Embed all three pyramid levels; `false` embeds stage 3 only.
    pub multi_scale_embed: bool,
    /// Forbid decoder semantic tokens from attending the patch latents directly.
    pub mask_semantic_from_patches: bool,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            depth: 6,
            heads: 4,
            variant: SamVariant::Pss,
            patch_sizes: [4, 2, 1],
            multi_scale_embed: true,
            mask_semantic_from_patches: false,
        }
    }
}

impl BottleneckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(config_err("bottleneck dim must be positive"));
        }
        if !self.depth.is_multiple_of(2) {
            return Err(config_err(format!(
                "bottleneck depth {} is odd; it must split evenly into encoder and decoder",
                self.depth
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(config_err(format!(
                "bottleneck dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.patch_sizes.contains(&0) {
            return Err(config_err("patch sizes must be positive"));
        }
        Ok(())
    }

    /// Sequence lengths seen by the encoder and decoder for a grid of `n` tokens.
    pub fn sequence_lengths(&self, n: usize) -> (usize, usize) {
        match self.variant {
            SamVariant::Ps => (2 * n, 2 * n),
            SamVariant::Pgs => (n + 1, 2 * n + 1),
            SamVariant::Pss => (2 * n, 3 * n),
            SamVariant::NoSam => (n + 1, n + 1),
            SamVariant::NoSb => (0, 0),
        }
    }
}

/// Tokens `(B, N, D)` laid out over the stage-3 grid.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub grid_shape: (usize, usize),
}

impl TokenGrid {
    pub fn new(tokens: Tensor, grid_shape: (usize, usize)) -> Result<Self> {
        let (_, n, _) = tokens.dims3()?;
        if n != grid_shape.0 * grid_shape.1 {
            return Err(contract_err(format!(
                "{n} tokens do not fill a {}x{} grid",
                grid_shape.0, grid_shape.1
            )));
        }
        Ok(Self { tokens, grid_shape })
    }
}

#[derive(Debug, Clone)]
pub struct BottleneckOutput {
    /// Global semantic representation, input of the correspondence head.
    pub theta: TokenGrid,
    /// Original patch representation, input of both estimation heads.
    pub omega: TokenGrid,
}

pub struct Bottleneck {
    cfg: BottleneckConfig,
    grid: (usize, usize),
    embeds: Vec<(usize, usize, Linear)>,
    pos: Tensor,
    first_tokens: Option<Tensor>,
    second_tokens: Option<Tensor>,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    decoder_mask: Option<Tensor>,
}

impl Bottleneck {
    /// Builds the bottleneck for backbone inputs of `input_hw`.
    pub fn new(
        s: &mut Scope,
        cfg: &BottleneckConfig,
        backbone: &BackboneConfig,
        input_hw: (usize, usize),
        dtype: DType,
    ) -> Result<Self> {
        cfg.validate()?;
        let shapes = backbone.level_shapes(input_hw.0, input_hw.1)?;
        let grid = (shapes[2].1, shapes[2].2);
        let n = grid.0 * grid.1;
        let d = cfg.dim;
        let levels: Vec<usize> = match (cfg.variant, cfg.multi_scale_embed) {
            (SamVariant::NoSb, _) | (_, false) => vec![2],
            _ => vec![0, 1, 2],
        };
        let mut embeds = Vec::new();
        for i in levels {
            let (c, h, w) = shapes[i];
            let p = cfg.patch_sizes[i];
            if h % p != 0 || w % p != 0 || (h / p, w / p) != grid {
                return Err(config_err(format!(
                    "level {} ({h}x{w}) with patch size {p} does not tile the {}x{} token grid",
                    i + 1,
                    grid.0,
                    grid.1
                )));
            }
            let lin = Linear::new(&mut s.sub(&format!("embed.l{}", i + 1)), p * p * c, d)?;
            embeds.push((i, p, lin));
        }
        let pos = s.get("pos", &[n, d], Init::Normal(0.02))?;

        let (first_tokens, second_tokens) = match cfg.variant {
            SamVariant::Ps => (Some(s.get("sem_tokens", &[n, d], Init::Normal(0.02))?), None),
            SamVariant::Pgs => (
                Some(s.get("global_token", &[1, d], Init::Normal(0.02))?),
                Some(s.get("sem_tokens_dec", &[n, d], Init::Normal(0.02))?),
            ),
            SamVariant::Pss => (
                Some(s.get("sem_tokens", &[n, d], Init::Normal(0.02))?),
                Some(s.get("sem_tokens_dec", &[n, d], Init::Normal(0.02))?),
            ),
            SamVariant::NoSam => (Some(s.get("cls_token", &[1, d], Init::Normal(0.02))?), None),
            SamVariant::NoSb => (None, None),
        };

        let half = if cfg.variant == SamVariant::NoSb { 0 } else { cfg.depth / 2 };
        let encoder = (0..half)
            .map(|i| Block::new(&mut s.sub(&format!("enc.block{i}")), d, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..half)
            .map(|i| Block::new(&mut s.sub(&format!("dec.block{i}")), d, cfg.heads))
            .collect::<Result<Vec<_>>>()?;

        let decoder_mask = if cfg.mask_semantic_from_patches {
            let (_, dec_len) = cfg.sequence_lengths(n);
            let patch_start = dec_len - n;
            match cfg.variant {
                SamVariant::Pgs | SamVariant::Pss => Some(mask_from_fn(
                    dec_len,
                    dtype,
                    &Device::Cpu,
                    |r, c| !(r < n && c >= patch_start),
                )?),
                _ => None,
            }
        } else {
            None
        };

        Ok(Self {
            cfg: cfg.clone(),
            grid,
            embeds,
            pos,
            first_tokens,
            second_tokens,
            encoder,
            decoder,
            decoder_mask,
        })
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        self.grid
    }

    pub fn config(&self) -> &BottleneckConfig {
        &self.cfg
    }

    /// Sums the per-level patch embeddings and adds the position encoding.
    pub fn ms_pem_embed(&self, pyramid: &FeaturePyramid) -> Result<TokenGrid> {
        let mut acc: Option<Tensor> = None;
        for (i, p, lin) in &self.embeds {
            let level = pyramid.levels[*i].permute((0, 2, 3, 1))?.contiguous()?;
            let patches = patchify(&level, *p)?;
            if patches.dims()[1] != self.grid.0 * self.grid.1 {
                return Err(config_err(format!(
                    "level {} yields {} patches, expected {}",
                    i + 1,
                    patches.dims()[1],
                    self.grid.0 * self.grid.1
                )));
            }
            let e = lin.forward(&patches)?;
            acc = Some(match acc {
                Some(a) => (a + e)?,
                None => e,
            });
        }
        let tokens = acc.expect("at least one embedded level").broadcast_add(&self.pos)?;
        TokenGrid::new(tokens, self.grid)
    }

    fn expand(&self, t: &Tensor, b: usize, with_pos: bool) -> Result<Tensor> {
        let t = if with_pos { t.broadcast_add(&self.pos)? } else { t.clone() };
        let (n, d) = t.dims2()?;
        Ok(t.unsqueeze(0)?.broadcast_as((b, n, d))?.contiguous()?)
    }

    fn run(blocks: &[Block], x: Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let mut x = x;
        for blk in blocks {
            x = blk.forward(&x, mask)?;
        }
        Ok(x)
    }

    pub fn sam_forward(&self, grid: &TokenGrid) -> Result<BottleneckOutput> {
        let patches = &grid.tokens;
        let (b, n, _) = patches.dims3()?;
        if grid.grid_shape != self.grid {
            return Err(contract_err(format!(
                "token grid {:?} does not match bottleneck grid {:?}",
                grid.grid_shape, self.grid
            )));
        }
        let mask = self.decoder_mask.as_ref();
        let (theta, omega) = match self.cfg.variant {
            SamVariant::Ps => {
                let s = self.expand(self.first_tokens.as_ref().unwrap(), b, true)?;
                let enc = Self::run(&self.encoder, Tensor::cat(&[&s, patches], 1)?, None)?;
                let dec = Self::run(&self.decoder, enc, None)?;
                (dec.narrow(1, 0, n)?, dec.narrow(1, n, n)?)
            }
            SamVariant::Pgs => {
                let g = self.expand(self.first_tokens.as_ref().unwrap(), b, false)?;
                let s = self.expand(self.second_tokens.as_ref().unwrap(), b, true)?;
                let enc = Self::run(&self.encoder, Tensor::cat(&[&g, patches], 1)?, None)?;
                let dec = Self::run(&self.decoder, Tensor::cat(&[&s, &enc], 1)?, mask)?;
                (dec.narrow(1, 0, n)?, dec.narrow(1, n + 1, n)?)
            }
            SamVariant::Pss => {
                let s1 = self.expand(self.first_tokens.as_ref().unwrap(), b, true)?;
                let s2 = self.expand(self.second_tokens.as_ref().unwrap(), b, true)?;
                let enc = Self::run(&self.encoder, Tensor::cat(&[&s1, patches], 1)?, None)?;
                let dec = Self::run(&self.decoder, Tensor::cat(&[&s2, &enc], 1)?, mask)?;
                (dec.narrow(1, 0, n)?, dec.narrow(1, 2 * n, n)?)
            }
            SamVariant::NoSam => {
                let cls = self.expand(self.first_tokens.as_ref().unwrap(), b, false)?;
                let enc = Self::run(&self.encoder, Tensor::cat(&[&cls, patches], 1)?, None)?;
                let dec = Self::run(&self.decoder, enc, None)?;
                let d = dec.dims()[2];
                let theta = dec
                    .narrow(1, 0, 1)?
                    .broadcast_as((b, n, d))?
                    .broadcast_add(&self.pos)?;
                (theta, dec.narrow(1, 1, n)?)
            }
            SamVariant::NoSb => (patches.clone(), patches.clone()),
        };
        let theta = theta.contiguous()?;
        let omega = omega.contiguous()?;
        ensure_finite(&theta, "semantic representation")?;
        ensure_finite(&omega, "patch representation")?;
        Ok(BottleneckOutput {
            theta: TokenGrid::new(theta, self.grid)?,
            omega: TokenGrid::new(omega, self.grid)?,
        })
    }

    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<BottleneckOutput> {
        self.sam_forward(&self.ms_pem_embed(pyramid)?)
    }
}

/// Closed-form parameter count of a bottleneck.
pub fn expected_param_count(
    cfg: &BottleneckConfig,
    channels: [usize; 3],
    n: usize,
) -> usize {
    let d = cfg.dim;
    let embed = |i: usize| (cfg.patch_sizes[i].pow(2) * channels[i] + 1) * d;
    let embeds = match (cfg.variant, cfg.multi_scale_embed) {
        (SamVariant::NoSb, _) | (_, false) => embed(2),
        _ => embed(0) + embed(1) + embed(2),
    };
    let tokens = match cfg.variant {
        SamVariant::Ps => n * d,
        SamVariant::Pgs => d + n * d,
        SamVariant::Pss => 2 * n * d,
        SamVariant::NoSam => d,
        SamVariant::NoSb => 0,
    };
    let blocks = if cfg.variant == SamVariant::NoSb { 0 } else { cfg.depth };
    embeds + n * d + tokens + blocks * (12 * d * d + 13 * d)
}

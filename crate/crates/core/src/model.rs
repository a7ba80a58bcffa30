use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FeaturePyramid, ImageBatch};
use crate::bottleneck::{self, Bottleneck, BottleneckConfig, BottleneckOutput};
use crate::error::{config_err, Result};
use crate::heads::{Decoder, DecoderConfig, PHI_G, PSI_G, PSI_L};
use crate::nn::{ParamStore, Scope};

/// Architecture of the four sub-networks plus the input resolution they are
/// built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub bottleneck: BottleneckConfig,
    pub heads: DecoderConfig,
    pub resolution: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            bottleneck: BottleneckConfig::default(),
            heads: DecoderConfig::default(),
            resolution: 64,
        }
    }
}

/// Everything the forward pass produces from one batch.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub local: FeaturePyramid,
    pub bottleneck: BottleneckOutput,
    /// Global correspondence head output.
    pub phi_g: FeaturePyramid,
    /// Local estimation head output.
    pub psi_l: FeaturePyramid,
    /// Global estimation head output.
    pub psi_g: FeaturePyramid,
}

pub struct GlcfModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    /// Trainable parameters: bottleneck and the three heads.
    pub params: ParamStore,
    pub bottleneck: Bottleneck,
    pub phi_g: Decoder,
    pub psi_l: Decoder,
    pub psi_g: Decoder,
}

impl GlcfModel {
    pub fn new(cfg: &ModelConfig, init_seed: u64, dtype: DType) -> Result<Self> {
        let hw = (cfg.resolution, cfg.resolution);
        cfg.backbone.level_shapes(hw.0, hw.1)?;
        if cfg.resolution == 0 {
            return Err(config_err("resolution must be positive"));
        }
        let backbone = Backbone::new(&cfg.backbone, dtype)?;
        let mut params = ParamStore::new(init_seed, dtype);
        let bottleneck = Bottleneck::new(
            &mut Scope::new(&mut params, bottleneck::PREFIX),
            &cfg.bottleneck,
            &cfg.backbone,
            hw,
            dtype,
        )?;
        let d = cfg.bottleneck.dim;
        let mut head = |prefix: &str| {
            Decoder::new(
                &mut Scope::new(&mut params, prefix),
                &cfg.heads,
                &cfg.backbone,
                hw,
                d,
            )
        };
        let phi_g = head(PHI_G)?;
        let psi_l = head(PSI_L)?;
        let psi_g = head(PSI_G)?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            params,
            bottleneck,
            phi_g,
            psi_l,
            psi_g,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Runs the trainable networks on precomputed backbone features.
    pub fn forward_features(&self, local: &FeaturePyramid) -> Result<Outputs> {
        let bn = self.bottleneck.forward(local)?;
        let phi_g = self.phi_g.decode_pyramid(&bn.theta)?;
        let psi_l = self.psi_l.decode_pyramid(&bn.omega)?;
        let psi_g = self.psi_g.decode_pyramid(&bn.omega)?;
        Ok(Outputs {
            local: local.clone(),
            bottleneck: bn,
            phi_g,
            psi_l,
            psi_g,
        })
    }

    pub fn forward(&self, batch: &ImageBatch) -> Result<Outputs> {
        let local = self.backbone.extract_features(batch)?;
        self.forward_features(&local)
    }

    /// Backbone features for a large set of images, computed in chunks.
    pub fn extract_all(&self, images: &ImageBatch, chunk: usize) -> Result<FeaturePyramid> {
        let n = images.len();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = chunk.max(1).min(n - start);
            let b = ImageBatch {
                data: images.data.narrow(0, start, len)?,
            };
            parts.push(self.backbone.extract_features(&b)?);
            start += len;
        }
        FeaturePyramid::cat(&parts)
    }
}

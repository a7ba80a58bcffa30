//! Correspondence and estimation losses, the joint training loop, checkpoints
//! and post-training calibration.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{TensorArchive, CONFIG_KEY};
use crate::backbone::{FeaturePyramid, ImageBatch};
use crate::error::{config_err, contract_err, GlcfError, Result};
use crate::model::{GlcfModel, ModelConfig, Outputs};
use crate::scoring::{self, BranchMaps};

pub const SIGMA_FLOOR: f64 = 1e-8;
const HISTORY_KEY: &str = "__loss_history__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs (0 disables).
    pub checkpoint_interval: usize,
    /// Detach the correspondence head output inside the global estimation loss.
    pub stop_gradient_global_target: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 50,
            weight_decay: 1e-2,
            seed: 0,
            checkpoint_interval: 0,
            stop_gradient_global_target: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda1, self.lambda2, self.lambda3]
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(config_err("loss weights must be finite and non-negative"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(config_err("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Sum over levels, pixels and channels of the squared difference, averaged
/// over the batch.
pub fn pyramid_sq_error(a: &FeaturePyramid, b: &FeaturePyramid) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (x, y) in a.levels.iter().zip(&b.levels) {
        if x.dims() != y.dims() {
            return Err(contract_err(format!(
                "pyramid level shapes differ: {:?} vs {:?}",
                x.dims(),
                y.dims()
            )));
        }
        let per_sample = (x - y)?.sqr()?.flatten_from(1)?.sum(1)?;
        total = Some(match total {
            Some(t) => (t + per_sample)?,
            None => per_sample,
        });
    }
    Ok(total.expect("three levels").mean_all()?)
}

/// Correspondence loss between the frozen local features and the global
/// correspondence head.
pub fn loss_correspondence(local: &FeaturePyramid, global: &FeaturePyramid) -> Result<Tensor> {
    pyramid_sq_error(local, global)
}

/// Estimation loss; used for both the local space (target = backbone) and the
/// global space (target = correspondence head).
pub fn loss_estimation(target: &FeaturePyramid, estimate: &FeaturePyramid) -> Result<Tensor> {
    pyramid_sq_error(target, estimate)
}

pub fn total_loss(lc: f64, lel: f64, leg: f64, cfg: &TrainingConfig) -> Result<f64> {
    if !(lc.is_finite() && lel.is_finite() && leg.is_finite()) {
        return Err(GlcfError::NumericFault(format!(
            "non-finite loss terms ({lc}, {lel}, {leg})"
        )));
    }
    Ok(cfg.lambda1 * lc + cfg.lambda2 * lel + cfg.lambda3 * leg)
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub correspondence: Tensor,
    pub local_estimation: Tensor,
    pub global_estimation: Tensor,
    pub total: Tensor,
}

pub fn loss_terms(out: &Outputs, cfg: &TrainingConfig) -> Result<LossTerms> {
    let lc = loss_correspondence(&out.local, &out.phi_g)?;
    let lel = loss_estimation(&out.local, &out.psi_l)?;
    let global_target = if cfg.stop_gradient_global_target {
        out.phi_g.detach()
    } else {
        out.phi_g.clone()
    };
    let leg = loss_estimation(&global_target, &out.psi_g)?;
    let total = ((&lc * cfg.lambda1)? + (&lel * cfg.lambda2)?)?;
    let total = (total + (&leg * cfg.lambda3)?)?;
    Ok(LossTerms {
        correspondence: lc,
        local_estimation: lel,
        global_estimation: leg,
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss_c: f64,
    pub loss_el: f64,
    pub loss_eg: f64,
    pub total: f64,
}

pub fn loss_history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("epoch,loss_c,loss_el,loss_eg,total\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.loss_c, r.loss_el, r.loss_eg, r.total
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
}

/// Trainable parameters plus the configuration needed to rebuild the model.
/// The backbone is not stored; it is rebuilt from its recorded source.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub loss_history: Vec<LossRecord>,
    pub archive: TensorArchive,
}

impl Checkpoint {
    pub fn from_model(model: &GlcfModel, training: &TrainingConfig, history: &[LossRecord]) -> Result<Self> {
        let mut archive = TensorArchive::new();
        model.params.export_into(&mut archive)?;
        let config = CheckpointConfig {
            model: model.cfg.clone(),
            training: training.clone(),
        };
        archive
            .metadata
            .insert(CONFIG_KEY.into(), serde_json::to_value(&config)?);
        archive
            .metadata
            .insert(HISTORY_KEY.into(), serde_json::to_value(history)?);
        Ok(Self {
            config,
            loss_history: history.to_vec(),
            archive,
        })
    }

    pub fn from_archive(archive: TensorArchive) -> Result<Self> {
        let config = archive
            .metadata
            .get(CONFIG_KEY)
            .ok_or_else(|| GlcfError::CorruptArchive("checkpoint has no __config__".into()))?;
        let config: CheckpointConfig = serde_json::from_value(config.clone())?;
        let loss_history = match archive.metadata.get(HISTORY_KEY) {
            Some(h) => serde_json::from_value(h.clone())?,
            None => Vec::new(),
        };
        Ok(Self {
            config,
            loss_history,
            archive,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.archive.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(TensorArchive::load(path)?)
    }

    pub fn build_model(&self, dtype: DType) -> Result<GlcfModel> {
        let mut model = GlcfModel::new(&self.config.model, self.config.training.seed, dtype)?;
        model.params.import_from(&self.archive, "", true)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for interval checkpoints (`checkpoint_epoch{N}.glcf`).
    pub checkpoint_dir: Option<PathBuf>,
}

/// Trains the bottleneck and the three heads on anomaly-free images.
/// Backbone features are computed once up front since the backbone is frozen.
pub fn train_glcf(
    model_cfg: &ModelConfig,
    cfg: &TrainingConfig,
    train_images: &ImageBatch,
    opts: &TrainOptions,
) -> Result<(GlcfModel, Checkpoint)> {
    cfg.validate()?;
    if train_images.is_empty() {
        return Err(GlcfError::MissingInput("training set is empty".into()));
    }
    let model = GlcfModel::new(model_cfg, cfg.seed, DType::F32)?;
    let features = model.extract_all(train_images, 32)?;
    let history = train_on_features(&model, cfg, &features, opts)?;
    let ckpt = Checkpoint::from_model(&model, cfg, &history)?;
    Ok((model, ckpt))
}

/// Training loop over precomputed backbone features; returns per-epoch means.
pub fn train_on_features(
    model: &GlcfModel,
    cfg: &TrainingConfig,
    features: &FeaturePyramid,
    opts: &TrainOptions,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let n = features.batch();
    if n == 0 {
        return Err(GlcfError::MissingInput("training set is empty".into()));
    }
    let mut opt = AdamW::new(
        model.params.all_vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0f64; 4];
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let idx = Tensor::from_slice(chunk, chunk.len(), model.params.device())?;
            let batch = features.select(&idx)?;
            let out = model.forward_features(&batch)?;
            let terms = loss_terms(&out, cfg)?;
            let vals = [
                scalar(&terms.correspondence)?,
                scalar(&terms.local_estimation)?,
                scalar(&terms.global_estimation)?,
                scalar(&terms.total)?,
            ];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(GlcfError::NumericFault(format!(
                    "loss diverged at epoch {epoch}: correspondence {}, local {}, global {}",
                    vals[0], vals[1], vals[2]
                )));
            }
            opt.backward_step(&terms.total)?;
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v * chunk.len() as f64;
            }
            seen += chunk.len();
        }
        let m = |i: usize| sums[i] / seen as f64;
        let rec = LossRecord {
            epoch,
            loss_c: m(0),
            loss_el: m(1),
            loss_eg: m(2),
            total: m(3),
        };
        log::info!(
            "epoch {epoch}/{}: total {:.4} (corr {:.4}, est-L {:.4}, est-G {:.4})",
            cfg.epochs,
            rec.total,
            rec.loss_c,
            rec.loss_el,
            rec.loss_eg
        );
        history.push(rec);
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_interval > 0 && epoch % cfg.checkpoint_interval == 0 {
                Checkpoint::from_model(model, cfg, &history)?
                    .save(dir.join(format!("checkpoint_epoch{epoch}.glcf")))?;
            }
        }
    }
    Ok(history)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mu: f64,
    pub sigma: f64,
}

/// Per-branch, per-scale normalization constants from anomaly-free data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub local: [Moments; 3],
    pub global: [Moments; 3],
}

impl CalibrationStats {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| GlcfError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| GlcfError::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Mean and population standard deviation pooled over every value of every
/// map. A deviation below [`SIGMA_FLOOR`] is clamped, with a warning.
pub fn pooled_moments<'a>(maps: impl IntoIterator<Item = &'a [f64]>, what: &str) -> Result<Moments> {
    let maps: Vec<&[f64]> = maps.into_iter().collect();
    let count: usize = maps.iter().map(|m| m.len()).sum();
    if count == 0 {
        return Err(GlcfError::MissingInput(format!("no values to calibrate {what}")));
    }
    let mu = maps.iter().flat_map(|m| m.iter()).sum::<f64>() / count as f64;
    let var = maps
        .iter()
        .flat_map(|m| m.iter())
        .map(|v| (v - mu).powi(2))
        .sum::<f64>()
        / count as f64;
    let mut sigma = var.sqrt();
    if !(mu.is_finite() && sigma.is_finite()) {
        return Err(GlcfError::NumericFault(format!("{what} statistics are not finite")));
    }
    if sigma < SIGMA_FLOOR {
        log::warn!("{what}: standard deviation {sigma:e} clamped to {SIGMA_FLOOR:e}");
        sigma = SIGMA_FLOOR;
    }
    Ok(Moments { mu, sigma })
}

pub fn calibrate_from_maps(maps: &[BranchMaps]) -> Result<CalibrationStats> {
    if maps.is_empty() {
        return Err(GlcfError::MissingInput("calibration set is empty".into()));
    }
    let stat = |global: bool, i: usize| {
        let what = format!("{} branch scale {}", if global { "global" } else { "local" }, i + 1);
        pooled_moments(
            maps.iter().map(|m| {
                if global {
                    m.global[i].data.as_slice()
                } else {
                    m.local[i].data.as_slice()
                }
            }),
            &what,
        )
    };
    Ok(CalibrationStats {
        local: [stat(false, 0)?, stat(false, 1)?, stat(false, 2)?],
        global: [stat(true, 0)?, stat(true, 1)?, stat(true, 2)?],
    })
}

/// Runs the trained model over anomaly-free images and pools its branch maps.
pub fn calibrate(model: &GlcfModel, train_images: &ImageBatch) -> Result<CalibrationStats> {
    if train_images.is_empty() {
        return Err(GlcfError::MissingInput("calibration set is empty".into()));
    }
    let maps = scoring::branch_anomaly_maps_chunked(model, train_images, 32)?;
    calibrate_from_maps(&maps)
}

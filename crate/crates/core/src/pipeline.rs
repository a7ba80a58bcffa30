//! End-to-end building blocks shared by the CLI and the experiment harness:
//! dataset resolution (with a generation cache), batching, training,
//! calibration and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ImageBatch;
use crate::config::{DataConfig, RunConfig};
use crate::data::{
    generate_logicshapes, load_folder_dataset, preprocess_mask, to_batch, ChannelStats, FolderSample,
    LogicShapesSpec,
};
use crate::error::{GlcfError, Result};
use crate::eval::{
    apply_rule, collect_maps, evaluate_variant, Calibration, MapBundle, ScoringRule, SproConfig, TestSet,
    VariantResult,
};
use crate::model::GlcfModel;
use crate::scoring::FusionConfig;
use crate::training::{train_glcf, Checkpoint, TrainOptions};

pub const CACHE_ENV: &str = "GLCF_CACHE";

/// Dataset cache root: `$GLCF_CACHE`, else `glcf-cache` in the temp dir.
pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("glcf-cache"))
}

/// Directory of a generated dataset, generating it on first use. Entries are
/// keyed by a hash of the spec and only become visible once complete.
pub fn cached_logicshapes(spec: &LogicShapesSpec) -> Result<PathBuf> {
    let key = hex(&Sha256::digest(serde_json::to_vec(spec)?))[..16].to_string();
    let root = cache_dir();
    let dir = root.join(format!("logicshapes-{key}"));
    if dir.join("meta.jsonl").is_file() {
        return Ok(dir);
    }
    fs::create_dir_all(&root).map_err(|e| GlcfError::io(&root, e))?;
    let tmp = root.join(format!(".logicshapes-{key}.{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| GlcfError::io(&tmp, e))?;
    }
    generate_logicshapes(spec, &tmp)?;
    match fs::rename(&tmp, &dir) {
        Ok(()) => {}
        // Another process finished first.
        Err(_) if dir.join("meta.jsonl").is_file() => {
            let _ = fs::remove_dir_all(&tmp);
        }
        Err(e) => return Err(GlcfError::io(&dir, e)),
    }
    log::info!("generated dataset cached at {}", dir.display());
    Ok(dir)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Explicit `data.path`, or the cached LogicShapes dataset of `data.logicshapes`.
pub fn resolve_dataset(cfg: &DataConfig) -> Result<PathBuf> {
    match &cfg.path {
        Some(p) => Ok(p.clone()),
        None => cached_logicshapes(&cfg.logicshapes),
    }
}

/// Images of a dataset folder, preprocessed for the model.
pub struct PreparedData {
    pub train: ImageBatch,
    pub test: Option<TestSet>,
    pub normalization: ChannelStats,
}

pub fn test_set(
    samples: &[FolderSample],
    resolution: usize,
    norm: &ChannelStats,
    dtype: DType,
) -> Result<TestSet> {
    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    Ok(TestSet {
        images: to_batch(&images, resolution, norm, dtype)?,
        kinds: samples.iter().map(|s| s.kind).collect(),
        masks: samples
            .iter()
            .map(|s| match &s.mask {
                Some(m) => preprocess_mask(m, resolution),
                None => vec![false; resolution * resolution],
            })
            .collect(),
        names: samples.iter().map(|s| s.rel_path.clone()).collect(),
    })
}

/// Loads a dataset folder. Normalization constants come from `norm` when
/// given, else from the folder's `stats.json`, else ImageNet defaults.
pub fn prepare(root: &Path, resolution: usize, norm: Option<ChannelStats>) -> Result<PreparedData> {
    let ds = load_folder_dataset(root)?;
    let norm = norm.unwrap_or_else(|| ds.channel_stats());
    let train = to_batch(&ds.train_images(), resolution, &norm, DType::F32)?;
    let test = if ds.test.is_empty() {
        None
    } else {
        Some(test_set(&ds.test, resolution, &norm, DType::F32)?)
    };
    Ok(PreparedData {
        train,
        test,
        normalization: norm,
    })
}

pub fn train(cfg: &RunConfig, data: &PreparedData, checkpoint_dir: Option<&Path>) -> Result<(GlcfModel, Checkpoint)> {
    let opts = TrainOptions {
        checkpoint_dir: checkpoint_dir.map(Path::to_path_buf),
    };
    train_glcf(&cfg.model(), &cfg.training, &data.train, &opts)
}

/// Calibration file contents: scoring statistics plus the input
/// normalization they were measured under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    #[serde(flatten)]
    pub calibration: Calibration,
    pub normalization: ChannelStats,
}

impl CalibrationFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| GlcfError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GlcfError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            GlcfError::Contract(format!("{}: not a calibration file: {e}", path.display()))
        })
    }
}

pub fn calibrate(model: &GlcfModel, data: &PreparedData, batch: usize) -> Result<CalibrationFile> {
    let maps = collect_maps(model, &data.train, batch)?;
    Ok(CalibrationFile {
        calibration: Calibration::from_train(&maps)?,
        normalization: data.normalization,
    })
}

/// Scores the test set under each rule and computes its metrics.
pub fn evaluate(
    model: &GlcfModel,
    cal: &Calibration,
    test: &TestSet,
    fusion: &FusionConfig,
    spro: &SproConfig,
    rules: &[(String, ScoringRule)],
    batch: usize,
) -> Result<Vec<VariantResult>> {
    let maps = collect_maps(model, &test.images, batch)?;
    evaluate_maps(&maps, cal, test, fusion, spro, rules)
}

/// As [`evaluate`], on maps already collected from the test images.
pub fn evaluate_maps(
    maps: &MapBundle,
    cal: &Calibration,
    test: &TestSet,
    fusion: &FusionConfig,
    spro: &SproConfig,
    rules: &[(String, ScoringRule)],
) -> Result<Vec<VariantResult>> {
    let hw = test.images.hw();
    rules
        .iter()
        .map(|(name, rule)| {
            let scored = apply_rule(maps, cal, fusion, *rule, hw)?;
            evaluate_variant(name, test, &scored, spro)
        })
        .collect()
}

/// Loads a checkpoint and rebuilds its model.
pub fn load_model(path: &Path) -> Result<(GlcfModel, Checkpoint)> {
    if !path.is_file() {
        return Err(GlcfError::MissingInput(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let ck = Checkpoint::load(path)?;
    let model = ck.build_model(DType::F32)?;
    Ok((model, ck))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_reuses_generated_dataset() {
        let dir = tempfile::tempdir().unwrap();
        std::env::set_var(CACHE_ENV, dir.path());
        let spec = LogicShapesSpec {
            n_train: 2,
            n_test_normal: 1,
            n_test_structural: 1,
            n_test_logical: 1,
            ..Default::default()
        };
        let a = cached_logicshapes(&spec).unwrap();
        assert!(a.starts_with(dir.path()));
        let stamp = fs::metadata(a.join("meta.jsonl")).unwrap().modified().unwrap();
        let b = cached_logicshapes(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(fs::metadata(b.join("meta.jsonl")).unwrap().modified().unwrap(), stamp);
        let other = cached_logicshapes(&LogicShapesSpec { seed: 9, ..spec }).unwrap();
        assert_ne!(a, other);
    }
}

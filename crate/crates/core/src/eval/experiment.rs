//! Ablation grids over scoring rules and model variants.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ExperimentReport, ScoringRule, VariantResult, REPORT_VERSION};
use crate::bottleneck::SamVariant;
use crate::config::RunConfig;
use crate::error::{config_err, GlcfError, Result};
use crate::model::GlcfModel;
use crate::pipeline::{self, CalibrationFile, PreparedData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentMode {
    /// Local branch, global branch and their fusion.
    Branches,
    /// Estimation-error scoring against raw correspondence discrepancy.
    CorrespondenceVsEstimation,
    /// Each single scale against the multi-scale fusion.
    Multiscale,
    /// One model per bottleneck variant.
    SamVariants,
}

impl ExperimentMode {
    pub const ALL: [ExperimentMode; 4] = [
        ExperimentMode::Branches,
        ExperimentMode::CorrespondenceVsEstimation,
        ExperimentMode::Multiscale,
        ExperimentMode::SamVariants,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentMode::Branches => "branches",
            ExperimentMode::CorrespondenceVsEstimation => "correspondence-vs-estimation",
            ExperimentMode::Multiscale => "multiscale",
            ExperimentMode::SamVariants => "sam-variants",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
                config_err(format!("unknown mode {s:?}; expected one of {}", names.join(", ")))
            })
    }

    /// Scoring rules evaluated on a single trained model.
    pub fn rules(self) -> Vec<(String, ScoringRule)> {
        let named = |r: ScoringRule| (r.name(), r);
        match self {
            ExperimentMode::Branches => vec![
                named(ScoringRule::LocalBranch),
                named(ScoringRule::GlobalBranch),
                named(ScoringRule::Fused),
            ],
            ExperimentMode::CorrespondenceVsEstimation => vec![
                named(ScoringRule::Correspondence),
                ("estimation".into(), ScoringRule::Fused),
            ],
            ExperimentMode::Multiscale => vec![
                named(ScoringRule::SingleScale(0)),
                named(ScoringRule::SingleScale(1)),
                named(ScoringRule::SingleScale(2)),
                named(ScoringRule::Fused),
            ],
            ExperimentMode::SamVariants => vec![named(ScoringRule::Fused)],
        }
    }
}

/// Model variants trained by the `sam-variants` grid, as (row name, config).
pub fn sam_variant_grid(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut out: Vec<(String, RunConfig)> = [
        SamVariant::Ps,
        SamVariant::Pgs,
        SamVariant::Pss,
        SamVariant::NoSam,
        SamVariant::NoSb,
    ]
    .into_iter()
    .map(|v| {
        let mut c = base.clone();
        c.bottleneck.variant = v;
        (v.name().to_string(), c)
    })
    .collect();
    let mut c = base.clone();
    c.bottleneck.variant = SamVariant::Pss;
    c.bottleneck.multi_scale_embed = false;
    out.push(("no-MS-PEM".into(), c));
    out
}

/// A trained and calibrated model with its artifacts written to `dir`.
pub struct Fitted {
    pub model: GlcfModel,
    pub calibration: CalibrationFile,
}

pub fn fit(cfg: &RunConfig, data: &PreparedData, dir: &Path) -> Result<Fitted> {
    std::fs::create_dir_all(dir).map_err(|e| GlcfError::io(dir, e))?;
    let (model, ck) = pipeline::train(cfg, data, Some(dir))?;
    ck.save(dir.join("checkpoint.glcf"))?;
    let csv = crate::training::loss_history_csv(&ck.loss_history);
    let p = dir.join("loss_history.csv");
    std::fs::write(&p, csv).map_err(|e| GlcfError::io(&p, e))?;
    let calibration = pipeline::calibrate(&model, data, cfg.eval.batch_size)?;
    calibration.save(&dir.join("calibration.json"))?;
    Ok(Fitted { model, calibration })
}

fn evaluate_fitted(
    cfg: &RunConfig,
    fitted: &Fitted,
    data: &PreparedData,
    rules: &[(String, ScoringRule)],
) -> Result<Vec<VariantResult>> {
    let test = data
        .test
        .as_ref()
        .ok_or_else(|| GlcfError::MissingInput("dataset has no test split".into()))?;
    pipeline::evaluate(
        &fitted.model,
        &fitted.calibration.calibration,
        test,
        &cfg.fusion,
        &cfg.eval.spro,
        rules,
        cfg.eval.batch_size,
    )
}

/// Trains what `mode` needs, evaluates it and writes the report, tables,
/// charts and per-model artifacts into `out`.
pub fn run_experiment(
    mode: ExperimentMode,
    cfg: &RunConfig,
    out: &Path,
    deterministic: bool,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let root = pipeline::resolve_dataset(&cfg.data)?;
    let data = pipeline::prepare(&root, cfg.data.resolution, None)?;
    let variants = match mode {
        ExperimentMode::SamVariants => {
            let mut rows = Vec::new();
            for (name, c) in sam_variant_grid(cfg) {
                log::info!("training variant {name}");
                let fitted = fit(&c, &data, &out.join(&name))?;
                let mut r = evaluate_fitted(&c, &fitted, &data, &mode.rules())?;
                let mut row = r.remove(0);
                row.name = name;
                rows.push(row);
            }
            rows
        }
        _ => {
            let fitted = fit(cfg, &data, &out.join("model"))?;
            evaluate_fitted(cfg, &fitted, &data, &mode.rules())?
        }
    };
    let report = ExperimentReport {
        report_version: REPORT_VERSION,
        mode: mode.name().to_string(),
        variants,
        config: serde_json::to_value(cfg)?,
        runtime_seconds: (!deterministic).then(|| start.elapsed().as_secs_f64()),
    };
    report.write_to(out)?;
    Ok(report)
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use candle_core::DType;
use clap::{Args, Parser, Subcommand};

use glcf::config::RunConfig;
use glcf::data::{self, LogicShapesSpec};
use glcf::error::{GlcfError, Result};
use glcf::eval::{ExperimentMode, ExperimentReport, ScoringRule, REPORT_VERSION};
use glcf::export;
use glcf::pipeline::{self, CalibrationFile};
use glcf::training::{loss_history_csv, Checkpoint};

/// Global-local correspondence anomaly detection.
#[derive(Parser)]
#[command(name = "glcf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct Common {
    /// Single-threaded numeric paths; reruns produce identical artifacts.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overrides the training and data-generation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a LogicShapes dataset in the MVTec folder layout.
    GenerateData {
        /// Dataset spec JSON; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the bottleneck and heads on anomaly-free images.
    Train {
        /// Run config JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset folder; defaults to the config's data section (generated
        /// and cached under $GLCF_CACHE when it names no path).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute normalization statistics of the branch maps on training data.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Run config JSON for the fusion and eval sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one image or a directory of images.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Calibration file written by `calibrate`.
        #[arg(long)]
        stats: PathBuf,
        #[arg(long, conflicts_with = "dir", required_unless_present = "dir")]
        image: Option<PathBuf>,
        /// Directory searched recursively for images.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate on a dataset's test split and write a report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation grid: branches, correspondence-vs-estimation,
    /// multiscale or sam-variants.
    Ablate {
        #[arg(long)]
        mode: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn out(&self) -> &Path {
        match self {
            Command::GenerateData { out, .. }
            | Command::Train { out, .. }
            | Command::Calibrate { out, .. }
            | Command::Score { out, .. }
            | Command::Eval { out, .. }
            | Command::Ablate { out, .. } => out,
        }
    }
}

/// Log sink writing to stderr and the output directory's log file.
struct Tee(Mutex<fs::File>);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.0.lock().unwrap().write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.lock().unwrap().flush()
    }
}

fn init_logging(out: &Path, level: &str) -> Result<()> {
    let path = out.join("glcf.log");
    let file = fs::File::create(&path).map_err(|e| GlcfError::io(&path, e))?;
    env_logger::Builder::new()
        .parse_filters(level)
        .format_timestamp(None)
        .target(env_logger::Target::Pipe(Box::new(Tee(Mutex::new(file)))))
        .try_init()
        .map_err(|e| GlcfError::Config(e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| GlcfError::io(path, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            if !p.is_file() {
                return Err(GlcfError::MissingInput(format!("config {} does not exist", p.display())));
            }
            RunConfig::load(p)
        }
        None => Ok(RunConfig::default()),
    }
}

fn apply_seed(cfg: &mut RunConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        cfg.training.seed = s;
        cfg.data.logicshapes.seed = s;
    }
}

/// Run config of a trained model: its architecture and training sections,
/// the remaining sections from `path` (or defaults).
fn config_for_checkpoint(ck: &Checkpoint, path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = load_config(path)?;
    let m = &ck.config.model;
    cfg.backbone = m.backbone.clone();
    cfg.bottleneck = m.bottleneck.clone();
    cfg.heads = m.heads.clone();
    cfg.data.resolution = m.resolution;
    cfg.training = ck.config.training.clone();
    Ok(cfg)
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(GlcfError::MissingInput(format!("{what} {} does not exist", p.display())))
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.common.clone();
    let out = cli.command.out().to_path_buf();
    fs::create_dir_all(&out).map_err(|e| GlcfError::io(&out, e))?;
    init_logging(&out, &common.log_level)?;
    if common.deterministic {
        glcf::par::set_sequential(true);
        log::info!("deterministic mode: sequential numeric paths");
    }
    let resolved = out.join("resolved_config.json");

    match cli.command {
        Command::GenerateData { spec, out } => {
            let mut cfg = RunConfig::default();
            if let Some(p) = spec {
                let text = fs::read_to_string(&p).map_err(|e| GlcfError::io(&p, e))?;
                cfg.data.logicshapes = serde_json::from_str::<LogicShapesSpec>(&text)
                    .map_err(|e| GlcfError::Config(format!("{}: {e}", p.display())))?;
            }
            apply_seed(&mut cfg, common.seed);
            cfg.data.path = Some(out.clone());
            write_text(&resolved, &cfg.to_json()?)?;
            data::generate_logicshapes(&cfg.data.logicshapes, &out)?;
            let s = &cfg.data.logicshapes;
            log::info!(
                "wrote {} training and {} test samples to {}",
                s.n_train,
                s.n_test_normal + s.n_test_structural + s.n_test_logical,
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let mut cfg = load_config(config.as_deref())?;
            apply_seed(&mut cfg, common.seed);
            if data.is_some() {
                cfg.data.path = data;
            }
            let root = pipeline::resolve_dataset(&cfg.data)?;
            require_dir(&root, "dataset")?;
            cfg.data.path = Some(root.clone());
            write_text(&resolved, &cfg.to_json()?)?;
            let prepared = pipeline::prepare(&root, cfg.data.resolution, None)?;
            log::info!("training on {} images", prepared.train.len());
            let (_, ck) = pipeline::train(&cfg, &prepared, Some(&out))?;
            ck.save(out.join("checkpoint.glcf"))?;
            write_text(&out.join("loss_history.csv"), &loss_history_csv(&ck.loss_history))?;
        }
        Command::Calibrate {
            checkpoint,
            data,
            config,
            out,
        } => {
            let (model, ck) = pipeline::load_model(&checkpoint)?;
            let mut cfg = config_for_checkpoint(&ck, config.as_deref())?;
            require_dir(&data, "dataset")?;
            cfg.data.path = Some(data.clone());
            write_text(&resolved, &cfg.to_json()?)?;
            let prepared = pipeline::prepare(&data, cfg.data.resolution, None)?;
            let cal = pipeline::calibrate(&model, &prepared, cfg.eval.batch_size)?;
            cal.save(&out.join("calibration.json"))?;
            log::info!("calibrated on {} images", prepared.train.len());
        }
        Command::Score {
            checkpoint,
            stats,
            image,
            dir,
            config,
            out,
        } => {
            let (model, ck) = pipeline::load_model(&checkpoint)?;
            let cfg = config_for_checkpoint(&ck, config.as_deref())?;
            let cal = CalibrationFile::load(&stats)?;
            write_text(&resolved, &cfg.to_json()?)?;
            let single = image.is_some();
            let files = match (image, dir) {
                (Some(p), _) => {
                    if !p.is_file() {
                        return Err(GlcfError::MissingInput(format!("image {} does not exist", p.display())));
                    }
                    vec![(p.file_name().unwrap().to_string_lossy().to_string(), p)]
                }
                (None, Some(d)) => {
                    require_dir(&d, "image directory")?;
                    find_images(&d)?
                }
                (None, None) => unreachable!("clap requires --image or --dir"),
            };
            if files.is_empty() {
                return Err(GlcfError::MissingInput("no images to score".into()));
            }
            let images: Vec<_> = files
                .iter()
                .map(|(_, p)| {
                    image::open(p).map(|i| i.to_rgb8()).map_err(|e| GlcfError::Image {
                        path: p.clone(),
                        source: e,
                    })
                })
                .collect::<Result<_>>()?;
            let batch = data::to_batch(&images, cfg.data.resolution, &cal.normalization, DType::F32)?;
            let maps = glcf::eval::collect_maps(&model, &batch, cfg.eval.batch_size)?;
            let scored = glcf::eval::apply_rule(
                &maps,
                &cal.calibration,
                &cfg.fusion,
                ScoringRule::Fused,
                batch.hw(),
            )?;
            let mut rows = Vec::new();
            for (((rel, path), img), (map, score)) in files.iter().zip(&images).zip(&scored) {
                let stem = Path::new(rel).with_extension("").to_string_lossy().replace(['/', '\\'], "_");
                export::save_float_map(&out.join(format!("{stem}_map.tiff")), map)?;
                export::save_overlay(&out.join(format!("{stem}_overlay.png")), img, map)?;
                rows.push((rel.clone(), label_of(path), *score));
            }
            write_text(&out.join("scores.csv"), &export::scores_csv(&rows))?;
            if single {
                println!("{}", rows[0].2);
            } else {
                log::info!("scored {} images", rows.len());
            }
        }
        Command::Eval {
            checkpoint,
            stats,
            data,
            config,
            out,
        } => {
            let (model, ck) = pipeline::load_model(&checkpoint)?;
            let mut cfg = config_for_checkpoint(&ck, config.as_deref())?;
            let cal = CalibrationFile::load(&stats)?;
            require_dir(&data, "dataset")?;
            cfg.data.path = Some(data.clone());
            write_text(&resolved, &cfg.to_json()?)?;
            let start = std::time::Instant::now();
            let prepared = pipeline::prepare(&data, cfg.data.resolution, Some(cal.normalization))?;
            let test = prepared
                .test
                .as_ref()
                .ok_or_else(|| GlcfError::MissingInput(format!("{} has no test split", data.display())))?;
            let mode = ExperimentMode::Branches;
            let maps = glcf::eval::collect_maps(&model, &test.images, cfg.eval.batch_size)?;
            let variants =
                pipeline::evaluate_maps(&maps, &cal.calibration, test, &cfg.fusion, &cfg.eval.spro, &mode.rules())?;
            let scored = glcf::eval::apply_rule(
                &maps,
                &cal.calibration,
                &cfg.fusion,
                ScoringRule::Fused,
                test.images.hw(),
            )?;
            let rows: Vec<_> = test
                .names
                .iter()
                .zip(&test.kinds)
                .zip(&scored)
                .map(|((n, k), (_, s))| (n.clone(), Some(k.is_anomalous() as u8), *s))
                .collect();
            write_text(&out.join("scores.csv"), &export::scores_csv(&rows))?;
            let report = ExperimentReport {
                report_version: REPORT_VERSION,
                mode: mode.name().into(),
                variants,
                config: serde_json::to_value(&cfg)?,
                runtime_seconds: (!common.deterministic).then(|| start.elapsed().as_secs_f64()),
            };
            report.write_to(&out)?;
            for v in &report.variants {
                log::info!(
                    "{}: image AUROC structural {:.3} logical {:.3}",
                    v.name,
                    v.image_auroc.structural.unwrap_or(f64::NAN),
                    v.image_auroc.logical.unwrap_or(f64::NAN)
                );
            }
        }
        Command::Ablate { mode, config, out } => {
            let mode = ExperimentMode::parse(&mode)?;
            let mut cfg = load_config(config.as_deref())?;
            apply_seed(&mut cfg, common.seed);
            write_text(&resolved, &cfg.to_json()?)?;
            let report = glcf::eval::run_experiment(mode, &cfg, &out, common.deterministic)?;
            log::info!("{} rows written to {}", report.variants.len(), out.display());
        }
    }
    Ok(())
}

/// 0 for images in a `good` folder, 1 for other folders under `test`.
fn label_of(path: &Path) -> Option<u8> {
    let parent = path.parent()?;
    if parent.file_name()? == "good" {
        return Some(0);
    }
    (parent.parent()?.file_name()? == "test").then_some(1)
}

/// Images below `dir`, sorted, with their `/`-separated relative paths.
fn find_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(|e| GlcfError::io(&d, e))? {
            let p = e.map_err(|e| GlcfError::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "jpg" | "jpeg" | "bmp")
            ) {
                let rel = p.strip_prefix(dir).unwrap().components()
                    .map(|c| c.as_os_str().to_string_lossy().to_string())
                    .collect::<Vec<_>>()
                    .join("/");
                out.push((rel, p));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.common.deterministic {
        // Before any thread pool exists.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            log::error!("{msg}");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Command-line front end: dataset synthesis, anchor estimation, training,
//! inference, evaluation, cross-validation, overlay rendering and dataset
//! validation, each leaving a manifest that makes the run reproducible.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use ribcascade::anchors::{estimate_anchors, load_anchors, save_anchors};
use ribcascade::dataio::{
    dataset_hash, load_dataset, load_image, save_dataset, AnnotatedImage, RibLabel,
};
use ribcascade::dataio::phantom::{generate_phantom, PhantomConfig};
use ribcascade::evaluation::{
    aggregate, evaluate_image, render_overlay, render_report, save_overlay_png, ImageEvaluation,
};
use ribcascade::geometry::{box_from_mask, PixelBox};
use ribcascade::model::{BackboneKind, Detection, ModelConfig};
use ribcascade::pipeline::{
    run_cross_validation, train_all, AnchorSource, CascadeModel, CascadeResult, TeacherForcing,
    TrainConfig,
};

#[derive(Parser)]
#[command(name = "ribcascade", version, about = "Sequential rib segmentation and labeling")]
struct Cli {
    /// Cap worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with ground-truth masks.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overwrite an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Estimate dedicated anchor boxes from a dataset's ground truth.
    Anchors {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        count: usize,
    },
    /// Train the nine rib networks on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reuse a previously estimated anchor file instead of estimating
        /// from the training data.
        #[arg(long)]
        anchors: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Run the cascade over a dataset and write detections plus masks.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        score_floor: f64,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Model directory; the cascade runs on each image before scoring.
        #[arg(long, conflicts_with = "pred")]
        model: Option<PathBuf>,
        /// Alternatively, a dataset-format directory of predicted masks.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        score_floor: f64,
        /// Report sample instead of population standard deviation.
        #[arg(long)]
        sample_std: bool,
    },
    /// K-fold cross-validation: train, infer and score per fold.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(short, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 30)]
        anchor_count: usize,
        /// Estimate anchors from all images instead of per training fold.
        /// The held-out boxes then inform the anchors; comparison runs only.
        #[arg(long)]
        anchors_from_all: bool,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Render a mask + box + label overlay for one image.
    Render {
        #[arg(long)]
        data: PathBuf,
        /// Image id (directory name) inside the dataset.
        #[arg(long)]
        id: String,
        #[arg(long)]
        out: PathBuf,
        /// Render this model's predictions instead of ground truth.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        score_floor: f64,
    },
    /// Check a dataset directory against the format's invariants.
    Validate {
        #[arg(long)]
        data: PathBuf,
    },
}

/// Training options; unset flags fall back to `--config`, then to defaults.
#[derive(Args)]
struct TrainArgs {
    /// JSON file with a full training config (same schema as the
    /// `config.json` written to every run directory).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    augment_copies: Option<usize>,
    #[arg(long, value_parser = ["tiny", "resnet50-fpn"])]
    backbone: Option<String>,
    #[arg(long, value_parser = ["gt", "predicted", "scheduled"])]
    teacher_forcing: Option<String>,
    #[arg(long)]
    score_floor: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    input_size: Option<usize>,
}

impl TrainArgs {
    /// Precedence: built-in defaults < `--config` file < explicit flags.
    fn resolve(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?
            }
            None => TrainConfig {
                model: ModelConfig {
                    backbone: BackboneKind::Tiny,
                    ..ModelConfig::default()
                },
                ..TrainConfig::default()
            },
        };
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.lr_decay {
            cfg.lr_decay = v;
        }
        if let Some(v) = self.augment_copies {
            cfg.augment_copies = v;
        }
        if let Some(v) = &self.backbone {
            cfg.model.backbone = match v.as_str() {
                "tiny" => BackboneKind::Tiny,
                _ => BackboneKind::Resnet50Fpn,
            };
        }
        if let Some(v) = &self.teacher_forcing {
            cfg.teacher_forcing = match v.as_str() {
                "gt" => TeacherForcing::GroundTruth,
                "predicted" => TeacherForcing::Predicted,
                _ => TeacherForcing::Scheduled,
            };
        }
        if let Some(v) = self.score_floor {
            cfg.score_floor = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.input_size {
            cfg.model.input_size = v;
        }
        if cfg.epochs == 0 {
            return Err(CliError::validation("epochs must be at least 1".into()));
        }
        Ok(cfg)
    }
}

/// Exit 1: the request itself is unusable. Exit 2: the run failed.
enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn validation(msg: String) -> Self {
        Self::Validation(msg)
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        Self::Runtime(e.to_string())
    }
}

/// Written to every output directory before any other file, so a run can be
/// reproduced from its outputs alone.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    input_hashes: BTreeMap<String, String>,
    tool_version: String,
    timestamp_unix: u64,
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    input_hashes: BTreeMap<String, String>,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    let manifest = RunManifest {
        command: command.to_string(),
        config,
        input_hashes,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out.join("manifest.json"), text)?;
    Ok(())
}

fn hash_of(dataset: &[AnnotatedImage]) -> BTreeMap<String, String> {
    BTreeMap::from([("dataset".to_string(), dataset_hash(dataset))])
}

/// Directory reserved for cached backbone weights; only created on demand.
fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("RIBCASCADE_CACHE").map(PathBuf::from)
}

fn load_model(dir: &Path, score_floor: f64) -> Result<CascadeModel, CliError> {
    let missing: Vec<u8> = (1..=RibLabel::MAX_INDEX)
        .filter(|rib| !dir.join(format!("rib_{rib}.ckpt")).exists())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::validation(format!(
            "{}: missing checkpoints for rib indices {missing:?}",
            dir.display()
        )));
    }
    Ok(CascadeModel::load(dir, score_floor)?)
}

/// Treat a directory of masks as if the cascade had produced them: boxes from
/// the masks, full confidence. Lets `eval --pred` score external predictions,
/// including the ground truth itself.
fn result_from_annotations(img: &AnnotatedImage) -> Result<CascadeResult, CliError> {
    let mut detections = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for (label, mask) in &img.annotations {
        detections.insert(
            *label,
            Detection {
                label: *label,
                box_px: box_from_mask(mask)?,
                score: 1.0,
                soft_mask: Array2::ones((1, 1)),
            },
        );
        masks.insert(*label, mask.clone());
    }
    Ok(CascadeResult {
        id: img.id.clone(),
        detections,
        masks,
        trace: Vec::new(),
        warnings: Vec::new(),
        elapsed: std::time::Duration::ZERO,
    })
}

fn write_metrics(
    out: &Path,
    evaluations: &[ImageEvaluation],
    sample_std: bool,
) -> Result<(), CliError> {
    let summary = if sample_std {
        ribcascade::evaluation::aggregate_with(evaluations, true)
    } else {
        aggregate(evaluations)
    };
    #[derive(Serialize)]
    struct Metrics<'a> {
        summary: &'a ribcascade::evaluation::SummaryTable,
        images: &'a [ImageEvaluation],
    }
    let text = serde_json::to_string_pretty(&Metrics {
        summary: &summary,
        images: evaluations,
    })
    .expect("metrics serialize");
    std::fs::write(out.join("metrics.json"), text)?;
    std::fs::write(out.join("report.md"), render_report(&summary))?;
    println!("{}", render_report(&summary));
    Ok(())
}

fn non_empty_dir(p: &Path) -> bool {
    std::fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::validation(e.to_string()))?;
    }
    if let Some(cache) = cache_dir() {
        std::fs::create_dir_all(&cache)?;
    }

    match cli.command {
        Command::Synth {
            out,
            count,
            size,
            seed,
            force,
        } => {
            if count == 0 {
                return Err(CliError::validation("--count must be at least 1".into()));
            }
            if non_empty_dir(&out) && !force {
                return Err(CliError::validation(format!(
                    "{} is not empty; pass --force to overwrite",
                    out.display()
                )));
            }
            let cfg = PhantomConfig {
                size,
                ..PhantomConfig::default()
            };
            write_manifest(
                &out,
                "synth",
                serde_json::json!({"count": count, "size": size, "seed": seed}),
                BTreeMap::new(),
            )?;
            let images: Result<Vec<_>, _> = (0..count)
                .map(|i| generate_phantom(seed + i as u64, &cfg))
                .collect();
            let images = images.map_err(|e| CliError::validation(e.to_string()))?;
            save_dataset(&images, &out)?;
            println!("wrote {count} phantoms to {}", out.display());
        }
        Command::Anchors { data, out, count } => {
            if count == 0 {
                return Err(CliError::validation("--count must be at least 1".into()));
            }
            let dataset = load_dataset(&data)?;
            let anchors = estimate_anchors(&dataset, count)?;
            let dir = out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            write_manifest(
                dir,
                "anchors",
                serde_json::json!({ "count": count }),
                hash_of(&dataset),
            )?;
            save_anchors(&anchors, &out)?;
            println!(
                "estimated {} anchors at bandwidth {:.6} -> {}",
                anchors.boxes.len(),
                anchors.bandwidth,
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            anchors,
            train,
        } => {
            let cfg = train.resolve()?;
            let dataset = load_dataset(&data)?;
            let anchor_set = match &anchors {
                Some(path) => load_anchors(path, cfg.model.anchor_count)?,
                None => estimate_anchors(&dataset, cfg.model.anchor_count)?,
            };
            write_manifest(
                &out,
                "train",
                serde_json::to_value(&cfg).expect("config serializes"),
                hash_of(&dataset),
            )?;
            std::fs::write(
                out.join("config.json"),
                serde_json::to_string_pretty(&cfg).expect("config serializes"),
            )?;
            let (model, report) = train_all(&dataset, &anchor_set, &cfg)?;
            let ids: Vec<String> = dataset.iter().map(|d| d.id.clone()).collect();
            model.save_run(&out, &cfg, &ids)?;
            for (i, curve) in report.loss_curves.iter().enumerate() {
                println!(
                    "rib {}: loss {:.4} -> {:.4} over {} epochs",
                    i + 1,
                    curve.first().copied().unwrap_or(f64::NAN),
                    curve.last().copied().unwrap_or(f64::NAN),
                    curve.len()
                );
            }
            println!("checkpoints in {}", out.display());
        }
        Command::Infer {
            model,
            data,
            out,
            score_floor,
        } => {
            let cascade = load_model(&model, score_floor)?;
            let dataset = load_dataset(&data)?;
            write_manifest(
                &out,
                "infer",
                serde_json::json!({"model": model.display().to_string(), "score_floor": score_floor}),
                hash_of(&dataset),
            )?;
            for img in &dataset {
                let result = cascade.infer(&img.id, &img.image)?;
                let dir = out.join(&img.id);
                std::fs::create_dir_all(&dir)?;
                #[derive(Serialize)]
                struct Record {
                    label: String,
                    box_px: [f64; 4],
                    score: f64,
                }
                let records: Vec<Record> = result
                    .detections
                    .values()
                    .map(|d| Record {
                        label: d.label.to_string(),
                        box_px: [d.box_px.x_min, d.box_px.y_min, d.box_px.x_max, d.box_px.y_max],
                        score: d.score,
                    })
                    .collect();
                std::fs::write(
                    dir.join("detections.json"),
                    serde_json::to_string_pretty(&records).expect("detections serialize"),
                )?;
                let masked = AnnotatedImage {
                    id: img.id.clone(),
                    image: img.image.clone(),
                    annotations: result.masks.clone(),
                };
                ribcascade::dataio::save_image(&masked, &out)?;
                for w in &result.warnings {
                    eprintln!("{}: {w}", img.id);
                }
            }
            println!("predictions for {} images in {}", dataset.len(), out.display());
        }
        Command::Eval {
            data,
            model,
            pred,
            out,
            score_floor,
            sample_std,
        } => {
            let dataset = load_dataset(&data)?;
            write_manifest(
                &out,
                "eval",
                serde_json::json!({"score_floor": score_floor, "sample_std": sample_std}),
                hash_of(&dataset),
            )?;
            let mut evaluations = Vec::new();
            match (model, pred) {
                (Some(model_dir), None) => {
                    let cascade = load_model(&model_dir, score_floor)?;
                    for img in &dataset {
                        let result = cascade.infer(&img.id, &img.image)?;
                        evaluations.push(evaluate_image(img, &result, score_floor)?);
                    }
                }
                (None, Some(pred_dir)) => {
                    for img in &dataset {
                        let pred_img = load_image(&pred_dir.join(&img.id))?;
                        let result = result_from_annotations(&pred_img)?;
                        evaluations.push(evaluate_image(img, &result, score_floor)?);
                    }
                }
                _ => {
                    return Err(CliError::validation(
                        "pass exactly one of --model or --pred".into(),
                    ))
                }
            }
            write_metrics(&out, &evaluations, sample_std)?;
        }
        Command::Cv {
            data,
            out,
            k,
            anchor_count,
            anchors_from_all,
            train,
        } => {
            if k < 2 {
                return Err(CliError::validation("-k must be at least 2".into()));
            }
            let cfg = train.resolve()?;
            let dataset = load_dataset(&data)?;
            if dataset.len() < k {
                return Err(CliError::validation(format!(
                    "need at least {k} images for {k} folds, found {}",
                    dataset.len()
                )));
            }
            write_manifest(
                &out,
                "cv",
                serde_json::to_value(&cfg).expect("config serializes"),
                hash_of(&dataset),
            )?;
            std::fs::write(
                out.join("config.json"),
                serde_json::to_string_pretty(&cfg).expect("config serializes"),
            )?;
            let source = if anchors_from_all {
                AnchorSource::AllImages
            } else {
                AnchorSource::PerFold
            };
            let cv = run_cross_validation(&dataset, k, source, anchor_count, &cfg, Some(&out))?;
            let evaluations: Vec<ImageEvaluation> = cv
                .folds
                .iter()
                .flat_map(|f| f.evaluations.iter().cloned())
                .collect();
            write_metrics(&out, &evaluations, false)?;
        }
        Command::Render {
            data,
            id,
            out,
            model,
            score_floor,
        } => {
            let img = load_image(&data.join(&id))?;
            let (masks, boxes): (BTreeMap<RibLabel, _>, BTreeMap<RibLabel, PixelBox>) =
                match model {
                    Some(model_dir) => {
                        let cascade = load_model(&model_dir, score_floor)?;
                        let result = cascade.infer(&img.id, &img.image)?;
                        let boxes = result
                            .detections
                            .iter()
                            .map(|(l, d)| (*l, d.box_px))
                            .collect();
                        (result.masks, boxes)
                    }
                    None => {
                        let boxes: Result<BTreeMap<_, _>, _> = img
                            .annotations
                            .iter()
                            .map(|(l, m)| box_from_mask(m).map(|b| (*l, b)))
                            .collect();
                        (img.annotations.clone(), boxes?)
                    }
                };
            let overlay = render_overlay(&img.image, &masks, &boxes);
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            save_overlay_png(&overlay, &out)?;
            println!("{} draw operations -> {}", overlay.draw_log.len(), out.display());
        }
        Command::Validate { data } => {
            let dataset =
                load_dataset(&data).map_err(|e| CliError::validation(e.to_string()))?;
            let mut failures = Vec::new();
            for img in &dataset {
                if let Err(e) = img.validate() {
                    failures.push(format!("{}: {e}", img.id));
                }
            }
            if !failures.is_empty() {
                return Err(CliError::validation(failures.join("\n")));
            }
            println!(
                "{} images ok; dataset hash {}",
                dataset.len(),
                dataset_hash(&dataset)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

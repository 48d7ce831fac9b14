//! Training and inference orchestration: per-rib training with teacher
//! forcing, the strict top-to-bottom inference cascade, and cross-validation.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::{load_anchors, save_anchors, AnchorError, AnchorSet};
use crate::dataio::{
    augment_affine, AnnotatedImage, AugmentRanges, DataError, GrayImage, RibLabel, Side,
};
use crate::evaluation::{self, EvaluationError, ImageEvaluation, SummaryTable};
use crate::geometry::{dice_box, paste_mask, GeometryError, InstanceMask, PixelBox};
use crate::model::{
    build_input, nn::Adam, BackboneKind, Detection, ModelConfig, ModelError, RibNetwork,
    RibTargets,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error("image {0} is {1}x{2}, expected {3}x{3}")]
    ImageSizeMismatch(String, usize, usize, usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("checkpoint set in {0} is inconsistent: {1}")]
    InconsistentCheckpoints(String, String),
    #[error("rib {0} is annotated in no training image")]
    RibUnrepresented(u8),
    #[error("io error at {0}: {1}")]
    Io(String, std::io::Error),
}

/// How the third input channel is filled while training rib `i > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherForcing {
    /// Ground-truth segmentation of the upper rib (default).
    GroundTruth,
    /// Prediction of the already-trained upper network.
    Predicted,
    /// Per image, ground truth early in training, predictions late; the
    /// probability of using predictions ramps linearly over the epochs.
    Scheduled,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    /// Number of random affine copies added per training image.
    pub augment_copies: usize,
    pub teacher_forcing: TeacherForcing,
    /// Detections with a best score below this floor do not condition the
    /// next rib at inference time.
    pub score_floor: f64,
    /// Relative jitter applied to the mask head's training crop box, so the
    /// predicted mask stays aligned under imperfect boxes at inference.
    #[serde(default = "default_mask_jitter")]
    pub mask_jitter: f64,
    pub seed: u64,
}

fn default_mask_jitter() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 30,
            learning_rate: 1e-3,
            lr_decay: 0.97,
            augment_copies: 0,
            teacher_forcing: TeacherForcing::GroundTruth,
            score_floor: 0.05,
            mask_jitter: default_mask_jitter(),
            seed: 0,
        }
    }
}

/// One entry of the per-rib inference trace: what conditioned this network
/// and what it produced. Lets tests assert causality (rib `i` saw only rib
/// `i - 1`'s output) without reaching into the cascade internals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeStep {
    pub rib_index: u8,
    /// Whether the third channel carried the upper rib's predicted mask
    /// (false for rib 1 and after a below-floor fallback).
    pub conditioned: bool,
    pub left_score: f64,
    pub right_score: f64,
}

/// Output of a full cascade pass over one image.
pub struct CascadeResult {
    /// Id of the image this run belongs to.
    pub id: String,
    /// Exactly one detection per (side, rib index).
    pub detections: BTreeMap<RibLabel, Detection>,
    /// Detection masks pasted back to full image resolution.
    pub masks: BTreeMap<RibLabel, InstanceMask>,
    pub trace: Vec<CascadeStep>,
    pub warnings: Vec<String>,
    pub elapsed: Duration,
}

/// The nine trained networks plus the anchor set they were trained against.
pub struct CascadeModel {
    /// `nets[i]` handles rib index `i + 1`.
    pub nets: Vec<RibNetwork>,
    pub anchors: AnchorSet,
    pub score_floor: f64,
}

/// Mean training loss per epoch for each rib network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// `loss_curves[i][e]` is rib `i + 1`'s mean total loss in epoch `e`.
    pub loss_curves: Vec<Vec<f64>>,
}

fn check_sizes(dataset: &[AnnotatedImage], input_size: usize) -> Result<(), PipelineError> {
    if dataset.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    for img in dataset {
        let (rows, cols) = img.image.data.dim();
        if (rows, cols) != (input_size, input_size) {
            return Err(PipelineError::ImageSizeMismatch(
                img.id.clone(),
                rows,
                cols,
                input_size,
            ));
        }
    }
    Ok(())
}

/// Union of the ground-truth masks of rib `index` on both sides, or `None`
/// when the rib is annotated on neither side.
fn gt_upper_mask(img: &AnnotatedImage, index: u8) -> Option<InstanceMask> {
    let mut out: Option<InstanceMask> = None;
    for side in Side::BOTH {
        let label = RibLabel { side, index };
        if let Some(m) = img.annotations.get(&label) {
            match &mut out {
                None => out = Some(m.clone()),
                Some(acc) => {
                    for (a, &b) in acc.iter_mut().zip(m.iter()) {
                        *a |= b;
                    }
                }
            }
        }
    }
    out
}

fn union_into(acc: &mut Option<InstanceMask>, m: &InstanceMask) {
    match acc {
        None => *acc = Some(m.clone()),
        Some(acc) => {
            for (a, &b) in acc.iter_mut().zip(m.iter()) {
                *a |= b;
            }
        }
    }
}

/// Expand a training set with `copies` random affine variants per image.
/// Copy seeds derive from `seed` and the image's position, so the expansion
/// is deterministic and independent of thread scheduling.
pub fn expand_with_augmentations(
    dataset: &[AnnotatedImage],
    copies: usize,
    seed: u64,
) -> Vec<AnnotatedImage> {
    let ranges = AugmentRanges::default();
    let mut out = Vec::with_capacity(dataset.len() * (copies + 1));
    for (i, img) in dataset.iter().enumerate() {
        out.push(img.clone());
        for c in 0..copies {
            let s = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((i * 131 + c + 1) as u64);
            let (aug, _warnings) = augment_affine(img, s, &ranges);
            out.push(AnnotatedImage {
                id: format!("{}#aug{}", img.id, c),
                ..aug
            });
        }
    }
    out
}

/// Shift a mask by whole pixels with zero fill. Used to roughen the upper
/// channel during teacher-forced training.
fn shift_mask(m: &InstanceMask, dy: isize, dx: isize) -> InstanceMask {
    let (rows, cols) = m.dim();
    let mut out = InstanceMask::zeros((rows, cols));
    for ((r, c), &v) in m.indexed_iter() {
        if v != 0 {
            let (nr, nc) = (r as isize + dy, c as isize + dx);
            if (0..rows as isize).contains(&nr) && (0..cols as isize).contains(&nc) {
                out[(nr as usize, nc as usize)] = 1;
            }
        }
    }
    out
}

/// Train the network for one rib index over `epochs` passes. `upper` yields
/// the third-channel mask for each image; `None` entries mean an all-zero
/// channel.
fn train_one_rib(
    rib: u8,
    data: &[AnnotatedImage],
    upper: &[Option<InstanceMask>],
    anchors: &AnchorSet,
    cfg: &TrainConfig,
) -> Result<(RibNetwork, Vec<f64>), PipelineError> {
    let mut net = RibNetwork::new(rib, cfg.model.clone(), cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate, &net.param_shapes());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x0b5e * rib as u64));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        opt.lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32);
        // Fisher-Yates on the visit order.
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut total = 0.0;
        let mut seen = 0usize;
        for &idx in &order {
            let img = &data[idx];
            let mut targets = match RibTargets::from_annotations(img, rib, anchors, &cfg.model) {
                Ok(t) => t,
                Err(ModelError::RibAbsent(_)) => continue,
                Err(e) => return Err(e.into()),
            };
            let gt_boxes: Vec<(Side, PixelBox)> = targets
                .per_side
                .iter()
                .map(|(s, t)| (*s, t.gt_box_px.clone()))
                .collect();
            if cfg.mask_jitter > 0.0 {
                targets.jitter_mask_crops(img, cfg.mask_jitter, &mut rng);
            }
            // Roughen the upper channel a little: at inference it carries a
            // pasted prediction, not a pixel-perfect annotation.
            let chan = upper[idx].as_ref().map(|m| {
                if rng.gen_bool(0.5) {
                    shift_mask(m, rng.gen_range(-3..=3), rng.gen_range(-3..=3))
                } else {
                    m.clone()
                }
            });
            let x = build_input(&img.image, chan.as_ref())?;
            // After a warmup quarter, train the mask head at the box head's
            // own decent outputs — the crop distribution it sees at
            // inference.
            if cfg.mask_jitter > 0.0 && epoch * 4 >= cfg.epochs {
                if let Ok(pair) = net.forward(&x, anchors) {
                    for (side, gt_box) in &gt_boxes {
                        let det = pair.get(*side);
                        if dice_box(&det.box_px, gt_box).unwrap_or(0.0) >= 0.5
                            && rng.gen_bool(0.5)
                        {
                            targets.set_mask_crop(img, *side, &det.box_px);
                        }
                    }
                }
            }
            let (loss, grads) = net.loss_and_grads(&x, &targets)?;
            opt.step(
                net.params_mut().into_iter().map(|p| p.view_mut()).collect(),
                &grads,
            );
            total += loss.total;
            seen += 1;
        }
        curve.push(if seen > 0 { total / seen as f64 } else { f64::NAN });
    }
    Ok((net, curve))
}

/// Predict rib `rib`'s full-image mask union for every training image, given
/// the third-channel masks those predictions should be conditioned on.
fn predict_upper_masks(
    net: &RibNetwork,
    data: &[AnnotatedImage],
    upper: &[Option<InstanceMask>],
    anchors: &AnchorSet,
    score_floor: f64,
) -> Result<Vec<Option<InstanceMask>>, PipelineError> {
    data.par_iter()
        .zip(upper.par_iter())
        .map(|(img, up)| {
            let x = build_input(&img.image, up.as_ref())?;
            let pair = net.forward(&x, anchors)?;
            let shape = img.image.data.dim();
            let mut acc: Option<InstanceMask> = None;
            for side in Side::BOTH {
                let det = pair.get(side);
                if det.score < score_floor {
                    continue;
                }
                let pasted = paste_mask(&det.soft_mask, &det.box_px, shape)?;
                union_into(&mut acc, &pasted.mask);
            }
            Ok(acc)
        })
        .collect()
}

/// Train all nine networks. With ground-truth teacher forcing the networks
/// are independent and train in parallel; the predicted and scheduled modes
/// train top to bottom so each network can condition on its trained upper
/// neighbor.
pub fn train_all(
    dataset: &[AnnotatedImage],
    anchors: &AnchorSet,
    cfg: &TrainConfig,
) -> Result<(CascadeModel, TrainReport), PipelineError> {
    check_sizes(dataset, cfg.model.input_size)?;
    for rib in 1..=RibLabel::MAX_INDEX {
        let present = dataset.iter().any(|img| {
            Side::BOTH
                .iter()
                .any(|&side| img.annotations.contains_key(&RibLabel { side, index: rib }))
        });
        if !present {
            return Err(PipelineError::RibUnrepresented(rib));
        }
    }
    let data = expand_with_augmentations(dataset, cfg.augment_copies, cfg.seed);

    let gt_upper = |rib: u8| -> Vec<Option<InstanceMask>> {
        data.iter()
            .map(|img| {
                if rib == 1 {
                    None
                } else {
                    gt_upper_mask(img, rib - 1)
                }
            })
            .collect()
    };

    let (nets, curves): (Vec<RibNetwork>, Vec<Vec<f64>>) = match cfg.teacher_forcing {
        TeacherForcing::GroundTruth => {
            let results: Result<Vec<_>, PipelineError> = (1..=RibLabel::MAX_INDEX)
                .into_par_iter()
                .map(|rib| train_one_rib(rib, &data, &gt_upper(rib), anchors, cfg))
                .collect();
            results?.into_iter().unzip()
        }
        TeacherForcing::Predicted | TeacherForcing::Scheduled => {
            let scheduled = cfg.teacher_forcing == TeacherForcing::Scheduled;
            let mut nets = Vec::new();
            let mut curves = Vec::new();
            // Predicted third channel for the rib currently being trained,
            // refreshed after each upper network finishes.
            let mut pred_upper: Vec<Option<InstanceMask>> = vec![None; data.len()];
            for rib in 1..=RibLabel::MAX_INDEX {
                let upper: Vec<Option<InstanceMask>> = if rib == 1 {
                    vec![None; data.len()]
                } else if scheduled {
                    // Mix ground truth and predictions deterministically per
                    // image; later ribs see more predictions.
                    let gt = gt_upper(rib);
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5c4ed * rib as u64));
                    let p = (rib - 1) as f64 / (RibLabel::MAX_INDEX - 1) as f64;
                    gt.into_iter()
                        .zip(pred_upper.iter())
                        .map(|(g, pr)| {
                            if rng.gen::<f64>() < p {
                                pr.clone()
                            } else {
                                g
                            }
                        })
                        .collect()
                } else {
                    pred_upper.clone()
                };
                let (net, curve) = train_one_rib(rib, &data, &upper, anchors, cfg)?;
                if rib < RibLabel::MAX_INDEX {
                    pred_upper =
                        predict_upper_masks(&net, &data, &upper, anchors, cfg.score_floor)?;
                }
                nets.push(net);
                curves.push(curve);
            }
            (nets, curves)
        }
    };

    Ok((
        CascadeModel {
            nets,
            anchors: anchors.clone(),
            score_floor: cfg.score_floor,
        },
        TrainReport {
            loss_curves: curves,
        },
    ))
}

impl CascadeModel {
    /// Run the strict top-to-bottom cascade on one image. Rib 1 sees an
    /// all-zero third channel; rib `i > 1` sees the union of rib `i - 1`'s
    /// pasted predictions, or zeros again when both its scores fall below
    /// the floor.
    pub fn infer(&self, id: &str, image: &GrayImage) -> Result<CascadeResult, PipelineError> {
        let started = Instant::now();
        let shape = image.data.dim();
        let mut detections = BTreeMap::new();
        let mut masks = BTreeMap::new();
        let mut trace = Vec::with_capacity(self.nets.len());
        let mut warnings = Vec::new();
        let mut upper: Option<InstanceMask> = None;

        for net in &self.nets {
            let rib = net.rib_index;
            let conditioned = upper.is_some();
            let x = build_input(image, upper.as_ref())?;
            let pair = net.forward(&x, &self.anchors)?;
            trace.push(CascadeStep {
                rib_index: rib,
                conditioned,
                left_score: pair.left.score,
                right_score: pair.right.score,
            });

            let mut next: Option<InstanceMask> = None;
            for side in Side::BOTH {
                let det = pair.get(side).clone();
                let label = det.label;
                let pasted = paste_mask(&det.soft_mask, &det.box_px, shape)?;
                for w in pasted.warnings {
                    warnings.push(format!("{label}: {w}"));
                }
                if det.score >= self.score_floor {
                    union_into(&mut next, &pasted.mask);
                }
                masks.insert(label, pasted.mask);
                detections.insert(label, det);
            }
            if next.is_none() && rib < RibLabel::MAX_INDEX {
                warnings.push(format!(
                    "rib {} scored below {} on both sides; rib {} runs unconditioned",
                    rib,
                    self.score_floor,
                    rib + 1
                ));
            }
            upper = next;
        }

        Ok(CascadeResult {
            id: id.to_string(),
            detections,
            masks,
            trace,
            warnings,
            elapsed: started.elapsed(),
        })
    }

    /// Write `rib_{i}.ckpt` for every network plus `anchors.json`.
    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::Io(dir.display().to_string(), e))?;
        for net in &self.nets {
            net.save_checkpoint(&dir.join(format!("rib_{}.ckpt", net.rib_index)))?;
        }
        save_anchors(&self.anchors, &dir.join("anchors.json"))?;
        Ok(())
    }

    /// [`CascadeModel::save`] plus one lineage sidecar per checkpoint, so a
    /// run directory records exactly what each network was trained on.
    pub fn save_run(
        &self,
        dir: &Path,
        cfg: &TrainConfig,
        training_ids: &[String],
    ) -> Result<(), PipelineError> {
        self.save(dir)?;
        let anchor_bytes = std::fs::read(dir.join("anchors.json"))
            .map_err(|e| PipelineError::Io(dir.display().to_string(), e))?;
        let anchor_file_hash = {
            use sha2::{Digest, Sha256};
            let mut h = Sha256::new();
            h.update(&anchor_bytes);
            format!("{:x}", h.finalize())
        };
        let mut sorted = training_ids.to_vec();
        sorted.sort();
        let training_ids_hash = crate::dataio::hash_ids(&sorted);
        for net in &self.nets {
            let sidecar = CheckpointSidecar {
                rib_index: net.rib_index,
                backbone: net.config.backbone,
                anchor_file_hash: anchor_file_hash.clone(),
                training_ids: sorted.clone(),
                training_ids_hash: training_ids_hash.clone(),
                training_config: cfg.clone(),
            };
            let path = dir.join(format!("rib_{}.json", net.rib_index));
            let text = serde_json::to_string_pretty(&sidecar)
                .expect("sidecar serializes");
            std::fs::write(&path, text)
                .map_err(|e| PipelineError::Io(path.display().to_string(), e))?;
        }
        Ok(())
    }

    /// Load a model saved by [`CascadeModel::save`].
    pub fn load(dir: &Path, score_floor: f64) -> Result<Self, PipelineError> {
        let mut nets = Vec::new();
        for rib in 1..=RibLabel::MAX_INDEX {
            nets.push(RibNetwork::load_checkpoint(
                &dir.join(format!("rib_{rib}.ckpt")),
            )?);
        }
        let inconsistent = |what: String| {
            PipelineError::InconsistentCheckpoints(dir.display().to_string(), what)
        };
        let anchor_count = nets[0].config.anchor_count;
        for net in &nets {
            if net.config.anchor_count != anchor_count {
                return Err(inconsistent(format!(
                    "rib {} expects {} anchors, rib 1 expects {}",
                    net.rib_index, net.config.anchor_count, anchor_count
                )));
            }
            if net.config.input_size != nets[0].config.input_size {
                return Err(inconsistent(format!(
                    "rib {} expects input size {}, rib 1 expects {}",
                    net.rib_index,
                    net.config.input_size,
                    nets[0].config.input_size
                )));
            }
        }
        let anchors = load_anchors(&dir.join("anchors.json"), anchor_count)?;
        Ok(Self {
            nets,
            anchors,
            score_floor,
        })
    }
}

/// Lineage record written next to each checkpoint: what the network is and
/// what data produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub rib_index: u8,
    pub backbone: BackboneKind,
    /// SHA-256 of the `anchors.json` the network was trained against.
    pub anchor_file_hash: String,
    /// Sorted ids of every training image.
    pub training_ids: Vec<String>,
    pub training_ids_hash: String,
    pub training_config: TrainConfig,
}

/// Where cross-validation gets its anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSource {
    /// Re-estimate from each fold's training split (no held-out leakage).
    PerFold,
    /// Estimate once from the full dataset before splitting. Simpler, but
    /// the held-out boxes inform the anchors; keep for comparison runs only.
    AllImages,
}

/// One fold's outcome: which ids were held out and how they scored.
pub struct FoldResult {
    pub fold: usize,
    pub held_out_ids: Vec<String>,
    pub training_ids: Vec<String>,
    pub anchors: AnchorSet,
    pub evaluations: Vec<ImageEvaluation>,
    pub report: TrainReport,
}

pub struct CrossValidationResult {
    pub folds: Vec<FoldResult>,
    /// Aggregate over every held-out image of every fold.
    pub summary: SummaryTable,
}

/// K-fold cross-validation: split, train on `k - 1` folds, run the cascade
/// on the held-out fold, score against ground truth. When `out_dir` is set,
/// each fold's checkpoints, sidecars and anchors land in
/// `<out_dir>/fold_{f}/`.
pub fn run_cross_validation(
    dataset: &[AnnotatedImage],
    k: usize,
    anchor_source: AnchorSource,
    anchor_count: usize,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<CrossValidationResult, PipelineError> {
    check_sizes(dataset, cfg.model.input_size)?;
    let ids: Vec<String> = dataset.iter().map(|d| d.id.clone()).collect();
    let split = crate::dataio::split_folds(&ids, k, cfg.seed)?;
    let by_id: BTreeMap<&str, &AnnotatedImage> =
        dataset.iter().map(|d| (d.id.as_str(), d)).collect();
    let select = |ids: &[String]| -> Vec<AnnotatedImage> {
        ids.iter().map(|id| (*by_id[id.as_str()]).clone()).collect()
    };

    let global_anchors = match anchor_source {
        AnchorSource::AllImages => Some(crate::anchors::estimate_anchors(dataset, anchor_count)?),
        AnchorSource::PerFold => None,
    };

    let mut folds = Vec::with_capacity(k);
    let mut all_evals = Vec::new();
    for fold in 0..k {
        let held_out_ids = split.fold_ids(fold);
        let training_ids = split.training_ids(fold);
        let train_set = select(&training_ids);
        let anchors = match &global_anchors {
            Some(a) => a.clone(),
            None => crate::anchors::estimate_anchors(&train_set, anchor_count)?,
        };
        let (model, report) = train_all(&train_set, &anchors, cfg)?;
        if let Some(out) = out_dir {
            model.save_run(&out.join(format!("fold_{fold}")), cfg, &training_ids)?;
        }

        let mut evaluations = Vec::new();
        for id in &held_out_ids {
            let img = by_id[id.as_str()];
            let result = model.infer(id, &img.image)?;
            evaluations.push(evaluation::evaluate_image(img, &result, model.score_floor)?);
        }
        all_evals.extend(evaluations.iter().cloned());
        folds.push(FoldResult {
            fold,
            held_out_ids,
            training_ids,
            anchors,
            evaluations,
            report,
        });
    }

    Ok(CrossValidationResult {
        summary: evaluation::aggregate(&all_evals),
        folds,
    })
}

/// Convenience: a small, fast configuration for synthetic data.
pub fn phantom_train_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            backbone: BackboneKind::Tiny,
            ..ModelConfig::default()
        },
        epochs: 40,
        ..TrainConfig::default()
    }
}

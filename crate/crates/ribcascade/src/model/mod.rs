//! The per-rib detection and segmentation network.
//!
//! One `RibNetwork` handles a single rib index on both sides. Its input is a
//! 3-channel stack (gray image twice, upper-rib mask third), its detection
//! head regresses shifts for all 30 dedicated anchors plus a left and a right
//! score per anchor, and the best-scoring shifted anchor per side (argmax, no
//! NMS) feeds a mask head that predicts a fixed-resolution soft mask.

pub mod backbone;
pub mod nn;

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array3};
use thiserror::Error;

use crate::anchors::AnchorSet;
use crate::dataio::{AnnotatedImage, GrayImage, RibLabel, Side};
use crate::geometry::{
    box_from_mask, denormalize_box, dice_box, normalize_box, InstanceMask, NormalizedBox, PixelBox,
};
use backbone::{Backbone, FEATURE_CHANNELS, FEATURE_STRIDE};
pub use backbone::BackboneKind;
use nn::{Dense, RoiAlignCache};

/// Spatial resolution of the pooled region fed to the mask head.
const ROI_SIZE: usize = 7;
/// Head hidden width.
const HIDDEN: usize = 128;
/// Clamp for the log-size shift components before exponentiation.
const SHIFT_CLAMP: f64 = 4.0;
/// Probability clamp used by the cross-entropy terms.
const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input shape {0:?} does not match expected {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("mask shape {0:?} does not match image shape {1:?}")]
    MaskShapeMismatch((usize, usize), (usize, usize)),
    #[error("network produced a non-finite output")]
    NonFiniteOutput,
    #[error("anchor set has {0} boxes, network expects {1}")]
    AnchorCountMismatch(usize, usize),
    #[error("ground truth contains rib {0} on neither side")]
    RibAbsent(u8),
    #[error("degenerate shift target")]
    DegenerateTarget,
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("geometry error: {0}")]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// Network construction parameters. Heads are sized from `input_size`, so
/// both backbones share the same head interface.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub anchor_count: usize,
    /// Square input side length in pixels; must be a multiple of 16.
    pub input_size: usize,
    pub mask_resolution: usize,
    /// Weights for the score, shift and mask loss components.
    pub loss_weights: [f64; 3],
    /// `Some(side)` restricts the network to one side (the per-(rib, side)
    /// variant); `None` is the default both-sides scheme.
    pub side_filter: Option<Side>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Resnet50Fpn,
            anchor_count: 30,
            input_size: 256,
            mask_resolution: 28,
            loss_weights: [1.0, 1.0, 1.0],
            side_filter: None,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneKind::Tiny,
            ..Self::default()
        }
    }
}

/// One predicted rib instance.
#[derive(Debug, Clone)]
pub struct Detection {
    pub label: RibLabel,
    pub box_px: PixelBox,
    pub score: f64,
    /// Soft mask in `[0,1]` at the configured mask resolution.
    pub soft_mask: Array2<f64>,
}

/// The forward pass always yields exactly one detection per side.
#[derive(Debug, Clone)]
pub struct DetectionPair {
    pub left: Detection,
    pub right: Detection,
}

impl DetectionPair {
    pub fn get(&self, side: Side) -> &Detection {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
}

pub struct RibNetwork {
    pub rib_index: u8,
    pub config: ModelConfig,
    backbone: Backbone,
    head_hidden: Dense,
    head_out: Dense,
    mask_hidden: Dense,
    mask_out: Dense,
}

/// Raw head outputs for one input, in probability space. This is the "net
/// output" the loss consumes, so tests can also construct it directly.
#[derive(Debug, Clone)]
pub struct RibPrediction {
    /// `(anchors, 4)` shift parameters `(dx, dy, dw, dh)`.
    pub shifts: Array2<f64>,
    /// `(anchors, 2)` per-side scores in `[0,1]`; column 0 = left.
    pub scores: Array2<f64>,
    /// Soft masks in `[0,1]`, one per side that a mask was predicted for.
    pub masks: BTreeMap<Side, Array2<f64>>,
}

fn side_col(side: Side) -> usize {
    match side {
        Side::Left => 0,
        Side::Right => 1,
    }
}

/// Stack the 3 input channels: gray image twice, upper-rib mask third.
/// Rib 1 has no upper neighbor; its third channel is all zeros.
pub fn build_input(
    img: &GrayImage,
    upper_mask: Option<&InstanceMask>,
) -> Result<Array3<f64>, ModelError> {
    let (rows, cols) = img.data.dim();
    if let Some(m) = upper_mask {
        if m.dim() != (rows, cols) {
            return Err(ModelError::MaskShapeMismatch(m.dim(), (rows, cols)));
        }
    }
    let mut x = Array3::<f64>::zeros((3, rows, cols));
    for ((r, c), &v) in img.data.indexed_iter() {
        x[(0, r, c)] = v;
        x[(1, r, c)] = v;
    }
    if let Some(m) = upper_mask {
        for ((r, c), &v) in m.indexed_iter() {
            x[(2, r, c)] = (v != 0) as u8 as f64;
        }
    }
    Ok(x)
}

/// Decode a `(dx, dy, dw, dh)` shift against an anchor into a pixel box:
/// the center moves by the shift times the anchor size, the size scales
/// exponentially. `dw`/`dh` are clamped to ±4 before exponentiation.
pub fn decode_shift(
    anchor: &NormalizedBox,
    shift: [f64; 4],
    image_size: (usize, usize),
) -> PixelBox {
    let [acx, acy, aw, ah] = anchor.to_cxcywh();
    let cx = acx + shift[0] * aw;
    let cy = acy + shift[1] * ah;
    let w = aw * shift[2].clamp(-SHIFT_CLAMP, SHIFT_CLAMP).exp();
    let h = ah * shift[3].clamp(-SHIFT_CLAMP, SHIFT_CLAMP).exp();
    let (iw, ih) = (image_size.0 as f64, image_size.1 as f64);
    let mut x_min = (cx - 0.5 * w) * iw;
    let mut y_min = (cy - 0.5 * h) * ih;
    let mut x_max = (cx + 0.5 * w) * iw;
    let mut y_max = (cy + 0.5 * h) * ih;
    x_min = x_min.clamp(0.0, iw - 1.0);
    y_min = y_min.clamp(0.0, ih - 1.0);
    x_max = x_max.clamp(x_min + 1.0, iw);
    y_max = y_max.clamp(y_min + 1.0, ih);
    PixelBox {
        x_min,
        y_min,
        x_max,
        y_max,
    }
}

/// Exact inverse of `decode_shift` (before clipping): the training target for
/// the shift head.
pub fn encode_shift(
    anchor: &NormalizedBox,
    target: &NormalizedBox,
) -> Result<[f64; 4], ModelError> {
    let [acx, acy, aw, ah] = anchor.to_cxcywh();
    let [tcx, tcy, tw, th] = target.to_cxcywh();
    if tw <= 0.0 || th <= 0.0 {
        return Err(ModelError::DegenerateTarget);
    }
    Ok([
        (tcx - acx) / aw,
        (tcy - acy) / ah,
        (tw / aw).ln(),
        (th / ah).ln(),
    ])
}

/// `{0,1}` target grid: the GT mask nearest-sampled at the bin centers of
/// `crop` box.
fn sample_mask_target(mask: &InstanceMask, crop: &PixelBox, res: usize) -> Array2<f64> {
    let (rows, cols) = mask.dim();
    Array2::from_shape_fn((res, res), |(i, j)| {
        let px = crop.x_min + (j as f64 + 0.5) / res as f64 * crop.width();
        let py = crop.y_min + (i as f64 + 0.5) / res as f64 * crop.height();
        let r = (py.floor().max(0.0) as usize).min(rows - 1);
        let c = (px.floor().max(0.0) as usize).min(cols - 1);
        (mask[(r, c)] != 0) as u8 as f64
    })
}

/// Per-side training targets for one image and rib index.
#[derive(Debug, Clone)]
pub struct SideTarget {
    pub positive_anchor: usize,
    pub shift_target: [f64; 4],
    pub gt_box_px: PixelBox,
    /// `{0,1}` target at mask resolution, sampled from the GT mask over the
    /// GT box.
    pub mask_target: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct RibTargets {
    pub rib_index: u8,
    pub per_side: BTreeMap<Side, SideTarget>,
}

impl RibTargets {
    /// Derive targets from ground truth. Errors when the rib is present on
    /// neither (unfiltered) side; callers treat that as "skip this image".
    pub fn from_annotations(
        img: &AnnotatedImage,
        rib_index: u8,
        anchors: &AnchorSet,
        config: &ModelConfig,
    ) -> Result<RibTargets, ModelError> {
        let (rows, cols) = img.image.data.dim();
        let mut per_side = BTreeMap::new();
        for side in Side::BOTH {
            if config.side_filter.is_some_and(|f| f != side) {
                continue;
            }
            let label = RibLabel { side, index: rib_index };
            let Some(mask) = img.annotations.get(&label) else {
                continue;
            };
            let gt_box = box_from_mask(mask)?;
            let gt_norm = normalize_box(&gt_box, cols, rows)?;

            // Positive anchor: best box Dice against GT, threshold-free.
            let mut best = (0usize, -1.0f64);
            for (a, nb) in anchors.boxes.iter().enumerate() {
                let d = dice_box(&denormalize_box(nb, cols, rows), &gt_box)?;
                if d > best.1 {
                    best = (a, d);
                }
            }
            let shift_target = encode_shift(&anchors.boxes[best.0], &gt_norm)?;

            let mask_target = sample_mask_target(mask, &gt_box, config.mask_resolution);

            per_side.insert(
                side,
                SideTarget {
                    positive_anchor: best.0,
                    shift_target,
                    gt_box_px: gt_box,
                    mask_target,
                },
            );
        }
        if per_side.is_empty() {
            return Err(ModelError::RibAbsent(rib_index));
        }
        Ok(RibTargets {
            rib_index,
            per_side,
        })
    }

    /// Randomly shift and rescale each side's mask crop box (resampling its
    /// target), so the mask head learns to localize the rib inside an
    /// imperfect box — the way inference presents it after anchor-shift
    /// regression. Box-regression targets are untouched.
    pub fn jitter_mask_crops<R: rand::Rng>(
        &mut self,
        img: &AnnotatedImage,
        amount: f64,
        rng: &mut R,
    ) {
        let (rows, cols) = img.image.data.dim();
        for (side, t) in self.per_side.iter_mut() {
            let label = RibLabel {
                side: *side,
                index: self.rib_index,
            };
            let Some(mask) = img.annotations.get(&label) else {
                continue;
            };
            let b = &t.gt_box_px;
            let (mut w, mut h) = (b.width(), b.height());
            let (cx, cy) = b.center();
            let cx = cx + rng.gen_range(-amount..=amount) * w;
            let cy = cy + rng.gen_range(-amount..=amount) * h;
            w *= rng.gen_range(-amount..=amount).exp();
            h *= rng.gen_range(-amount..=amount).exp();
            let crop = PixelBox {
                x_min: cx - w / 2.0,
                y_min: cy - h / 2.0,
                x_max: cx + w / 2.0,
                y_max: cy + h / 2.0,
            };
            retarget(t, mask, &crop, rows, cols);
        }
    }

    /// Point one side's mask crop at `crop` (clamped to the image) and
    /// resample its target there. Used to train the mask head at the boxes
    /// the box head actually produces.
    pub fn set_mask_crop(&mut self, img: &AnnotatedImage, side: Side, crop: &PixelBox) {
        let (rows, cols) = img.image.data.dim();
        let label = RibLabel {
            side,
            index: self.rib_index,
        };
        let (Some(t), Some(mask)) = (self.per_side.get_mut(&side), img.annotations.get(&label))
        else {
            return;
        };
        retarget(t, mask, crop, rows, cols);
    }
}

/// Clamp `crop` to an `rows` x `cols` image (at least 1 px each way) and make
/// it `t`'s mask crop, resampling the target.
fn retarget(t: &mut SideTarget, mask: &InstanceMask, crop: &PixelBox, rows: usize, cols: usize) {
    let clamped = PixelBox {
        x_min: crop.x_min.clamp(0.0, cols as f64 - 1.0),
        y_min: crop.y_min.clamp(0.0, rows as f64 - 1.0),
        x_max: crop.x_max.min(cols as f64),
        y_max: crop.y_max.min(rows as f64),
    };
    let clamped = PixelBox {
        x_max: clamped.x_max.max(clamped.x_min + 1.0),
        y_max: clamped.y_max.max(clamped.y_min + 1.0),
        ..clamped
    };
    let res = t.mask_target.nrows();
    t.mask_target = sample_mask_target(mask, &clamped, res);
    t.gt_box_px = clamped;
}


/// Loss value with its components. All components are non-negative.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossComponents {
    pub score: f64,
    pub shift: f64,
    pub mask: f64,
    pub total: f64,
}

fn bce(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// The training objective on a prediction:
/// score BCE over every anchor and (unfiltered) side, smooth-L1 on the
/// positive anchors' shifts, per-pixel BCE on the soft masks.
pub fn loss(
    pred: &RibPrediction,
    targets: &RibTargets,
    config: &ModelConfig,
) -> LossComponents {
    let n_anchors = pred.shifts.nrows();
    let [w_score, w_shift, w_mask] = config.loss_weights;

    let mut score = 0.0;
    let mut sides_counted = 0usize;
    for side in Side::BOTH {
        if config.side_filter.is_some_and(|f| f != side) {
            continue;
        }
        sides_counted += 1;
        let col = side_col(side);
        let positive = targets.per_side.get(&side).map(|t| t.positive_anchor);
        for a in 0..n_anchors {
            let t = (Some(a) == positive) as u8 as f64;
            score += bce(pred.scores[(a, col)], t);
        }
    }
    score /= (n_anchors * sides_counted.max(1)) as f64;

    let mut shift = 0.0;
    let mut mask = 0.0;
    let present = targets.per_side.len().max(1) as f64;
    for (side, target) in &targets.per_side {
        if config.side_filter.is_some_and(|f| f != *side) {
            continue;
        }
        for k in 0..4 {
            shift += smooth_l1(pred.shifts[(target.positive_anchor, k)] - target.shift_target[k]);
        }
        if let Some(soft) = pred.masks.get(side) {
            let n = soft.len() as f64;
            let mut m = 0.0;
            for (p, t) in soft.iter().zip(target.mask_target.iter()) {
                m += bce(*p, *t);
            }
            mask += m / n;
        }
    }
    shift /= present;
    mask /= present;

    LossComponents {
        score,
        shift,
        mask,
        total: w_score * score + w_shift * shift + w_mask * mask,
    }
}

struct HeadCache {
    flat: Array1<f64>,
    hidden: Array1<f64>,
    hidden_mask: Array1<bool>,
}

struct MaskCache {
    roi: RoiAlignCache,
    roi_flat: Array1<f64>,
    hidden: Array1<f64>,
    hidden_mask: Array1<bool>,
    logits: Array1<f64>,
}

impl RibNetwork {
    pub fn new(rib_index: u8, config: ModelConfig, seed: u64) -> Self {
        assert!(config.input_size % FEATURE_STRIDE == 0, "input size must be a multiple of 16");
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000 + rib_index as u64);
        let fm = config.input_size / FEATURE_STRIDE;
        let flat_dim = FEATURE_CHANNELS * fm * fm;
        let out_dim = config.anchor_count * 6;
        let mask_dim = config.mask_resolution * config.mask_resolution;
        Self {
            rib_index,
            backbone: Backbone::new(config.backbone, seed.wrapping_add(rib_index as u64)),
            head_hidden: Dense::new(&mut rng, flat_dim, HIDDEN),
            head_out: Dense::new(&mut rng, HIDDEN, out_dim),
            mask_hidden: Dense::new(&mut rng, FEATURE_CHANNELS * ROI_SIZE * ROI_SIZE, HIDDEN),
            mask_out: Dense::new(&mut rng, HIDDEN, mask_dim),
            config,
        }
    }

    fn expected_input(&self) -> (usize, usize, usize) {
        (3, self.config.input_size, self.config.input_size)
    }

    fn spatial_scale(&self) -> f64 {
        1.0 / FEATURE_STRIDE as f64
    }

    fn check_input(&self, input: &Array3<f64>) -> Result<(), ModelError> {
        if input.dim() != self.expected_input() {
            return Err(ModelError::ShapeMismatch(input.dim(), self.expected_input()));
        }
        Ok(())
    }

    fn run_heads(&self, fm: &Array3<f64>) -> (Array2<f64>, Array2<f64>, HeadCache) {
        let flat = Array1::from_iter(fm.iter().copied());
        let mut hidden = self.head_hidden.forward(&flat);
        let hidden_mask = nn::relu_vec(&mut hidden);
        let out = self.head_out.forward(&hidden);
        let a = self.config.anchor_count;
        let mut shifts = Array2::<f64>::zeros((a, 4));
        let mut scores = Array2::<f64>::zeros((a, 2));
        for i in 0..a {
            for k in 0..4 {
                shifts[(i, k)] = out[i * 6 + k];
            }
            scores[(i, 0)] = nn::sigmoid(out[i * 6 + 4]);
            scores[(i, 1)] = nn::sigmoid(out[i * 6 + 5]);
        }
        (
            shifts,
            scores,
            HeadCache {
                flat,
                hidden,
                hidden_mask,
            },
        )
    }

    fn run_mask_head(&self, fm: &Array3<f64>, roi_box: &PixelBox) -> (Array2<f64>, MaskCache) {
        let (roi, roi_cache) = nn::roi_align(fm, roi_box, self.spatial_scale(), ROI_SIZE);
        let roi_flat = Array1::from_iter(roi.iter().copied());
        let mut hidden = self.mask_hidden.forward(&roi_flat);
        let hidden_mask = nn::relu_vec(&mut hidden);
        let logits = self.mask_out.forward(&hidden);
        let res = self.config.mask_resolution;
        let soft = Array2::from_shape_fn((res, res), |(i, j)| nn::sigmoid(logits[i * res + j]));
        (
            soft,
            MaskCache {
                roi: roi_cache,
                roi_flat,
                hidden,
                hidden_mask,
                logits,
            },
        )
    }

    /// Inference: best-scoring shifted anchor per side (no NMS), soft mask
    /// pooled over that box. Always exactly one detection per side.
    pub fn forward(
        &self,
        input: &Array3<f64>,
        anchors: &AnchorSet,
    ) -> Result<DetectionPair, ModelError> {
        self.check_input(input)?;
        if anchors.boxes.len() != self.config.anchor_count {
            return Err(ModelError::AnchorCountMismatch(
                anchors.boxes.len(),
                self.config.anchor_count,
            ));
        }
        let (fm, _) = self.backbone.forward(input);
        let (shifts, scores, _) = self.run_heads(&fm);
        if shifts.iter().chain(scores.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteOutput);
        }
        let size = (self.config.input_size, self.config.input_size);

        let detect = |side: Side| -> Result<Detection, ModelError> {
            let col = side_col(side);
            let mut best = 0usize;
            for a in 1..self.config.anchor_count {
                if scores[(a, col)] > scores[(best, col)] {
                    best = a;
                }
            }
            let shift = [
                shifts[(best, 0)],
                shifts[(best, 1)],
                shifts[(best, 2)],
                shifts[(best, 3)],
            ];
            let box_px = decode_shift(&anchors.boxes[best], shift, size);
            let (soft, _) = self.run_mask_head(&fm, &box_px);
            if soft.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteOutput);
            }
            Ok(Detection {
                label: RibLabel {
                    side,
                    index: self.rib_index,
                },
                box_px,
                score: scores[(best, col)],
                soft_mask: soft,
            })
        };
        Ok(DetectionPair {
            left: detect(Side::Left)?,
            right: detect(Side::Right)?,
        })
    }

    /// Training forward: heads on the whole image, mask head pooled over each
    /// present side's GT box (teacher forcing for the mask crop).
    pub fn predict_for_training(
        &self,
        input: &Array3<f64>,
        targets: &RibTargets,
    ) -> Result<RibPrediction, ModelError> {
        self.check_input(input)?;
        let (fm, _) = self.backbone.forward(input);
        let (shifts, scores, _) = self.run_heads(&fm);
        let mut masks = BTreeMap::new();
        for (side, t) in &targets.per_side {
            let (soft, _) = self.run_mask_head(&fm, &t.gt_box_px);
            masks.insert(*side, soft);
        }
        Ok(RibPrediction {
            shifts,
            scores,
            masks,
        })
    }

    /// Full training pass: loss plus the gradient of `loss(...)` with respect
    /// to every parameter, in `params()` order.
    pub fn loss_and_grads(
        &self,
        input: &Array3<f64>,
        targets: &RibTargets,
    ) -> Result<(LossComponents, Vec<Array2<f64>>), ModelError> {
        self.check_input(input)?;
        let cfg = &self.config;
        let n_anchors = cfg.anchor_count;
        let [w_score, w_shift, w_mask] = cfg.loss_weights;

        let (fm, bb_cache) = self.backbone.forward(input);
        let (shifts, scores, head_cache) = self.run_heads(&fm);

        let mut mask_runs: BTreeMap<Side, (Array2<f64>, MaskCache)> = BTreeMap::new();
        for (side, t) in &targets.per_side {
            mask_runs.insert(*side, self.run_mask_head(&fm, &t.gt_box_px));
        }

        let pred = RibPrediction {
            shifts: shifts.clone(),
            scores: scores.clone(),
            masks: mask_runs
                .iter()
                .map(|(s, (soft, _))| (*s, soft.clone()))
                .collect(),
        };
        let components = loss(&pred, targets, cfg);

        let mut grads: Vec<Array2<f64>> = self.params().iter().map(|p| Array2::zeros(p.dim())).collect();
        let n_bb = self.backbone.n_slots();

        // Head output gradient (length anchors*6). Score BCE in logit space:
        // d/dz = sigmoid(z) - t, matching the clamped probability-space loss
        // away from saturation.
        let mut sides_counted = 0usize;
        for side in Side::BOTH {
            if !cfg.side_filter.is_some_and(|f| f != side) {
                sides_counted += 1;
            }
        }
        let score_norm = w_score / (n_anchors * sides_counted.max(1)) as f64;
        let present = targets.per_side.len().max(1) as f64;

        let mut d_out = Array1::<f64>::zeros(n_anchors * 6);
        for side in Side::BOTH {
            if cfg.side_filter.is_some_and(|f| f != side) {
                continue;
            }
            let col = side_col(side);
            let positive = targets.per_side.get(&side).map(|t| t.positive_anchor);
            for a in 0..n_anchors {
                let t = (Some(a) == positive) as u8 as f64;
                d_out[a * 6 + 4 + col] = score_norm * (scores[(a, col)] - t);
            }
        }
        for (side, t) in &targets.per_side {
            if cfg.side_filter.is_some_and(|f| f != *side) {
                continue;
            }
            for k in 0..4 {
                let d = shifts[(t.positive_anchor, k)] - t.shift_target[k];
                d_out[t.positive_anchor * 6 + k] += w_shift * smooth_l1_grad(d) / present;
            }
        }

        // Box head backward.
        let (dh_w, dh_b, do_w) = (n_bb, n_bb + 1, n_bb + 2);
        let mut d_hidden = {
            let (left, right) = grads.split_at_mut(do_w);
            let _ = left;
            let (dw, db) = right.split_at_mut(1);
            self.head_out
                .backward(&head_cache.hidden, &d_out, &mut dw[0], &mut db[0])
        };
        nn::relu_vec_backward(&mut d_hidden, &head_cache.hidden_mask);
        let d_flat = {
            let (left, right) = grads.split_at_mut(dh_b);
            self.head_hidden.backward(
                &head_cache.flat,
                &d_hidden,
                &mut left[dh_w],
                &mut right[0],
            )
        };
        let fm_dim = fm.dim();
        let mut d_fm = d_flat
            .into_shape(fm_dim)
            .expect("flat gradient reshapes to feature map");

        // Mask head backward per present side.
        let (mh_w, mh_b, mo_w) = (n_bb + 4, n_bb + 5, n_bb + 6);
        for (side, t) in &targets.per_side {
            let (soft, cache) = &mask_runs[side];
            let n_px = soft.len() as f64;
            let res = cfg.mask_resolution;
            let mut d_logits = Array1::<f64>::zeros(res * res);
            for i in 0..res {
                for j in 0..res {
                    let p = nn::sigmoid(cache.logits[i * res + j]);
                    d_logits[i * res + j] =
                        w_mask * (p - t.mask_target[(i, j)]) / (n_px * present);
                }
            }
            let mut d_mh = {
                let (left, right) = grads.split_at_mut(mo_w);
                let _ = left;
                let (dw, db) = right.split_at_mut(1);
                self.mask_out
                    .backward(&cache.hidden, &d_logits, &mut dw[0], &mut db[0])
            };
            nn::relu_vec_backward(&mut d_mh, &cache.hidden_mask);
            let d_roi_flat = {
                let (left, right) = grads.split_at_mut(mh_b);
                self.mask_hidden.backward(
                    &cache.roi_flat,
                    &d_mh,
                    &mut left[mh_w],
                    &mut right[0],
                )
            };
            let d_roi = d_roi_flat
                .into_shape((FEATURE_CHANNELS, ROI_SIZE, ROI_SIZE))
                .expect("roi gradient reshape");
            d_fm += &nn::roi_align_backward(&d_roi, &cache.roi);
        }

        self.backbone.backward(d_fm, &bb_cache, &mut grads[..n_bb]);
        Ok((components, grads))
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut out = self.backbone.params();
        out.push(&self.head_hidden.w);
        out.push(&self.head_hidden.b);
        out.push(&self.head_out.w);
        out.push(&self.head_out.b);
        out.push(&self.mask_hidden.w);
        out.push(&self.mask_hidden.b);
        out.push(&self.mask_out.w);
        out.push(&self.mask_out.b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = self.backbone.params_mut();
        out.push(&mut self.head_hidden.w);
        out.push(&mut self.head_hidden.b);
        out.push(&mut self.head_out.w);
        out.push(&mut self.head_out.b);
        out.push(&mut self.mask_hidden.w);
        out.push(&mut self.mask_hidden.b);
        out.push(&mut self.mask_out.w);
        out.push(&mut self.mask_out.b);
        out
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.params().iter().map(|p| p.dim()).collect()
    }

    /// Zero every head parameter; inference then decodes every anchor with a
    /// zero shift and uniform scores. Test hook for the identity contract.
    pub fn zero_heads(&mut self) {
        for p in [
            &mut self.head_hidden.w,
            &mut self.head_hidden.b,
            &mut self.head_out.w,
            &mut self.head_out.b,
        ] {
            p.fill(0.0);
        }
    }

    const CKPT_MAGIC: &'static [u8; 8] = b"RIBCKPT1";

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let err = |reason: String| ModelError::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| err(e.to_string()))?,
        );
        let w = &mut f;
        (|| -> std::io::Result<()> {
            w.write_all(Self::CKPT_MAGIC)?;
            w.write_u8(self.rib_index)?;
            w.write_u8(match self.config.backbone {
                BackboneKind::Tiny => 0,
                BackboneKind::Resnet50Fpn => 1,
            })?;
            w.write_u8(match self.config.side_filter {
                None => 0,
                Some(Side::Left) => 1,
                Some(Side::Right) => 2,
            })?;
            w.write_u32::<LittleEndian>(self.config.anchor_count as u32)?;
            w.write_u32::<LittleEndian>(self.config.input_size as u32)?;
            w.write_u32::<LittleEndian>(self.config.mask_resolution as u32)?;
            for lw in self.config.loss_weights {
                w.write_f64::<LittleEndian>(lw)?;
            }
            let params = self.params();
            w.write_u32::<LittleEndian>(params.len() as u32)?;
            for p in params {
                let (r, c) = p.dim();
                w.write_u32::<LittleEndian>(r as u32)?;
                w.write_u32::<LittleEndian>(c as u32)?;
                for &v in p.iter() {
                    w.write_f64::<LittleEndian>(v)?;
                }
            }
            Ok(())
        })()
        .map_err(|e| err(e.to_string()))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, ModelError> {
        let err = |reason: String| ModelError::Checkpoint {
            path: path.display().to_string(),
            reason,
        };
        let mut f = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| err(e.to_string()))?,
        );
        let mut net = (|r: &mut dyn Read| -> std::io::Result<Result<Self, String>> {
            let mut magic = [0u8; 8];
            r.read_exact(&mut magic)?;
            if &magic != Self::CKPT_MAGIC {
                return Ok(Err("bad magic".into()));
            }
            let rib_index = r.read_u8()?;
            let backbone = match r.read_u8()? {
                0 => BackboneKind::Tiny,
                1 => BackboneKind::Resnet50Fpn,
                other => return Ok(Err(format!("unknown backbone tag {other}"))),
            };
            let side_filter = match r.read_u8()? {
                0 => None,
                1 => Some(Side::Left),
                2 => Some(Side::Right),
                other => return Ok(Err(format!("unknown side tag {other}"))),
            };
            let anchor_count = r.read_u32::<LittleEndian>()? as usize;
            let input_size = r.read_u32::<LittleEndian>()? as usize;
            let mask_resolution = r.read_u32::<LittleEndian>()? as usize;
            let mut loss_weights = [0.0; 3];
            for lw in &mut loss_weights {
                *lw = r.read_f64::<LittleEndian>()?;
            }
            let config = ModelConfig {
                backbone,
                anchor_count,
                input_size,
                mask_resolution,
                loss_weights,
                side_filter,
            };
            let mut net = RibNetwork::new(rib_index, config, 0);
            let n = r.read_u32::<LittleEndian>()? as usize;
            if n != net.params().len() {
                return Ok(Err(format!(
                    "parameter count {n} does not match architecture ({})",
                    net.params().len()
                )));
            }
            for p in net.params_mut() {
                let rows = r.read_u32::<LittleEndian>()? as usize;
                let cols = r.read_u32::<LittleEndian>()? as usize;
                if (rows, cols) != p.dim() {
                    return Ok(Err(format!(
                        "parameter shape ({rows},{cols}) does not match {:?}",
                        p.dim()
                    )));
                }
                for v in p.iter_mut() {
                    *v = r.read_f64::<LittleEndian>()?;
                }
            }
            Ok(Ok(net))
        })(&mut f)
        .map_err(|e| err(e.to_string()))?
        .map_err(err)?;
        // Dropping the rng-dependent init leaves no trace; parameters are
        // fully overwritten above.
        net.config.backbone = net.backbone.kind();
        Ok(net)
    }
}

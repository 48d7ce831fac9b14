//! Scoring a cascade run against ground truth: per-rib box and mask Dice,
//! whole-image pixel classification, aggregation into a side-by-side summary
//! table, and a deterministic overlay renderer.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{AnnotatedImage, GrayImage, RibLabel, Side};
use crate::geometry::{box_from_mask, dice_box, dice_mask, GeometryError, InstanceMask, PixelBox};
use crate::pipeline::CascadeResult;

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("ground truth marks {0} of {1} pixels as rib; sensitivity/specificity undefined")]
    DegenerateGroundTruth(usize, usize),
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("prediction is for image {0}, ground truth for {1}")]
    IdMismatch(String, String),
    #[error("io error at {0}: {1}")]
    Io(String, std::io::Error),
}

/// Published benchmark values for rib detection and segmentation on adult
/// posteroanterior chest radiographs, for side-by-side display in reports.
pub mod reference {
    /// (mean, standard deviation) box Dice, left ribs.
    pub const LEFT_DETECTION: (f64, f64) = (0.841, 0.126);
    /// (mean, standard deviation) mask Dice, left ribs.
    pub const LEFT_SEGMENTATION: (f64, f64) = (0.732, 0.207);
    pub const RIGHT_DETECTION: (f64, f64) = (0.850, 0.104);
    pub const RIGHT_SEGMENTATION: (f64, f64) = (0.734, 0.211);
    /// Pooled over both sides.
    pub const POOLED_DETECTION: f64 = 0.846;
    pub const POOLED_SEGMENTATION: f64 = 0.733;
    /// Whole-image pixel classification: accuracy, sensitivity, specificity.
    pub const PIXEL: [f64; 3] = [0.95, 0.82, 0.98];
    /// The same three figures for an atlas-based baseline method.
    pub const PIXEL_ATLAS_BASELINE: [f64; 3] = [0.86, 0.75, 0.92];
}

/// Scores for one (image, rib, side) instance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RibScore {
    /// Dice between the predicted box and the ground-truth mask's bounding
    /// box.
    pub detection_dice: f64,
    /// Dice between the pasted predicted mask and the ground-truth mask.
    pub segmentation_dice: f64,
    /// The network's confidence for this side.
    pub confidence: f64,
    /// True when the confidence fell below the score floor; both Dice
    /// columns are then zero by definition.
    pub missed: bool,
}

/// Whole-image binary rib-vs-background pixel classification.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub true_positive: usize,
    pub true_negative: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEvaluation {
    pub id: String,
    /// One row per ground-truth rib instance. Ribs the cascade failed to
    /// produce score zero on both Dice columns.
    pub ribs: BTreeMap<RibLabel, RibScore>,
    /// Confident predictions with no ground-truth counterpart.
    pub false_detections: usize,
    pub pixel: PixelMetrics,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn from_samples(samples: &[f64]) -> Self {
        Self::from_samples_with(samples, false)
    }

    /// `sample_std` switches the divisor from `n` to `n - 1`.
    pub fn from_samples_with(samples: &[f64], sample_std: bool) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let denom = if sample_std { (n - 1).max(1) } else { n } as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / denom;
        Self {
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SideSummary {
    pub detection: MeanStd,
    pub segmentation: MeanStd,
}

/// Aggregate scores in the shape they are conventionally reported: one row
/// per side plus a pooled row, and mean pixel classification figures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryTable {
    pub left: SideSummary,
    pub right: SideSummary,
    /// Over all instances of both sides.
    pub pooled: SideSummary,
    /// Mean over images.
    pub pixel: Option<PixelMetrics>,
    pub images: usize,
    /// Ground-truth ribs whose prediction fell below the score floor.
    pub missed_instances: usize,
    /// Confident predictions with no ground-truth counterpart.
    pub false_detections: usize,
}

/// Rib-vs-background pixel classification over whole-image union masks.
pub fn pixel_classification_metrics(
    pred_union: &InstanceMask,
    gt_union: &InstanceMask,
) -> Result<PixelMetrics, EvaluationError> {
    if pred_union.dim() != gt_union.dim() {
        return Err(EvaluationError::ShapeMismatch(
            pred_union.dim(),
            gt_union.dim(),
        ));
    }
    let n_px = gt_union.len();
    let positives = gt_union.iter().filter(|&&v| v != 0).count();
    if positives == 0 || positives == n_px {
        return Err(EvaluationError::DegenerateGroundTruth(positives, n_px));
    }
    let (mut tp, mut tn, mut fp, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for (&g, &p) in gt_union.iter().zip(pred_union.iter()) {
        match (g != 0, p != 0) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
            (true, false) => fne += 1,
        }
    }
    Ok(PixelMetrics {
        accuracy: (tp + tn) as f64 / n_px as f64,
        sensitivity: tp as f64 / (tp + fne) as f64,
        specificity: tn as f64 / (tn + fp) as f64,
        true_positive: tp,
        true_negative: tn,
        false_positive: fp,
        false_negative: fne,
    })
}

fn union_of<'a>(
    shape: (usize, usize),
    masks: impl Iterator<Item = &'a InstanceMask>,
) -> InstanceMask {
    let mut out = InstanceMask::zeros(shape);
    for m in masks {
        for (u, &v) in out.iter_mut().zip(m.iter()) {
            *u |= (v != 0) as u8;
        }
    }
    out
}

/// Score one image: per-rib box and mask Dice plus whole-image pixel
/// classification over the unions of all rib masks. Ground-truth ribs whose
/// prediction scored below `score_floor` count as misses with Dice 0.
pub fn evaluate_image(
    gt: &AnnotatedImage,
    result: &CascadeResult,
    score_floor: f64,
) -> Result<ImageEvaluation, EvaluationError> {
    if gt.id != result.id {
        return Err(EvaluationError::IdMismatch(result.id.clone(), gt.id.clone()));
    }
    let shape = gt.image.data.dim();
    let mut ribs = BTreeMap::new();
    for (label, gt_mask) in &gt.annotations {
        let score = match (result.detections.get(label), result.masks.get(label)) {
            (Some(det), Some(pred_mask)) if det.score >= score_floor => {
                let gt_box = box_from_mask(gt_mask)?;
                let segmentation_dice = if pred_mask.iter().all(|&v| v == 0) {
                    0.0
                } else {
                    dice_mask(pred_mask, gt_mask)?
                };
                RibScore {
                    detection_dice: dice_box(&det.box_px, &gt_box)?,
                    segmentation_dice,
                    confidence: det.score,
                    missed: false,
                }
            }
            (det, _) => RibScore {
                detection_dice: 0.0,
                segmentation_dice: 0.0,
                confidence: det.map_or(0.0, |d| d.score),
                missed: true,
            },
        };
        ribs.insert(*label, score);
    }
    let false_detections = result
        .detections
        .iter()
        .filter(|(label, det)| det.score >= score_floor && !gt.annotations.contains_key(label))
        .count();

    // Pixel classification only counts confident predictions, mirroring the
    // per-rib miss rule.
    let gt_union = union_of(shape, gt.annotations.values());
    let pred_union = union_of(
        shape,
        result.masks.iter().filter_map(|(label, m)| {
            let confident = result.detections.get(label).is_some_and(|d| d.score >= score_floor);
            confident.then_some(m)
        }),
    );
    let pixel = pixel_classification_metrics(&pred_union, &gt_union)?;

    Ok(ImageEvaluation {
        id: gt.id.clone(),
        ribs,
        false_detections,
        pixel,
    })
}

/// Pool per-instance scores into the summary table with population std.
pub fn aggregate(evaluations: &[ImageEvaluation]) -> SummaryTable {
    aggregate_with(evaluations, false)
}

pub fn aggregate_with(evaluations: &[ImageEvaluation], sample_std: bool) -> SummaryTable {
    let collect = |side: Option<Side>| -> SideSummary {
        let mut det = Vec::new();
        let mut seg = Vec::new();
        for e in evaluations {
            for (label, s) in &e.ribs {
                if side.is_none() || side == Some(label.side) {
                    det.push(s.detection_dice);
                    seg.push(s.segmentation_dice);
                }
            }
        }
        SideSummary {
            detection: MeanStd::from_samples_with(&det, sample_std),
            segmentation: MeanStd::from_samples_with(&seg, sample_std),
        }
    };

    let pixel = if evaluations.is_empty() {
        None
    } else {
        let n = evaluations.len() as f64;
        let mean =
            |f: fn(&PixelMetrics) -> f64| evaluations.iter().map(|e| f(&e.pixel)).sum::<f64>() / n;
        Some(PixelMetrics {
            accuracy: mean(|p| p.accuracy),
            sensitivity: mean(|p| p.sensitivity),
            specificity: mean(|p| p.specificity),
            true_positive: 0,
            true_negative: 0,
            false_positive: 0,
            false_negative: 0,
        })
    };

    SummaryTable {
        left: collect(Some(Side::Left)),
        right: collect(Some(Side::Right)),
        pooled: collect(None),
        pixel,
        images: evaluations.len(),
        missed_instances: evaluations
            .iter()
            .flat_map(|e| e.ribs.values())
            .filter(|s| s.missed)
            .count(),
        false_detections: evaluations.iter().map(|e| e.false_detections).sum(),
    }
}

/// Render the summary as a markdown report, with the published benchmark
/// values alongside for orientation.
pub fn render_report(summary: &SummaryTable) -> String {
    let fmt = |m: &MeanStd| format!("{:.3} ± {:.3}", m.mean, m.std);
    let mut out = String::new();
    out.push_str("# Rib cascade evaluation\n\n");
    out.push_str(&format!("Images evaluated: {}\n\n", summary.images));
    out.push_str("| Side | Detection (box Dice) | Segmentation (mask Dice) | Instances |\n");
    out.push_str("|---|---|---|---|\n");
    for (name, s) in [("Left", &summary.left), ("Right", &summary.right)] {
        out.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            name,
            fmt(&s.detection),
            fmt(&s.segmentation),
            s.detection.n
        ));
    }
    out.push_str(&format!(
        "| Both | {:.3} | {:.3} | {} |\n",
        (summary.left.detection.mean + summary.right.detection.mean) / 2.0,
        (summary.left.segmentation.mean + summary.right.segmentation.mean) / 2.0,
        summary.pooled.detection.n
    ));
    out.push_str(
        "\nThe pooled row is the plain average of the Left and Right means \
         (row-average rule).\n",
    );
    out.push_str(&format!(
        "Misses: {}; false detections: {}.\n",
        summary.missed_instances, summary.false_detections
    ));
    out.push_str(&format!(
        "\nPublished adult-radiograph benchmark: left {:.3} ± {:.3} / {:.3} ± {:.3}, \
         right {:.3} ± {:.3} / {:.3} ± {:.3}, pooled {:.3} / {:.3} (detection / segmentation).\n",
        reference::LEFT_DETECTION.0,
        reference::LEFT_DETECTION.1,
        reference::LEFT_SEGMENTATION.0,
        reference::LEFT_SEGMENTATION.1,
        reference::RIGHT_DETECTION.0,
        reference::RIGHT_DETECTION.1,
        reference::RIGHT_SEGMENTATION.0,
        reference::RIGHT_SEGMENTATION.1,
        reference::POOLED_DETECTION,
        reference::POOLED_SEGMENTATION,
    ));
    if let Some(p) = &summary.pixel {
        out.push_str(&format!(
            "\nPixel classification (rib vs background): accuracy {:.3}, sensitivity {:.3}, \
             specificity {:.3}.\n",
            p.accuracy, p.sensitivity, p.specificity
        ));
        out.push_str(&format!(
            "Benchmark: {:.2} / {:.2} / {:.2}; atlas-based baseline: {:.2} / {:.2} / {:.2}.\n",
            reference::PIXEL[0],
            reference::PIXEL[1],
            reference::PIXEL[2],
            reference::PIXEL_ATLAS_BASELINE[0],
            reference::PIXEL_ATLAS_BASELINE[1],
            reference::PIXEL_ATLAS_BASELINE[2],
        ));
    }
    out
}

/// A rendered overlay plus a draw log describing every primitive placed, so
/// tests can assert on content without decoding pixels.
pub struct Overlay {
    /// `(rows, cols, 3)` RGB.
    pub rgb: Array3<u8>,
    pub draw_log: Vec<String>,
}

/// Fixed per-label tint: greens on the left side, oranges on the right,
/// darkening with rib index.
fn label_color(label: &RibLabel) -> [u8; 3] {
    let t = (label.index - 1) as f64 / (RibLabel::MAX_INDEX - 1) as f64;
    let shade = |hi: f64, lo: f64| (hi + (lo - hi) * t) as u8;
    match label.side {
        Side::Left => [shade(40.0, 10.0), shade(230.0, 110.0), shade(70.0, 200.0)],
        Side::Right => [shade(250.0, 150.0), shade(160.0, 40.0), shade(30.0, 30.0)],
    }
}

/// 3x5 glyphs for the strings "L1".."R9".
fn glyph(ch: char) -> [u8; 5] {
    // Each entry is one row, low three bits = pixels left to right.
    match ch {
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'R' => [0b110, 0b101, 0b110, 0b101, 0b101],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b110, 0b001, 0b010, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b011, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b110, 0b001, 0b110],
        '6' => [0b011, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b110],
        _ => [0; 5],
    }
}

fn put(rgb: &mut Array3<u8>, r: i64, c: i64, color: [u8; 3]) {
    let (rows, cols, _) = rgb.dim();
    if r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols {
        for (k, &v) in color.iter().enumerate() {
            rgb[(r as usize, c as usize, k)] = v;
        }
    }
}

fn draw_text(rgb: &mut Array3<u8>, text: &str, r0: i64, c0: i64, color: [u8; 3]) {
    for (i, ch) in text.chars().enumerate() {
        let g = glyph(ch);
        for (dr, row) in g.iter().enumerate() {
            for dc in 0..3 {
                if row & (0b100 >> dc) != 0 {
                    put(rgb, r0 + dr as i64, c0 + (i * 4 + dc) as i64, color);
                }
            }
        }
    }
}

fn draw_box(rgb: &mut Array3<u8>, b: &PixelBox, color: [u8; 3]) {
    let (r0, r1) = (b.y_min.round() as i64, b.y_max.round() as i64 - 1);
    let (c0, c1) = (b.x_min.round() as i64, b.x_max.round() as i64 - 1);
    for c in c0..=c1 {
        put(rgb, r0, c, color);
        put(rgb, r1, c, color);
    }
    for r in r0..=r1 {
        put(rgb, r, c0, color);
        put(rgb, r, c1, color);
    }
}

/// Paint masks (half-strength tint), box outlines and labels over the
/// grayscale image. Purely a function of its inputs; two calls yield
/// byte-identical buffers.
pub fn render_overlay(
    image: &GrayImage,
    masks: &BTreeMap<RibLabel, InstanceMask>,
    boxes: &BTreeMap<RibLabel, PixelBox>,
) -> Overlay {
    let (rows, cols) = image.data.dim();
    let mut rgb = Array3::<u8>::zeros((rows, cols, 3));
    for ((r, c), &v) in image.data.indexed_iter() {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        for k in 0..3 {
            rgb[(r, c, k)] = g;
        }
    }
    let mut draw_log = Vec::new();

    for (label, mask) in masks {
        let color = label_color(label);
        let mut painted = 0usize;
        for ((r, c), &v) in mask.indexed_iter() {
            if v != 0 {
                for k in 0..3 {
                    let base = rgb[(r, c, k)] as u16;
                    rgb[(r, c, k)] = ((base + color[k] as u16) / 2) as u8;
                }
                painted += 1;
            }
        }
        draw_log.push(format!("mask {label}: {painted} px"));
    }
    for (label, b) in boxes {
        let color = label_color(label);
        draw_box(&mut rgb, b, color);
        let text = label.to_string();
        draw_text(
            &mut rgb,
            &text,
            b.y_min.round() as i64 - 6,
            b.x_min.round() as i64,
            color,
        );
        draw_log.push(format!(
            "box {label}: ({:.1}, {:.1})-({:.1}, {:.1})",
            b.x_min, b.y_min, b.x_max, b.y_max
        ));
        draw_log.push(format!("text {text}"));
    }

    Overlay { rgb, draw_log }
}

pub fn save_overlay_png(overlay: &Overlay, path: &Path) -> Result<(), EvaluationError> {
    let (rows, cols, _) = overlay.rgb.dim();
    let mut buf = image::RgbImage::new(cols as u32, rows as u32);
    for r in 0..rows {
        for c in 0..cols {
            buf.put_pixel(
                c as u32,
                r as u32,
                image::Rgb([
                    overlay.rgb[(r, c, 0)],
                    overlay.rgb[(r, c, 1)],
                    overlay.rgb[(r, c, 2)],
                ]),
            );
        }
    }
    buf.save(path)
        .map_err(|e| EvaluationError::Io(path.display().to_string(), std::io::Error::other(e)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::dataio::phantom::{generate_phantom, PhantomConfig};
    use crate::model::Detection;

    fn mask_from(shape: (usize, usize), px: &[(usize, usize)]) -> InstanceMask {
        let mut m = InstanceMask::zeros(shape);
        for &(r, c) in px {
            m[(r, c)] = 1;
        }
        m
    }

    /// Treat ground truth as a perfect prediction.
    fn result_from(gt: &AnnotatedImage) -> CascadeResult {
        let mut detections = BTreeMap::new();
        let mut masks = BTreeMap::new();
        for (label, mask) in &gt.annotations {
            detections.insert(
                *label,
                Detection {
                    label: *label,
                    box_px: box_from_mask(mask).unwrap(),
                    score: 1.0,
                    soft_mask: ndarray::Array2::ones((1, 1)),
                },
            );
            masks.insert(*label, mask.clone());
        }
        CascadeResult {
            id: gt.id.clone(),
            detections,
            masks,
            trace: Vec::new(),
            warnings: Vec::new(),
            elapsed: Duration::ZERO,
        }
    }

    #[test]
    fn pixel_metrics_match_confusion_matrix_oracle() {
        // 4x4 closed-form case: 8 GT pixels, prediction hits 4 of them plus
        // 2 background pixels.
        let gt = mask_from(
            (4, 4),
            &[(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1), (3, 0), (3, 1)],
        );
        let pred = mask_from((4, 4), &[(0, 0), (0, 1), (1, 0), (1, 1), (0, 3), (1, 3)]);
        let m = pixel_classification_metrics(&pred, &gt).unwrap();
        assert_eq!(m.accuracy, 10.0 / 16.0);
        assert_eq!(m.sensitivity, 0.5);
        assert_eq!(m.specificity, 0.75);
        assert_eq!(
            (m.true_positive, m.true_negative, m.false_positive, m.false_negative),
            (4, 6, 2, 4)
        );
    }

    #[test]
    fn pixel_metrics_identity_and_complement() {
        let gt = mask_from((4, 4), &[(0, 0), (1, 1), (2, 2)]);
        let same = pixel_classification_metrics(&gt, &gt).unwrap();
        assert_eq!((same.accuracy, same.sensitivity, same.specificity), (1.0, 1.0, 1.0));
        let complement = gt.mapv(|v| 1 - v);
        let opp = pixel_classification_metrics(&complement, &gt).unwrap();
        assert_eq!((opp.accuracy, opp.sensitivity, opp.specificity), (0.0, 0.0, 0.0));
    }

    #[test]
    fn pixel_metrics_reject_degenerate_gt_and_shape_mismatch() {
        let empty = InstanceMask::zeros((4, 4));
        let full = empty.mapv(|_| 1);
        let pred = mask_from((4, 4), &[(0, 0)]);
        assert!(matches!(
            pixel_classification_metrics(&pred, &empty),
            Err(EvaluationError::DegenerateGroundTruth(0, 16))
        ));
        assert!(matches!(
            pixel_classification_metrics(&pred, &full),
            Err(EvaluationError::DegenerateGroundTruth(16, 16))
        ));
        let small = InstanceMask::zeros((3, 4));
        assert!(matches!(
            pixel_classification_metrics(&small, &full),
            Err(EvaluationError::ShapeMismatch(_, _))
        ));
    }

    #[test]
    fn pixel_metrics_match_brute_force_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let gt = InstanceMask::from_shape_fn((12, 9), |_| rng.gen_bool(0.4) as u8);
            let pred = InstanceMask::from_shape_fn((12, 9), |_| rng.gen_bool(0.4) as u8);
            let pos = gt.iter().filter(|&&v| v != 0).count();
            let Ok(m) = pixel_classification_metrics(&pred, &gt) else {
                assert!(pos == 0 || pos == gt.len());
                continue;
            };
            // Independent recount, pixel by pixel.
            let (mut tp, mut tn, mut fp, mut fne) = (0, 0, 0, 0);
            for (g, p) in gt.iter().zip(pred.iter()) {
                match (*g != 0, *p != 0) {
                    (true, true) => tp += 1,
                    (false, false) => tn += 1,
                    (false, true) => fp += 1,
                    (true, false) => fne += 1,
                }
            }
            assert_eq!(m.true_positive, tp);
            assert_eq!(m.accuracy, (tp + tn) as f64 / 108.0);
            assert_eq!(m.sensitivity, tp as f64 / (tp + fne) as f64);
            assert_eq!(m.specificity, tn as f64 / (tn + fp) as f64);
        }
    }

    #[test]
    fn mean_std_closed_forms() {
        let single = MeanStd::from_samples(&[0.8]);
        assert_eq!((single.mean, single.std), (0.8, 0.0));
        let two = MeanStd::from_samples(&[0.6, 1.0]);
        assert!((two.mean - 0.8).abs() < 1e-12);
        assert!((two.std - 0.2).abs() < 1e-12);
        let sample = MeanStd::from_samples_with(&[0.6, 1.0], true);
        assert!((sample.std - 0.08f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let img = generate_phantom(3, &PhantomConfig::default()).unwrap();
        let result = result_from(&img);
        let eval = evaluate_image(&img, &result, 0.05).unwrap();
        assert_eq!(eval.ribs.len(), 18);
        for s in eval.ribs.values() {
            assert_eq!(s.detection_dice, 1.0);
            assert_eq!(s.segmentation_dice, 1.0);
            assert!(!s.missed);
        }
        assert_eq!(eval.false_detections, 0);
        assert_eq!(eval.pixel.accuracy, 1.0);

        let summary = aggregate(&[eval]);
        assert_eq!(summary.left.detection.mean, 1.0);
        assert_eq!(summary.right.segmentation.mean, 1.0);
        assert_eq!(summary.pooled.detection.n, 18);
        assert_eq!(summary.missed_instances, 0);
    }

    #[test]
    fn below_floor_predictions_are_misses() {
        let img = generate_phantom(4, &PhantomConfig::default()).unwrap();
        let result = result_from(&img);
        // Floor above every confidence: everything becomes a miss.
        let eval = evaluate_image(&img, &result, 1.5).unwrap();
        assert!(eval.ribs.values().all(|s| s.missed && s.segmentation_dice == 0.0));
        assert_eq!(aggregate(&[eval]).missed_instances, 18);
    }

    #[test]
    fn id_mismatch_is_rejected() {
        let img = generate_phantom(5, &PhantomConfig::default()).unwrap();
        let mut result = result_from(&img);
        result.id = "someone_else".into();
        assert!(matches!(
            evaluate_image(&img, &result, 0.05),
            Err(EvaluationError::IdMismatch(_, _))
        ));
    }

    #[test]
    fn aggregate_means_stay_within_sample_range() {
        let img = generate_phantom(6, &PhantomConfig::default()).unwrap();
        let mut result = result_from(&img);
        // Degrade one side's masks to introduce spread.
        for (label, mask) in result.masks.iter_mut() {
            if label.side == Side::Left {
                let half = mask.nrows() / 2;
                for r in 0..half {
                    for c in 0..mask.ncols() {
                        mask[(r, c)] = 0;
                    }
                }
            }
        }
        let eval = evaluate_image(&img, &result, 0.05).unwrap();
        let dices: Vec<f64> = eval.ribs.values().map(|s| s.segmentation_dice).collect();
        let (lo, hi) = dices
            .iter()
            .fold((1.0f64, 0.0f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
        let summary = aggregate(&[eval]);
        assert!(summary.pooled.segmentation.mean >= lo);
        assert!(summary.pooled.segmentation.mean <= hi);
    }

    #[test]
    fn report_has_table_shape_and_benchmark_row() {
        let img = generate_phantom(7, &PhantomConfig::default()).unwrap();
        let eval = evaluate_image(&img, &result_from(&img), 0.05).unwrap();
        let report = render_report(&aggregate(&[eval]));
        for needle in [
            "| Left |",
            "| Right |",
            "| Both |",
            "Detection (box Dice)",
            "Segmentation (mask Dice)",
            "row-average rule",
            "0.841",
            "0.850",
            "0.95 / 0.82 / 0.98",
            "0.86 / 0.75 / 0.92",
        ] {
            assert!(report.contains(needle), "report lacks {needle:?}:\n{report}");
        }
    }

    #[test]
    fn metrics_json_roundtrip_is_exact() {
        let img = generate_phantom(8, &PhantomConfig::default()).unwrap();
        let eval = evaluate_image(&img, &result_from(&img), 0.05).unwrap();
        let summary = aggregate(&[eval.clone()]);
        let text = serde_json::to_string(&summary).unwrap();
        let back: SummaryTable = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
        let text = serde_json::to_string(&eval).unwrap();
        let back: ImageEvaluation = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn overlay_is_deterministic_and_logs_all_labels() {
        let img = generate_phantom(9, &PhantomConfig::default()).unwrap();
        let boxes: BTreeMap<RibLabel, PixelBox> = img
            .annotations
            .iter()
            .map(|(l, m)| (*l, box_from_mask(m).unwrap()))
            .collect();
        let a = render_overlay(&img.image, &img.annotations, &boxes);
        let b = render_overlay(&img.image, &img.annotations, &boxes);
        assert_eq!(a.rgb, b.rgb);
        for label in RibLabel::all() {
            assert!(
                a.draw_log.iter().any(|l| l == &format!("text {label}")),
                "missing label {label}"
            );
        }
    }

    #[test]
    fn empty_overlay_reencodes_the_grayscale_image() {
        let img = generate_phantom(10, &PhantomConfig::default()).unwrap();
        let overlay = render_overlay(&img.image, &BTreeMap::new(), &BTreeMap::new());
        assert!(overlay.draw_log.is_empty());
        for ((r, c), &v) in img.image.data.indexed_iter() {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            assert_eq!(overlay.rgb[(r, c, 0)], g);
            assert_eq!(overlay.rgb[(r, c, 1)], g);
            assert_eq!(overlay.rgb[(r, c, 2)], g);
        }
    }

    #[test]
    fn overlay_png_bytes_are_stable() {
        let img = generate_phantom(11, &PhantomConfig { size: 96, ..PhantomConfig::default() });
        // 96 px phantoms can fail on rib overlap; fall back to default size.
        let img = match img {
            Ok(i) => i,
            Err(_) => generate_phantom(11, &PhantomConfig::default()).unwrap(),
        };
        let boxes: BTreeMap<RibLabel, PixelBox> = img
            .annotations
            .iter()
            .map(|(l, m)| (*l, box_from_mask(m).unwrap()))
            .collect();
        let overlay = render_overlay(&img.image, &img.annotations, &boxes);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        save_overlay_png(&overlay, &p1).unwrap();
        save_overlay_png(&overlay, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}

//! Dataset types, ingestion, resampling, augmentation and fold splitting.
//!
//! Dataset directory layout:
//! `<root>/<image_id>/image.png` (16-bit grayscale),
//! `<root>/<image_id>/masks/{left|right}_{1..9}.png` (8-bit, 0/255),
//! `<root>/<image_id>/meta.json` with `{ "pixel_spacing_mm": float, "id": string }`.

pub mod phantom;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::InstanceMask;

pub use phantom::{generate_phantom, PhantomConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("image {id}: {reason}")]
    InvalidImage { id: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    BadFile { path: String, reason: String },
    #[error("resampling {id} to {target} mm would shrink it below 64 px ({rows}x{cols})")]
    TooSmallAfterResample {
        id: String,
        target: f64,
        rows: usize,
        cols: usize,
    },
    #[error("need at least {k} ids for {k} folds, got {n}")]
    TooFewForFolds { n: usize, k: usize },
    #[error("phantom config: rib spacing {spacing:.1} px is below the maximum band thickness {thickness} px; ribs would overlap")]
    RibsWouldOverlap { spacing: f64, thickness: usize },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Patient side. In a PA radiograph the patient's right side appears on the
/// viewer's left; the phantom generator follows that convention.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    pub fn letter(&self) -> char {
        match self {
            Side::Left => 'L',
            Side::Right => 'R',
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// Identity of a rib instance: side plus anatomical index 1..9.
/// Serializes as its display form ("L3"), so it can key JSON maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RibLabel {
    pub side: Side,
    pub index: u8,
}

impl RibLabel {
    pub const MAX_INDEX: u8 = 9;

    pub fn new(side: Side, index: u8) -> Option<Self> {
        (1..=Self::MAX_INDEX)
            .contains(&index)
            .then_some(Self { side, index })
    }

    /// All 18 labels in cascade order: rib 1 left, rib 1 right, rib 2 left, ...
    pub fn all() -> impl Iterator<Item = RibLabel> {
        (1..=Self::MAX_INDEX).flat_map(|i| {
            Side::BOTH
                .into_iter()
                .map(move |s| RibLabel { side: s, index: i })
        })
    }
}

impl fmt::Display for RibLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.side.letter(), self.index)
    }
}

impl std::str::FromStr for RibLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || format!("{s:?} is not a rib label (expected e.g. \"L3\")");
        let mut chars = s.chars();
        let side = match chars.next() {
            Some('L') => Side::Left,
            Some('R') => Side::Right,
            _ => return Err(err()),
        };
        let index: u8 = chars.as_str().parse().map_err(|_| err())?;
        RibLabel::new(side, index).ok_or_else(err)
    }
}

impl Serialize for RibLabel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RibLabel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A grayscale radiograph with isotropic physical pixel spacing.
#[derive(Debug, Clone)]
pub struct GrayImage {
    /// Intensities in `[0,1]`, `(rows, cols)` layout.
    pub data: Array2<f64>,
    /// Millimetres per pixel.
    pub pixel_spacing_mm: f64,
}

/// An image together with its per-rib ground-truth masks.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub id: String,
    pub image: GrayImage,
    pub annotations: BTreeMap<RibLabel, InstanceMask>,
}

impl AnnotatedImage {
    /// Check the structural invariants: matching shapes, nonempty masks, and
    /// adjacent same-side overlap bounded by 20% of either mask.
    pub fn validate(&self) -> Result<(), DataError> {
        let shape = self.image.data.dim();
        if shape.0 < 64 || shape.1 < 64 {
            return Err(self.invalid(format!("image {}x{} below 64 px minimum", shape.0, shape.1)));
        }
        if self.image.pixel_spacing_mm <= 0.0 {
            return Err(self.invalid("pixel spacing must be positive".into()));
        }
        if self.image.data.iter().any(|v| !v.is_finite()) {
            return Err(self.invalid("non-finite intensity".into()));
        }
        for (label, mask) in &self.annotations {
            if mask.dim() != shape {
                return Err(self.invalid(format!(
                    "mask {label} shape {:?} does not match image {:?}",
                    mask.dim(),
                    shape
                )));
            }
            if mask.iter().all(|&v| v == 0) {
                return Err(self.invalid(format!("mask {label} is empty")));
            }
        }
        for side in Side::BOTH {
            for i in 1..RibLabel::MAX_INDEX {
                let a = RibLabel { side, index: i };
                let b = RibLabel { side, index: i + 1 };
                if let (Some(ma), Some(mb)) = (self.annotations.get(&a), self.annotations.get(&b))
                {
                    let inter = ma
                        .iter()
                        .zip(mb.iter())
                        .filter(|(&x, &y)| x != 0 && y != 0)
                        .count();
                    let na = ma.iter().filter(|&&v| v != 0).count();
                    let nb = mb.iter().filter(|&&v| v != 0).count();
                    if inter as f64 > 0.2 * na.min(nb) as f64 {
                        return Err(self.invalid(format!(
                            "masks {a} and {b} overlap by {inter} px (>20% of smaller)"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn invalid(&self, reason: String) -> DataError {
        DataError::InvalidImage {
            id: self.id.clone(),
            reason,
        }
    }
}

/// Assignment of image ids to cross-validation folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_ids(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn training_ids(&self, held_out: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f != held_out)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Deterministic seeded shuffle followed by round-robin assignment.
pub fn split_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldSplit, DataError> {
    if ids.len() < k || k == 0 {
        return Err(DataError::TooFewForFolds { n: ids.len(), k });
    }
    let mut sorted: Vec<String> = ids.to_vec();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates on the sorted list so the split depends only on (ids, seed).
    for i in (1..sorted.len()).rev() {
        let j = rng.gen_range(0..=i);
        sorted.swap(i, j);
    }
    let assignments = sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % k))
        .collect();
    Ok(FoldSplit { k, assignments })
}

/// Bilinear resampling of the image (nearest-neighbor for masks) so that the
/// output pixel spacing equals `target_spacing`. An image already at the
/// target spacing is returned unchanged.
pub fn resample_to_spacing(
    img: &AnnotatedImage,
    target_spacing: f64,
) -> Result<AnnotatedImage, DataError> {
    let spacing = img.image.pixel_spacing_mm;
    if (spacing - target_spacing).abs() < 1e-9 {
        return Ok(img.clone());
    }
    let scale = spacing / target_spacing;
    let (rows, cols) = img.image.data.dim();
    let new_rows = (rows as f64 * scale).round() as usize;
    let new_cols = (cols as f64 * scale).round() as usize;
    if new_rows < 64 || new_cols < 64 {
        return Err(DataError::TooSmallAfterResample {
            id: img.id.clone(),
            target: target_spacing,
            rows: new_rows,
            cols: new_cols,
        });
    }

    let mut data = Array2::<f64>::zeros((new_rows, new_cols));
    for r in 0..new_rows {
        for c in 0..new_cols {
            let u = (c as f64 + 0.5) / new_cols as f64;
            let v = (r as f64 + 0.5) / new_rows as f64;
            data[(r, c)] = crate::geometry::sample_bilinear(&img.image.data, u, v);
        }
    }

    let mut annotations = BTreeMap::new();
    for (label, mask) in &img.annotations {
        let mut out = Array2::<u8>::zeros((new_rows, new_cols));
        for r in 0..new_rows {
            for c in 0..new_cols {
                let sr = (((r as f64 + 0.5) / scale) as usize).min(rows - 1);
                let sc = (((c as f64 + 0.5) / scale) as usize).min(cols - 1);
                out[(r, c)] = mask[(sr, sc)];
            }
        }
        if out.iter().any(|&v| v != 0) {
            annotations.insert(*label, out);
        }
    }

    Ok(AnnotatedImage {
        id: img.id.clone(),
        image: GrayImage {
            data,
            pixel_spacing_mm: target_spacing,
        },
        annotations,
    })
}

/// Parameters of one affine augmentation: rotation about the image center,
/// isotropic scale, translation in pixels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotation_deg: 0.0,
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
    };
}

/// Ranges the random augmentation draws from; fractions are of each image dim.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_translation_frac: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            max_rotation_deg: 10.0,
            scale_min: 0.9,
            scale_max: 1.1,
            max_translation_frac: 0.05,
        }
    }
}

/// Apply an explicit affine map: image bilinearly, masks nearest-neighbor.
/// Masks emptied by the transform are dropped with a warning.
pub fn apply_affine(img: &AnnotatedImage, params: &AffineParams) -> (AnnotatedImage, Vec<String>) {
    let (rows, cols) = img.image.data.dim();
    let (cx, cy) = (cols as f64 / 2.0, rows as f64 / 2.0);
    let theta = params.rotation_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let s = params.scale;

    // Inverse map: output pixel -> source position.
    let inverse = |x: f64, y: f64| -> (f64, f64) {
        let dx = x - cx - params.tx;
        let dy = y - cy - params.ty;
        let sx = (cos * dx + sin * dy) / s + cx;
        let sy = (-sin * dx + cos * dy) / s + cy;
        (sx, sy)
    };

    let mut data = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let (sx, sy) = inverse(c as f64 + 0.5, r as f64 + 0.5);
            if sx >= 0.0 && sx < cols as f64 && sy >= 0.0 && sy < rows as f64 {
                data[(r, c)] = crate::geometry::sample_bilinear(
                    &img.image.data,
                    sx / cols as f64,
                    sy / rows as f64,
                );
            }
        }
    }

    let mut warnings = Vec::new();
    let mut annotations = BTreeMap::new();
    for (label, mask) in &img.annotations {
        let mut out = Array2::<u8>::zeros((rows, cols));
        for r in 0..rows {
            for c in 0..cols {
                let (sx, sy) = inverse(c as f64 + 0.5, r as f64 + 0.5);
                let sc = sx.floor();
                let sr = sy.floor();
                if sc >= 0.0 && sc < cols as f64 && sr >= 0.0 && sr < rows as f64 {
                    out[(r, c)] = mask[(sr as usize, sc as usize)];
                }
            }
        }
        if out.iter().any(|&v| v != 0) {
            annotations.insert(*label, out);
        } else {
            warnings.push(format!("{}: mask {label} emptied by affine transform", img.id));
        }
    }

    (
        AnnotatedImage {
            id: img.id.clone(),
            image: GrayImage {
                data,
                pixel_spacing_mm: img.image.pixel_spacing_mm,
            },
            annotations,
        },
        warnings,
    )
}

/// Draw one random affine map from `ranges` and apply it.
pub fn augment_affine(
    img: &AnnotatedImage,
    seed: u64,
    ranges: &AugmentRanges,
) -> (AnnotatedImage, Vec<String>) {
    let (rows, cols) = img.image.data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AffineParams {
        rotation_deg: rng.gen_range(-ranges.max_rotation_deg..=ranges.max_rotation_deg),
        scale: rng.gen_range(ranges.scale_min..=ranges.scale_max),
        tx: rng.gen_range(-ranges.max_translation_frac..=ranges.max_translation_frac)
            * cols as f64,
        ty: rng.gen_range(-ranges.max_translation_frac..=ranges.max_translation_frac)
            * rows as f64,
    };
    apply_affine(img, &params)
}

#[derive(Serialize, Deserialize)]
struct Meta {
    pixel_spacing_mm: f64,
    id: String,
}

/// Quantize an intensity in `[0,1]` onto the 16-bit grid used on disk.
pub fn quantize_u16(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

pub fn save_image(img: &AnnotatedImage, root: &Path) -> Result<(), DataError> {
    let dir = root.join(&img.id);
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&masks_dir).map_err(|e| io_err(&masks_dir, e))?;

    let (rows, cols) = img.image.data.dim();
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(cols as u32, rows as u32);
    for (r, row) in img.image.data.outer_iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            buf.put_pixel(c as u32, r as u32, image::Luma([(v.clamp(0.0, 1.0) * 65535.0).round() as u16]));
        }
    }
    let img_path = dir.join("image.png");
    buf.save(&img_path).map_err(|e| DataError::BadFile {
        path: img_path.display().to_string(),
        reason: e.to_string(),
    })?;

    for (label, mask) in &img.annotations {
        let mut mbuf =
            image::ImageBuffer::<image::Luma<u8>, Vec<u8>>::new(cols as u32, rows as u32);
        for ((r, c), &v) in mask.indexed_iter() {
            mbuf.put_pixel(c as u32, r as u32, image::Luma([if v != 0 { 255 } else { 0 }]));
        }
        let mpath = masks_dir.join(format!("{}_{}.png", label.side.as_str(), label.index));
        mbuf.save(&mpath).map_err(|e| DataError::BadFile {
            path: mpath.display().to_string(),
            reason: e.to_string(),
        })?;
    }

    let meta = Meta {
        pixel_spacing_mm: img.image.pixel_spacing_mm,
        id: img.id.clone(),
    };
    let meta_path = dir.join("meta.json");
    std::fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )
    .map_err(|e| io_err(&meta_path, e))?;
    Ok(())
}

pub fn save_dataset(dataset: &[AnnotatedImage], root: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    for img in dataset {
        save_image(img, root)?;
    }
    Ok(())
}

pub fn load_image(dir: &Path) -> Result<AnnotatedImage, DataError> {
    let meta_path = dir.join("meta.json");
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&meta_text).map_err(|e| DataError::BadFile {
        path: meta_path.display().to_string(),
        reason: e.to_string(),
    })?;

    let img_path = dir.join("image.png");
    let dyn_img = image::open(&img_path).map_err(|e| DataError::BadFile {
        path: img_path.display().to_string(),
        reason: e.to_string(),
    })?;
    let gray = dyn_img.into_luma16();
    let (cols, rows) = (gray.width() as usize, gray.height() as usize);
    let mut data = Array2::<f64>::zeros((rows, cols));
    for (c, r, p) in gray.enumerate_pixels() {
        data[(r as usize, c as usize)] = p.0[0] as f64 / 65535.0;
    }

    let mut annotations = BTreeMap::new();
    let masks_dir = dir.join("masks");
    for label in RibLabel::all() {
        let mpath = masks_dir.join(format!("{}_{}.png", label.side.as_str(), label.index));
        if !mpath.exists() {
            continue;
        }
        let m = image::open(&mpath)
            .map_err(|e| DataError::BadFile {
                path: mpath.display().to_string(),
                reason: e.to_string(),
            })?
            .into_luma8();
        if (m.width() as usize, m.height() as usize) != (cols, rows) {
            return Err(DataError::BadFile {
                path: mpath.display().to_string(),
                reason: format!(
                    "mask {}x{} does not match image {}x{}",
                    m.width(),
                    m.height(),
                    cols,
                    rows
                ),
            });
        }
        let mut mask = Array2::<u8>::zeros((rows, cols));
        for (c, r, p) in m.enumerate_pixels() {
            // Any nonzero value (e.g. 255) loads as foreground 1.
            mask[(r as usize, c as usize)] = (p.0[0] != 0) as u8;
        }
        annotations.insert(label, mask);
    }

    let out = AnnotatedImage {
        id: meta.id,
        image: GrayImage {
            data,
            pixel_spacing_mm: meta.pixel_spacing_mm,
        },
        annotations,
    };
    out.validate()?;
    Ok(out)
}

pub fn load_dataset(root: &Path) -> Result<Vec<AnnotatedImage>, DataError> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| io_err(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_image(d)).collect()
}

/// Hex SHA-256 over the sorted image ids; used for anchor and checkpoint
/// lineage.
pub fn dataset_hash(dataset: &[AnnotatedImage]) -> String {
    let mut ids: Vec<&str> = dataset.iter().map(|i| i.id.as_str()).collect();
    ids.sort();
    hash_ids(&ids)
}

pub fn hash_ids<S: AsRef<str>>(sorted_ids: &[S]) -> String {
    let mut hasher = Sha256::new();
    for id in sorted_ids {
        hasher.update(id.as_ref().as_bytes());
        hasher.update([0u8]);
    }
    format!("{:x}", hasher.finalize())
}

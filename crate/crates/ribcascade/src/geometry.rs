//! Boxes, binary masks and the overlap metrics everything else consumes.
//!
//! Coordinate convention, used everywhere in this crate: origin at the
//! top-left corner, `x` indexes columns, `y` indexes rows, and boxes are
//! half-open `[min, max)` intervals. A pixel `(row r, col c)` is covered by
//! the box `(c, r, c + 1, r + 1)`.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid box ({0}, {1}, {2}, {3}): min must be < max and all coordinates finite")]
    InvalidBox(f64, f64, f64, f64),
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("both masks are empty; Dice is undefined")]
    BothEmpty,
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("box ({0:.2}, {1:.2}, {2:.2}, {3:.2}) lies outside a {4}x{5} image")]
    BoxOutsideImage(f64, f64, f64, f64, usize, usize),
    #[error("degenerate (zero-area) box")]
    DegenerateBox,
}

/// Axis-aligned rectangle in pixel coordinates. Sub-pixel values are allowed.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PixelBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// Rectangle expressed as fractions of the image width and height.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormalizedBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl PixelBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite())
            || x_min >= x_max
            || y_min >= y_max
        {
            return Err(GeometryError::InvalidBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Intersection area of two boxes; 0 when they do not overlap.
    pub fn intersection_area(&self, other: &PixelBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    /// Clip to the image extent. Returns `None` when nothing remains.
    pub fn clip(&self, width: usize, height: usize) -> Option<PixelBox> {
        let x_min = self.x_min.max(0.0);
        let y_min = self.y_min.max(0.0);
        let x_max = self.x_max.min(width as f64);
        let y_max = self.y_max.min(height as f64);
        if x_min < x_max && y_min < y_max {
            Some(PixelBox { x_min, y_min, x_max, y_max })
        } else {
            None
        }
    }
}

impl NormalizedBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let ok = x_min.is_finite()
            && y_min.is_finite()
            && x_max.is_finite()
            && y_max.is_finite()
            && (0.0..1.0).contains(&x_min)
            && (0.0..1.0).contains(&y_min)
            && x_min < x_max
            && y_min < y_max
            && x_max <= 1.0
            && y_max <= 1.0;
        if !ok {
            return Err(GeometryError::InvalidBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    /// (cx, cy, w, h) parameterization used for clustering and shift coding.
    pub fn to_cxcywh(&self) -> [f64; 4] {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
            self.x_max - self.x_min,
            self.y_max - self.y_min,
        ]
    }

    pub fn from_cxcywh(v: [f64; 4]) -> Result<Self, GeometryError> {
        let [cx, cy, w, h] = v;
        NormalizedBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }
}

/// Binary instance mask, same shape as its parent image; `(rows, cols)` layout.
pub type InstanceMask = Array2<u8>;

/// Dice coefficient of two binary masks: `2|a∩b| / (|a|+|b|)`.
pub fn dice_mask(a: &InstanceMask, b: &InstanceMask) -> Result<f64, GeometryError> {
    if a.dim() != b.dim() {
        return Err(GeometryError::ShapeMismatch(a.dim(), b.dim()));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let x = (x != 0) as usize;
        let y = (y != 0) as usize;
        inter += x & y;
        total += x + y;
    }
    if total == 0 {
        return Err(GeometryError::BothEmpty);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Dice of two rectangles treated as continuous areas.
pub fn dice_box(a: &PixelBox, b: &PixelBox) -> Result<f64, GeometryError> {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return Err(GeometryError::DegenerateBox);
    }
    Ok(2.0 * a.intersection_area(b) / (a.area() + b.area()))
}

/// Intersection over union of two rectangles as continuous areas.
pub fn iou_box(a: &PixelBox, b: &PixelBox) -> Result<f64, GeometryError> {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return Err(GeometryError::DegenerateBox);
    }
    let inter = a.intersection_area(b);
    Ok(inter / (a.area() + b.area() - inter))
}

pub fn normalize_box(
    b: &PixelBox,
    width: usize,
    height: usize,
) -> Result<NormalizedBox, GeometryError> {
    let (w, h) = (width as f64, height as f64);
    if b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > w || b.y_max > h {
        return Err(GeometryError::BoxOutsideImage(
            b.x_min, b.y_min, b.x_max, b.y_max, width, height,
        ));
    }
    NormalizedBox::new(b.x_min / w, b.y_min / h, b.x_max / w, b.y_max / h)
}

pub fn denormalize_box(b: &NormalizedBox, width: usize, height: usize) -> PixelBox {
    let (w, h) = (width as f64, height as f64);
    PixelBox {
        x_min: b.x_min * w,
        y_min: b.y_min * h,
        x_max: b.x_max * w,
        y_max: b.y_max * h,
    }
}

/// Tightest axis-aligned box containing all foreground pixels.
///
/// Extents are inclusive on the min side and exclusive (+1) on the max side,
/// so a single foreground pixel yields a box of area 1.
pub fn box_from_mask(m: &InstanceMask) -> Result<PixelBox, GeometryError> {
    let mut min_r = usize::MAX;
    let mut min_c = usize::MAX;
    let mut max_r = 0usize;
    let mut max_c = 0usize;
    let mut any = false;
    for ((r, c), &v) in m.indexed_iter() {
        if v != 0 {
            any = true;
            min_r = min_r.min(r);
            min_c = min_c.min(c);
            max_r = max_r.max(r);
            max_c = max_c.max(c);
        }
    }
    if !any {
        return Err(GeometryError::EmptyMask);
    }
    PixelBox::new(
        min_c as f64,
        min_r as f64,
        (max_c + 1) as f64,
        (max_r + 1) as f64,
    )
}

/// Result of pasting a soft mask: the binary mask plus any warnings raised.
pub struct PastedMask {
    pub mask: InstanceMask,
    pub warnings: Vec<String>,
}

/// Bilinearly resize a soft mask into the box extent, threshold at 0.5
/// (ties map to foreground), zero elsewhere.
///
/// A box reaching outside the image is clipped with a warning rather than
/// rejected.
pub fn paste_mask(
    soft: &Array2<f64>,
    b: &PixelBox,
    image_shape: (usize, usize),
) -> Result<PastedMask, GeometryError> {
    let (rows, cols) = image_shape;
    let mut warnings = Vec::new();
    let clipped = match b.clip(cols, rows) {
        Some(c) => {
            if c != *b {
                warnings.push(format!(
                    "box ({:.2}, {:.2}, {:.2}, {:.2}) clipped to {}x{} image",
                    b.x_min, b.y_min, b.x_max, b.y_max, cols, rows
                ));
            }
            c
        }
        None => {
            return Err(GeometryError::BoxOutsideImage(
                b.x_min, b.y_min, b.x_max, b.y_max, cols, rows,
            ))
        }
    };
    let mut mask = Array2::<u8>::zeros(image_shape);
    let r0 = clipped.y_min.floor().max(0.0) as usize;
    let r1 = (clipped.y_max.ceil() as usize).min(rows);
    let c0 = clipped.x_min.floor().max(0.0) as usize;
    let c1 = (clipped.x_max.ceil() as usize).min(cols);
    for r in r0..r1 {
        for c in c0..c1 {
            let px = c as f64 + 0.5;
            let py = r as f64 + 0.5;
            // Pixel centers outside the (unclipped) box stay background.
            if px < b.x_min || px >= b.x_max || py < b.y_min || py >= b.y_max {
                continue;
            }
            let u = (px - b.x_min) / b.width();
            let v = (py - b.y_min) / b.height();
            if sample_bilinear(soft, u, v) >= 0.5 {
                mask[(r, c)] = 1;
            }
        }
    }
    Ok(PastedMask { mask, warnings })
}

/// Bilinear sample of a 2D array at fractional position `(u, v)` in `[0,1]²`,
/// with sample points at pixel centers and edge clamping.
pub fn sample_bilinear(a: &Array2<f64>, u: f64, v: f64) -> f64 {
    let (rows, cols) = a.dim();
    let x = u * cols as f64 - 0.5;
    let y = v * rows as f64 - 0.5;
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let cidx = |i: f64, n: usize| (i.max(0.0) as usize).min(n - 1);
    let (c0, c1) = (cidx(x0, cols), cidx(x0 + 1.0, cols));
    let (r0, r1) = (cidx(y0, rows), cidx(y0 + 1.0, rows));
    let top = a[(r0, c0)] * (1.0 - fx) + a[(r0, c1)] * fx;
    let bot = a[(r1, c0)] * (1.0 - fx) + a[(r1, c1)] * fx;
    top * (1.0 - fy) + bot * fy
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn mask_count(m: &InstanceMask) -> usize {
        m.iter().filter(|&&v| v != 0).count()
    }

    fn mask_from_rows(shape: (usize, usize), rows: std::ops::Range<usize>) -> InstanceMask {
        let mut m = Array2::zeros(shape);
        for r in rows {
            for c in 0..shape.1 {
                m[(r, c)] = 1;
            }
        }
        m
    }

    #[test]
    fn dice_mask_identity_and_disjoint() {
        let a = mask_from_rows((4, 4), 0..2);
        assert_eq!(dice_mask(&a, &a).unwrap(), 1.0);
        let b = mask_from_rows((4, 4), 2..4);
        assert_eq!(dice_mask(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn dice_mask_half_overlap() {
        // rows 0-1 vs rows 1-2 on a 4x4 grid: 2*4 / (8+8)
        let a = mask_from_rows((4, 4), 0..2);
        let b = mask_from_rows((4, 4), 1..3);
        assert_eq!(dice_mask(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn dice_mask_errors() {
        let a = Array2::<u8>::zeros((4, 4));
        assert!(matches!(dice_mask(&a, &a), Err(GeometryError::BothEmpty)));
        let b = Array2::<u8>::zeros((4, 5));
        assert!(matches!(
            dice_mask(&a, &b),
            Err(GeometryError::ShapeMismatch(_, _))
        ));
    }

    #[test]
    fn dice_box_cases() {
        let a = PixelBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert_eq!(dice_box(&a, &a).unwrap(), 1.0);
        let b = PixelBox::new(1.0, 0.0, 3.0, 2.0).unwrap();
        // intersection 2, areas 4+4
        assert_eq!(dice_box(&a, &b).unwrap(), 0.5);
        let c = PixelBox::new(5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(dice_box(&a, &c).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(PixelBox::new(1.0, 1.0, 1.0, 2.0).is_err());
        assert!(PixelBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn normalize_examples() {
        let b = PixelBox::new(0.0, 0.0, 500.0, 400.0).unwrap();
        let n = normalize_box(&b, 500, 400).unwrap();
        assert_eq!((n.x_min, n.y_min, n.x_max, n.y_max), (0.0, 0.0, 1.0, 1.0));

        let b = PixelBox::new(100.0, 50.0, 200.0, 150.0).unwrap();
        let n = normalize_box(&b, 500, 500).unwrap();
        assert!((n.x_min - 0.2).abs() < 1e-12);
        assert!((n.y_min - 0.1).abs() < 1e-12);
        assert!((n.x_max - 0.4).abs() < 1e-12);
        assert!((n.y_max - 0.3).abs() < 1e-12);

        let out = PixelBox::new(-1.0, 0.0, 10.0, 10.0).unwrap();
        assert!(normalize_box(&out, 500, 500).is_err());
    }

    #[test]
    fn box_from_mask_examples() {
        let mut m = Array2::<u8>::zeros((10, 10));
        m[(5, 3)] = 1; // row 5, col 3
        let b = box_from_mask(&m).unwrap();
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (3.0, 5.0, 4.0, 6.0));

        let full = Array2::<u8>::ones((6, 8));
        let b = box_from_mask(&full).unwrap();
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (0.0, 0.0, 8.0, 6.0));

        assert!(box_from_mask(&Array2::<u8>::zeros((4, 4))).is_err());
    }

    #[test]
    fn box_from_mask_l_shape() {
        // L-shape occupying rows 2-6, cols 1-4; independent min/max scan oracle.
        let mut m = Array2::<u8>::zeros((10, 10));
        for r in 2..=6 {
            m[(r, 1)] = 1;
        }
        for c in 1..=4 {
            m[(6, c)] = 1;
        }
        let (mut mnr, mut mxr, mut mnc, mut mxc) = (usize::MAX, 0, usize::MAX, 0);
        for ((r, c), &v) in m.indexed_iter() {
            if v != 0 {
                mnr = mnr.min(r);
                mxr = mxr.max(r);
                mnc = mnc.min(c);
                mxc = mxc.max(c);
            }
        }
        let b = box_from_mask(&m).unwrap();
        assert_eq!(b.x_min, mnc as f64);
        assert_eq!(b.y_min, mnr as f64);
        assert_eq!(b.x_max, (mxc + 1) as f64);
        assert_eq!(b.y_max, (mxr + 1) as f64);
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (1.0, 2.0, 5.0, 7.0));
    }

    #[test]
    fn paste_mask_fill_and_empty() {
        let soft = Array2::<f64>::ones((28, 28));
        let b = PixelBox::new(2.0, 3.0, 8.0, 9.0).unwrap();
        let p = paste_mask(&soft, &b, (16, 16)).unwrap();
        assert!(p.warnings.is_empty());
        let got = box_from_mask(&p.mask).unwrap();
        assert_eq!(
            (got.x_min, got.y_min, got.x_max, got.y_max),
            (2.0, 3.0, 8.0, 9.0)
        );

        let zeros = Array2::<f64>::zeros((28, 28));
        let p = paste_mask(&zeros, &b, (16, 16)).unwrap();
        assert_eq!(p.mask.iter().filter(|&&v| v != 0).count(), 0);
    }

    #[test]
    fn paste_mask_quadrant_matches_bilinear_oracle() {
        let soft = arr2(&[[1.0, 0.0], [0.0, 0.0]]);
        let b = PixelBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let p = paste_mask(&soft, &b, (10, 10)).unwrap();
        // Direct per-pixel bilinear oracle at pixel centers.
        for r in 0..10 {
            for c in 0..10 {
                let u = (c as f64 + 0.5) / 10.0;
                let v = (r as f64 + 0.5) / 10.0;
                let expect = (sample_bilinear(&soft, u, v) >= 0.5) as u8;
                assert_eq!(p.mask[(r, c)], expect, "pixel ({r},{c})");
            }
        }
        // Foreground confined to the upper-left quadrant.
        for ((r, c), &v) in p.mask.indexed_iter() {
            if v != 0 {
                assert!(r < 5 && c < 5, "fg at ({r},{c})");
            }
        }
        assert!(mask_count(&p.mask) > 0);
    }

    #[test]
    fn paste_mask_clips_with_warning() {
        let soft = Array2::<f64>::ones((4, 4));
        let b = PixelBox::new(-2.0, -2.0, 4.0, 4.0).unwrap();
        let p = paste_mask(&soft, &b, (8, 8)).unwrap();
        assert_eq!(p.warnings.len(), 1);
        assert!(mask_count(&p.mask) > 0);
    }

    #[test]
    fn paste_then_box_recovers_box() {
        let soft = Array2::<f64>::ones((28, 28));
        let b = PixelBox::new(3.2, 4.7, 20.9, 30.1).unwrap();
        let p = paste_mask(&soft, &b, (40, 40)).unwrap();
        let got = box_from_mask(&p.mask).unwrap();
        assert!((got.x_min - b.x_min).abs() <= 1.0);
        assert!((got.y_min - b.y_min).abs() <= 1.0);
        assert!((got.x_max - b.x_max).abs() <= 1.0);
        assert!((got.y_max - b.y_max).abs() <= 1.0);
    }

    fn arb_mask() -> impl Strategy<Value = InstanceMask> {
        proptest::collection::vec(proptest::bool::weighted(0.3), 64)
            .prop_map(|bits| {
                Array2::from_shape_vec((8, 8), bits.into_iter().map(|b| b as u8).collect()).unwrap()
            })
    }

    proptest! {
        #[test]
        fn dice_mask_symmetric_and_bounded(a in arb_mask(), b in arb_mask()) {
            match (dice_mask(&a, &b), dice_mask(&b, &a)) {
                (Ok(x), Ok(y)) => {
                    prop_assert_eq!(x, y);
                    prop_assert!((0.0..=1.0).contains(&x));
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "symmetry broken on error path"),
            }
        }

        #[test]
        fn dice_mask_self_is_one(a in arb_mask()) {
            if mask_count(&a) > 0 {
                prop_assert_eq!(dice_mask(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn normalize_roundtrip(
            x0 in 0.0f64..200.0, y0 in 0.0f64..200.0,
            w in 1.0f64..100.0, h in 1.0f64..100.0,
        ) {
            let b = PixelBox::new(x0, y0, x0 + w, y0 + h).unwrap();
            let n = normalize_box(&b, 300, 300).unwrap();
            let back = denormalize_box(&n, 300, 300);
            prop_assert!((back.x_min - b.x_min).abs() < 1e-9);
            prop_assert!((back.y_min - b.y_min).abs() < 1e-9);
            prop_assert!((back.x_max - b.x_max).abs() < 1e-9);
            prop_assert!((back.y_max - b.y_max).abs() < 1e-9);
        }
    }
}

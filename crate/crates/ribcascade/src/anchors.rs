//! Dedicated anchor boxes estimated by Mean Shift clustering of normalized
//! ground-truth boxes.
//!
//! Every ground-truth box in the corpus is normalized per its image size,
//! expressed as a `(cx, cy, w, h)` point in the unit box space, and clustered
//! with a flat-kernel Mean Shift. The bandwidth is not a user input: the
//! target mode count (30 by default) is the specification, and the bandwidth
//! is solved for by bisection.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::AnnotatedImage;
use crate::geometry::{box_from_mask, normalize_box, NormalizedBox};

const CONVERGENCE_EPS: f64 = 1e-7;
const MAX_ITERS: usize = 500;

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("mean shift requires at least one point")]
    NoPoints,
    #[error("non-finite coordinate in input point {0}")]
    NonFinite(usize),
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error(
        "bandwidth bisection could not reach {target} modes in {iters} iterations; \
         achievable counts near the target: {achievable:?}"
    )]
    BisectionFailed {
        target: usize,
        iters: usize,
        achievable: Vec<usize>,
    },
    #[error("dataset yields {0} ground-truth boxes, need at least {1}")]
    TooFewBoxes(usize, usize),
    #[error("anchor file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("anchor file parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("anchor file has {0} boxes, expected {1}")]
    WrongCount(usize, usize),
    #[error("anchor file entry {index} is invalid: {reason}")]
    InvalidEntry { index: usize, reason: String },
    #[error("geometry error: {0}")]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// A normalized ground-truth box as a point in `(cx, cy, w, h)` space.
pub type BoxPoint = [f64; 4];

/// The dedicated anchors plus provenance.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub boxes: Vec<NormalizedBox>,
    pub bandwidth: f64,
    pub dataset_hash: String,
    /// Unix seconds; provenance only, never serialized into the anchor file.
    pub created_unix: u64,
}

/// On-disk format of `anchors.json`.
#[derive(Serialize, Deserialize)]
struct AnchorFile {
    count: usize,
    bandwidth: f64,
    boxes: Vec<[f64; 4]>,
    dataset_hash: String,
}

fn dist2(a: &BoxPoint, b: &BoxPoint) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn linf(a: &BoxPoint, b: &BoxPoint) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// One flat-kernel Mean Shift step from `p`: the mean of all points within
/// `bandwidth`. With a flat kernel the fixed points are exactly the local
/// means of the in-radius neighborhoods.
pub fn mean_shift_step(p: &BoxPoint, points: &[BoxPoint], bandwidth: f64) -> BoxPoint {
    let r2 = bandwidth * bandwidth;
    let mut sum = [0.0; 4];
    let mut n = 0usize;
    for q in points {
        if dist2(p, q) <= r2 {
            for k in 0..4 {
                sum[k] += q[k];
            }
            n += 1;
        }
    }
    if n == 0 {
        return *p;
    }
    sum.map(|s| s / n as f64)
}

fn converge(mut p: BoxPoint, points: &[BoxPoint], bandwidth: f64) -> BoxPoint {
    for _ in 0..MAX_ITERS {
        let next = mean_shift_step(&p, points, bandwidth);
        let moved = linf(&next, &p);
        p = next;
        if moved < CONVERGENCE_EPS {
            break;
        }
    }
    p
}

/// Mean Shift mode seeking with a flat kernel of radius `bandwidth`.
///
/// Every input point is iterated to convergence; modes closer than
/// `bandwidth / 2` are merged, weighted by basin size. Returns the distinct
/// modes ordered by basin size descending (ties broken by coordinates) plus
/// the per-point mode assignment.
pub fn mean_shift(
    points: &[BoxPoint],
    bandwidth: f64,
) -> Result<(Vec<BoxPoint>, Vec<usize>), AnchorError> {
    if points.is_empty() {
        return Err(AnchorError::NoPoints);
    }
    if !(bandwidth > 0.0) {
        return Err(AnchorError::BadBandwidth(bandwidth));
    }
    for (i, p) in points.iter().enumerate() {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(AnchorError::NonFinite(i));
        }
    }

    // Per-seed iteration is order-independent; collect preserves input order.
    let converged: Vec<BoxPoint> = points
        .par_iter()
        .map(|p| converge(*p, points, bandwidth))
        .collect();

    // Merge converged points closer than bandwidth/2, weighted by basin size.
    // Greedy in input order keeps the result deterministic.
    let merge_tol = bandwidth / 2.0;
    let mut modes: Vec<BoxPoint> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut assignment = vec![0usize; points.len()];
    for (i, c) in converged.iter().enumerate() {
        let found = modes
            .iter()
            .position(|m| dist2(m, c).sqrt() < merge_tol);
        match found {
            Some(j) => {
                let w = weights[j];
                for k in 0..4 {
                    modes[j][k] = (modes[j][k] * w + c[k]) / (w + 1.0);
                }
                weights[j] = w + 1.0;
                assignment[i] = j;
            }
            None => {
                modes.push(*c);
                weights.push(1.0);
                assignment[i] = modes.len() - 1;
            }
        }
    }
    Ok((modes, assignment))
}

fn count_modes(points: &[BoxPoint], bandwidth: f64) -> usize {
    mean_shift(points, bandwidth).map(|(m, _)| m.len()).unwrap_or(0)
}

/// Collect every ground-truth box of the dataset, normalized per its image
/// size, as `(cx, cy, w, h)` points. Pooled across all rib labels and sides.
pub fn collect_box_points(dataset: &[AnnotatedImage]) -> Result<Vec<BoxPoint>, AnchorError> {
    let mut out = Vec::new();
    for img in dataset {
        let (rows, cols) = img.image.data.dim();
        for mask in img.annotations.values() {
            let b = box_from_mask(mask)?;
            let n = normalize_box(&b, cols, rows)?;
            out.push(n.to_cxcywh());
        }
    }
    Ok(out)
}

/// Estimate `target_count` anchors from the dataset's ground-truth boxes.
///
/// Bisects the bandwidth on `[1e-3, 2.0]` until Mean Shift yields exactly
/// `target_count` modes; mode count is non-increasing in bandwidth, which is
/// what makes the bisection valid.
pub fn estimate_anchors(
    dataset: &[AnnotatedImage],
    target_count: usize,
) -> Result<AnchorSet, AnchorError> {
    let points = collect_box_points(dataset)?;
    estimate_anchors_from_points(&points, target_count, crate::dataio::dataset_hash(dataset))
}

pub fn estimate_anchors_from_points(
    points: &[BoxPoint],
    target_count: usize,
    dataset_hash: String,
) -> Result<AnchorSet, AnchorError> {
    if points.len() < target_count {
        return Err(AnchorError::TooFewBoxes(points.len(), target_count));
    }

    const MAX_BISECTIONS: usize = 60;
    let mut lo = 1e-3; // many modes
    let mut hi = 2.0; // few modes
    let mut achievable = std::collections::BTreeSet::new();

    let c_lo = count_modes(points, lo);
    let c_hi = count_modes(points, hi);
    achievable.insert(c_lo);
    achievable.insert(c_hi);

    let mut solution = None;
    if c_lo == target_count {
        solution = Some(lo);
    } else if c_hi == target_count {
        solution = Some(hi);
    } else if c_lo > target_count && c_hi < target_count {
        for _ in 0..MAX_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            let c = count_modes(points, mid);
            achievable.insert(c);
            if c == target_count {
                solution = Some(mid);
                break;
            } else if c > target_count {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }

    let bandwidth = solution.ok_or_else(|| AnchorError::BisectionFailed {
        target: target_count,
        iters: MAX_BISECTIONS,
        achievable: achievable.into_iter().collect(),
    })?;

    let (mut modes, _) = mean_shift(points, bandwidth)?;
    // Deterministic anchor order: (cy, cx) ascending.
    modes.sort_by(|a, b| (a[1], a[0]).partial_cmp(&(b[1], b[0])).unwrap());

    let mut boxes = Vec::with_capacity(modes.len());
    for m in &modes {
        // Modes can drift slightly past the unit square; clamp before
        // constructing the NormalizedBox.
        let x0 = (m[0] - 0.5 * m[2]).clamp(0.0, 1.0);
        let y0 = (m[1] - 0.5 * m[3]).clamp(0.0, 1.0);
        let x1 = (m[0] + 0.5 * m[2]).clamp(0.0, 1.0);
        let y1 = (m[1] + 0.5 * m[3]).clamp(0.0, 1.0);
        boxes.push(NormalizedBox::new(x0, y0, x1, y1)?);
    }

    Ok(AnchorSet {
        boxes,
        bandwidth,
        dataset_hash,
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    })
}

fn validate_boxes(raw: &[[f64; 4]]) -> Result<Vec<NormalizedBox>, AnchorError> {
    let mut boxes = Vec::with_capacity(raw.len());
    for (i, b) in raw.iter().enumerate() {
        let nb = NormalizedBox::new(b[0], b[1], b[2], b[3]).map_err(|e| {
            AnchorError::InvalidEntry {
                index: i,
                reason: e.to_string(),
            }
        })?;
        for (j, other) in boxes.iter().enumerate() {
            let a = nb.to_cxcywh();
            let o: &NormalizedBox = other;
            if linf(&a, &o.to_cxcywh()) <= 1e-6 {
                return Err(AnchorError::InvalidEntry {
                    index: i,
                    reason: format!("duplicate of entry {j}"),
                });
            }
        }
        boxes.push(nb);
    }
    Ok(boxes)
}

pub fn save_anchors(a: &AnchorSet, path: &Path) -> Result<(), AnchorError> {
    let file = AnchorFile {
        count: a.boxes.len(),
        bandwidth: a.bandwidth,
        boxes: a
            .boxes
            .iter()
            .map(|b| [b.x_min, b.y_min, b.x_max, b.y_max])
            .collect(),
        dataset_hash: a.dataset_hash.clone(),
    };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Load and validate an anchor file. `expected_count` is usually 30.
pub fn load_anchors(path: &Path, expected_count: usize) -> Result<AnchorSet, AnchorError> {
    let text = std::fs::read_to_string(path)?;
    let file: AnchorFile = serde_json::from_str(&text)?;
    if file.count != expected_count || file.boxes.len() != file.count {
        return Err(AnchorError::WrongCount(file.boxes.len(), expected_count));
    }
    let boxes = validate_boxes(&file.boxes)?;
    Ok(AnchorSet {
        boxes,
        bandwidth: file.bandwidth,
        dataset_hash: file.dataset_hash,
        created_unix: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noisy_cluster(
        rng: &mut ChaCha8Rng,
        center: BoxPoint,
        sigma: f64,
        n: usize,
    ) -> Vec<BoxPoint> {
        (0..n)
            .map(|_| {
                let mut p = center;
                for v in p.iter_mut() {
                    *v += rng.gen_range(-sigma..sigma);
                }
                p
            })
            .collect()
    }

    #[test]
    fn identical_points_give_single_mode() {
        let p = [0.4, 0.3, 0.2, 0.1];
        let pts = vec![p; 20];
        let (modes, assign) = mean_shift(&pts, 0.1).unwrap();
        assert_eq!(modes.len(), 1);
        assert!(linf(&modes[0], &p) < 1e-12);
        assert!(assign.iter().all(|&a| a == 0));
    }

    #[test]
    fn two_clusters_two_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c1 = [0.2, 0.2, 0.1, 0.05];
        let c2 = [0.8, 0.8, 0.1, 0.05];
        let mut pts = noisy_cluster(&mut rng, c1, 0.005, 40);
        pts.extend(noisy_cluster(&mut rng, c2, 0.005, 40));
        let (modes, _) = mean_shift(&pts, 0.1).unwrap();
        assert_eq!(modes.len(), 2);
        for c in [c1, c2] {
            assert!(
                modes.iter().any(|m| linf(m, &c) < 0.02),
                "no mode near {c:?}: {modes:?}"
            );
        }
    }

    #[test]
    fn huge_bandwidth_gives_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = noisy_cluster(&mut rng, [0.5, 0.5, 0.3, 0.2], 0.02, 50);
        let (modes, _) = mean_shift(&pts, 10.0).unwrap();
        assert_eq!(modes.len(), 1);
        let mut mean = [0.0; 4];
        for p in &pts {
            for k in 0..4 {
                mean[k] += p[k] / pts.len() as f64;
            }
        }
        assert!(linf(&modes[0], &mean) < 0.01);
    }

    #[test]
    fn modes_are_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = noisy_cluster(&mut rng, [0.3, 0.3, 0.1, 0.1], 0.01, 30);
        pts.extend(noisy_cluster(&mut rng, [0.7, 0.6, 0.2, 0.1], 0.01, 30));
        let (modes, _) = mean_shift(&pts, 0.15).unwrap();
        for m in &modes {
            let next = mean_shift_step(m, &pts, 0.15);
            assert!(linf(&next, m) < 1e-6, "mode {m:?} moved to {next:?}");
        }
    }

    #[test]
    fn input_validation() {
        assert!(matches!(mean_shift(&[], 0.1), Err(AnchorError::NoPoints)));
        assert!(matches!(
            mean_shift(&[[0.1, 0.1, 0.1, f64::NAN]], 0.1),
            Err(AnchorError::NonFinite(0))
        ));
        assert!(matches!(
            mean_shift(&[[0.1; 4]], -1.0),
            Err(AnchorError::BadBandwidth(_))
        ));
    }

    #[test]
    fn mode_count_nonincreasing_in_bandwidth() {
        // Monotonicity (up to merge-tolerance plateaus) justifies bisection.
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(2..8);
            let mut pts = Vec::new();
            for _ in 0..k {
                let c = [
                    rng.gen_range(0.1..0.9),
                    rng.gen_range(0.1..0.9),
                    rng.gen_range(0.05..0.3),
                    rng.gen_range(0.05..0.3),
                ];
                pts.extend(noisy_cluster(&mut rng, c, 0.01, 15));
            }
            let bandwidths: Vec<f64> =
                (0..10).map(|i| 0.02 * 1.8f64.powi(i)).collect();
            let counts: Vec<usize> = bandwidths
                .iter()
                .map(|&b| count_modes(&pts, b))
                .collect();
            for w in counts.windows(2) {
                // Allow plateau noise of one mode from merge-tolerance effects.
                assert!(
                    w[1] <= w[0] + 1,
                    "seed {seed}: counts not non-increasing: {counts:?}"
                );
            }
        }
    }

    #[test]
    fn estimate_recovers_generating_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut centers = Vec::new();
        for i in 0..6 {
            for j in 0..5 {
                centers.push([
                    0.1 + 0.16 * j as f64,
                    0.08 + 0.15 * i as f64,
                    0.1 + 0.02 * (i % 3) as f64,
                    0.05 + 0.01 * (j % 2) as f64,
                ]);
            }
        }
        assert_eq!(centers.len(), 30);
        let mut pts = Vec::new();
        for c in &centers {
            pts.extend(noisy_cluster(&mut rng, *c, 0.005, 12));
        }
        let set = estimate_anchors_from_points(&pts, 30, "test".into()).unwrap();
        assert_eq!(set.boxes.len(), 30);
        let mut matched = vec![false; 30];
        for b in &set.boxes {
            let p = b.to_cxcywh();
            let best = centers
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    linf(&p, a).partial_cmp(&linf(&p, b)).unwrap()
                })
                .unwrap();
            assert!(linf(&p, best.1) < 0.02, "anchor {p:?} not near any center");
            assert!(!matched[best.0], "two anchors matched center {}", best.0);
            matched[best.0] = true;
        }
    }

    #[test]
    fn degenerate_dataset_errors() {
        let pts = vec![[0.5, 0.5, 0.2, 0.1]; 40];
        let err = estimate_anchors_from_points(&pts, 30, "x".into()).unwrap_err();
        match err {
            AnchorError::BisectionFailed { achievable, .. } => {
                assert!(achievable.contains(&1));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn single_target_is_global_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts = noisy_cluster(&mut rng, [0.3, 0.4, 0.1, 0.1], 0.02, 30);
        pts.extend(noisy_cluster(&mut rng, [0.6, 0.5, 0.15, 0.1], 0.02, 30));
        let set = estimate_anchors_from_points(&pts, 1, "x".into()).unwrap();
        assert_eq!(set.boxes.len(), 1);
        let (modes, _) = mean_shift(&pts, 10.0).unwrap();
        assert!(linf(&set.boxes[0].to_cxcywh(), &modes[0]) < 1e-6);
    }

    #[test]
    fn anchor_file_roundtrip_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pts = Vec::new();
        for i in 0..5 {
            let c = [0.15 + 0.15 * i as f64, 0.5, 0.1, 0.08];
            pts.extend(noisy_cluster(&mut rng, c, 0.004, 15));
        }
        let set = estimate_anchors_from_points(&pts, 5, "hash".into()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("anchors.json");
        save_anchors(&set, &path).unwrap();
        let loaded = load_anchors(&path, 5).unwrap();
        assert_eq!(loaded.boxes.len(), 5);
        for (a, b) in set.boxes.iter().zip(&loaded.boxes) {
            assert!((a.x_min - b.x_min).abs() < 1e-12);
            assert!((a.y_max - b.y_max).abs() < 1e-12);
        }
        assert_eq!(loaded.dataset_hash, "hash");

        // Wrong count.
        assert!(matches!(
            load_anchors(&path, 30),
            Err(AnchorError::WrongCount(5, 30))
        ));

        // Corrupt entry 2: x_min > x_max.
        let mut file: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        file["boxes"][2] = serde_json::json!([0.9, 0.1, 0.2, 0.3]);
        std::fs::write(&path, file.to_string()).unwrap();
        match load_anchors(&path, 5) {
            Err(AnchorError::InvalidEntry { index: 2, .. }) => {}
            other => panic!("expected InvalidEntry(2), got {other:?}"),
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut pts = Vec::new();
        for i in 0..4 {
            let c = [0.2 + 0.2 * i as f64, 0.4, 0.12, 0.06];
            pts.extend(noisy_cluster(&mut rng, c, 0.006, 20));
        }
        let a = estimate_anchors_from_points(&pts, 4, "h".into()).unwrap();
        let b = estimate_anchors_from_points(&pts, 4, "h".into()).unwrap();
        assert_eq!(a.boxes.len(), b.boxes.len());
        for (x, y) in a.boxes.iter().zip(&b.boxes) {
            assert_eq!(x, y);
        }
    }
}

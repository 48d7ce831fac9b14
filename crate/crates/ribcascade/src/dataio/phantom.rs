//! Synthetic frontal-chest phantom generator.
//!
//! The phantom is a desk-scale stand-in for a real annotated radiograph: a
//! torso intensity gradient, two lung fields, a spine column, and per-side
//! rib bands drawn as parametric arcs with exact per-rib masks. Realism is
//! deliberately minimal; the point is exact ground truth and a learnable
//! geometry, not radiographic fidelity.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{quantize_u16, AnnotatedImage, DataError, GrayImage, RibLabel, Side};

const THICKNESS_MIN: usize = 4;
const THICKNESS_MAX: usize = 9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// Square image side length in pixels.
    pub size: usize,
    pub ribs_per_side: u8,
    /// Standard deviation of the additive Gaussian intensity noise.
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 256,
            ribs_per_side: 9,
            noise_sigma: 0.01,
        }
    }
}

/// Render one phantom. Fully deterministic per `(seed, config)`.
pub fn generate_phantom(seed: u64, config: &PhantomConfig) -> Result<AnnotatedImage, DataError> {
    let size = config.size;
    let s = size as f64;
    let n_ribs = config.ribs_per_side.min(RibLabel::MAX_INDEX);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let spine_x = s * (0.5 + rng.gen_range(-0.02..0.02));
    let top = s * (0.10 + rng.gen_range(-0.02..0.02));
    let spacing = s * (0.082 + rng.gen_range(-0.004..0.004));
    if spacing < (THICKNESS_MAX + 1) as f64 {
        return Err(DataError::RibsWouldOverlap {
            spacing,
            thickness: THICKNESS_MAX,
        });
    }

    // Background: torso gradient plus spine column and two lung fields.
    let mut img = Array2::<f64>::zeros((size, size));
    let lung_cy = 0.45 * s;
    let lung_rx = 0.17 * s;
    let lung_ry = 0.28 * s;
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let mut v = 0.35 + 0.20 * y / s;
            // Spine: a bright band with smooth falloff.
            let dx = (x - spine_x).abs() / (0.05 * s);
            v += 0.15 * (-dx * dx).exp();
            for lung_cx in [spine_x - 0.24 * s, spine_x + 0.24 * s] {
                let ex = (x - lung_cx) / lung_rx;
                let ey = (y - lung_cy) / lung_ry;
                if ex * ex + ey * ey < 1.0 {
                    v -= 0.12;
                }
            }
            img[(r, c)] = v;
        }
    }

    let mut annotations = BTreeMap::new();
    for side in Side::BOTH {
        // Patient right appears on the viewer's left.
        let dir: f64 = match side {
            Side::Right => -1.0,
            Side::Left => 1.0,
        };
        let inner = s * 0.045;
        let extent = s * (0.38 + rng.gen_range(-0.03..0.03));
        let droop = s * (0.10 + rng.gen_range(-0.02..0.02));

        for index in 1..=n_ribs {
            let thickness = rng.gen_range(THICKNESS_MIN..=THICKNESS_MAX);
            let y_jitter = rng.gen_range(-1.0..1.0);
            let y0 = top + (index - 1) as f64 * spacing + y_jitter;

            let mut mask = Array2::<u8>::zeros((size, size));
            let x_start = spine_x + dir * inner;
            let steps = extent.ceil() as usize;
            for k in 0..=steps {
                let t = k as f64 / steps as f64;
                let x = x_start + dir * t * (extent - inner);
                let yc = y0 + droop * t * t;
                let c = x.floor();
                if c < 0.0 || c >= s {
                    continue;
                }
                let c = c as usize;
                let r0 = (yc - thickness as f64 / 2.0).floor().max(0.0) as usize;
                for r in r0..(r0 + thickness).min(size) {
                    mask[(r, c)] = 1;
                    img[(r, c)] += 0.20;
                }
            }
            let label = RibLabel::new(side, index).expect("index validated");
            if mask.iter().all(|&v| v == 0) {
                return Err(DataError::InvalidImage {
                    id: format!("phantom_{seed:05}"),
                    reason: format!("rib {label} rendered empty"),
                });
            }
            annotations.insert(label, mask);
        }
    }

    // Noise, clamp, and quantization onto the 16-bit grid used on disk so
    // save/load round-trips exactly.
    let noise = Normal::new(0.0, config.noise_sigma.max(1e-12)).expect("valid sigma");
    for v in img.iter_mut() {
        *v = quantize_u16(*v + noise.sample(&mut rng));
    }

    let out = AnnotatedImage {
        id: format!("phantom_{seed:05}"),
        image: GrayImage {
            data: img,
            pixel_spacing_mm: 1.0,
        },
        annotations,
    };
    out.validate()?;
    Ok(out)
}

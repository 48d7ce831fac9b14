//! Minimal f64 neural-network layers with explicit forward caches and
//! hand-written backward passes.
//!
//! Everything is deliberately plain: convolutions run as im2col + gemm,
//! parameters are 2-D arrays (biases as column vectors), and a layer's
//! backward consumes the cache its forward produced. Keeping the whole chain
//! in f64 is what makes the central-finite-difference gradient checks tight.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Column matrix of all receptive fields: `(c_in*k*k, h_out*w_out)`.
pub fn im2col(
    x: &Array3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, (usize, usize)) {
    let (c_in, h, w) = x.dim();
    let h_out = (h + 2 * pad - k) / stride + 1;
    let w_out = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<f64>::zeros((c_in * k * k, h_out * w_out));
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let mut out_row = cols.row_mut(row);
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[oy * w_out + ox] = x[(c, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    (cols, (h_out, w_out))
}

/// Scatter-add the column gradient back into input layout.
pub fn col2im(
    dcols: &Array2<f64>,
    in_shape: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (c_in, h, w) = in_shape;
    let h_out = (h + 2 * pad - k) / stride + 1;
    let w_out = (w + 2 * pad - k) / stride + 1;
    let mut dx = Array3::<f64>::zeros(in_shape);
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let drow = dcols.row(row);
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(c, iy as usize, ix as usize)] += drow[oy * w_out + ox];
                    }
                }
            }
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `(c_out, c_in*k*k)`
    pub w: Array2<f64>,
    /// `(c_out, 1)`
    pub b: Array2<f64>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = Array2::from_shape_fn((c_out, c_in * k * k), |_| sample_normal(rng) * std);
        Self {
            w,
            b: Array2::zeros((c_out, 1)),
            c_in,
            c_out,
            k,
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (cols, (h_out, w_out)) = im2col(x, self.k, self.stride, self.pad);
        let mut y_mat = self.w.dot(&cols);
        for (mut row, b) in y_mat.axis_iter_mut(Axis(0)).zip(self.b.column(0)) {
            row += *b;
        }
        let y = y_mat
            .into_shape((self.c_out, h_out, w_out))
            .expect("conv output reshape");
        (
            y,
            ConvCache {
                cols,
                in_shape: x.dim(),
                out_hw: (h_out, w_out),
            },
        )
    }

    /// Returns `dx` and accumulates parameter gradients into `dw`, `db`.
    pub fn backward(
        &self,
        dy: &Array3<f64>,
        cache: &ConvCache,
        dw: &mut Array2<f64>,
        db: &mut Array2<f64>,
    ) -> Array3<f64> {
        let (h_out, w_out) = cache.out_hw;
        let dy_mat = dy
            .view()
            .into_shape((self.c_out, h_out * w_out))
            .expect("dy reshape");
        *dw += &dy_mat.dot(&cache.cols.t());
        for (d, row) in db.column_mut(0).iter_mut().zip(dy_mat.axis_iter(Axis(0))) {
            *d += row.sum();
        }
        let dcols = self.w.t().dot(&dy_mat);
        col2im(&dcols, cache.in_shape, self.k, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    /// `(n_out, n_in)`
    pub w: Array2<f64>,
    /// `(n_out, 1)`
    pub b: Array2<f64>,
}

impl Dense {
    pub fn new(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> Self {
        let std = (2.0 / n_in as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((n_out, n_in), |_| sample_normal(rng) * std),
            b: Array2::zeros((n_out, 1)),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + self.b.column(0)
    }

    pub fn backward(
        &self,
        x: &Array1<f64>,
        dy: &Array1<f64>,
        dw: &mut Array2<f64>,
        db: &mut Array2<f64>,
    ) -> Array1<f64> {
        for (mut dwr, &d) in dw.axis_iter_mut(Axis(0)).zip(dy.iter()) {
            dwr.scaled_add(d, x);
        }
        db.column_mut(0).scaled_add(1.0, dy);
        self.w.t().dot(dy)
    }
}

/// In-place ReLU; returns the activation mask needed by the backward pass.
pub fn relu(x: &mut Array3<f64>) -> Array3<bool> {
    let mask = x.mapv(|v| v > 0.0);
    x.mapv_inplace(|v| v.max(0.0));
    mask
}

pub fn relu_backward(dy: &mut Array3<f64>, mask: &Array3<bool>) {
    ndarray::Zip::from(dy).and(mask).for_each(|d, &m| {
        if !m {
            *d = 0.0;
        }
    });
}

pub fn relu_vec(x: &mut Array1<f64>) -> Array1<bool> {
    let mask = x.mapv(|v| v > 0.0);
    x.mapv_inplace(|v| v.max(0.0));
    mask
}

pub fn relu_vec_backward(dy: &mut Array1<f64>, mask: &Array1<bool>) {
    ndarray::Zip::from(dy).and(mask).for_each(|d, &m| {
        if !m {
            *d = 0.0;
        }
    });
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// 2x2 max pooling with stride 2; returns pooled map and argmax indices.
pub fn maxpool2(x: &Array3<f64>) -> (Array3<f64>, Array3<(usize, usize)>) {
    let (c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Array3::<f64>::zeros((c, ho, wo));
    let mut idx = Array3::<(usize, usize)>::from_elem((c, ho, wo), (0, 0));
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut at = (0, 0);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (iy, ix) = (oy * 2 + dy, ox * 2 + dx);
                        let v = x[(ci, iy, ix)];
                        if v > best {
                            best = v;
                            at = (iy, ix);
                        }
                    }
                }
                y[(ci, oy, ox)] = best;
                idx[(ci, oy, ox)] = at;
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward(
    dy: &Array3<f64>,
    idx: &Array3<(usize, usize)>,
    in_shape: (usize, usize, usize),
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros(in_shape);
    for ((c, oy, ox), &d) in dy.indexed_iter() {
        let (iy, ix) = idx[(c, oy, ox)];
        dx[(c, iy, ix)] += d;
    }
    dx
}

/// Nearest-neighbor 2x upsampling (used by the FPN top-down path).
pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ci, r, cc)| x[(ci, r / 2, cc / 2)])
}

pub fn upsample2_backward(dy: &Array3<f64>, in_shape: (usize, usize, usize)) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros(in_shape);
    for ((c, r, cc), &d) in dy.indexed_iter() {
        dx[(c, r / 2, cc / 2)] += d;
    }
    dx
}

/// One bilinear sample per output bin, pooled over a pixel-space box.
///
/// `spatial_scale` maps image pixels to feature-map cells. The cache records
/// the four neighbors and weights of every sample so the backward pass can
/// scatter exactly.
pub struct RoiAlignCache {
    /// Per bin: [(row, col, weight); 4]
    taps: Vec<[(usize, usize, f64); 4]>,
    fm_shape: (usize, usize, usize),
    pub out: usize,
}

pub fn roi_align(
    fm: &Array3<f64>,
    box_px: &crate::geometry::PixelBox,
    spatial_scale: f64,
    out: usize,
) -> (Array3<f64>, RoiAlignCache) {
    let (c, h, w) = fm.dim();
    let mut y = Array3::<f64>::zeros((c, out, out));
    let mut taps = Vec::with_capacity(out * out);
    for i in 0..out {
        for j in 0..out {
            let px = box_px.x_min + (j as f64 + 0.5) / out as f64 * box_px.width();
            let py = box_px.y_min + (i as f64 + 0.5) / out as f64 * box_px.height();
            let fx = px * spatial_scale - 0.5;
            let fy = py * spatial_scale - 0.5;
            let x0 = fx.floor();
            let y0 = fy.floor();
            let ax = fx - x0;
            let ay = fy - y0;
            let clampc = |v: f64, n: usize| (v.max(0.0) as usize).min(n - 1);
            let (c0, c1) = (clampc(x0, w), clampc(x0 + 1.0, w));
            let (r0, r1) = (clampc(y0, h), clampc(y0 + 1.0, h));
            let tap = [
                (r0, c0, (1.0 - ay) * (1.0 - ax)),
                (r0, c1, (1.0 - ay) * ax),
                (r1, c0, ay * (1.0 - ax)),
                (r1, c1, ay * ax),
            ];
            for ci in 0..c {
                let mut v = 0.0;
                for &(r, cc, wt) in &tap {
                    v += fm[(ci, r, cc)] * wt;
                }
                y[(ci, i, j)] = v;
            }
            taps.push(tap);
        }
    }
    (
        y,
        RoiAlignCache {
            taps,
            fm_shape: fm.dim(),
            out,
        },
    )
}

pub fn roi_align_backward(dy: &Array3<f64>, cache: &RoiAlignCache) -> Array3<f64> {
    let mut dfm = Array3::<f64>::zeros(cache.fm_shape);
    let c = cache.fm_shape.0;
    for i in 0..cache.out {
        for j in 0..cache.out {
            let tap = &cache.taps[i * cache.out + j];
            for ci in 0..c {
                let d = dy[(ci, i, j)];
                for &(r, cc, wt) in tap {
                    dfm[(ci, r, cc)] += d * wt;
                }
            }
        }
    }
    dfm
}

/// Box-Muller; two uniforms per draw, deterministic for a seeded rng.
fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Adam with bias correction; state arrays mirror the parameter list.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<ArrayViewMut2<f64>>, grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((mut p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= self.lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

/// Named views over a layer stack's parameters, in a stable order.
pub fn param_shapes(views: &[(&str, ArrayView2<f64>)]) -> Vec<(usize, usize)> {
    views.iter().map(|(_, v)| v.dim()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::SeedableRng;

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(&mut rng, 1, 1, 3, 1, 1);
        conv.w.fill(0.0);
        conv.w[(0, 4)] = 1.0; // center tap
        conv.b.fill(0.0);
        let x = Array3::from_shape_fn((1, 5, 5), |(_, r, c)| (r * 5 + c) as f64);
        let (y, _) = conv.forward(&x);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(&mut rng, 2, 3, 3, 2, 1);
        let x = Array3::from_shape_fn((2, 6, 6), |(c, r, cc)| {
            ((c + 2 * r + 3 * cc) as f64 * 0.37).sin()
        });
        // Scalar objective: sum of squares of the output.
        let (y, cache) = conv.forward(&x);
        let dy = y.mapv(|v| 2.0 * v);
        let mut dw = Array2::zeros(conv.w.dim());
        let mut db = Array2::zeros(conv.b.dim());
        let dx = conv.backward(&dy, &cache, &mut dw, &mut db);

        let f = |conv: &Conv2d, x: &Array3<f64>| -> f64 {
            let (y, _) = conv.forward(x);
            y.iter().map(|v| v * v).sum()
        };
        let h = 1e-6;
        // A few weight entries.
        for &(i, j) in &[(0, 0), (1, 7), (2, 17)] {
            let mut cp = conv.clone();
            cp.w[(i, j)] += h;
            let up = f(&cp, &x);
            cp.w[(i, j)] -= 2.0 * h;
            let dn = f(&cp, &x);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - dw[(i, j)]).abs() < 1e-6 * fd.abs().max(1.0), "w({i},{j})");
        }
        // A few input entries.
        for &(c, r, cc) in &[(0, 0, 0), (1, 3, 2), (0, 5, 5)] {
            let mut xp = x.clone();
            xp[(c, r, cc)] += h;
            let up = f(&conv, &xp);
            xp[(c, r, cc)] -= 2.0 * h;
            let dn = f(&conv, &xp);
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - dx[(c, r, cc)]).abs() < 1e-6 * fd.abs().max(1.0), "x({c},{r},{cc})");
        }
    }

    #[test]
    fn dense_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dense = Dense::new(&mut rng, 4, 3);
        let x = arr1(&[0.3, -0.2, 0.9, 0.1]);
        let y = dense.forward(&x);
        let dy = y.mapv(|v| 2.0 * v);
        let mut dw = Array2::zeros(dense.w.dim());
        let mut db = Array2::zeros(dense.b.dim());
        let dx = dense.backward(&x, &dy, &mut dw, &mut db);

        let f = |d: &Dense, x: &Array1<f64>| d.forward(x).iter().map(|v| v * v).sum::<f64>();
        let h = 1e-6;
        for &(i, j) in &[(0, 0), (2, 3)] {
            let mut dp = dense.clone();
            dp.w[(i, j)] += h;
            let up = f(&dp, &x);
            dp.w[(i, j)] -= 2.0 * h;
            let dn = f(&dp, &x);
            assert!(((up - dn) / (2.0 * h) - dw[(i, j)]).abs() < 1e-6);
        }
        for i in 0..4 {
            let mut xp = x.clone();
            xp[i] += h;
            let up = f(&dense, &xp);
            xp[i] -= 2.0 * h;
            let dn = f(&dense, &xp);
            assert!(((up - dn) / (2.0 * h) - dx[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_roundtrip() {
        let x = Array3::from_shape_fn((1, 4, 4), |(_, r, c)| (r * 4 + c) as f64);
        let (y, idx) = maxpool2(&x);
        assert_eq!(y[(0, 0, 0)], 5.0);
        assert_eq!(y[(0, 1, 1)], 15.0);
        let dy = Array3::ones((1, 2, 2));
        let dx = maxpool2_backward(&dy, &idx, x.dim());
        assert_eq!(dx[(0, 1, 1)], 1.0);
        assert_eq!(dx[(0, 0, 0)], 0.0);
        assert_eq!(dx.sum(), 4.0);
    }

    #[test]
    fn roi_align_constant_map() {
        let fm = Array3::from_elem((2, 8, 8), 3.5);
        let b = crate::geometry::PixelBox::new(10.0, 10.0, 50.0, 30.0).unwrap();
        let (y, cache) = roi_align(&fm, &b, 8.0 / 64.0, 7);
        assert!(y.iter().all(|&v| (v - 3.5).abs() < 1e-12));
        // Backward conserves mass.
        let dy = Array3::ones((2, 7, 7));
        let dfm = roi_align_backward(&dy, &cache);
        assert!((dfm.sum() - dy.sum()).abs() < 1e-9);
    }

    #[test]
    fn upsample_shapes_and_backward() {
        let x = Array3::from_shape_fn((1, 2, 2), |(_, r, c)| (r * 2 + c) as f64);
        let y = upsample2(&x);
        assert_eq!(y.dim(), (1, 4, 4));
        assert_eq!(y[(0, 3, 3)], 3.0);
        let dx = upsample2_backward(&Array3::ones((1, 4, 4)), x.dim());
        assert!(dx.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut p = Array2::from_elem((2, 2), 5.0);
        let mut opt = Adam::new(0.1, &[(2, 2)]);
        for _ in 0..500 {
            let g = p.mapv(|v| 2.0 * v);
            opt.step(vec![p.view_mut()], &[g]);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2));
    }
}

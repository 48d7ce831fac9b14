//! Feature extractors behind a single interface: a 4-stage "tiny" net for
//! desk-scale runs and CI, and a 50-layer residual network with
//! feature-pyramid fusion for full-scale use.
//!
//! Both emit a `(32, H/16, W/16)` feature map, so the detection and mask
//! heads never care which backbone produced it.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{
    maxpool2, maxpool2_backward, relu, relu_backward, upsample2, upsample2_backward, Conv2d,
    ConvCache,
};

/// Output channel count of every backbone.
pub const FEATURE_CHANNELS: usize = 32;
/// Image-to-feature-map downsampling factor.
pub const FEATURE_STRIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// 4 conv stages, ~1/50 the parameters; for CI and desk-scale acceptance.
    Tiny,
    /// ResNet-50 bottleneck stages with FPN top-down fusion.
    Resnet50Fpn,
}

/// A convolution with its gradient-slot bookkeeping and optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub conv: Conv2d,
    pub relu: bool,
    /// Index of `w` in the flat parameter list; `b` is at `slot + 1`.
    pub slot: usize,
}

pub struct ConvLayerCache {
    conv: ConvCache,
    mask: Option<Array3<bool>>,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    fn new(
        rng: &mut ChaCha8Rng,
        slot: &mut usize,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        relu: bool,
    ) -> Self {
        let layer = Self {
            conv: Conv2d::new(rng, c_in, c_out, k, stride, pad),
            relu,
            slot: *slot,
        };
        *slot += 2;
        layer
    }

    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvLayerCache) {
        let (mut y, conv) = self.conv.forward(x);
        let mask = self.relu.then(|| relu(&mut y));
        (y, ConvLayerCache { conv, mask })
    }

    fn backward(
        &self,
        mut dy: Array3<f64>,
        cache: &ConvLayerCache,
        grads: &mut [Array2<f64>],
    ) -> Array3<f64> {
        if let Some(mask) = &cache.mask {
            relu_backward(&mut dy, mask);
        }
        let (dw, rest) = grads[self.slot..].split_first_mut().expect("slot in range");
        let db = &mut rest[0];
        self.conv.backward(&dy, &cache.conv, dw, db)
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Array2<f64>>) {
        debug_assert_eq!(out.len(), self.slot);
        out.push(&self.conv.w);
        out.push(&self.conv.b);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Array2<f64>>) {
        debug_assert_eq!(out.len(), self.slot);
        out.push(&mut self.conv.w);
        out.push(&mut self.conv.b);
    }
}

/// ResNet bottleneck: 1x1 down, 3x3, 1x1 up, with a projection shortcut when
/// shape changes.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    conv1: ConvLayer,
    conv2: ConvLayer,
    conv3: ConvLayer,
    proj: Option<ConvLayer>,
}

pub struct BottleneckCache {
    c1: ConvLayerCache,
    c2: ConvLayerCache,
    c3: ConvLayerCache,
    proj: Option<ConvLayerCache>,
    out_mask: Array3<bool>,
}

impl Bottleneck {
    fn new(
        rng: &mut ChaCha8Rng,
        slot: &mut usize,
        c_in: usize,
        c_mid: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        // Slot order must match collect(): proj first, then conv1..conv3.
        let proj = (c_in != c_out || stride != 1)
            .then(|| ConvLayer::new(rng, slot, c_in, c_out, 1, stride, 0, false));
        Self {
            conv1: ConvLayer::new(rng, slot, c_in, c_mid, 1, stride, 0, true),
            conv2: ConvLayer::new(rng, slot, c_mid, c_mid, 3, 1, 1, true),
            conv3: ConvLayer::new(rng, slot, c_mid, c_out, 1, 1, 0, false),
            proj,
        }
    }

    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, BottleneckCache) {
        let (skip, proj_cache) = match &self.proj {
            Some(p) => {
                let (s, c) = p.forward(x);
                (s, Some(c))
            }
            None => (x.clone(), None),
        };
        let (h1, c1) = self.conv1.forward(x);
        let (h2, c2) = self.conv2.forward(&h1);
        let (mut y, c3) = self.conv3.forward(&h2);
        y += &skip;
        let out_mask = relu(&mut y);
        (
            y,
            BottleneckCache {
                c1,
                c2,
                c3,
                proj: proj_cache,
                out_mask,
            },
        )
    }

    fn backward(
        &self,
        mut dy: Array3<f64>,
        cache: &BottleneckCache,
        grads: &mut [Array2<f64>],
    ) -> Array3<f64> {
        relu_backward(&mut dy, &cache.out_mask);
        let dskip = dy.clone();
        let d2 = self.conv3.backward(dy, &cache.c3, grads);
        let d1 = self.conv2.backward(d2, &cache.c2, grads);
        let mut dx = self.conv1.backward(d1, &cache.c1, grads);
        match (&self.proj, &cache.proj) {
            (Some(p), Some(pc)) => dx += &p.backward(dskip, pc, grads),
            _ => dx += &dskip,
        }
        dx
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Array2<f64>>) {
        if let Some(p) = &self.proj {
            p.collect(out);
        }
        self.conv1.collect(out);
        self.conv2.collect(out);
        self.conv3.collect(out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Array2<f64>>) {
        if let Some(p) = &mut self.proj {
            p.collect_mut(out);
        }
        self.conv1.collect_mut(out);
        self.conv2.collect_mut(out);
        self.conv3.collect_mut(out);
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Tiny {
        layers: Vec<ConvLayer>,
        n_slots: usize,
    },
    Resnet50Fpn {
        stem: ConvLayer,
        stages: Vec<Vec<Bottleneck>>,
        lateral4: ConvLayer,
        lateral5: ConvLayer,
        out: ConvLayer,
        n_slots: usize,
    },
}

pub enum BackboneCache {
    Tiny(Vec<ConvLayerCache>),
    Resnet50Fpn {
        stem: ConvLayerCache,
        pool_idx: Array3<(usize, usize)>,
        pool_in: (usize, usize, usize),
        stages: Vec<Vec<BottleneckCache>>,
        lat4: ConvLayerCache,
        lat5: ConvLayerCache,
        c4_dim: (usize, usize, usize),
        p5_dim: (usize, usize, usize),
        out: ConvLayerCache,
    },
}

impl Backbone {
    pub fn new(kind: BackboneKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut slot = 0usize;
        match kind {
            BackboneKind::Tiny => {
                let layers = vec![
                    ConvLayer::new(&mut rng, &mut slot, 3, 8, 7, 4, 3, true),
                    ConvLayer::new(&mut rng, &mut slot, 8, 16, 3, 2, 1, true),
                    ConvLayer::new(&mut rng, &mut slot, 16, 32, 3, 2, 1, true),
                    ConvLayer::new(&mut rng, &mut slot, 32, 32, 3, 1, 1, true),
                ];
                Backbone::Tiny {
                    layers,
                    n_slots: slot,
                }
            }
            BackboneKind::Resnet50Fpn => {
                let stem = ConvLayer::new(&mut rng, &mut slot, 3, 64, 7, 2, 3, true);
                let plan: [(usize, usize, usize, usize, usize); 4] = [
                    // (blocks, c_in, c_mid, c_out, first_stride)
                    (3, 64, 64, 256, 1),
                    (4, 256, 128, 512, 2),
                    (6, 512, 256, 1024, 2),
                    (3, 1024, 512, 2048, 2),
                ];
                let mut stages = Vec::new();
                for (blocks, c_in, c_mid, c_out, stride) in plan {
                    let mut stage = Vec::new();
                    for b in 0..blocks {
                        let (ci, s) = if b == 0 { (c_in, stride) } else { (c_out, 1) };
                        stage.push(Bottleneck::new(&mut rng, &mut slot, ci, c_mid, c_out, s));
                    }
                    stages.push(stage);
                }
                let lateral4 = ConvLayer::new(&mut rng, &mut slot, 1024, 64, 1, 1, 0, false);
                let lateral5 = ConvLayer::new(&mut rng, &mut slot, 2048, 64, 1, 1, 0, false);
                let out = ConvLayer::new(
                    &mut rng,
                    &mut slot,
                    64,
                    FEATURE_CHANNELS,
                    3,
                    1,
                    1,
                    true,
                );
                Backbone::Resnet50Fpn {
                    stem,
                    stages,
                    lateral4,
                    lateral5,
                    out,
                    n_slots: slot,
                }
            }
        }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            Backbone::Tiny { .. } => BackboneKind::Tiny,
            Backbone::Resnet50Fpn { .. } => BackboneKind::Resnet50Fpn,
        }
    }

    pub fn n_slots(&self) -> usize {
        match self {
            Backbone::Tiny { n_slots, .. } | Backbone::Resnet50Fpn { n_slots, .. } => *n_slots,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, BackboneCache) {
        match self {
            Backbone::Tiny { layers, .. } => {
                let mut caches = Vec::with_capacity(layers.len());
                let mut h = x.clone();
                for layer in layers {
                    let (y, c) = layer.forward(&h);
                    h = y;
                    caches.push(c);
                }
                (h, BackboneCache::Tiny(caches))
            }
            Backbone::Resnet50Fpn {
                stem,
                stages,
                lateral4,
                lateral5,
                out,
                ..
            } => {
                let (s, stem_cache) = stem.forward(x);
                let pool_in = s.dim();
                let (mut h, pool_idx) = maxpool2(&s);
                let mut stage_caches = Vec::new();
                let mut c4 = None;
                for (i, stage) in stages.iter().enumerate() {
                    let mut caches = Vec::new();
                    for block in stage {
                        let (y, c) = block.forward(&h);
                        h = y;
                        caches.push(c);
                    }
                    stage_caches.push(caches);
                    if i == 2 {
                        c4 = Some(h.clone());
                    }
                }
                let c4 = c4.expect("stage 3 output");
                let c5 = h;
                let (p5, lat5_cache) = lateral5.forward(&c5);
                let (mut p4, lat4_cache) = lateral4.forward(&c4);
                p4 += &upsample2(&p5);
                let (y, out_cache) = out.forward(&p4);
                (
                    y,
                    BackboneCache::Resnet50Fpn {
                        stem: stem_cache,
                        pool_idx,
                        pool_in,
                        stages: stage_caches,
                        lat4: lat4_cache,
                        lat5: lat5_cache,
                        c4_dim: c4.dim(),
                        p5_dim: p5.dim(),
                        out: out_cache,
                    },
                )
            }
        }
    }

    /// Accumulate parameter gradients; the input gradient is discarded.
    pub fn backward(&self, dy: Array3<f64>, cache: &BackboneCache, grads: &mut [Array2<f64>]) {
        match (self, cache) {
            (Backbone::Tiny { layers, .. }, BackboneCache::Tiny(caches)) => {
                let mut d = dy;
                for (layer, c) in layers.iter().zip(caches).rev() {
                    d = layer.backward(d, c, grads);
                }
            }
            (
                Backbone::Resnet50Fpn {
                    stem,
                    stages,
                    lateral4,
                    lateral5,
                    out,
                    ..
                },
                BackboneCache::Resnet50Fpn {
                    stem: stem_cache,
                    pool_idx,
                    pool_in,
                    stages: stage_caches,
                    lat4,
                    lat5,
                    c4_dim,
                    p5_dim,
                    out: out_cache,
                },
            ) => {
                let dp4 = out.backward(dy, out_cache, grads);
                let dp5 = upsample2_backward(&dp4, *p5_dim);
                let dc4_lat = lateral4.backward(dp4, lat4, grads);
                let dc5 = lateral5.backward(dp5, lat5, grads);

                // Stage 4 backward feeds gradient into c4, which also gets the
                // lateral contribution.
                let mut d = dc5;
                for (block, c) in stages[3].iter().zip(&stage_caches[3]).rev() {
                    d = block.backward(d, c, grads);
                }
                debug_assert_eq!(d.dim(), *c4_dim);
                d += &dc4_lat;
                for i in (0..3).rev() {
                    for (block, c) in stages[i].iter().zip(&stage_caches[i]).rev() {
                        d = block.backward(d, c, grads);
                    }
                }
                let ds = maxpool2_backward(&d, pool_idx, *pool_in);
                stem.backward(ds, stem_cache, grads);
            }
            _ => panic!("backbone/cache kind mismatch"),
        }
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        match self {
            Backbone::Tiny { layers, .. } => {
                for l in layers {
                    l.collect(&mut out);
                }
            }
            Backbone::Resnet50Fpn {
                stem,
                stages,
                lateral4,
                lateral5,
                out: out_conv,
                ..
            } => {
                stem.collect(&mut out);
                for stage in stages {
                    for b in stage {
                        b.collect(&mut out);
                    }
                }
                lateral4.collect(&mut out);
                lateral5.collect(&mut out);
                out_conv.collect(&mut out);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        match self {
            Backbone::Tiny { layers, .. } => {
                for l in layers {
                    l.collect_mut(&mut out);
                }
            }
            Backbone::Resnet50Fpn {
                stem,
                stages,
                lateral4,
                lateral5,
                out: out_conv,
                ..
            } => {
                stem.collect_mut(&mut out);
                for stage in stages {
                    for b in stage {
                        b.collect_mut(&mut out);
                    }
                }
                lateral4.collect_mut(&mut out);
                lateral5.collect_mut(&mut out);
                out_conv.collect_mut(&mut out);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_output_shape() {
        let b = Backbone::new(BackboneKind::Tiny, 0);
        let x = Array3::<f64>::zeros((3, 256, 256));
        let (y, _) = b.forward(&x);
        assert_eq!(y.dim(), (FEATURE_CHANNELS, 16, 16));
    }

    #[test]
    fn resnet_output_shape_small_input() {
        let b = Backbone::new(BackboneKind::Resnet50Fpn, 0);
        let x = Array3::<f64>::from_shape_fn((3, 64, 64), |(c, r, cc)| {
            ((c + r + cc) as f64 * 0.1).sin() * 0.1
        });
        let (y, _) = b.forward(&x);
        assert_eq!(y.dim(), (FEATURE_CHANNELS, 4, 4));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn resnet_param_slots_consistent() {
        let b = Backbone::new(BackboneKind::Resnet50Fpn, 1);
        let params = b.params();
        assert_eq!(params.len(), b.n_slots());
        // 53 convs counting stem, 16*3 bottleneck convs + 4 projections,
        // 2 laterals, 1 output head; two arrays each.
        assert_eq!(params.len(), 2 * (1 + 16 * 3 + 4 + 2 + 1));
    }

    #[test]
    fn tiny_backward_matches_finite_difference() {
        let b = Backbone::new(BackboneKind::Tiny, 2);
        let x = Array3::from_shape_fn((3, 32, 32), |(c, r, cc)| {
            ((c * 7 + r * 3 + cc) as f64 * 0.13).sin() * 0.5
        });
        let f = |b: &Backbone| -> f64 {
            let (y, _) = b.forward(&x);
            y.iter().map(|v| v * v).sum()
        };
        let (y, cache) = b.forward(&x);
        let dy = y.mapv(|v| 2.0 * v);
        let mut grads: Vec<Array2<f64>> =
            b.params().iter().map(|p| Array2::zeros(p.dim())).collect();
        b.backward(dy, &cache, &mut grads);

        let mut bp = b.clone();
        let h = 1e-6;
        // Probe one entry in each layer's weights.
        for slot in [0usize, 2, 4, 6] {
            let base = f(&b);
            assert!(base.is_finite());
            {
                let mut ps = bp.params_mut();
                ps[slot][(0, 1)] += h;
            }
            let up = f(&bp);
            {
                let mut ps = bp.params_mut();
                ps[slot][(0, 1)] -= 2.0 * h;
            }
            let dn = f(&bp);
            {
                let mut ps = bp.params_mut();
                ps[slot][(0, 1)] += h;
            }
            let fd = (up - dn) / (2.0 * h);
            let got = grads[slot][(0, 1)];
            assert!(
                (fd - got).abs() < 1e-4 * fd.abs().max(1.0),
                "slot {slot}: fd {fd} vs analytic {got}"
            );
        }
    }

    #[test]
    fn resnet_backward_matches_finite_difference() {
        let b = Backbone::new(BackboneKind::Resnet50Fpn, 3);
        let x = Array3::from_shape_fn((3, 32, 32), |(c, r, cc)| {
            ((c * 5 + r * 2 + cc) as f64 * 0.21).sin() * 0.3
        });
        let f = |b: &Backbone| -> f64 {
            let (y, _) = b.forward(&x);
            y.iter().map(|v| v * v).sum()
        };
        let (y, cache) = b.forward(&x);
        let dy = y.mapv(|v| 2.0 * v);
        let mut grads: Vec<Array2<f64>> =
            b.params().iter().map(|p| Array2::zeros(p.dim())).collect();
        b.backward(dy, &cache, &mut grads);

        let mut bp = b.clone();
        let h = 1e-5;
        // Probe the stem, one mid-stage conv, a lateral, and the output head.
        let n = b.n_slots();
        for slot in [0usize, 20, n - 6, n - 2] {
            {
                let mut ps = bp.params_mut();
                ps[slot][(0, 0)] += h;
            }
            let up = f(&bp);
            {
                let mut ps = bp.params_mut();
                ps[slot][(0, 0)] -= 2.0 * h;
            }
            let dn = f(&bp);
            {
                let mut ps = bp.params_mut();
                ps[slot][(0, 0)] += h;
            }
            let fd = (up - dn) / (2.0 * h);
            let got = grads[slot][(0, 0)];
            assert!(
                (fd - got).abs() < 1e-3 * fd.abs().max(1.0),
                "slot {slot}: fd {fd} vs analytic {got}"
            );
        }
    }
}

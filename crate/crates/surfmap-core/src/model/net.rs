//! Encoder with three decoder heads: per-pixel UV, segmentation logits,
//! and a position-map residual predicted from the bottleneck.
//!
//! The backbone is deliberately small (a few hundred thousand parameters):
//! a stem plus three stride-2 stages, a skip-connected decoder for the
//! full-resolution heads, and a skip-free decoder for the residual.

use crate::error::{Result, SurfmapError};
use crate::geometry::Grid;
use crate::model::layers::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters. `channels` are the encoder widths per
/// stage; decoder widths derive from them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: [usize; 4],
    /// Residual head output resolution S; must equal the input image side.
    pub posmap_resolution: usize,
    /// Residual bound: the head squashes into [-r_max, r_max].
    pub r_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { channels: [12, 24, 48, 96], posmap_resolution: 64, r_max: 0.25 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) {
            return Err(SurfmapError::Config("model channels must be positive".into()));
        }
        if self.r_max <= 0.0 {
            return Err(SurfmapError::Config("r_max must be positive".into()));
        }
        if self.posmap_resolution % 8 != 0 {
            return Err(SurfmapError::Config("posmap_resolution must be divisible by 8".into()));
        }
        Ok(())
    }

    fn seg_channels(&self) -> [usize; 3] {
        [
            (self.channels[2] / 2).max(4),
            (self.channels[1] / 2).max(4),
            (self.channels[0] / 2).max(4),
        ]
    }
}

/// Conv + GroupNorm + LeakyReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub gn: GroupNorm,
}

impl ConvBlock {
    fn zeros(cin: usize, cout: usize, stride: usize) -> Self {
        ConvBlock { conv: Conv2d::zeros(cin, cout, stride), gn: GroupNorm::new(cout) }
    }

    fn forward(&self, x: &FeatureMap) -> (FeatureMap, BlockCache) {
        let (y, conv_cache) = self.conv.forward(x);
        let (mut y, gn_cache) = self.gn.forward(&y);
        leaky_relu_inplace(&mut y);
        let out = y.clone();
        (y, BlockCache { conv: conv_cache, gn: gn_cache, out })
    }

    fn backward(
        &self,
        cache: &BlockCache,
        mut dy: FeatureMap,
        grads: &mut ConvBlockGrads,
        need_dx: bool,
    ) -> Option<FeatureMap> {
        leaky_relu_backward(&cache.out, &mut dy);
        let d_gn = self.gn.backward(&cache.gn, &dy, &mut grads.gn);
        self.conv.backward(&cache.conv, &d_gn, &mut grads.conv, need_dx)
    }
}

pub struct BlockCache {
    conv: ConvCache,
    gn: GroupNormCache,
    out: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct ConvBlockGrads {
    pub conv: Conv2dGrads,
    pub gn: GroupNormGrads,
}

impl ConvBlockGrads {
    fn zeros_like(b: &ConvBlock) -> Self {
        ConvBlockGrads {
            conv: Conv2dGrads::zeros_like(&b.conv),
            gn: GroupNormGrads::zeros_like(&b.gn),
        }
    }
}

/// Network outputs in loss-ready form (f64 grids).
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// H x W UV predictions in [0,1]^2 (sigmoid-bounded).
    pub uv: Grid<2>,
    /// H x W segmentation logits (unbounded).
    pub seg_logits: Grid<1>,
    /// S x S x 3 residual in [-r_max, r_max] (tanh-bounded).
    pub residual: Grid<3>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub stem: ConvBlock,
    pub d1a: ConvBlock,
    pub d1b: ConvBlock,
    pub d2a: ConvBlock,
    pub d2b: ConvBlock,
    pub d3a: ConvBlock,
    pub d3b: ConvBlock,
    pub uv1: ConvBlock,
    pub uv2: ConvBlock,
    pub uv3: ConvBlock,
    pub uv_head: Conv2d,
    pub seg1: ConvBlock,
    pub seg2: ConvBlock,
    pub seg3: ConvBlock,
    pub seg_head: Conv2d,
    pub res1: ConvBlock,
    pub res2: ConvBlock,
    pub res3: ConvBlock,
    pub res4: ConvBlock,
    pub res_head: Conv2d,
}

macro_rules! by_ref {
    ($e:expr) => {
        &$e
    };
}
macro_rules! by_mut {
    ($e:expr) => {
        &mut $e
    };
}

/// Named parameter tensors in a fixed order shared by checkpoints, the
/// optimizer state and gradient accumulation.
macro_rules! model_param_list {
    ($s:expr, $b:ident) => {
        vec![
            ("stem.conv.weight", $b!($s.stem.conv.weight)),
            ("stem.conv.bias", $b!($s.stem.conv.bias)),
            ("stem.gn.gamma", $b!($s.stem.gn.gamma)),
            ("stem.gn.beta", $b!($s.stem.gn.beta)),
            ("d1a.conv.weight", $b!($s.d1a.conv.weight)),
            ("d1a.conv.bias", $b!($s.d1a.conv.bias)),
            ("d1a.gn.gamma", $b!($s.d1a.gn.gamma)),
            ("d1a.gn.beta", $b!($s.d1a.gn.beta)),
            ("d1b.conv.weight", $b!($s.d1b.conv.weight)),
            ("d1b.conv.bias", $b!($s.d1b.conv.bias)),
            ("d1b.gn.gamma", $b!($s.d1b.gn.gamma)),
            ("d1b.gn.beta", $b!($s.d1b.gn.beta)),
            ("d2a.conv.weight", $b!($s.d2a.conv.weight)),
            ("d2a.conv.bias", $b!($s.d2a.conv.bias)),
            ("d2a.gn.gamma", $b!($s.d2a.gn.gamma)),
            ("d2a.gn.beta", $b!($s.d2a.gn.beta)),
            ("d2b.conv.weight", $b!($s.d2b.conv.weight)),
            ("d2b.conv.bias", $b!($s.d2b.conv.bias)),
            ("d2b.gn.gamma", $b!($s.d2b.gn.gamma)),
            ("d2b.gn.beta", $b!($s.d2b.gn.beta)),
            ("d3a.conv.weight", $b!($s.d3a.conv.weight)),
            ("d3a.conv.bias", $b!($s.d3a.conv.bias)),
            ("d3a.gn.gamma", $b!($s.d3a.gn.gamma)),
            ("d3a.gn.beta", $b!($s.d3a.gn.beta)),
            ("d3b.conv.weight", $b!($s.d3b.conv.weight)),
            ("d3b.conv.bias", $b!($s.d3b.conv.bias)),
            ("d3b.gn.gamma", $b!($s.d3b.gn.gamma)),
            ("d3b.gn.beta", $b!($s.d3b.gn.beta)),
            ("uv1.conv.weight", $b!($s.uv1.conv.weight)),
            ("uv1.conv.bias", $b!($s.uv1.conv.bias)),
            ("uv1.gn.gamma", $b!($s.uv1.gn.gamma)),
            ("uv1.gn.beta", $b!($s.uv1.gn.beta)),
            ("uv2.conv.weight", $b!($s.uv2.conv.weight)),
            ("uv2.conv.bias", $b!($s.uv2.conv.bias)),
            ("uv2.gn.gamma", $b!($s.uv2.gn.gamma)),
            ("uv2.gn.beta", $b!($s.uv2.gn.beta)),
            ("uv3.conv.weight", $b!($s.uv3.conv.weight)),
            ("uv3.conv.bias", $b!($s.uv3.conv.bias)),
            ("uv3.gn.gamma", $b!($s.uv3.gn.gamma)),
            ("uv3.gn.beta", $b!($s.uv3.gn.beta)),
            ("uv_head.weight", $b!($s.uv_head.weight)),
            ("uv_head.bias", $b!($s.uv_head.bias)),
            ("seg1.conv.weight", $b!($s.seg1.conv.weight)),
            ("seg1.conv.bias", $b!($s.seg1.conv.bias)),
            ("seg1.gn.gamma", $b!($s.seg1.gn.gamma)),
            ("seg1.gn.beta", $b!($s.seg1.gn.beta)),
            ("seg2.conv.weight", $b!($s.seg2.conv.weight)),
            ("seg2.conv.bias", $b!($s.seg2.conv.bias)),
            ("seg2.gn.gamma", $b!($s.seg2.gn.gamma)),
            ("seg2.gn.beta", $b!($s.seg2.gn.beta)),
            ("seg3.conv.weight", $b!($s.seg3.conv.weight)),
            ("seg3.conv.bias", $b!($s.seg3.conv.bias)),
            ("seg3.gn.gamma", $b!($s.seg3.gn.gamma)),
            ("seg3.gn.beta", $b!($s.seg3.gn.beta)),
            ("seg_head.weight", $b!($s.seg_head.weight)),
            ("seg_head.bias", $b!($s.seg_head.bias)),
            ("res1.conv.weight", $b!($s.res1.conv.weight)),
            ("res1.conv.bias", $b!($s.res1.conv.bias)),
            ("res1.gn.gamma", $b!($s.res1.gn.gamma)),
            ("res1.gn.beta", $b!($s.res1.gn.beta)),
            ("res2.conv.weight", $b!($s.res2.conv.weight)),
            ("res2.conv.bias", $b!($s.res2.conv.bias)),
            ("res2.gn.gamma", $b!($s.res2.gn.gamma)),
            ("res2.gn.beta", $b!($s.res2.gn.beta)),
            ("res3.conv.weight", $b!($s.res3.conv.weight)),
            ("res3.conv.bias", $b!($s.res3.conv.bias)),
            ("res3.gn.gamma", $b!($s.res3.gn.gamma)),
            ("res3.gn.beta", $b!($s.res3.gn.beta)),
            ("res4.conv.weight", $b!($s.res4.conv.weight)),
            ("res4.conv.bias", $b!($s.res4.conv.bias)),
            ("res4.gn.gamma", $b!($s.res4.gn.gamma)),
            ("res4.gn.beta", $b!($s.res4.gn.beta)),
            ("res_head.weight", $b!($s.res_head.weight)),
            ("res_head.bias", $b!($s.res_head.bias)),
        ]
    };
}

impl Model {
    /// Fresh model with fan-in-scaled random init; the residual head's
    /// final layer starts at exactly zero so training begins from the
    /// average mesh.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let [c0, c1, c2, c3] = config.channels;
        let [s2, s1, s0] = config.seg_channels();
        let mut model = Model {
            config: config.clone(),
            stem: ConvBlock::zeros(3, c0, 1),
            d1a: ConvBlock::zeros(c0, c1, 2),
            d1b: ConvBlock::zeros(c1, c1, 1),
            d2a: ConvBlock::zeros(c1, c2, 2),
            d2b: ConvBlock::zeros(c2, c2, 1),
            d3a: ConvBlock::zeros(c2, c3, 2),
            d3b: ConvBlock::zeros(c3, c3, 1),
            uv1: ConvBlock::zeros(c3 + c2, c2, 1),
            uv2: ConvBlock::zeros(c2 + c1, c1, 1),
            uv3: ConvBlock::zeros(c1 + c0, c0, 1),
            uv_head: Conv2d::zeros(c0, 2, 1),
            seg1: ConvBlock::zeros(c3 + c2, s2, 1),
            seg2: ConvBlock::zeros(s2 + c1, s1, 1),
            seg3: ConvBlock::zeros(s1 + c0, s0, 1),
            seg_head: Conv2d::zeros(s0, 1, 1),
            res1: ConvBlock::zeros(c3, c2, 1),
            res2: ConvBlock::zeros(c2, c1, 1),
            res3: ConvBlock::zeros(c1, c0, 1),
            res4: ConvBlock::zeros(c0, c0, 1),
            res_head: Conv2d::zeros(c0, 3, 1),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init_conv = |conv: &mut Conv2d, rng: &mut ChaCha8Rng| {
            let fan_in = (conv.cin * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
            for w in &mut conv.weight {
                *w = normal.sample(rng) as f32;
            }
            // biases stay zero, gn is identity at init
        };
        init_conv(&mut model.stem.conv, &mut rng);
        init_conv(&mut model.d1a.conv, &mut rng);
        init_conv(&mut model.d1b.conv, &mut rng);
        init_conv(&mut model.d2a.conv, &mut rng);
        init_conv(&mut model.d2b.conv, &mut rng);
        init_conv(&mut model.d3a.conv, &mut rng);
        init_conv(&mut model.d3b.conv, &mut rng);
        init_conv(&mut model.uv1.conv, &mut rng);
        init_conv(&mut model.uv2.conv, &mut rng);
        init_conv(&mut model.uv3.conv, &mut rng);
        init_conv(&mut model.uv_head, &mut rng);
        init_conv(&mut model.seg1.conv, &mut rng);
        init_conv(&mut model.seg2.conv, &mut rng);
        init_conv(&mut model.seg3.conv, &mut rng);
        init_conv(&mut model.seg_head, &mut rng);
        init_conv(&mut model.res1.conv, &mut rng);
        init_conv(&mut model.res2.conv, &mut rng);
        init_conv(&mut model.res3.conv, &mut rng);
        init_conv(&mut model.res4.conv, &mut rng);
        // zero-initialized residual head: forward(.).residual == 0 at init
        for w in &mut model.res_head.weight {
            *w = 0.0;
        }
        Ok(model)
    }

    pub fn param_tensors(&self) -> Vec<(&'static str, &Vec<f32>)> {
        model_param_list!(self, by_ref)
    }

    pub fn param_tensors_mut(&mut self) -> Vec<(&'static str, &mut Vec<f32>)> {
        model_param_list!(self, by_mut)
    }

    pub fn n_parameters(&self) -> usize {
        self.param_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Runs the network on a CHW image in [0,1].
    pub fn forward(&self, image: &[f32], h: usize, w: usize) -> Result<(ModelOutput, ForwardCache)> {
        if h % 8 != 0 || w % 8 != 0 {
            return Err(SurfmapError::Shape(format!("input {h}x{w} not divisible by stride 8")));
        }
        if image.len() != 3 * h * w {
            return Err(SurfmapError::Shape("image buffer does not match 3xHxW".into()));
        }
        let s = self.config.posmap_resolution;
        if h != s || w != s {
            return Err(SurfmapError::Shape(format!(
                "input {h}x{w} must match posmap resolution {s} (training resolution)"
            )));
        }
        let x = FeatureMap::from_data(3, h, w, image.to_vec());
        let (e0, c_stem) = self.stem.forward(&x);
        let (e1a, c_d1a) = self.d1a.forward(&e0);
        let (e1, c_d1b) = self.d1b.forward(&e1a);
        let (e2a, c_d2a) = self.d2a.forward(&e1);
        let (e2, c_d2b) = self.d2b.forward(&e2a);
        let (e3a, c_d3a) = self.d3a.forward(&e2);
        let (e3, c_d3b) = self.d3b.forward(&e3a);

        let cat_u1 = concat(&upsample2(&e3), &e2);
        let (u1, c_uv1) = self.uv1.forward(&cat_u1);
        let cat_u2 = concat(&upsample2(&u1), &e1);
        let (u2, c_uv2) = self.uv2.forward(&cat_u2);
        let cat_u3 = concat(&upsample2(&u2), &e0);
        let (u3, c_uv3) = self.uv3.forward(&cat_u3);
        let (mut uv_out, c_uv_head) = self.uv_head.forward(&u3);
        sigmoid_inplace(&mut uv_out);

        let cat_s1 = concat(&upsample2(&e3), &e2);
        let (s1, c_seg1) = self.seg1.forward(&cat_s1);
        let cat_s2 = concat(&upsample2(&s1), &e1);
        let (s2, c_seg2) = self.seg2.forward(&cat_s2);
        let cat_s3 = concat(&upsample2(&s2), &e0);
        let (s3, c_seg3) = self.seg3.forward(&cat_s3);
        let (seg_out, c_seg_head) = self.seg_head.forward(&s3);

        let (r1, c_res1) = self.res1.forward(&e3);
        let (r2, c_res2) = self.res2.forward(&upsample2(&r1));
        let (r3, c_res3) = self.res3.forward(&upsample2(&r2));
        let (r4, c_res4) = self.res4.forward(&upsample2(&r3));
        let (mut res_out, c_res_head) = self.res_head.forward(&r4);
        scaled_tanh_inplace(&mut res_out, self.config.r_max as f32);

        let output = ModelOutput {
            uv: feature_to_grid2(&uv_out),
            seg_logits: feature_to_grid1(&seg_out),
            residual: feature_to_grid3(&res_out),
        };
        let cache = ForwardCache {
            c_stem,
            c_d1a,
            c_d1b,
            c_d2a,
            c_d2b,
            c_d3a,
            c_d3b,
            c_uv1,
            c_uv2,
            c_uv3,
            c_uv_head,
            uv_out,
            c_seg1,
            c_seg2,
            c_seg3,
            c_seg_head,
            c_res1,
            c_res2,
            c_res3,
            c_res4,
            c_res_head,
            res_out,
        };
        Ok((output, cache))
    }

    /// Backpropagates head gradients (f64 grids from the losses) into
    /// parameter gradients.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_uv: &Grid<2>,
        d_seg: &Grid<1>,
        d_residual: &Grid<3>,
        grads: &mut ModelGrads,
    ) {
        let r_max = self.config.r_max as f32;

        // ---- residual decoder ----
        let mut d_res = grid3_to_feature(d_residual);
        scaled_tanh_backward(&cache.res_out, r_max, &mut d_res);
        let d_r4 = self.res_head.backward(&cache.c_res_head, &d_res, &mut grads.res_head, true).unwrap();
        let d_r3_up = self.res4.backward(&cache.c_res4, d_r4, &mut grads.res4, true).unwrap();
        let d_r3 = upsample2_backward(&d_r3_up);
        let d_r2_up = self.res3.backward(&cache.c_res3, d_r3, &mut grads.res3, true).unwrap();
        let d_r2 = upsample2_backward(&d_r2_up);
        let d_r1_up = self.res2.backward(&cache.c_res2, d_r2, &mut grads.res2, true).unwrap();
        let d_r1 = upsample2_backward(&d_r1_up);
        let mut d_e3 = self.res1.backward(&cache.c_res1, d_r1, &mut grads.res1, true).unwrap();

        // ---- uv decoder ----
        let [_, c1, c2, c3] = self.config.channels;
        let mut d_uv_f = grid2_to_feature(d_uv);
        sigmoid_backward(&cache.uv_out, &mut d_uv_f);
        let d_u3 = self.uv_head.backward(&cache.c_uv_head, &d_uv_f, &mut grads.uv_head, true).unwrap();
        let d_cat_u3 = self.uv3.backward(&cache.c_uv3, d_u3, &mut grads.uv3, true).unwrap();
        let (d_u2_up, mut d_e0) = split_grad(&d_cat_u3, c1);
        let d_u2 = upsample2_backward(&d_u2_up);
        let d_cat_u2 = self.uv2.backward(&cache.c_uv2, d_u2, &mut grads.uv2, true).unwrap();
        let (d_u1_up, mut d_e1) = split_grad(&d_cat_u2, c2);
        let d_u1 = upsample2_backward(&d_u1_up);
        let d_cat_u1 = self.uv1.backward(&cache.c_uv1, d_u1, &mut grads.uv1, true).unwrap();
        let (d_e3_up, mut d_e2) = split_grad(&d_cat_u1, c3);
        add_assign(&mut d_e3, &upsample2_backward(&d_e3_up));

        // ---- seg decoder ----
        let [s2c, s1c, _s0c] = self.config.seg_channels();
        let d_seg_f = grid1_to_feature(d_seg);
        let d_s3 = self.seg_head.backward(&cache.c_seg_head, &d_seg_f, &mut grads.seg_head, true).unwrap();
        let d_cat_s3 = self.seg3.backward(&cache.c_seg3, d_s3, &mut grads.seg3, true).unwrap();
        let (d_s2_up, d_e0_seg) = split_grad(&d_cat_s3, s1c);
        add_assign(&mut d_e0, &d_e0_seg);
        let d_s2 = upsample2_backward(&d_s2_up);
        let d_cat_s2 = self.seg2.backward(&cache.c_seg2, d_s2, &mut grads.seg2, true).unwrap();
        let (d_s1_up, d_e1_seg) = split_grad(&d_cat_s2, s2c);
        add_assign(&mut d_e1, &d_e1_seg);
        let d_s1 = upsample2_backward(&d_s1_up);
        let d_cat_s1 = self.seg1.backward(&cache.c_seg1, d_s1, &mut grads.seg1, true).unwrap();
        let (d_e3_up_s, d_e2_seg) = split_grad(&d_cat_s1, c3);
        add_assign(&mut d_e2, &d_e2_seg);
        add_assign(&mut d_e3, &upsample2_backward(&d_e3_up_s));

        // ---- encoder ----
        let d_e3a = self.d3b.backward(&cache.c_d3b, d_e3, &mut grads.d3b, true).unwrap();
        let d_e2_enc = self.d3a.backward(&cache.c_d3a, d_e3a, &mut grads.d3a, true).unwrap();
        add_assign(&mut d_e2, &d_e2_enc);
        let d_e2a = self.d2b.backward(&cache.c_d2b, d_e2, &mut grads.d2b, true).unwrap();
        let d_e1_enc = self.d2a.backward(&cache.c_d2a, d_e2a, &mut grads.d2a, true).unwrap();
        add_assign(&mut d_e1, &d_e1_enc);
        let d_e1a = self.d1b.backward(&cache.c_d1b, d_e1, &mut grads.d1b, true).unwrap();
        let d_e0_enc = self.d1a.backward(&cache.c_d1a, d_e1a, &mut grads.d1a, true).unwrap();
        add_assign(&mut d_e0, &d_e0_enc);
        self.stem.backward(&cache.c_stem, d_e0, &mut grads.stem, false);
    }
}

pub struct ForwardCache {
    c_stem: BlockCache,
    c_d1a: BlockCache,
    c_d1b: BlockCache,
    c_d2a: BlockCache,
    c_d2b: BlockCache,
    c_d3a: BlockCache,
    c_d3b: BlockCache,
    c_uv1: BlockCache,
    c_uv2: BlockCache,
    c_uv3: BlockCache,
    c_uv_head: ConvCache,
    uv_out: FeatureMap,
    c_seg1: BlockCache,
    c_seg2: BlockCache,
    c_seg3: BlockCache,
    c_seg_head: ConvCache,
    c_res1: BlockCache,
    c_res2: BlockCache,
    c_res3: BlockCache,
    c_res4: BlockCache,
    c_res_head: ConvCache,
    res_out: FeatureMap,
}

#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub stem: ConvBlockGrads,
    pub d1a: ConvBlockGrads,
    pub d1b: ConvBlockGrads,
    pub d2a: ConvBlockGrads,
    pub d2b: ConvBlockGrads,
    pub d3a: ConvBlockGrads,
    pub d3b: ConvBlockGrads,
    pub uv1: ConvBlockGrads,
    pub uv2: ConvBlockGrads,
    pub uv3: ConvBlockGrads,
    pub uv_head: Conv2dGrads,
    pub seg1: ConvBlockGrads,
    pub seg2: ConvBlockGrads,
    pub seg3: ConvBlockGrads,
    pub seg_head: Conv2dGrads,
    pub res1: ConvBlockGrads,
    pub res2: ConvBlockGrads,
    pub res3: ConvBlockGrads,
    pub res4: ConvBlockGrads,
    pub res_head: Conv2dGrads,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        ModelGrads {
            stem: ConvBlockGrads::zeros_like(&model.stem),
            d1a: ConvBlockGrads::zeros_like(&model.d1a),
            d1b: ConvBlockGrads::zeros_like(&model.d1b),
            d2a: ConvBlockGrads::zeros_like(&model.d2a),
            d2b: ConvBlockGrads::zeros_like(&model.d2b),
            d3a: ConvBlockGrads::zeros_like(&model.d3a),
            d3b: ConvBlockGrads::zeros_like(&model.d3b),
            uv1: ConvBlockGrads::zeros_like(&model.uv1),
            uv2: ConvBlockGrads::zeros_like(&model.uv2),
            uv3: ConvBlockGrads::zeros_like(&model.uv3),
            uv_head: Conv2dGrads::zeros_like(&model.uv_head),
            seg1: ConvBlockGrads::zeros_like(&model.seg1),
            seg2: ConvBlockGrads::zeros_like(&model.seg2),
            seg3: ConvBlockGrads::zeros_like(&model.seg3),
            seg_head: Conv2dGrads::zeros_like(&model.seg_head),
            res1: ConvBlockGrads::zeros_like(&model.res1),
            res2: ConvBlockGrads::zeros_like(&model.res2),
            res3: ConvBlockGrads::zeros_like(&model.res3),
            res4: ConvBlockGrads::zeros_like(&model.res4),
            res_head: Conv2dGrads::zeros_like(&model.res_head),
        }
    }

    pub fn param_tensors(&self) -> Vec<(&'static str, &Vec<f32>)> {
        model_param_list!(self, by_ref)
    }

    /// Elementwise accumulate, used for the deterministic batch reduction.
    pub fn add_assign(&mut self, other: &ModelGrads) {
        let mine = model_param_list!(self, by_mut);
        let theirs = model_param_list!(other, by_ref);
        for ((_, a), (_, b)) in mine.into_iter().zip(theirs) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }
}

fn add_assign(a: &mut FeatureMap, b: &FeatureMap) {
    debug_assert_eq!(a.data.len(), b.data.len());
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
}

fn feature_to_grid2(f: &FeatureMap) -> Grid<2> {
    let hw = f.h * f.w;
    Grid::<2>::from_fn(f.h, f.w, |row, col| {
        let i = row * f.w + col;
        [f.data[i] as f64, f.data[hw + i] as f64]
    })
}

fn feature_to_grid1(f: &FeatureMap) -> Grid<1> {
    Grid::<1>::from_fn(f.h, f.w, |row, col| [f.data[row * f.w + col] as f64])
}

fn feature_to_grid3(f: &FeatureMap) -> Grid<3> {
    let hw = f.h * f.w;
    Grid::<3>::from_fn(f.h, f.w, |row, col| {
        let i = row * f.w + col;
        [f.data[i] as f64, f.data[hw + i] as f64, f.data[2 * hw + i] as f64]
    })
}

fn grid2_to_feature(g: &Grid<2>) -> FeatureMap {
    let (h, w) = (g.h(), g.w());
    let hw = h * w;
    let mut f = FeatureMap::zeros(2, h, w);
    for (i, t) in g.data().iter().enumerate() {
        f.data[i] = t[0] as f32;
        f.data[hw + i] = t[1] as f32;
    }
    f
}

fn grid1_to_feature(g: &Grid<1>) -> FeatureMap {
    let mut f = FeatureMap::zeros(1, g.h(), g.w());
    for (i, t) in g.data().iter().enumerate() {
        f.data[i] = t[0] as f32;
    }
    f
}

fn grid3_to_feature(g: &Grid<3>) -> FeatureMap {
    let (h, w) = (g.h(), g.w());
    let hw = h * w;
    let mut f = FeatureMap::zeros(3, h, w);
    for (i, t) in g.data().iter().enumerate() {
        f.data[i] = t[0] as f32;
        f.data[hw + i] = t[1] as f32;
        f.data[2 * hw + i] = t[2] as f32;
    }
    f
}

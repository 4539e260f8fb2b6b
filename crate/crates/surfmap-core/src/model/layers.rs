//! Network building blocks with explicit forward/backward passes.
//!
//! Everything is f32 and single-image; the trainer parallelizes across
//! batch elements. Convolutions lower to im2col plus a sgemm call, which
//! is where nearly all the training time goes.

use matrixmultiply::sgemm;

/// CHW feature map.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        FeatureMap { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_data(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w);
        FeatureMap { c, h, w, data }
    }
}

/// 3x3 convolution, zero padding 1, stride 1 or 2.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    /// (cout, cin*9) row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn zeros(cin: usize, cout: usize, stride: usize) -> Self {
        Conv2d { cin, cout, stride, weight: vec![0.0; cout * cin * 9], bias: vec![0.0; cout] }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        // pad 1, kernel 3: stride 1 keeps size, stride 2 halves it
        ((h + 2 - 3) / self.stride + 1, (w + 2 - 3) / self.stride + 1)
    }

    /// Lowered patch matrix, shape (cin*9, oh*ow) row-major.
    fn im2col(&self, x: &FeatureMap, oh: usize, ow: usize) -> Vec<f32> {
        let k = self.cin * 9;
        let npix = oh * ow;
        let mut col = vec![0.0f32; k * npix];
        let (h, w) = (x.h, x.w);
        for c in 0..self.cin {
            let plane = &x.data[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (c * 9 + ky * 3 + kx) * npix;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = iy as usize * w;
                        let dst = row + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            col[dst + ox] = plane[src + ix as usize];
                        }
                    }
                }
            }
        }
        col
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, ConvCache) {
        assert_eq!(x.c, self.cin);
        let (oh, ow) = self.out_hw(x.h, x.w);
        let npix = oh * ow;
        let k = self.cin * 9;
        let col = self.im2col(x, oh, ow);
        let mut y = vec![0.0f32; self.cout * npix];
        // y (cout, npix) = weight (cout, k) * col (k, npix)
        unsafe {
            sgemm(
                self.cout,
                k,
                npix,
                1.0,
                self.weight.as_ptr(),
                k as isize,
                1,
                col.as_ptr(),
                npix as isize,
                1,
                0.0,
                y.as_mut_ptr(),
                npix as isize,
                1,
            );
        }
        for c in 0..self.cout {
            let b = self.bias[c];
            for v in &mut y[c * npix..(c + 1) * npix] {
                *v += b;
            }
        }
        (
            FeatureMap::from_data(self.cout, oh, ow, y),
            ConvCache { col, in_h: x.h, in_w: x.w, out_h: oh, out_w: ow },
        )
    }

    /// Backward pass. Returns d_input unless `need_dx` is false.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &FeatureMap,
        grads: &mut Conv2dGrads,
        need_dx: bool,
    ) -> Option<FeatureMap> {
        let npix = cache.out_h * cache.out_w;
        let k = self.cin * 9;
        debug_assert_eq!(dy.data.len(), self.cout * npix);
        // d_weight (cout, k) += dy (cout, npix) * col^T (npix, k)
        unsafe {
            sgemm(
                self.cout,
                npix,
                k,
                1.0,
                dy.data.as_ptr(),
                npix as isize,
                1,
                cache.col.as_ptr(),
                1,
                npix as isize,
                1.0,
                grads.weight.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        for c in 0..self.cout {
            let mut s = 0.0f32;
            for v in &dy.data[c * npix..(c + 1) * npix] {
                s += v;
            }
            grads.bias[c] += s;
        }
        if !need_dx {
            return None;
        }
        // d_col (k, npix) = weight^T (k, cout) * dy (cout, npix)
        let mut dcol = vec![0.0f32; k * npix];
        unsafe {
            sgemm(
                k,
                self.cout,
                npix,
                1.0,
                self.weight.as_ptr(),
                1,
                k as isize,
                dy.data.as_ptr(),
                npix as isize,
                1,
                0.0,
                dcol.as_mut_ptr(),
                npix as isize,
                1,
            );
        }
        // col2im scatter-add
        let mut dx = FeatureMap::zeros(self.cin, cache.in_h, cache.in_w);
        let (h, w) = (cache.in_h, cache.in_w);
        for c in 0..self.cin {
            let plane = &mut dx.data[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (c * 9 + ky * 3 + kx) * npix;
                    for oy in 0..cache.out_h {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = iy as usize * w;
                        let src = row + oy * cache.out_w;
                        for ox in 0..cache.out_w {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            plane[dst + ix as usize] += dcol[src + ox];
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

pub struct ConvCache {
    col: Vec<f32>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2dGrads {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        Conv2dGrads { weight: vec![0.0; conv.weight.len()], bias: vec![0.0; conv.bias.len()] }
    }
}

/// Group normalization over channel groups, per sample.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

const GN_EPS: f32 = 1e-5;

impl GroupNorm {
    /// Largest group count <= 4 that divides `channels`.
    pub fn new(channels: usize) -> Self {
        let groups = [4usize, 2, 1].into_iter().find(|g| channels % g == 0).unwrap();
        GroupNorm { channels, groups, gamma: vec![1.0; channels], beta: vec![0.0; channels] }
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, GroupNormCache) {
        assert_eq!(x.c, self.channels);
        let hw = x.h * x.w;
        let cpg = self.channels / self.groups;
        let group_len = cpg * hw;
        let mut xhat = vec![0.0f32; x.data.len()];
        let mut inv_std = vec![0.0f32; self.groups];
        let mut y = FeatureMap::zeros(x.c, x.h, x.w);
        for g in 0..self.groups {
            let base = g * group_len;
            let slice = &x.data[base..base + group_len];
            let mean = slice.iter().sum::<f32>() / group_len as f32;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / group_len as f32;
            let istd = 1.0 / (var + GN_EPS).sqrt();
            inv_std[g] = istd;
            for c in 0..cpg {
                let ch = g * cpg + c;
                let (ga, be) = (self.gamma[ch], self.beta[ch]);
                for i in 0..hw {
                    let idx = ch * hw + i;
                    let xh = (x.data[idx] - mean) * istd;
                    xhat[idx] = xh;
                    y.data[idx] = ga * xh + be;
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &GroupNormCache,
        dy: &FeatureMap,
        grads: &mut GroupNormGrads,
    ) -> FeatureMap {
        let hw = dy.h * dy.w;
        let cpg = self.channels / self.groups;
        let group_len = (cpg * hw) as f32;
        let mut dx = FeatureMap::zeros(dy.c, dy.h, dy.w);
        for g in 0..self.groups {
            let mut sum_dxhat = 0.0f32;
            let mut sum_dxhat_xhat = 0.0f32;
            for c in 0..cpg {
                let ch = g * cpg + c;
                let ga = self.gamma[ch];
                let mut dgamma = 0.0f32;
                let mut dbeta = 0.0f32;
                for i in 0..hw {
                    let idx = ch * hw + i;
                    let d = dy.data[idx];
                    let xh = cache.xhat[idx];
                    dgamma += d * xh;
                    dbeta += d;
                    let dxh = d * ga;
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xh;
                }
                grads.gamma[ch] += dgamma;
                grads.beta[ch] += dbeta;
            }
            let istd = cache.inv_std[g];
            for c in 0..cpg {
                let ch = g * cpg + c;
                let ga = self.gamma[ch];
                for i in 0..hw {
                    let idx = ch * hw + i;
                    let dxh = dy.data[idx] * ga;
                    dx.data[idx] = istd
                        * (dxh - sum_dxhat / group_len - cache.xhat[idx] * sum_dxhat_xhat / group_len);
                }
            }
        }
        dx
    }
}

pub struct GroupNormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct GroupNormGrads {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl GroupNormGrads {
    pub fn zeros_like(gn: &GroupNorm) -> Self {
        GroupNormGrads { gamma: vec![0.0; gn.gamma.len()], beta: vec![0.0; gn.beta.len()] }
    }
}

pub const LEAKY_SLOPE: f32 = 0.1;

pub fn leaky_relu_inplace(x: &mut FeatureMap) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Backward through leaky relu given the layer OUTPUT (slope > 0 makes the
/// output sign match the input sign).
pub fn leaky_relu_backward(y: &FeatureMap, dy: &mut FeatureMap) {
    for (d, &out) in dy.data.iter_mut().zip(&y.data) {
        if out < 0.0 {
            *d *= LEAKY_SLOPE;
        }
    }
}

pub fn upsample2(x: &FeatureMap) -> FeatureMap {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut y = FeatureMap::zeros(x.c, h2, w2);
    for c in 0..x.c {
        for row in 0..x.h {
            for col in 0..x.w {
                let v = x.data[(c * x.h + row) * x.w + col];
                let base = (c * h2 + row * 2) * w2 + col * 2;
                y.data[base] = v;
                y.data[base + 1] = v;
                y.data[base + w2] = v;
                y.data[base + w2 + 1] = v;
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &FeatureMap) -> FeatureMap {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = FeatureMap::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for row in 0..h {
            for col in 0..w {
                let base = (c * dy.h + row * 2) * dy.w + col * 2;
                dx.data[(c * h + row) * w + col] =
                    dy.data[base] + dy.data[base + 1] + dy.data[base + dy.w] + dy.data[base + dy.w + 1];
            }
        }
    }
    dx
}

pub fn concat(a: &FeatureMap, b: &FeatureMap) -> FeatureMap {
    assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap::from_data(a.c + b.c, a.h, a.w, data)
}

pub fn split_grad(d: &FeatureMap, c_a: usize) -> (FeatureMap, FeatureMap) {
    let hw = d.h * d.w;
    let da = FeatureMap::from_data(c_a, d.h, d.w, d.data[..c_a * hw].to_vec());
    let db = FeatureMap::from_data(d.c - c_a, d.h, d.w, d.data[c_a * hw..].to_vec());
    (da, db)
}

pub fn sigmoid_inplace(x: &mut FeatureMap) {
    for v in &mut x.data {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
}

/// Backward through sigmoid given the OUTPUT y.
pub fn sigmoid_backward(y: &FeatureMap, dy: &mut FeatureMap) {
    for (d, &out) in dy.data.iter_mut().zip(&y.data) {
        *d *= out * (1.0 - out);
    }
}

pub fn scaled_tanh_inplace(x: &mut FeatureMap, r_max: f32) {
    for v in &mut x.data {
        *v = r_max * v.tanh();
    }
}

/// Backward through `r_max * tanh` given the OUTPUT y.
pub fn scaled_tanh_backward(y: &FeatureMap, r_max: f32, dy: &mut FeatureMap) {
    for (d, &out) in dy.data.iter_mut().zip(&y.data) {
        let t = out / r_max;
        *d *= r_max * (1.0 - t * t);
    }
}

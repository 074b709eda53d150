//! A small CPU network library with hand-written backward passes: 2-D
//! convolution, group normalisation, ReLU, max pooling, global average
//! pooling, fully connected layers and residual blocks.
//!
//! Parameters live in a flat, named [`ParamStore`]; layers only hold
//! [`ParamId`]s into it. Two stores built from the same architecture are
//! structurally identical, which is what the momentum branch relies on.
//!
//! Forward passes return caches that own each layer's output. A layer's input
//! is therefore always the previous cache's output, and backward passes take
//! `(input, cache, upstream gradient)`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::seed::Rng;

/// Dense `N x C x H x W` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "{} values for a {n}x{c}x{h}x{w} tensor",
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn same_shape(&self, other: &Tensor4) -> bool {
        (self.n, self.c, self.h, self.w) == (other.n, other.c, other.h, other.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
        });
        ParamId(self.params.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].data
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![0.0; p.data.len()],
                })
                .collect(),
        }
    }

    pub fn same_structure(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn check_structure(&self, other: &ParamStore) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            Err(Error::Shape("parameter stores have different layouts".into()))
        }
    }

    pub fn fill_zero(&mut self) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Parameters are created in a fixed order from one RNG stream.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.store.add(name, shape, data)
    }

    fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.store.add(name, shape, data)
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, value: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.store.add(name, shape, vec![value; n])
    }
}

#[inline]
fn view2(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("contiguous buffer")
}

#[inline]
fn view2_mut(data: &mut [f64], rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("contiguous buffer")
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-normal (fan-out) init, no bias; every conv feeds a norm layer.
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        let std = (2.0 / (c_out * kernel * kernel) as f64).sqrt();
        let weight = init.normal(format!("{name}.weight"), vec![c_out, c_in, kernel, kernel], std);
        Self {
            weight,
            c_in,
            c_out,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f64]) {
        let k = self.kernel;
        let ohw = oh * ow;
        for c in 0..self.c_in {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
        let k = self.kernel;
        let ohw = oh * ow;
        for c in 0..self.c_in {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor4) -> Tensor4 {
        assert_eq!(x.c, self.c_in, "conv input channels");
        let (oh, ow) = self.out_size(x.h, x.w);
        let ckk = self.c_in * self.kernel * self.kernel;
        let mut y = Tensor4::zeros(x.n, self.c_out, oh, ow);
        let wmat = view2(ps.get(self.weight), self.c_out, ckk);
        let mut cols = vec![0.0; ckk * oh * ow];
        for i in 0..x.n {
            self.im2col(x.sample(i), x.h, x.w, oh, ow, &mut cols);
            let out = view2_mut(y.sample_mut(i), self.c_out, oh * ow);
            general_mat_mul(1.0, &wmat, &view2(&cols, ckk, oh * ow), 0.0, &mut { out });
        }
        y
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        x: &Tensor4,
        dy: &Tensor4,
        grads: &mut ParamStore,
        need_dx: bool,
    ) -> Option<Tensor4> {
        let (oh, ow) = (dy.h, dy.w);
        let ckk = self.c_in * self.kernel * self.kernel;
        let wmat = view2(ps.get(self.weight), self.c_out, ckk);
        let mut dx = need_dx.then(|| Tensor4::zeros(x.n, x.c, x.h, x.w));
        let mut cols = vec![0.0; ckk * oh * ow];
        let mut dcols = vec![0.0; ckk * oh * ow];
        for i in 0..x.n {
            self.im2col(x.sample(i), x.h, x.w, oh, ow, &mut cols);
            let dyi = view2(dy.sample(i), self.c_out, oh * ow);
            {
                let mut dw = view2_mut(grads.get_mut(self.weight), self.c_out, ckk);
                general_mat_mul(1.0, &dyi, &view2(&cols, ckk, oh * ow).t(), 1.0, &mut dw);
            }
            if let Some(dx) = dx.as_mut() {
                let mut dc = view2_mut(&mut dcols, ckk, oh * ow);
                general_mat_mul(1.0, &wmat.t(), &dyi, 0.0, &mut dc);
                self.col2im(&dcols, x.h, x.w, oh, ow, dx.sample_mut(i));
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl GroupNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize, groups: usize) -> Self {
        Self {
            gamma: init.constant(format!("{name}.gamma"), vec![channels], 1.0),
            beta: init.constant(format!("{name}.beta"), vec![channels], 0.0),
            channels,
            groups: gcd(channels, groups.max(1)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor4) -> (Tensor4, NormCache) {
        let (gamma, beta) = (ps.get(self.gamma), ps.get(self.beta));
        let hw = x.h * x.w;
        let cpg = self.channels / self.groups;
        let glen = cpg * hw;
        let mut y = Tensor4::zeros(x.n, x.c, x.h, x.w);
        let mut xhat = vec![0.0; x.data.len()];
        let mut inv_std = vec![0.0; x.n * self.groups];
        for i in 0..x.n {
            for g in 0..self.groups {
                let off = i * x.sample_len() + g * glen;
                let seg = &x.data[off..off + glen];
                let mean = seg.iter().sum::<f64>() / glen as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / glen as f64;
                let istd = 1.0 / (var + self.eps).sqrt();
                inv_std[i * self.groups + g] = istd;
                for ci in 0..cpg {
                    let c = g * cpg + ci;
                    for j in 0..hw {
                        let k = off + ci * hw + j;
                        let xh = (x.data[k] - mean) * istd;
                        xhat[k] = xh;
                        y.data[k] = gamma[c] * xh + beta[c];
                    }
                }
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, ps: &ParamStore, cache: &NormCache, dy: &Tensor4, grads: &mut ParamStore) -> Tensor4 {
        let gamma = ps.get(self.gamma).to_vec();
        let hw = dy.h * dy.w;
        let cpg = self.channels / self.groups;
        let glen = cpg * hw;
        let mut dgamma = vec![0.0; self.channels];
        let mut dbeta = vec![0.0; self.channels];
        let mut dx = Tensor4::zeros(dy.n, dy.c, dy.h, dy.w);
        let mut dxhat = vec![0.0; glen];
        for i in 0..dy.n {
            for g in 0..self.groups {
                let off = i * dy.sample_len() + g * glen;
                let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                for ci in 0..cpg {
                    let c = g * cpg + ci;
                    for j in 0..hw {
                        let k = off + ci * hw + j;
                        let d = dy.data[k];
                        dgamma[c] += d * cache.xhat[k];
                        dbeta[c] += d;
                        let dh = d * gamma[c];
                        dxhat[ci * hw + j] = dh;
                        sum_d += dh;
                        sum_dx += dh * cache.xhat[k];
                    }
                }
                let (mean_d, mean_dx) = (sum_d / glen as f64, sum_dx / glen as f64);
                let istd = cache.inv_std[i * self.groups + g];
                for j in 0..glen {
                    let k = off + j;
                    dx.data[k] = istd * (dxhat[j] - mean_d - cache.xhat[k] * mean_dx);
                }
            }
        }
        for (a, b) in grads.get_mut(self.gamma).iter_mut().zip(dgamma) {
            *a += b;
        }
        for (a, b) in grads.get_mut(self.beta).iter_mut().zip(dbeta) {
            *a += b;
        }
        dx
    }
}

/// Convolution, group norm and an optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvNorm {
    pub conv: Conv2d,
    pub norm: GroupNorm,
    pub relu: bool,
}

#[derive(Debug, Clone)]
pub struct ConvNormCache {
    pub out: Tensor4,
    norm: NormCache,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        relu: bool,
    ) -> Self {
        Self {
            conv: Conv2d::new(init, &format!("{name}.conv"), c_in, c_out, kernel, stride),
            norm: GroupNorm::new(init, &format!("{name}.norm"), c_out, groups),
            relu,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor4) -> ConvNormCache {
        let z = self.conv.forward(ps, x);
        let (mut out, norm) = self.norm.forward(ps, &z);
        if self.relu {
            out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        ConvNormCache { out, norm }
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        x: &Tensor4,
        cache: &ConvNormCache,
        mut dy: Tensor4,
        grads: &mut ParamStore,
        need_dx: bool,
    ) -> Option<Tensor4> {
        if self.relu {
            relu_mask(&mut dy, &cache.out);
        }
        let dz = self.norm.backward(ps, &cache.norm, &dy, grads);
        self.conv.backward(ps, x, &dz, grads, need_dx)
    }
}

fn relu_mask(dy: &mut Tensor4, out: &Tensor4) {
    for (d, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Residual block: `relu(main(x) + shortcut(x))`. The main path is two 3x3
/// convolutions (basic) or 1x1-3x3-1x1 (bottleneck); the last one has no
/// ReLU of its own. The shortcut is a projection when shape changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub main: Vec<ConvNorm>,
    pub shortcut: Option<ConvNorm>,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache {
    main: Vec<ConvNormCache>,
    shortcut: Option<ConvNormCache>,
    pub out: Tensor4,
}

impl ResBlock {
    pub fn basic(init: &mut Init, name: &str, c_in: usize, c_out: usize, stride: usize, groups: usize) -> Self {
        let main = vec![
            ConvNorm::new(init, &format!("{name}.a"), c_in, c_out, 3, stride, groups, true),
            ConvNorm::new(init, &format!("{name}.b"), c_out, c_out, 3, 1, groups, false),
        ];
        let shortcut = (stride != 1 || c_in != c_out)
            .then(|| ConvNorm::new(init, &format!("{name}.shortcut"), c_in, c_out, 1, stride, groups, false));
        Self { main, shortcut }
    }

    /// Bottleneck with expansion 4: `width` inner channels, `4 * width` out.
    pub fn bottleneck(init: &mut Init, name: &str, c_in: usize, width: usize, stride: usize, groups: usize) -> Self {
        let c_out = width * 4;
        let main = vec![
            ConvNorm::new(init, &format!("{name}.a"), c_in, width, 1, 1, groups, true),
            ConvNorm::new(init, &format!("{name}.b"), width, width, 3, stride, groups, true),
            ConvNorm::new(init, &format!("{name}.c"), width, c_out, 1, 1, groups, false),
        ];
        let shortcut = (stride != 1 || c_in != c_out)
            .then(|| ConvNorm::new(init, &format!("{name}.shortcut"), c_in, c_out, 1, stride, groups, false));
        Self { main, shortcut }
    }

    pub fn out_channels(&self) -> usize {
        self.main.last().expect("non-empty block").conv.c_out
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor4) -> ResBlockCache {
        let mut main: Vec<ConvNormCache> = Vec::with_capacity(self.main.len());
        for layer in &self.main {
            let input = main.last().map_or(x, |c| &c.out);
            main.push(layer.forward(ps, input));
        }
        let shortcut = self.shortcut.as_ref().map(|s| s.forward(ps, x));
        let skip = shortcut.as_ref().map_or(x, |c| &c.out);
        let mut out = main.last().expect("non-empty block").out.clone();
        for (o, s) in out.data.iter_mut().zip(&skip.data) {
            *o = (*o + s).max(0.0);
        }
        ResBlockCache { main, shortcut, out }
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        x: &Tensor4,
        cache: &ResBlockCache,
        mut dy: Tensor4,
        grads: &mut ParamStore,
        need_dx: bool,
    ) -> Option<Tensor4> {
        relu_mask(&mut dy, &cache.out);
        let mut d = Some(dy.clone());
        for i in (0..self.main.len()).rev() {
            let input = if i == 0 { x } else { &cache.main[i - 1].out };
            let upstream = d.take().expect("inner layers always return a gradient");
            d = self.main[i].backward(ps, input, &cache.main[i], upstream, grads, need_dx || i > 0);
        }
        let d_skip = self.shortcut_backward(ps, x, cache, dy, grads, need_dx);
        match (d, d_skip) {
            (Some(mut a), Some(b)) => {
                a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
                Some(a)
            }
            _ => None,
        }
    }

    fn shortcut_backward(
        &self,
        ps: &ParamStore,
        x: &Tensor4,
        cache: &ResBlockCache,
        dy: Tensor4,
        grads: &mut ParamStore,
        need_dx: bool,
    ) -> Option<Tensor4> {
        match (&self.shortcut, &cache.shortcut) {
            (Some(s), Some(c)) => s.backward(ps, x, c, dy, grads, need_dx),
            _ => need_dx.then_some(dy),
        }
    }
}

/// 3x3 stride-2 max pooling with padding 1.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool;

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    pub out: Tensor4,
    argmax: Vec<usize>,
}

impl MaxPool {
    pub fn forward(&self, x: &Tensor4) -> MaxPoolCache {
        let (oh, ow) = ((x.h + 2 - 3) / 2 + 1, (x.w + 2 - 3) / 2 + 1);
        let mut out = Tensor4::zeros(x.n, x.c, oh, ow);
        let mut argmax = vec![0; out.data.len()];
        for plane in 0..x.n * x.c {
            let base = plane * x.h * x.w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base;
                    for ky in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let k = base + iy as usize * x.w + ix as usize;
                            if x.data[k] > best {
                                best = x.data[k];
                                best_i = k;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out.data[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        MaxPoolCache { out, argmax }
    }

    pub fn backward(&self, x: &Tensor4, cache: &MaxPoolCache, dy: &Tensor4) -> Tensor4 {
        let mut dx = Tensor4::zeros(x.n, x.c, x.h, x.w);
        for (o, &i) in cache.argmax.iter().enumerate() {
            dx.data[i] += dy.data[o];
        }
        dx
    }
}

/// Mean over the spatial axes: `N x C x H x W -> N x C`.
pub fn global_avg_pool(x: &Tensor4) -> Array2<f64> {
    let hw = (x.h * x.w) as f64;
    Array2::from_shape_fn((x.n, x.c), |(i, c)| {
        let off = (i * x.c + c) * x.h * x.w;
        x.data[off..off + x.h * x.w].iter().sum::<f64>() / hw
    })
}

pub fn global_avg_pool_backward(d: &Array2<f64>, h: usize, w: usize) -> Tensor4 {
    let (n, c) = d.dim();
    let hw = (h * w) as f64;
    let mut dx = Tensor4::zeros(n, c, h, w);
    for i in 0..n {
        for ch in 0..c {
            let g = d[(i, ch)] / hw;
            let off = (i * c + ch) * h * w;
            dx.data[off..off + h * w].iter_mut().for_each(|v| *v = g);
        }
    }
    dx
}

/// `y = x W^T + b` with `W: out x in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) for weights and bias.
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            weight: init.uniform(format!("{name}.weight"), vec![d_out, d_in], bound),
            bias: init.uniform(format!("{name}.bias"), vec![d_out], bound),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let w = view2(ps.get(self.weight), self.d_out, self.d_in);
        let mut y = x.dot(&w.t());
        let b = ps.get(self.bias);
        for mut row in y.rows_mut() {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        y
    }

    pub fn backward(&self, ps: &ParamStore, x: &Array2<f64>, dy: &Array2<f64>, grads: &mut ParamStore) -> Array2<f64> {
        {
            let mut dw = view2_mut(grads.get_mut(self.weight), self.d_out, self.d_in);
            general_mat_mul(1.0, &dy.t(), x, 1.0, &mut dw);
        }
        let db = dy.sum_axis(Axis(0));
        for (a, b) in grads.get_mut(self.bias).iter_mut().zip(db.iter()) {
            *a += b;
        }
        let w = view2(ps.get(self.weight), self.d_out, self.d_in);
        dy.dot(&w)
    }
}

/// Row-wise L2 normalisation; returns the unit rows and the original norms.
pub fn l2_normalize_rows(z: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut q = z.clone();
    let mut norms = Vec::with_capacity(z.nrows());
    for mut row in q.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (q, norms)
}

/// Gradient through `q = z / |z|`: `dz = (dq - q (q . dq)) / |z|`.
pub fn l2_normalize_rows_backward(q: &Array2<f64>, norms: &[f64], dq: &Array2<f64>) -> Array2<f64> {
    let mut dz = dq.clone();
    for (i, mut row) in dz.rows_mut().into_iter().enumerate() {
        let qi = q.row(i);
        let dot = qi.dot(&dq.row(i));
        row.iter_mut()
            .zip(qi.iter())
            .for_each(|(d, qv)| *d = (*d - qv * dot) / norms[i]);
    }
    dz
}

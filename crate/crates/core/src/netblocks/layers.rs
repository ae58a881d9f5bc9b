//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Spatial tensors are `(N, C, H, W)` and vectors `(N, D)`, both `f64` in
//! standard layout. `forward` runs in training mode and caches what
//! `backward` needs; `infer` is the immutable evaluation-mode path.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2};
use rand_chacha::ChaCha8Rng;

use super::param::{join, HasParams, Param, ParamKind};

pub type Tensor4 = Array4<f64>;
pub type Tensor2 = Array2<f64>;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// A spatial layer usable inside a backbone.
pub trait Layer: HasParams + Send + Sync {
    fn infer(&self, x: &Tensor4) -> Tensor4;
    fn forward(&mut self, x: &Tensor4) -> Tensor4;
    fn backward(&mut self, grad: &Tensor4) -> Tensor4;
    /// `(C, H, W)` of the output for a `(C, H, W)` input.
    fn out_shape(&self, input: (usize, usize, usize)) -> (usize, usize, usize);
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad).saturating_sub(k) / stride + 1
}

pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Tensor2, (usize, usize, usize, usize))>,
}

impl Conv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_c * kernel * kernel) as f64;
        Self {
            weight: Param::normal(&[out_c, in_c, kernel, kernel], (2.0 / fan_in).sqrt(), rng),
            bias: bias.then(|| Param::zeros(&[out_c], ParamKind::NoDecay)),
            in_channels: in_c,
            out_channels: out_c,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    fn weight2(&self) -> ndarray::ArrayView2<'_, f64> {
        let k2 = self.in_channels * self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, k2))
            .expect("conv weight is contiguous")
    }

    fn im2col(&self, x: &Tensor4) -> (Tensor2, usize, usize) {
        let (n, c, h, w) = x.dim();
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let (oh, ow) = (conv_out(h, k, s, p), conv_out(w, k, s, p));
        let l = oh * ow;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut cols = Tensor2::zeros((c * k * k, n * l));
        let cs = cols.as_slice_mut().expect("fresh array");
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let base = ((ci * k + ki) * k + kj) * n * l;
                    for ni in 0..n {
                        let xoff = (ni * c + ci) * h * w;
                        let coff = base + ni * l;
                        for oy in 0..oh {
                            let iy = (oy * s + ki) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xoff + iy as usize * w;
                            let crow = coff + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * s + kj) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    cs[crow + ox] = xs[xrow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        (cols, oh, ow)
    }

    fn col2im(&self, cols: &Tensor2, dims: (usize, usize, usize, usize)) -> Tensor4 {
        let (n, c, h, w) = dims;
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let (oh, ow) = (conv_out(h, k, s, p), conv_out(w, k, s, p));
        let l = oh * ow;
        let mut out = Tensor4::zeros(dims);
        let os = out.as_slice_mut().expect("fresh array");
        let cs = cols.as_slice().expect("standard layout");
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let base = ((ci * k + ki) * k + kj) * n * l;
                    for ni in 0..n {
                        let xoff = (ni * c + ci) * h * w;
                        let coff = base + ni * l;
                        for oy in 0..oh {
                            let iy = (oy * s + ki) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xoff + iy as usize * w;
                            let crow = coff + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * s + kj) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    os[xrow + ix as usize] += cs[crow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn apply(&self, cols: &Tensor2, n: usize, oh: usize, ow: usize) -> Tensor4 {
        let mut y = self.weight2().dot(cols);
        if let Some(b) = &self.bias {
            let b = b.value.view().into_dimensionality::<Ix1>().expect("bias is 1-d");
            for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(b.iter()) {
                row += bv;
            }
        }
        y.into_shape_with_order((self.out_channels, n, oh, ow))
            .expect("contiguous")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
    }
}

impl HasParams for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

impl Layer for Conv2d {
    fn infer(&self, x: &Tensor4) -> Tensor4 {
        let (cols, oh, ow) = self.im2col(x);
        self.apply(&cols, x.dim().0, oh, ow)
    }

    fn forward(&mut self, x: &Tensor4) -> Tensor4 {
        let (cols, oh, ow) = self.im2col(x);
        let y = self.apply(&cols, x.dim().0, oh, ow);
        self.cache = Some((cols, x.dim()));
        y
    }

    fn backward(&mut self, grad: &Tensor4) -> Tensor4 {
        let (cols, dims) = self.cache.take().expect("conv backward without forward");
        let (n, o, oh, ow) = grad.dim();
        let g2 = grad
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, n * oh * ow))
            .expect("contiguous");
        let dw = g2.dot(&cols.t());
        let mut wg = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order(dw.dim())
            .expect("contiguous");
        wg += &dw;
        if let Some(b) = &mut self.bias {
            let db = g2.sum_axis(Axis(1));
            let mut bg = b.grad.view_mut().into_dimensionality::<Ix1>().expect("1-d");
            bg += &db;
        }
        let dcols = self.weight2().t().dot(&g2);
        self.col2im(&dcols, dims)
    }

    fn out_shape(&self, (_, h, w): (usize, usize, usize)) -> (usize, usize, usize) {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        (self.out_channels, conv_out(h, k, s, p), conv_out(w, k, s, p))
    }
}

/// Batch normalization over `(N, H, W)` per channel. Vectors use it with
/// `H = W = 1`.
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<(Tensor4, Array1<f64>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], 1.0, ParamKind::NoDecay),
            beta: Param::zeros(&[channels], ParamKind::NoDecay),
            running_mean: Param::zeros(&[channels], ParamKind::Buffer),
            running_var: Param::filled(&[channels], 1.0, ParamKind::Buffer),
            cache: None,
        }
    }

    fn vec(p: &Param) -> ndarray::ArrayView1<'_, f64> {
        p.value.view().into_dimensionality::<Ix1>().expect("bn params are 1-d")
    }

    fn normalize(&self, x: &Tensor4, mean: &Array1<f64>, inv_std: &Array1<f64>) -> (Tensor4, Tensor4) {
        let gamma = Self::vec(&self.gamma);
        let beta = Self::vec(&self.beta);
        let mut xhat = x.as_standard_layout().into_owned();
        for mut sample in xhat.axis_iter_mut(Axis(0)) {
            for (c, mut plane) in sample.axis_iter_mut(Axis(0)).enumerate() {
                let (m, s) = (mean[c], inv_std[c]);
                plane.mapv_inplace(|v| (v - m) * s);
            }
        }
        let mut y = xhat.clone();
        for mut sample in y.axis_iter_mut(Axis(0)) {
            for (c, mut plane) in sample.axis_iter_mut(Axis(0)).enumerate() {
                let (g, b) = (gamma[c], beta[c]);
                plane.mapv_inplace(|v| v * g + b);
            }
        }
        (xhat, y)
    }

    pub fn infer4(&self, x: &Tensor4) -> Tensor4 {
        let mean = Self::vec(&self.running_mean).to_owned();
        let inv_std = Self::vec(&self.running_var).mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        self.normalize(x, &mean, &inv_std).1
    }

    pub fn forward4(&mut self, x: &Tensor4) -> Tensor4 {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ch in 0..c {
            let plane = x.index_axis(Axis(1), ch);
            let m = plane.sum() / count;
            let v = plane.fold(0.0, |acc, &e| acc + (e - m) * (e - m)) / count;
            mean[ch] = m;
            var[ch] = v;
        }
        let inv_std = var.mapv(|v: f64| 1.0 / (v + BN_EPS).sqrt());
        let (xhat, y) = self.normalize(x, &mean, &inv_std);
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let mut rm = self
            .running_mean
            .value
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("1-d");
        rm.zip_mut_with(&mean, |r, &m| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
        let mut rv = self
            .running_var
            .value
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("1-d");
        rv.zip_mut_with(&var, |r, &v| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias);
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn backward4(&mut self, grad: &Tensor4) -> Tensor4 {
        let (xhat, inv_std) = self.cache.take().expect("batch norm backward without forward");
        let (n, c, h, w) = grad.dim();
        let count = (n * h * w) as f64;
        let gamma = Self::vec(&self.gamma).to_owned();
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        let mut dx = Tensor4::zeros(grad.dim());
        for ch in 0..c {
            let g = grad.index_axis(Axis(1), ch);
            let xh = xhat.index_axis(Axis(1), ch);
            let sum_g = g.sum();
            let sum_gx = ndarray::Zip::from(&g).and(&xh).fold(0.0, |a, &gv, &xv| a + gv * xv);
            dgamma[ch] = sum_gx;
            dbeta[ch] = sum_g;
            let scale = gamma[ch] * inv_std[ch] / count;
            let mut out = dx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gv, &xv| {
                *o = scale * (count * gv - sum_g - xv * sum_gx);
            });
        }
        let mut gg = self.gamma.grad.view_mut().into_dimensionality::<Ix1>().expect("1-d");
        gg += &dgamma;
        let mut bg = self.beta.grad.view_mut().into_dimensionality::<Ix1>().expect("1-d");
        bg += &dbeta;
        dx
    }

    pub fn infer2(&self, x: &Tensor2) -> Tensor2 {
        to2(self.infer4(&to4(x)))
    }

    pub fn forward2(&mut self, x: &Tensor2) -> Tensor2 {
        to2(self.forward4(&to4(x)))
    }

    pub fn backward2(&mut self, grad: &Tensor2) -> Tensor2 {
        to2(self.backward4(&to4(grad)))
    }
}

fn to4(x: &Tensor2) -> Tensor4 {
    let (n, d) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, d, 1, 1))
        .expect("contiguous")
}

fn to2(x: Tensor4) -> Tensor2 {
    let (n, d, _, _) = x.dim();
    x.into_shape_with_order((n, d)).expect("contiguous")
}

impl HasParams for BatchNorm2d {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

impl Layer for BatchNorm2d {
    fn infer(&self, x: &Tensor4) -> Tensor4 {
        self.infer4(x)
    }

    fn forward(&mut self, x: &Tensor4) -> Tensor4 {
        self.forward4(x)
    }

    fn backward(&mut self, grad: &Tensor4) -> Tensor4 {
        self.backward4(grad)
    }

    fn out_shape(&self, shape: (usize, usize, usize)) -> (usize, usize, usize) {
        shape
    }
}

#[derive(Default)]
pub struct Relu {
    mask: Option<ArrayD<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward_any<D: ndarray::Dimension>(&mut self, x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
        self.mask = Some(x.mapv(|v| v > 0.0).into_dyn());
        x.mapv(|v| v.max(0.0))
    }

    pub fn backward_any<D: ndarray::Dimension>(&mut self, grad: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
        let mask = self.mask.take().expect("relu backward without forward");
        let mut g = grad.clone().into_dyn();
        ndarray::Zip::from(&mut g).and(&mask).for_each(|gv, &m| {
            if !m {
                *gv = 0.0
            }
        });
        g.into_dimensionality::<D>().expect("same shape")
    }
}

impl HasParams for Relu {
    fn visit_params(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}

impl Layer for Relu {
    fn infer(&self, x: &Tensor4) -> Tensor4 {
        x.mapv(|v| v.max(0.0))
    }

    fn forward(&mut self, x: &Tensor4) -> Tensor4 {
        self.forward_any(x)
    }

    fn backward(&mut self, grad: &Tensor4) -> Tensor4 {
        self.backward_any(grad)
    }

    fn out_shape(&self, shape: (usize, usize, usize)) -> (usize, usize, usize) {
        shape
    }
}

/// Flat argmax per output element, and the input shape.
type ArgmaxCache = (Vec<usize>, (usize, usize, usize, usize));

/// Max pooling with implicit `-inf` padding.
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<ArgmaxCache>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    fn pool(&self, x: &Tensor4) -> (Tensor4, Vec<usize>) {
        let (n, c, h, w) = x.dim();
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let (oh, ow) = (conv_out(h, k, s, p), conv_out(w, k, s, p));
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Tensor4::zeros((n, c, oh, ow));
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        let os = out.as_slice_mut().expect("fresh");
        let mut o = 0;
        for plane in 0..n * c {
            let off = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ki in 0..k {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = off + iy as usize * w + ix as usize;
                            if xs[i] > best || best_i == usize::MAX {
                                best = xs[i];
                                best_i = i;
                            }
                        }
                    }
                    os[o] = best;
                    arg.push(best_i);
                    o += 1;
                }
            }
        }
        (out, arg)
    }
}

impl HasParams for MaxPool2d {
    fn visit_params(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}

impl Layer for MaxPool2d {
    fn infer(&self, x: &Tensor4) -> Tensor4 {
        self.pool(x).0
    }

    fn forward(&mut self, x: &Tensor4) -> Tensor4 {
        let (y, arg) = self.pool(x);
        self.cache = Some((arg, x.dim()));
        y
    }

    fn backward(&mut self, grad: &Tensor4) -> Tensor4 {
        let (arg, dims) = self.cache.take().expect("max pool backward without forward");
        let mut dx = Tensor4::zeros(dims);
        let ds = dx.as_slice_mut().expect("fresh");
        let g = grad.as_standard_layout();
        for (&i, &gv) in arg.iter().zip(g.iter()) {
            ds[i] += gv;
        }
        dx
    }

    fn out_shape(&self, (c, h, w): (usize, usize, usize)) -> (usize, usize, usize) {
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        (c, conv_out(h, k, s, p), conv_out(w, k, s, p))
    }
}

/// Named chain of spatial layers.
#[derive(Default)]
pub struct Sequential {
    pub layers: Vec<(String, Box<dyn Layer>)>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer + 'static) {
        self.layers.push((name.into(), Box::new(layer)));
    }

    /// Conv + batch norm + ReLU.
    pub fn push_conv_bn_relu(&mut self, name: &str, conv: Conv2d) {
        let c = conv.out_channels;
        self.push(format!("{name}.conv"), conv);
        self.push(format!("{name}.bn"), BatchNorm2d::new(c));
        self.push(format!("{name}.relu"), Relu::new());
    }
}

impl HasParams for Sequential {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (name, layer) in &mut self.layers {
            layer.visit_params(&join(prefix, name), f);
        }
    }
}

impl Layer for Sequential {
    fn infer(&self, x: &Tensor4) -> Tensor4 {
        let mut h = x.clone();
        for (_, l) in &self.layers {
            h = l.infer(&h);
        }
        h
    }

    fn forward(&mut self, x: &Tensor4) -> Tensor4 {
        let mut h = x.clone();
        for (_, l) in &mut self.layers {
            h = l.forward(&h);
        }
        h
    }

    fn backward(&mut self, grad: &Tensor4) -> Tensor4 {
        let mut g = grad.clone();
        for (_, l) in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn out_shape(&self, mut shape: (usize, usize, usize)) -> (usize, usize, usize) {
        for (_, l) in &self.layers {
            shape = l.out_shape(shape);
        }
        shape
    }
}

/// Fully connected layer `y = x W^T (+ b)`.
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<Tensor2>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::normal(&[out_dim, in_dim], std, rng),
            bias: bias.then(|| Param::zeros(&[out_dim], ParamKind::NoDecay)),
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn w(&self) -> ndarray::ArrayView2<'_, f64> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d")
    }

    pub fn infer(&self, x: &Tensor2) -> Tensor2 {
        let mut y = x.dot(&self.w().t());
        if let Some(b) = &self.bias {
            let b = b.value.view().into_dimensionality::<Ix1>().expect("1-d");
            y += &b;
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor2) -> Tensor2 {
        self.cache = Some(x.clone());
        self.infer(x)
    }

    pub fn backward(&mut self, grad: &Tensor2) -> Tensor2 {
        let x = self.cache.take().expect("linear backward without forward");
        let dw = grad.t().dot(&x);
        let mut wg = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-d");
        wg += &dw;
        if let Some(b) = &mut self.bias {
            let mut bg = b.grad.view_mut().into_dimensionality::<Ix1>().expect("1-d");
            bg += &grad.sum_axis(Axis(0));
        }
        grad.dot(&self.w())
    }
}

impl HasParams for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

//! Differentiable building blocks with hand-written backward passes.
//!
//! Every layer has an inference path (`forward`, `&self`, no caching) and a training
//! path (`forward_train`, which caches what `backward` needs). `backward` accumulates
//! parameter gradients and returns the gradient with respect to the layer input.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{matmul, Scalar, Tensor};

/// A named tensor owned by a layer. Buffers (normalization statistics) are not trainable
/// and carry no gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Self {
            name: name.into(),
            shape,
            value,
            grad: Vec::new(),
            trainable: false,
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: T) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![v; len])
    }

    /// He-normal initialisation for rectified layers.
    pub fn kaiming(name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let len = shape.iter().product();
        let value = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Self::new(name, shape, value)
    }

    pub fn uniform(name: impl Into<String>, shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Self {
        let len = shape.iter().product();
        let value = (0..len).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
        Self::new(name, shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }
}

pub trait Layer<T: Scalar>: Module<T> + Send + Sync {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T>;

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T>;

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T>;
}

fn no_cache() -> ! {
    panic!("backward called without a preceding forward_train")
}

// ---------------------------------------------------------------------------
// Convolution

pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<ConvCache<T>>,
}

struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: [usize; 4],
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::kaiming(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            fan_in,
            rng,
        );
        let bias = bias.then(|| {
            Param::uniform(
                format!("{name}.bias"),
                vec![out_channels],
                1.0 / (fan_in as f64).sqrt(),
                rng,
            )
        });
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = self.padding;
        assert!(h + 2 * p >= k && w + 2 * p >= k, "input smaller than kernel");
        ((h + 2 * p - k) / self.stride + 1, (w + 2 * p - k) / self.stride + 1)
    }

    fn im2col(&self, x: &Tensor<T>) -> Vec<T> {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = self.output_hw(h, w);
        let (k, s, pad) = (self.kernel, self.stride, self.padding);
        let p = oh * ow;
        let np = n * p;
        let mut cols = vec![T::zero(); c * k * k * np];
        let src = x.data();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * np;
                    for b in 0..n {
                        let plane = &src[(b * c + ci) * h * w..][..h * w];
                        let dst = &mut cols[row + b * p..row + (b + 1) * p];
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let line = &plane[iy as usize * w..][..w];
                            let out = &mut dst[oy * ow..][..ow];
                            for (ox, o) in out.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *o = line[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], in_shape: [usize; 4]) -> Tensor<T> {
        let [n, c, h, w] = in_shape;
        let (oh, ow) = self.output_hw(h, w);
        let (k, s, pad) = (self.kernel, self.stride, self.padding);
        let p = oh * ow;
        let np = n * p;
        let mut dx = Tensor::zeros(in_shape);
        let dst = dx.data_mut();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * np;
                    for b in 0..n {
                        let plane = &mut dst[(b * c + ci) * h * w..][..h * w];
                        let src = &cols[row + b * p..row + (b + 1) * p];
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let line = &mut plane[iy as usize * w..][..w];
                            for ox in 0..ow {
                                let ix = (ox * s + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    line[ix as usize] += src[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn apply(&self, x: &Tensor<T>, cols: &[T]) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_hw(h, w);
        let p = oh * ow;
        let np = n * p;
        let kdim = c * self.kernel * self.kernel;
        let mut out_mat = vec![T::zero(); self.out_channels * np];
        matmul(
            false,
            false,
            self.out_channels,
            kdim,
            np,
            &self.weight.value,
            cols,
            T::zero(),
            &mut out_mat,
        );
        let mut out = Tensor::zeros([n, self.out_channels, oh, ow]);
        let dst = out.data_mut();
        for co in 0..self.out_channels {
            let b_co = self.bias.as_ref().map_or(T::zero(), |b| b.value[co]);
            for b in 0..n {
                let src = &out_mat[co * np + b * p..][..p];
                let o = &mut dst[(b * self.out_channels + co) * p..][..p];
                for (d, &s) in o.iter_mut().zip(src) {
                    *d = s + b_co;
                }
            }
        }
        out
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let cols = self.im2col(x);
        self.apply(x, &cols)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let cols = self.im2col(x);
        let y = self.apply(x, &cols);
        self.cache = Some(ConvCache {
            cols,
            in_shape: x.shape(),
        });
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().unwrap_or_else(|| no_cache());
        let [n, co, oh, ow] = dy.shape();
        assert_eq!(co, self.out_channels);
        let p = oh * ow;
        let np = n * p;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let mut dy_mat = vec![T::zero(); co * np];
        for c in 0..co {
            for b in 0..n {
                dy_mat[c * np + b * p..][..p].copy_from_slice(&dy.data()[(b * co + c) * p..][..p]);
            }
        }
        matmul(
            false,
            true,
            co,
            np,
            kdim,
            &dy_mat,
            &cache.cols,
            T::one(),
            &mut self.weight.grad,
        );
        if let Some(bias) = &mut self.bias {
            for c in 0..co {
                let s = dy_mat[c * np..(c + 1) * np].iter().fold(T::zero(), |a, &v| a + v);
                bias.grad[c] += s;
            }
        }
        let mut dcols = cache.cols;
        matmul(
            true,
            false,
            kdim,
            co,
            np,
            &self.weight.value,
            &dy_mat,
            T::zero(),
            &mut dcols,
        );
        self.col2im(&dcols, cache.in_shape)
    }
}

// ---------------------------------------------------------------------------
// Batch normalisation

pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache<T>>,
}

struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: [usize; 4],
}

impl<T: Scalar> BatchNorm2d<T> {
    /// `weight`/`bias` naming follows the common state-dict convention.
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.weight"), vec![channels], T::one()),
            beta: Param::filled(format!("{name}.bias"), vec![channels], T::zero()),
            running_mean: Param::buffer(
                format!("{name}.running_mean"),
                vec![channels],
                vec![T::zero(); channels],
            ),
            running_var: Param::buffer(format!("{name}.running_var"), vec![channels], vec![T::one(); channels]),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T], xhat: Option<&mut Vec<T>>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let mut y = Tensor::zeros(x.shape());
        let mut xh = xhat;
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let (m, s, g, be) = (mean[ch], inv_std[ch], self.gamma.value[ch], self.beta.value[ch]);
                for i in off..off + hw {
                    let v = (x.data()[i] - m) * s;
                    if let Some(buf) = xh.as_deref_mut() {
                        buf[i] = v;
                    }
                    y.data_mut()[i] = g * v + be;
                }
            }
        }
        y
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let eps = T::lit(self.eps);
        let inv_std: Vec<T> = self
            .running_var
            .value
            .iter()
            .map(|&v| {
                // zero (or corrupted negative) variance falls back to unit variance
                let v = if v > T::zero() { v } else { T::one() };
                T::one() / (v + eps).sqrt()
            })
            .collect();
        self.normalize(x, &self.running_mean.value, &inv_std, None)
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut mean = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        let mom = T::lit(self.momentum);
        for ch in 0..c {
            let mut s = 0.0f64;
            for b in 0..n {
                s += x.data()[(b * c + ch) * hw..][..hw]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>();
            }
            let m = s / count;
            let mut ss = 0.0f64;
            for b in 0..n {
                ss += x.data()[(b * c + ch) * hw..][..hw]
                    .iter()
                    .map(|v| (v.as_f64() - m).powi(2))
                    .sum::<f64>();
            }
            let var = ss / count;
            mean[ch] = T::lit(m);
            inv_std[ch] = T::lit(1.0 / (var + self.eps).sqrt());
            let unbiased = if count > 1.0 { ss / (count - 1.0) } else { var };
            let rm = &mut self.running_mean.value[ch];
            *rm = (T::one() - mom) * *rm + mom * T::lit(m);
            let rv = &mut self.running_var.value[ch];
            *rv = (T::one() - mom) * *rv + mom * T::lit(unbiased);
        }
        let mut xhat = vec![T::zero(); x.data().len()];
        let y = self.normalize(x, &mean, &inv_std, Some(&mut xhat));
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            shape: x.shape(),
        });
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().unwrap_or_else(|| no_cache());
        let [n, c, h, w] = cache.shape;
        assert_eq!(dy.shape(), cache.shape);
        let hw = h * w;
        let count = T::lit((n * hw) as f64);
        let mut dx = Tensor::zeros(cache.shape);
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let g = dy.data()[i];
                    sum_dy += g;
                    sum_dy_xhat += g * cache.xhat[i];
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let gamma = self.gamma.value[ch];
            let scale = gamma * cache.inv_std[ch] / count;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    dx.data_mut()[i] = scale * (count * dy.data()[i] - sum_dy - cache.xhat[i] * sum_dy_xhat);
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Activations

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    /// Used by wiring probes to make a stack affine.
    Identity,
}

pub struct Act {
    kind: Activation,
    mask: Option<Vec<bool>>,
}

impl Act {
    pub fn new(kind: Activation) -> Self {
        Self { kind, mask: None }
    }

    pub fn relu() -> Self {
        Self::new(Activation::Relu)
    }

    pub fn set_kind(&mut self, kind: Activation) {
        self.kind = kind;
    }
}

impl<T: Scalar> Module<T> for Act {
    fn visit(&self, _: &mut dyn FnMut(&Param<T>)) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Param<T>)) {}
}

impl<T: Scalar> Layer<T> for Act {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        match self.kind {
            Activation::Relu => x.map(|v| v.max(T::zero())),
            Activation::Identity => x.clone(),
        }
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        if self.kind == Activation::Relu {
            self.mask = Some(x.data().iter().map(|&v| v > T::zero()).collect());
        }
        Layer::<T>::forward(self, x)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        match self.kind {
            Activation::Identity => dy.clone(),
            Activation::Relu => {
                let mask = self.mask.take().unwrap_or_else(|| no_cache());
                let mut dx = dy.clone();
                for (d, keep) in dx.data_mut().iter_mut().zip(mask) {
                    if !keep {
                        *d = T::zero();
                    }
                }
                dx
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pooling

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    #[default]
    Average,
    Max,
}

/// Fixed-window pooling. Padding is only meaningful for max pooling (padded cells never win).
pub struct Pool2d {
    kind: PoolKind,
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<PoolCache>,
}

struct PoolCache {
    in_shape: [usize; 4],
    argmax: Vec<usize>,
}

impl Pool2d {
    pub fn new(kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(
            kind == PoolKind::Max || padding == 0,
            "padded average pooling is unsupported"
        );
        Self {
            kind,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1)
    }

    fn run<T: Scalar>(&self, x: &Tensor<T>, record: bool) -> (Tensor<T>, Vec<usize>) {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = self.output_hw(h, w);
        let (k, s, pad) = (self.kernel, self.stride, self.padding as isize);
        let mut y = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = if record && self.kind == PoolKind::Max {
            vec![0usize; n * c * oh * ow]
        } else {
            Vec::new()
        };
        let area = T::lit((k * k) as f64);
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..][..h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let oi = plane * oh * ow + oy * ow + ox;
                    match self.kind {
                        PoolKind::Average => {
                            let mut acc = T::zero();
                            for ky in 0..k {
                                for kx in 0..k {
                                    acc += src[(oy * s + ky) * w + ox * s + kx];
                                }
                            }
                            y.data_mut()[oi] = acc / area;
                        }
                        PoolKind::Max => {
                            let mut best = T::neg_infinity();
                            let mut best_i = 0;
                            for ky in 0..k {
                                let iy = (oy * s + ky) as isize - pad;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * s + kx) as isize - pad;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let idx = iy as usize * w + ix as usize;
                                    if src[idx] > best {
                                        best = src[idx];
                                        best_i = idx;
                                    }
                                }
                            }
                            y.data_mut()[oi] = best;
                            if record {
                                argmax[oi] = plane * h * w + best_i;
                            }
                        }
                    }
                }
            }
        }
        (y, argmax)
    }
}

impl<T: Scalar> Module<T> for Pool2d {
    fn visit(&self, _: &mut dyn FnMut(&Param<T>)) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Param<T>)) {}
}

impl<T: Scalar> Layer<T> for Pool2d {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x, false).0
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (y, argmax) = self.run(x, true);
        self.cache = Some(PoolCache {
            in_shape: x.shape(),
            argmax,
        });
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().unwrap_or_else(|| no_cache());
        let [n, c, h, w] = cache.in_shape;
        let [_, _, oh, ow] = dy.shape();
        let mut dx = Tensor::zeros(cache.in_shape);
        match self.kind {
            PoolKind::Max => {
                for (i, &g) in dy.data().iter().enumerate() {
                    dx.data_mut()[cache.argmax[i]] += g;
                }
            }
            PoolKind::Average => {
                let (k, s) = (self.kernel, self.stride);
                let area = T::lit((k * k) as f64);
                for plane in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = dy.data()[plane * oh * ow + oy * ow + ox] / area;
                            for ky in 0..k {
                                for kx in 0..k {
                                    dx.data_mut()[plane * h * w + (oy * s + ky) * w + ox * s + kx] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Average pooling onto a fixed output grid, independent of the input resolution.
/// Cell `i` of an axis of length `n` pooled to `m` covers `[floor(i·n/m), ceil((i+1)·n/m))`,
/// so a grid larger than the input repeats input cells.
pub struct AdaptiveAvgPool2d {
    out_h: usize,
    out_w: usize,
    in_shape: Option<[usize; 4]>,
}

fn adaptive_bins(n: usize, m: usize) -> Vec<(usize, usize)> {
    (0..m).map(|i| (i * n / m, ((i + 1) * n).div_ceil(m))).collect()
}

impl AdaptiveAvgPool2d {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        Self {
            out_h,
            out_w,
            in_shape: None,
        }
    }
}

impl<T: Scalar> Module<T> for AdaptiveAvgPool2d {
    fn visit(&self, _: &mut dyn FnMut(&Param<T>)) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Param<T>)) {}
}

impl<T: Scalar> Layer<T> for AdaptiveAvgPool2d {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let rows = adaptive_bins(h, self.out_h);
        let cols = adaptive_bins(w, self.out_w);
        let mut y = Tensor::zeros([n, c, self.out_h, self.out_w]);
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..][..h * w];
            for (oy, &(y0, y1)) in rows.iter().enumerate() {
                for (ox, &(x0, x1)) in cols.iter().enumerate() {
                    let mut acc = T::zero();
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            acc += src[iy * w + ix];
                        }
                    }
                    let area = T::lit(((y1 - y0) * (x1 - x0)) as f64);
                    y.data_mut()[(plane * self.out_h + oy) * self.out_w + ox] = acc / area;
                }
            }
        }
        y
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.in_shape = Some(x.shape());
        Layer::<T>::forward(self, x)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let in_shape = self.in_shape.take().unwrap_or_else(|| no_cache());
        let [n, c, h, w] = in_shape;
        let rows = adaptive_bins(h, self.out_h);
        let cols = adaptive_bins(w, self.out_w);
        let mut dx = Tensor::zeros(in_shape);
        for plane in 0..n * c {
            for (oy, &(y0, y1)) in rows.iter().enumerate() {
                for (ox, &(x0, x1)) in cols.iter().enumerate() {
                    let area = T::lit(((y1 - y0) * (x1 - x0)) as f64);
                    let g = dy.data()[(plane * self.out_h + oy) * self.out_w + ox] / area;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            dx.data_mut()[plane * h * w + iy * w + ix] += g;
                        }
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Fully connected

/// Affine map over the flattened per-sample features. Output shape is `[n, out, 1, 1]`.
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_features: usize,
    out_features: usize,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Self {
            weight: Param::uniform(format!("{name}.weight"), vec![out_features, in_features], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), vec![out_features], bound, rng),
            in_features,
            out_features,
            input: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        assert_eq!(x.sample_len(), self.in_features, "linear input width");
        let mut y = Tensor::zeros([n, self.out_features, 1, 1]);
        for row in y.data_mut().chunks_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        matmul(
            false,
            true,
            n,
            self.in_features,
            self.out_features,
            x.data(),
            &self.weight.value,
            T::one(),
            y.data_mut(),
        );
        y
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = Layer::<T>::forward(self, x);
        self.input = Some(x.clone());
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().unwrap_or_else(|| no_cache());
        let n = x.batch();
        let (fi, fo) = (self.in_features, self.out_features);
        matmul(
            true,
            false,
            fo,
            n,
            fi,
            dy.data(),
            x.data(),
            T::one(),
            &mut self.weight.grad,
        );
        for row in dy.data().chunks(fo) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        matmul(
            false,
            false,
            n,
            fo,
            fi,
            dy.data(),
            &self.weight.value,
            T::zero(),
            dx.data_mut(),
        );
        dx
    }
}

// ---------------------------------------------------------------------------
// Dropout

/// Inverted dropout; the identity in inference mode or when `p == 0`.
pub struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<bool>>,
}

impl Dropout {
    pub fn new(p: f64, rng: ChaCha8Rng) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
        Self { p, rng, mask: None }
    }
}

impl<T: Scalar> Module<T> for Dropout {
    fn visit(&self, _: &mut dyn FnMut(&Param<T>)) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Param<T>)) {}
}

impl<T: Scalar> Layer<T> for Dropout {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.clone()
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        if self.p == 0.0 {
            return x.clone();
        }
        let keep = T::lit(1.0 / (1.0 - self.p));
        let mask: Vec<bool> = (0..x.data().len()).map(|_| self.rng.gen::<f64>() >= self.p).collect();
        let mut y = x.clone();
        for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
            *v = if m { *v * keep } else { T::zero() };
        }
        self.mask = Some(mask);
        y
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        if self.p == 0.0 {
            return dy.clone();
        }
        let mask = self.mask.take().unwrap_or_else(|| no_cache());
        let keep = T::lit(1.0 / (1.0 - self.p));
        let mut dx = dy.clone();
        for (v, m) in dx.data_mut().iter_mut().zip(mask) {
            *v = if m { *v * keep } else { T::zero() };
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Sequential

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential<T> {
    layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Layer<T> + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn with(mut self, layer: impl Layer<T> + 'static) -> Self {
        self.push(layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Scalar> Module<T> for Sequential<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        for l in &self.layers {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h);
        }
        h
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward_train(&h);
        }
        h
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = dy.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }
}

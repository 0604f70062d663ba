//! Hand-differentiated building blocks shared by the backbone and the adaptor.
//!
//! Every layer exposes a traced forward pass that keeps the activations needed
//! by its backward pass, and a backward pass that accumulates parameter
//! gradients into a gradient container of the same type as the layer.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array, Array1, Array2, ArrayView2, Axis, Dimension, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Floating point element type of every model in this crate (`f32` or `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in target float type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite float converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub(crate) fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named access to every trainable tensor of a model, in a fixed order.
///
/// Gradients are stored in a value of the same type as the model, so the
/// flattened orders of a model and its gradient always agree.
pub trait Parameters<T: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    /// Overwrites every parameter from a flat vector in visiting order.
    ///
    /// Panics if the length does not match [`Parameters::num_params`].
    fn assign_flat(&mut self, flat: &[T]) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn fill_zero(&mut self) {
        self.visit_mut("", &mut |_, v| v.iter_mut().for_each(|x| *x = T::zero()));
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _, _| names.push(name.to_string()));
        names
    }
}

impl<T: Real, D: Dimension> Parameters<T> for Array<T, D> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(prefix, self.shape(), self.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        f(prefix, self.as_slice_mut().expect("standard layout"));
    }
}

impl<T: Real, P: Parameters<T>> Parameters<T> for Vec<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&scoped(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&scoped(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Real, P: Parameters<T>> Parameters<T> for Option<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

pub(crate) fn normal_array<T: Real, R: Rng + ?Sized>(shape: (usize, usize), std: f64, rng: &mut R) -> Array2<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn(shape, || T::lit(dist.sample(rng)))
}

/// Fully connected layer `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: normal_array((input, output), std, rng),
            bias: Array1::zeros(output),
        }
    }

    /// Normal(0, 1/fan_in) weights, zero bias.
    pub fn fan_in<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self::random(input, output, (1.0 / input as f64).sqrt(), rng)
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates `dL/dW`, `dL/db` into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        self.input_grad(dy)
    }

    /// `dL/dx` only, for layers whose parameters are frozen.
    pub fn input_grad(&self, dy: ArrayView2<T>) -> Array2<T> {
        dy.dot(&self.weight.t())
    }
}

impl<T: Real> Parameters<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.weight.visit(&scoped(prefix, "weight"), f);
        self.bias.visit(&scoped(prefix, "bias"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.weight.visit_mut(&scoped(prefix, "weight"), f);
        self.bias.visit_mut(&scoped(prefix, "bias"), f);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        self.forward_traced(x).0
    }

    pub fn forward_traced(&self, x: ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::lit(x.ncols() as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            *r = T::one() / (var + eps).sqrt();
            let rs = *r;
            row.mapv_inplace(|v| v * rs);
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: ArrayView2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = T::lit(dy.ncols() as f64);
        let mut dx = &dy * &self.gamma;
        for ((mut row, xh), &rs) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.rstd.iter()) {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xh.iter()).map(|(&g, &x)| g * x).sum::<T>() / d;
            Zip::from(&mut row).and(&xh).for_each(|g, &x| *g = rs * (*g - mean_g - x * mean_gx));
        }
        dx
    }
}

impl<T: Real> Parameters<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.gamma.visit(&scoped(prefix, "gamma"), f);
        self.beta.visit(&scoped(prefix, "beta"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.gamma.visit_mut(&scoped(prefix, "gamma"), f);
        self.beta.visit_mut(&scoped(prefix, "beta"), f);
    }
}

const GELU_C: f64 = 0.044_715;

// tanh approximation of GELU
pub fn gelu<T: Real>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + T::lit(GELU_C) * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    let c = T::lit(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

pub(crate) fn softmax_rows_inplace<T: Real>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Pre-norm transformer encoder block: multi-head self-attention and a GELU
/// MLP, each behind a LayerNorm and wrapped in a residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub heads: usize,
    pub norm1: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    input: Array2<T>,
    norm1: LayerNormCache<T>,
    normed1: Array2<T>,
    qkv: Array2<T>,
    attn: Vec<Array2<T>>,
    attn_out: Array2<T>,
    norm2: LayerNormCache<T>,
    normed2: Array2<T>,
    hidden_pre: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Real> Block<T> {
    pub fn zeros(dim: usize, heads: usize, hidden: usize) -> Self {
        Self {
            heads,
            norm1: LayerNorm::zeros(dim),
            qkv: Linear::zeros(dim, 3 * dim),
            proj: Linear::zeros(dim, dim),
            norm2: LayerNorm::zeros(dim),
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, dim),
        }
    }

    /// Fan-in scaled weights, zero biases, unit LayerNorm gains.
    pub fn random<R: Rng + ?Sized>(dim: usize, heads: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            heads,
            norm1: LayerNorm::new(dim),
            qkv: Linear::fan_in(dim, 3 * dim, rng),
            proj: Linear::fan_in(dim, dim, rng),
            norm2: LayerNorm::new(dim),
            fc1: Linear::fan_in(dim, hidden, rng),
            fc2: Linear::fan_in(hidden, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.output_dim()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        self.forward_traced(x).0
    }

    pub fn forward_traced(&self, x: ArrayView2<T>) -> (Array2<T>, BlockCache<T>) {
        let dim = self.dim();
        let head_dim = dim / self.heads;
        let scale = T::one() / T::lit(head_dim as f64).sqrt();

        let (normed1, norm1) = self.norm1.forward_traced(x);
        let qkv = self.qkv.forward(normed1.view());
        let mut attn_out = Array2::zeros((x.nrows(), dim));
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let q = qkv.slice(s![.., lo..hi]);
            let k = qkv.slice(s![.., dim + lo..dim + hi]);
            let v = qkv.slice(s![.., 2 * dim + lo..2 * dim + hi]);
            let mut scores = q.dot(&k.t());
            scores *= scale;
            softmax_rows_inplace(&mut scores);
            attn_out.slice_mut(s![.., lo..hi]).assign(&scores.dot(&v));
            attn.push(scores);
        }
        let mut mid = self.proj.forward(attn_out.view());
        mid += &x;

        let (normed2, norm2) = self.norm2.forward_traced(mid.view());
        let hidden_pre = self.fc1.forward(normed2.view());
        let hidden = hidden_pre.mapv(gelu);
        let mut out = self.fc2.forward(hidden.view());
        out += &mid;

        let cache = BlockCache {
            input: x.to_owned(),
            norm1,
            normed1,
            qkv,
            attn,
            attn_out,
            norm2,
            normed2,
            hidden_pre,
            hidden,
        };
        (out, cache)
    }

    pub fn backward(&self, cache: &BlockCache<T>, dy: ArrayView2<T>, grad: &mut Block<T>) -> Array2<T> {
        let dim = self.dim();
        let head_dim = dim / self.heads;
        let scale = T::one() / T::lit(head_dim as f64).sqrt();

        // MLP sublayer
        let d_hidden = self.fc2.backward(cache.hidden.view(), dy, &mut grad.fc2);
        let d_pre = Zip::from(&d_hidden)
            .and(&cache.hidden_pre)
            .map_collect(|&g, &u| g * gelu_grad(u));
        let d_normed2 = self.fc1.backward(cache.normed2.view(), d_pre.view(), &mut grad.fc1);
        let mut d_mid = self.norm2.backward(&cache.norm2, d_normed2.view(), &mut grad.norm2);
        d_mid += &dy;

        // attention sublayer
        let d_attn_out = self.proj.backward(cache.attn_out.view(), d_mid.view(), &mut grad.proj);
        let mut d_qkv = Array2::zeros(cache.qkv.raw_dim());
        for (h, probs) in cache.attn.iter().enumerate() {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let q = cache.qkv.slice(s![.., lo..hi]);
            let k = cache.qkv.slice(s![.., dim + lo..dim + hi]);
            let v = cache.qkv.slice(s![.., 2 * dim + lo..2 * dim + hi]);
            let d_out = d_attn_out.slice(s![.., lo..hi]);

            let d_v = probs.t().dot(&d_out);
            let d_probs = d_out.dot(&v.t());
            let mut d_scores = &d_probs * probs;
            for (mut row, p) in d_scores.rows_mut().into_iter().zip(probs.rows()) {
                let dot = row.sum();
                Zip::from(&mut row).and(&p).for_each(|g, &pv| *g = *g - pv * dot);
            }
            d_scores *= scale;
            d_qkv.slice_mut(s![.., lo..hi]).assign(&d_scores.dot(&k));
            d_qkv.slice_mut(s![.., dim + lo..dim + hi]).assign(&d_scores.t().dot(&q));
            d_qkv.slice_mut(s![.., 2 * dim + lo..2 * dim + hi]).assign(&d_v);
        }
        let d_normed1 = self.qkv.backward(cache.normed1.view(), d_qkv.view(), &mut grad.qkv);
        let mut dx = self.norm1.backward(&cache.norm1, d_normed1.view(), &mut grad.norm1);
        dx += &d_mid;
        debug_assert_eq!(dx.dim(), cache.input.dim());
        dx
    }
}

impl<T: Real> Parameters<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.norm1.visit(&scoped(prefix, "norm1"), f);
        self.qkv.visit(&scoped(prefix, "attn.qkv"), f);
        self.proj.visit(&scoped(prefix, "attn.proj"), f);
        self.norm2.visit(&scoped(prefix, "norm2"), f);
        self.fc1.visit(&scoped(prefix, "mlp.fc1"), f);
        self.fc2.visit(&scoped(prefix, "mlp.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.norm1.visit_mut(&scoped(prefix, "norm1"), f);
        self.qkv.visit_mut(&scoped(prefix, "attn.qkv"), f);
        self.proj.visit_mut(&scoped(prefix, "attn.proj"), f);
        self.norm2.visit_mut(&scoped(prefix, "norm2"), f);
        self.fc1.visit_mut(&scoped(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&scoped(prefix, "mlp.fc2"), f);
    }
}

/// Two-layer ReLU MLP mapping rows of width `D` to width `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct Mlp2Cache<T> {
    input: Array2<T>,
    hidden_pre: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Real> Mlp2<T> {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::zeros(dim, hidden),
            fc2: Linear::zeros(hidden, dim),
        }
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        Self {
            fc1: Linear::random(dim, hidden, std, rng),
            fc2: Linear::random(hidden, dim, std, rng),
        }
    }

    /// Exact identity map with hidden width `2 * dim`, using
    /// `x = relu(x) - relu(-x)`.
    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, 2 * dim);
        for i in 0..dim {
            m.fc1.weight[[i, i]] = T::one();
            m.fc1.weight[[i, dim + i]] = -T::one();
            m.fc2.weight[[i, i]] = T::one();
            m.fc2.weight[[dim + i, i]] = -T::one();
        }
        m
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        self.forward_traced(x).0
    }

    pub fn forward_traced(&self, x: ArrayView2<T>) -> (Array2<T>, Mlp2Cache<T>) {
        let hidden_pre = self.fc1.forward(x);
        let hidden = hidden_pre.mapv(|v| v.max(T::zero()));
        let out = self.fc2.forward(hidden.view());
        let cache = Mlp2Cache {
            input: x.to_owned(),
            hidden_pre,
            hidden,
        };
        (out, cache)
    }

    pub fn backward(&self, cache: &Mlp2Cache<T>, dy: ArrayView2<T>, grad: &mut Mlp2<T>) -> Array2<T> {
        let mut d_hidden = self.fc2.backward(cache.hidden.view(), dy, &mut grad.fc2);
        Zip::from(&mut d_hidden)
            .and(&cache.hidden_pre)
            .for_each(|g, &u| {
                if u <= T::zero() {
                    *g = T::zero();
                }
            });
        self.fc1.backward(cache.input.view(), d_hidden.view(), &mut grad.fc1)
    }
}

impl<T: Real> Parameters<T> for Mlp2<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.fc1.visit(&scoped(prefix, "fc1"), f);
        self.fc2.visit(&scoped(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.fc1.visit_mut(&scoped(prefix, "fc1"), f);
        self.fc2.visit_mut(&scoped(prefix, "fc2"), f);
    }
}

/// Converts every parameter of `src` into `dst` (which must share its layout).
pub fn cast_into<S: Real, D: Real>(src: &impl Parameters<S>, dst: &mut impl Parameters<D>) {
    let flat: Vec<D> = src.flatten().into_iter().map(|v| D::lit(v.as_f64())).collect();
    dst.assign_flat(&flat);
}

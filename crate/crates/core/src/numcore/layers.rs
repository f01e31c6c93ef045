//! Parameterized wrappers around the primitives in [`nn`](super::nn).
//!
//! `forward` is pure; `backward` takes the forward input, accumulates
//! parameter gradients and returns the input gradient.

use super::nn;
use super::{Module, Param, Real, Rng, Tensor};
use crate::error::Result;

/// Per-position dense layer on channel-major tensors (a 1×1 convolution).
#[derive(Clone, Debug)]
pub struct Linear<S: Real> {
    pub w: Param<S>,
    pub b: Option<Param<S>>,
}

impl<S: Real> Linear<S> {
    pub fn new(name: &str, cin: usize, cout: usize, bias: bool, rng: &mut Rng) -> Self {
        Linear {
            w: Param::uniform(format!("{name}.w"), &[cout, cin], cin, rng),
            b: bias.then(|| Param::zeros(format!("{name}.b"), &[cout])),
        }
    }

    pub fn zeroed(name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        Linear {
            w: Param::zeros(format!("{name}.w"), &[cout, cin]),
            b: bias.then(|| Param::zeros(format!("{name}.b"), &[cout])),
        }
    }

    pub fn identity(name: &str, c: usize, bias: bool) -> Self {
        let mut l = Self::zeroed(name, c, c, bias);
        for i in 0..c {
            l.w.value.set(&[i, i], S::one());
        }
        l
    }

    pub fn cout(&self) -> usize {
        self.w.value.dims()[0]
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        nn::pointwise(x, &self.w.value, self.b.as_ref().map(|b| &b.value))
    }

    pub fn backward(&mut self, x: &Tensor<S>, gy: &Tensor<S>) -> Tensor<S> {
        let (gx, gw, gb) = nn::pointwise_backward(x, &self.w.value, gy);
        self.w.accumulate(&gw);
        if let Some(b) = &mut self.b {
            b.accumulate(&gb);
        }
        gx
    }
}

impl<S: Real> Module<S> for Linear<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }
}

/// 3D convolution layer with cubic or anisotropic odd kernel.
#[derive(Clone, Debug)]
pub struct Conv3d<S: Real> {
    pub w: Param<S>,
    pub b: Param<S>,
    pub stride: [usize; 3],
}

impl<S: Real> Conv3d<S> {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut Rng) -> Self {
        Conv3d {
            w: Param::uniform(format!("{name}.w"), &[cout, cin, k, k, k], cin * k * k * k, rng),
            b: Param::zeros(format!("{name}.b"), &[cout]),
            stride: [stride; 3],
        }
    }

    pub fn zeroed(name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Conv3d {
            w: Param::zeros(format!("{name}.w"), &[cout, cin, k, k, k]),
            b: Param::zeros(format!("{name}.b"), &[cout]),
            stride: [stride; 3],
        }
    }

    /// Center-tap identity (requires `cin == cout`).
    pub fn identity(name: &str, c: usize, k: usize) -> Self {
        let mut l = Self::zeroed(name, c, c, k, 1);
        for i in 0..c {
            l.w.value.set(&[i, i, k / 2, k / 2, k / 2], S::one());
        }
        l
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        nn::conv3d(x, &self.w.value, &self.b.value, self.stride)
    }

    pub fn backward(&mut self, x: &Tensor<S>, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let (gx, gw, gb) = nn::conv3d_backward(x, &self.w.value, self.stride, gy)?;
        self.w.accumulate(&gw);
        self.b.accumulate(&gb);
        Ok(gx)
    }
}

impl<S: Real> Module<S> for Conv3d<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// 2D convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2d<S: Real> {
    pub w: Param<S>,
    pub b: Param<S>,
    pub stride: usize,
}

impl<S: Real> Conv2d<S> {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut Rng) -> Self {
        Conv2d {
            w: Param::uniform(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, rng),
            b: Param::zeros(format!("{name}.b"), &[cout]),
            stride,
        }
    }

    pub fn zeroed(name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Conv2d {
            w: Param::zeros(format!("{name}.w"), &[cout, cin, k, k]),
            b: Param::zeros(format!("{name}.b"), &[cout]),
            stride,
        }
    }

    pub fn identity(name: &str, c: usize, k: usize) -> Self {
        let mut l = Self::zeroed(name, c, c, k, 1);
        for i in 0..c {
            l.w.value.set(&[i, i, k / 2, k / 2], S::one());
        }
        l
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        nn::conv2d(x, &self.w.value, &self.b.value, self.stride)
    }

    pub fn backward(&mut self, x: &Tensor<S>, gy: &Tensor<S>) -> Result<Tensor<S>> {
        let (gx, gw, gb) = nn::conv2d_backward(x, &self.w.value, self.stride, gy)?;
        self.w.accumulate(&gw);
        self.b.accumulate(&gb);
        Ok(gx)
    }
}

impl<S: Real> Module<S> for Conv2d<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Channel-wise layer normalization with learnable affine.
#[derive(Clone, Debug)]
pub struct LayerNorm<S: Real> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
}

impl<S: Real> LayerNorm<S> {
    pub fn new(name: &str, c: usize) -> Self {
        LayerNorm {
            gamma: Param::ones(format!("{name}.gamma"), &[c]),
            beta: Param::zeros(format!("{name}.beta"), &[c]),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, nn::LayerNormCache<S>)> {
        nn::layer_norm(x, &self.gamma.value, &self.beta.value)
    }

    pub fn backward(&mut self, cache: &nn::LayerNormCache<S>, gy: &Tensor<S>) -> Tensor<S> {
        let (gx, gg, gb) = nn::layer_norm_backward(cache, &self.gamma.value, gy);
        self.gamma.accumulate(&gg);
        self.beta.accumulate(&gb);
        gx
    }
}

impl<S: Real> Module<S> for LayerNorm<S> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

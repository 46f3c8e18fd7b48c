//! Parameterized layers: thin structs pairing weight tensors with the
//! convolution/linear ops, He-style initialization from a caller-supplied
//! RNG, and name-prefixed parameter listing for optimizers and
//! checkpoints.

use crate::tensor::{conv2d, conv3d, conv_transpose2d, conv_transpose3d, Tensor};
use crate::{Result, Scalar};
use rand::Rng;

fn he_weight<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng, true)
}

fn zero_bias<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::from_vec(&[n], vec![T::zero(); n], true)
}

fn pair<T: Scalar>(prefix: &str, w: &Tensor<T>, b: &Tensor<T>) -> Vec<(String, Tensor<T>)> {
    vec![(format!("{prefix}.w"), w.clone()), (format!("{prefix}.b"), b.clone())]
}

#[derive(Clone)]
pub struct Conv2dLayer<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        Conv2dLayer {
            w: he_weight(&[cout, cin, k, k], cin * k * k, rng),
            b: zero_bias(cout),
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.w, Some(&self.b), self.stride, self.padding, self.groups)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        pair(prefix, &self.w, &self.b)
    }

    /// Same weights as constants: forward passes still work, but no
    /// gradient reaches them (perceptual-loss feature extractor).
    pub fn frozen_clone(&self) -> Self {
        Conv2dLayer {
            w: Tensor::from_vec(self.w.shape(), self.w.to_vec(), false),
            b: Tensor::from_vec(self.b.shape(), self.b.to_vec(), false),
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }
}

#[derive(Clone)]
pub struct Conv3dLayer<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Scalar> Conv3dLayer<T> {
    pub fn new(cin: usize, cout: usize, k: usize, padding: usize, groups: usize, rng: &mut impl Rng) -> Self {
        let cg = cin / groups;
        Conv3dLayer {
            w: he_weight(&[cout, cg, k, k, k], cg * k * k * k, rng),
            b: zero_bias(cout),
            padding,
            groups,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv3d(x, &self.w, Some(&self.b), self.padding, self.groups)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        pair(prefix, &self.w, &self.b)
    }
}

#[derive(Clone)]
pub struct Deconv2dLayer<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Deconv2dLayer<T> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        Deconv2dLayer {
            w: he_weight(&[cin, cout, k, k], cin * k * k, rng),
            b: zero_bias(cout),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv_transpose2d(x, &self.w, Some(&self.b), self.stride, self.padding, 0)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        pair(prefix, &self.w, &self.b)
    }
}

#[derive(Clone)]
pub struct Deconv3dLayer<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Deconv3dLayer<T> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        Deconv3dLayer {
            w: he_weight(&[cin, cout, k, k, k], cin * k * k * k, rng),
            b: zero_bias(cout),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv_transpose3d(x, &self.w, Some(&self.b), self.stride, self.padding, 0)
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        pair(prefix, &self.w, &self.b)
    }
}

#[derive(Clone)]
pub struct LinearLayer<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(fin: usize, fout: usize, rng: &mut impl Rng) -> Self {
        LinearLayer { w: he_weight(&[fin, fout], fin, rng), b: zero_bias(fout) }
    }

    /// Near-zero weights with a fixed bias: the layer starts out emitting
    /// roughly a constant while keeping live gradients everywhere (used to
    /// anchor rotation outputs at the identity and box refinements at the
    /// unrefined proposal).
    pub fn small_with_bias(fin: usize, fout: usize, std: f64, bias: &[f64], rng: &mut impl Rng) -> Self {
        let b: Vec<T> = bias.iter().map(|&v| T::from_f64(v)).collect();
        assert_eq!(b.len(), fout);
        LinearLayer {
            w: Tensor::randn(&[fin, fout], std, rng, true),
            b: Tensor::from_vec(&[fout], b, true),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.w, Some(&self.b))
    }

    pub fn params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        pair(prefix, &self.w, &self.b)
    }
}

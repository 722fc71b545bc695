//! Toy convolutional backbone, classification head, CAMs and parameter
//! storage.


mod backbone;
mod cam;
mod params;

pub use backbone::{forward_features, BackboneConfig};
pub use cam::{compute_cam, max_normalize, CamSource, CamStack};
pub use params::{Grads, ParamStore, Session};

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::graph::Var;
use crate::real::Real;
use crate::tensor::Tensor;

/// He-normal initialised convolution weight `out×in×k×k`.
pub fn he_conv<T: Real, R: Rng + ?Sized>(rng: &mut R, out: usize, inp: usize, k: usize) -> Tensor<T> {
    let std = libm::sqrt(2.0 / (inp * k * k) as f64);
    normal_tensor(rng, &[out, inp, k, k], std)
}

pub fn normal_tensor<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let data: Vec<T> = (0..shape.iter().product::<usize>())
        .map(|_| T::of(dist.sample(rng)))
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// `τ = sigmoid(Wᵀ · GAP(features))` for a `C×H×W` feature variable and a
/// `C×M` weight parameter named `weight`.
pub fn classify<T: Real>(sess: &mut Session<'_, T>, features: Var, weight: &str) -> Result<Var> {
    let w = sess.p(weight)?;
    let g = &mut sess.graph;
    let c = g.value(features).shape()[0];
    let m = g.value(w).shape()[1];
    let pooled = g.global_avg_pool(features)?;
    let row = g.reshape(pooled, &[1, c])?;
    let logits = g.matmul(row, w)?;
    let logits = g.reshape(logits, &[m])?;
    g.sigmoid(logits)
}

//! Elementwise nonlinearities and per-location L2 normalization.
//!
//! All are stateless; each forward returns the cache its backward needs.

use crate::tensor::{Real, Tensor};

pub fn relu<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    x.map(|v| if v > R::zero() { v } else { R::zero() })
}

pub fn relu_backward<R: Real>(x: &Tensor<R>, gy: &Tensor<R>) -> Tensor<R> {
    let mut gx = gy.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
        if v <= R::zero() {
            *g = R::zero();
        }
    }
    gx
}

/// Negative slope used by every leaky nonlinearity in the network. Nonzero
/// so that no unit can silence gradients entirely.
pub const LEAK: f64 = 0.1;

pub fn leaky_relu<R: Real>(x: &Tensor<R>, slope: f64) -> Tensor<R> {
    let a = R::from_f64(slope);
    x.map(|v| if v > R::zero() { v } else { a * v })
}

pub fn leaky_relu_backward<R: Real>(x: &Tensor<R>, gy: &Tensor<R>, slope: f64) -> Tensor<R> {
    let a = R::from_f64(slope);
    let mut gx = gy.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
        if v <= R::zero() {
            *g = *g * a;
        }
    }
    gx
}

/// Numerically safe logistic sigmoid.
pub fn sigmoid_scalar<R: Real>(v: R) -> R {
    if v >= R::zero() {
        R::one() / (R::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (R::one() + e)
    }
}

pub fn sigmoid<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    x.map(sigmoid_scalar)
}

/// Backward through sigmoid given the forward *output* `y`.
pub fn sigmoid_backward<R: Real>(y: &Tensor<R>, gy: &Tensor<R>) -> Tensor<R> {
    let mut gx = gy.clone();
    for (g, &s) in gx.data_mut().iter_mut().zip(y.data()) {
        *g = *g * s * (R::one() - s);
    }
    gx
}

pub fn tanh<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    x.map(|v| v.tanh())
}

/// Backward through tanh given the forward *output* `y`.
pub fn tanh_backward<R: Real>(y: &Tensor<R>, gy: &Tensor<R>) -> Tensor<R> {
    let mut gx = gy.clone();
    for (g, &t) in gx.data_mut().iter_mut().zip(y.data()) {
        *g = *g * (R::one() - t * t);
    }
    gx
}

const L2_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct L2NormCache<R> {
    /// Input values (needed to reproject the gradient).
    x: Vec<R>,
    /// Per-location norm sqrt(||x||^2 + eps).
    norm: Vec<R>,
    c: usize,
}

/// Normalizes each spatial location's channel vector to unit length.
/// The eps keeps the all-zero vector mapped to zero with zero gradient.
pub fn l2_normalize<R: Real>(x: &Tensor<R>) -> (Tensor<R>, L2NormCache<R>) {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = h * w;
    let xd = x.data();
    let mut y = Tensor::zeros(&[h, w, c]);
    let mut norm = vec![R::zero(); n];
    let yd = y.data_mut();
    for p in 0..n {
        let v = &xd[p * c..(p + 1) * c];
        let mut sq = R::from_f64(L2_EPS);
        for &e in v {
            sq = sq + e * e;
        }
        let nn = sq.sqrt();
        norm[p] = nn;
        for ch in 0..c {
            yd[p * c + ch] = v[ch] / nn;
        }
    }
    (
        y,
        L2NormCache {
            x: xd.to_vec(),
            norm,
            c,
        },
    )
}

/// d/dx of v/||v||: g/n - v (v . g) / n^3.
pub fn l2_normalize_backward<R: Real>(cache: &L2NormCache<R>, gy: &Tensor<R>) -> Tensor<R> {
    let c = cache.c;
    let n = cache.norm.len();
    let gyd = gy.data();
    let mut gx = Tensor::zeros(gy.shape());
    let gxd = gx.data_mut();
    for p in 0..n {
        let v = &cache.x[p * c..(p + 1) * c];
        let g = &gyd[p * c..(p + 1) * c];
        let nn = cache.norm[p];
        let mut vg = R::zero();
        for ch in 0..c {
            vg = vg + v[ch] * g[ch];
        }
        let n3 = nn * nn * nn;
        for ch in 0..c {
            gxd[p * c + ch] = g[ch] / nn - v[ch] * vg / n3;
        }
    }
    gx
}

//! Differentiable building blocks.
//!
//! Every layer exposes `forward(...) -> (output, cache)` and a
//! `backward(cache, grad_out)` that accumulates parameter gradients and
//! returns input gradients. Backward passes are hand-derived and verified
//! against central finite differences in the unit tests below each module.

pub mod activ;
pub mod attention;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod resample;
pub mod rnn;

pub use activ::*;
pub use attention::*;
pub use conv::{Conv2d, ConvCache};
pub use linear::{Embedding, Linear};
pub use norm::{SpatialNorm, SpatialNormCache};
pub use resample::*;
pub use rnn::{ConvGru, ConvGruCache, GruCell, LanguageGru};

use crate::tensor::{Real, Tensor};

/// Stacks two `[h, w, _]` maps along the channel axis.
pub fn concat_channels<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    let (h, w, ca) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let cb = b.shape()[2];
    assert!(
        b.shape()[0] == h && b.shape()[1] == w,
        "concat spatial mismatch: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let mut out = Tensor::zeros(&[h, w, ca + cb]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for p in 0..h * w {
        od[p * (ca + cb)..p * (ca + cb) + ca].copy_from_slice(&ad[p * ca..(p + 1) * ca]);
        od[p * (ca + cb) + ca..(p + 1) * (ca + cb)].copy_from_slice(&bd[p * cb..(p + 1) * cb]);
    }
    out
}

/// Splits a gradient flowing into `concat_channels(a, b)` back into the
/// per-input parts; `ca` is the channel count of the first input.
pub fn split_channels<R: Real>(g: &Tensor<R>, ca: usize) -> (Tensor<R>, Tensor<R>) {
    let (h, w, ct) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    assert!(ca <= ct);
    let cb = ct - ca;
    let mut ga = Tensor::zeros(&[h, w, ca]);
    let mut gb = Tensor::zeros(&[h, w, cb]);
    let gd = g.data();
    {
        let gad = ga.data_mut();
        for p in 0..h * w {
            gad[p * ca..(p + 1) * ca].copy_from_slice(&gd[p * ct..p * ct + ca]);
        }
    }
    {
        let gbd = gb.data_mut();
        for p in 0..h * w {
            gbd[p * cb..(p + 1) * cb].copy_from_slice(&gd[p * ct + ca..(p + 1) * ct]);
        }
    }
    (ga, gb)
}

/// Elementwise Hadamard product.
pub fn hadamard<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    assert_eq!(a.shape(), b.shape(), "hadamard shape mismatch");
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o * bv;
    }
    out
}

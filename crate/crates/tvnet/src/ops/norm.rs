//! Per-channel standardization over the spatial extent with a learned affine.
//!
//! With single-sample training the spatial statistics of the current map are
//! the only stable normalizer available, so each channel is centered and
//! scaled by its own mean/variance over `h*w` positions.

use crate::tensor::{Param, Real, Tensor};

const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SpatialNorm<R> {
    pub gamma: Param<R>,
    pub beta: Param<R>,
    pub c: usize,
}

#[derive(Clone, Debug)]
pub struct SpatialNormCache<R> {
    /// Normalized pre-affine values, one per input element.
    xhat: Vec<R>,
    /// Per-channel 1/sqrt(var + eps).
    inv_std: Vec<R>,
    h: usize,
    w: usize,
}

impl<R: Real> SpatialNorm<R> {
    pub fn new(c: usize) -> Self {
        let mut gamma = Param::zeros(&[c]);
        gamma.value.fill(R::one());
        SpatialNorm {
            gamma,
            beta: Param::zeros(&[c]),
            c,
        }
    }

    pub fn forward(&self, x: &Tensor<R>) -> (Tensor<R>, SpatialNormCache<R>) {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(c, self.c, "norm channel mismatch");
        let n = h * w;
        let nf = R::from_f64(n as f64);
        let xd = x.data();

        let mut mean = vec![R::zero(); c];
        for p in 0..n {
            for ch in 0..c {
                mean[ch] = mean[ch] + xd[p * c + ch];
            }
        }
        for m in mean.iter_mut() {
            *m = *m / nf;
        }
        let mut var = vec![R::zero(); c];
        for p in 0..n {
            for ch in 0..c {
                let d = xd[p * c + ch] - mean[ch];
                var[ch] = var[ch] + d * d;
            }
        }
        let mut inv_std = vec![R::zero(); c];
        for ch in 0..c {
            inv_std[ch] = R::one() / (var[ch] / nf + R::from_f64(EPS)).sqrt();
        }

        let mut y = Tensor::zeros(&[h, w, c]);
        let mut xhat = vec![R::zero(); n * c];
        let g = self.gamma.value.data();
        let b = self.beta.value.data();
        let yd = y.data_mut();
        for p in 0..n {
            for ch in 0..c {
                let xh = (xd[p * c + ch] - mean[ch]) * inv_std[ch];
                xhat[p * c + ch] = xh;
                yd[p * c + ch] = g[ch] * xh + b[ch];
            }
        }
        (y, SpatialNormCache { xhat, inv_std, h, w })
    }

    pub fn backward(&mut self, cache: &SpatialNormCache<R>, gy: &Tensor<R>) -> Tensor<R> {
        let (h, w, c) = (cache.h, cache.w, self.c);
        let n = h * w;
        let nf = R::from_f64(n as f64);
        assert!(gy.is_3d(h, w, c));
        let gyd = gy.data();
        let g = self.gamma.value.data();

        // Per-channel reductions: sum(gy), sum(gy * xhat).
        let mut sum_gy = vec![R::zero(); c];
        let mut sum_gy_xhat = vec![R::zero(); c];
        for p in 0..n {
            for ch in 0..c {
                let gv = gyd[p * c + ch];
                sum_gy[ch] = sum_gy[ch] + gv;
                sum_gy_xhat[ch] = sum_gy_xhat[ch] + gv * cache.xhat[p * c + ch];
            }
        }

        {
            let dg = self.gamma.grad.data_mut();
            let db = self.beta.grad.data_mut();
            for ch in 0..c {
                dg[ch] = dg[ch] + sum_gy_xhat[ch];
                db[ch] = db[ch] + sum_gy[ch];
            }
        }

        // dx = gamma*inv_std/N * (N*gy - sum_gy - xhat*sum_gy_xhat)
        let mut gx = Tensor::zeros(&[h, w, c]);
        let gxd = gx.data_mut();
        for p in 0..n {
            for ch in 0..c {
                let t = nf * gyd[p * c + ch]
                    - sum_gy[ch]
                    - cache.xhat[p * c + ch] * sum_gy_xhat[ch];
                gxd[p * c + ch] = g[ch] * cache.inv_std[ch] / nf * t;
            }
        }
        gx
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<R>)> {
        vec![("gamma", &mut self.gamma), ("beta", &mut self.beta)]
    }
}

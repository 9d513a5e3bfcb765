//! 2D convolution on `[h, w, c]` maps via im2col and unrolled dot products.

use crate::rng::Rng;
use crate::tensor::{axpy, dot, Param, Real, Tensor};
use rand_distr::{Distribution, Normal};

/// Convolution layer. Weight layout is `[cout][ky][kx][cin]` flattened, so the
/// per-output-channel weight row lines up with an im2col patch row.
#[derive(Clone, Debug)]
pub struct Conv2d<R> {
    pub weight: Param<R>,
    pub bias: Option<Param<R>>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

/// Saved forward state: the im2col patch matrix and the input geometry.
#[derive(Clone, Debug)]
pub struct ConvCache<R> {
    cols: Vec<R>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl<R: Real> Conv2d<R> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, dilation: usize, bias: bool) -> Self {
        // "same"-style padding for odd kernels; stride-2 halves even inputs.
        let pad = (k - 1) * dilation / 2;
        Conv2d {
            weight: Param::zeros(&[cout, k * k * cin]),
            bias: if bias { Some(Param::zeros(&[cout])) } else { None },
            cin,
            cout,
            k,
            stride,
            dilation,
            pad,
        }
    }

    /// He-style normal init scaled by fan-in.
    pub fn init(&mut self, rng: &mut Rng, gain: f64) {
        let fan_in = (self.k * self.k * self.cin) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        for w in self.weight.value.data_mut() {
            *w = R::from_f64(dist.sample(rng));
        }
        if let Some(b) = &mut self.bias {
            b.value.fill(R::zero());
        }
    }

    pub fn out_size(&self, i: usize) -> usize {
        let eff_k = (self.k - 1) * self.dilation + 1;
        (i + 2 * self.pad - eff_k) / self.stride + 1
    }

    fn im2col(&self, x: &Tensor<R>) -> (Vec<R>, usize, usize) {
        let (in_h, in_w) = (x.shape()[0], x.shape()[1]);
        let out_h = self.out_size(in_h);
        let out_w = self.out_size(in_w);
        let row = self.k * self.k * self.cin;
        let mut cols = vec![R::zero(); out_h * out_w * row];
        let xd = x.data();
        for oy in 0..out_h {
            for ox in 0..out_w {
                let base = (oy * out_w + ox) * row;
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix =
                            (ox * self.stride + kx * self.dilation) as isize - self.pad as isize;
                        if ix < 0 || ix >= in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * in_w + ix as usize) * self.cin;
                        let dst = base + (ky * self.k + kx) * self.cin;
                        cols[dst..dst + self.cin].copy_from_slice(&xd[src..src + self.cin]);
                    }
                }
            }
        }
        (cols, out_h, out_w)
    }

    pub fn forward(&self, x: &Tensor<R>) -> (Tensor<R>, ConvCache<R>) {
        assert_eq!(x.shape()[2], self.cin, "conv input channel mismatch");
        let (in_h, in_w) = (x.shape()[0], x.shape()[1]);
        let (cols, out_h, out_w) = self.im2col(x);
        let row = self.k * self.k * self.cin;
        let mut y = Tensor::zeros(&[out_h, out_w, self.cout]);
        let w = self.weight.value.data();
        let yd = y.data_mut();
        for p in 0..out_h * out_w {
            let patch = &cols[p * row..(p + 1) * row];
            let out = &mut yd[p * self.cout..(p + 1) * self.cout];
            for co in 0..self.cout {
                let mut v = dot(patch, &w[co * row..(co + 1) * row]);
                if let Some(b) = &self.bias {
                    v = v + b.value.data()[co];
                }
                out[co] = v;
            }
        }
        (
            y,
            ConvCache {
                cols,
                in_h,
                in_w,
                out_h,
                out_w,
            },
        )
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache<R>, gy: &Tensor<R>) -> Tensor<R> {
        let row = self.k * self.k * self.cin;
        let npos = cache.out_h * cache.out_w;
        assert!(gy.is_3d(cache.out_h, cache.out_w, self.cout));
        let gyd = gy.data();

        let dw = self.weight.grad.data_mut();
        for p in 0..npos {
            let patch = &cache.cols[p * row..(p + 1) * row];
            let g = &gyd[p * self.cout..(p + 1) * self.cout];
            for co in 0..self.cout {
                axpy(g[co], patch, &mut dw[co * row..(co + 1) * row]);
            }
        }
        if let Some(b) = &mut self.bias {
            let db = b.grad.data_mut();
            for p in 0..npos {
                let g = &gyd[p * self.cout..(p + 1) * self.cout];
                for co in 0..self.cout {
                    db[co] = db[co] + g[co];
                }
            }
        }

        // dX: form per-position patch gradients, then scatter (inverse im2col).
        let w = self.weight.value.data();
        let mut gx = Tensor::zeros(&[cache.in_h, cache.in_w, self.cin]);
        let gxd = gx.data_mut();
        let mut dpatch = vec![R::zero(); row];
        for oy in 0..cache.out_h {
            for ox in 0..cache.out_w {
                let p = oy * cache.out_w + ox;
                let g = &gyd[p * self.cout..(p + 1) * self.cout];
                for v in dpatch.iter_mut() {
                    *v = R::zero();
                }
                for co in 0..self.cout {
                    axpy(g[co], &w[co * row..(co + 1) * row], &mut dpatch);
                }
                for ky in 0..self.k {
                    let iy = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                    if iy < 0 || iy >= cache.in_h as isize {
                        continue;
                    }
                    for kx in 0..self.k {
                        let ix =
                            (ox * self.stride + kx * self.dilation) as isize - self.pad as isize;
                        if ix < 0 || ix >= cache.in_w as isize {
                            continue;
                        }
                        let dst = (iy as usize * cache.in_w + ix as usize) * self.cin;
                        let src = (ky * self.k + kx) * self.cin;
                        axpy(
                            R::one(),
                            &dpatch[src..src + self.cin],
                            &mut gxd[dst..dst + self.cin],
                        );
                    }
                }
            }
        }
        gx
    }

    pub fn params(&self) -> Vec<(&'static str, &Param<R>)> {
        let mut v = vec![("weight", &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias", b));
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<R>)> {
        let mut v = vec![("weight", &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("bias", b));
        }
        v
    }
}

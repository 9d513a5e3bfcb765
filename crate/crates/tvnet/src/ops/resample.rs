//! Bilinear resizing (half-pixel centers, replicated borders) and pixel
//! shuffle. Both are fixed linear maps, so their backwards are transposed
//! scatters with the same weights.

use crate::tensor::{Real, Tensor};

/// Per-output-index sampling plan along one axis.
struct AxisPlan {
    i0: Vec<usize>,
    i1: Vec<usize>,
    w: Vec<f64>,
}

fn plan(in_len: usize, out_len: usize) -> AxisPlan {
    let scale = in_len as f64 / out_len as f64;
    let mut i0 = Vec::with_capacity(out_len);
    let mut i1 = Vec::with_capacity(out_len);
    let mut w = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let s = (o as f64 + 0.5) * scale - 0.5;
        let f = s.floor();
        let a = (f as isize).clamp(0, in_len as isize - 1) as usize;
        let b = ((f as isize) + 1).clamp(0, in_len as isize - 1) as usize;
        i0.push(a);
        i1.push(b);
        w.push((s - f).clamp(0.0, 1.0));
    }
    AxisPlan { i0, i1, w }
}

/// Resizes `[h, w, c]` to `[out_h, out_w, c]`.
pub fn bilinear_resize<R: Real>(x: &Tensor<R>, out_h: usize, out_w: usize) -> Tensor<R> {
    let (ih, iw, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let py = plan(ih, out_h);
    let px = plan(iw, out_w);
    let mut y = Tensor::zeros(&[out_h, out_w, c]);
    let xd = x.data();
    let yd = y.data_mut();
    for oy in 0..out_h {
        let (y0, y1, wy) = (py.i0[oy], py.i1[oy], py.w[oy]);
        for ox in 0..out_w {
            let (x0, x1, wx) = (px.i0[ox], px.i1[ox], px.w[ox]);
            let w00 = R::from_f64((1.0 - wy) * (1.0 - wx));
            let w01 = R::from_f64((1.0 - wy) * wx);
            let w10 = R::from_f64(wy * (1.0 - wx));
            let w11 = R::from_f64(wy * wx);
            let s00 = (y0 * iw + x0) * c;
            let s01 = (y0 * iw + x1) * c;
            let s10 = (y1 * iw + x0) * c;
            let s11 = (y1 * iw + x1) * c;
            let dst = (oy * out_w + ox) * c;
            for ch in 0..c {
                yd[dst + ch] = w00 * xd[s00 + ch]
                    + w01 * xd[s01 + ch]
                    + w10 * xd[s10 + ch]
                    + w11 * xd[s11 + ch];
            }
        }
    }
    y
}

/// Scatters the output gradient back through the same sampling weights.
pub fn bilinear_resize_backward<R: Real>(
    gy: &Tensor<R>,
    in_h: usize,
    in_w: usize,
) -> Tensor<R> {
    let (oh, ow, c) = (gy.shape()[0], gy.shape()[1], gy.shape()[2]);
    let py = plan(in_h, oh);
    let px = plan(in_w, ow);
    let mut gx = Tensor::zeros(&[in_h, in_w, c]);
    let gyd = gy.data();
    let gxd = gx.data_mut();
    for oy in 0..oh {
        let (y0, y1, wy) = (py.i0[oy], py.i1[oy], py.w[oy]);
        for ox in 0..ow {
            let (x0, x1, wx) = (px.i0[ox], px.i1[ox], px.w[ox]);
            let w00 = R::from_f64((1.0 - wy) * (1.0 - wx));
            let w01 = R::from_f64((1.0 - wy) * wx);
            let w10 = R::from_f64(wy * (1.0 - wx));
            let w11 = R::from_f64(wy * wx);
            let s00 = (y0 * in_w + x0) * c;
            let s01 = (y0 * in_w + x1) * c;
            let s10 = (y1 * in_w + x0) * c;
            let s11 = (y1 * in_w + x1) * c;
            let src = (oy * ow + ox) * c;
            for ch in 0..c {
                let g = gyd[src + ch];
                gxd[s00 + ch] = gxd[s00 + ch] + w00 * g;
                gxd[s01 + ch] = gxd[s01 + ch] + w01 * g;
                gxd[s10 + ch] = gxd[s10 + ch] + w10 * g;
                gxd[s11 + ch] = gxd[s11 + ch] + w11 * g;
            }
        }
    }
    gx
}

/// Rearranges `[h, w, 4c]` into `[2h, 2w, c]`. Output channel `ch` at
/// subpixel offset `(dy, dx)` reads input channel `ch*4 + dy*2 + dx`, so a
/// single location `[a, b, c, d]` becomes the 2x2 block `[[a, b], [c, d]]`.
pub fn pixel_shuffle<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let (h, w, c4) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert_eq!(c4 % 4, 0, "pixel shuffle needs channels divisible by 4");
    let c = c4 / 4;
    let mut y = Tensor::zeros(&[2 * h, 2 * w, c]);
    let xd = x.data();
    let yd = y.data_mut();
    for iy in 0..h {
        for ix in 0..w {
            let src = (iy * w + ix) * c4;
            for dy in 0..2 {
                for dx in 0..2 {
                    let dst = ((2 * iy + dy) * 2 * w + (2 * ix + dx)) * c;
                    for ch in 0..c {
                        yd[dst + ch] = xd[src + ch * 4 + dy * 2 + dx];
                    }
                }
            }
        }
    }
    y
}

/// Exact inverse of `pixel_shuffle`; also its backward pass.
pub fn pixel_unshuffle<R: Real>(y: &Tensor<R>) -> Tensor<R> {
    let (h2, w2, c) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    assert!(h2 % 2 == 0 && w2 % 2 == 0, "pixel unshuffle needs even dims");
    let (h, w) = (h2 / 2, w2 / 2);
    let mut x = Tensor::zeros(&[h, w, 4 * c]);
    let yd = y.data();
    let xd = x.data_mut();
    for iy in 0..h {
        for ix in 0..w {
            let dst = (iy * w + ix) * 4 * c;
            for dy in 0..2 {
                for dx in 0..2 {
                    let src = ((2 * iy + dy) * w2 + (2 * ix + dx)) * c;
                    for ch in 0..c {
                        xd[dst + ch * 4 + dy * 2 + dx] = yd[src + ch];
                    }
                }
            }
        }
    }
    x
}

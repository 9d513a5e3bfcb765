//! Adaptive multi-resolution fusion: lifts the fine multimodal map to the
//! level-2 resolution and folds in suppressed level-2 features.
//!
//! The fine map is refined by two convolutions (plain ReLU between them),
//! expanded fourfold in channels, and pixel-shuffled to double resolution.
//! That high-resolution context is concatenated with the raw level-2
//! features and pushed through a convolution, a per-channel spatial
//! standardization with learned affine, and a ReLU, suppressing regions
//! the referent does not occupy. A one-channel sigmoid intensity map,
//! conditioned on both the suppressed features and the bilinearly
//! upsampled fine map, decides per pixel how much of the suppressed
//! features survives the final fusion convolution.
//!
//! Level-1 features are never consumed.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::ops::{
    bilinear_resize, bilinear_resize_backward, concat_channels, pixel_shuffle, pixel_unshuffle,
    relu, relu_backward, sigmoid, sigmoid_backward, split_channels, Conv2d, ConvCache,
    SpatialNorm, SpatialNormCache,
};
use crate::rng::Rng;
use crate::tensor::{Param, Real, Tensor};

/// High-resolution fusion parameters. The pixel-shuffled context keeps the
/// level-2 channel width, so the shuffle input is 4x that wide.
pub struct Amf<R: Real> {
    pub refine1: Conv2d<R>,
    pub refine2: Conv2d<R>,
    pub suppress: Conv2d<R>,
    pub norm: SpatialNorm<R>,
    pub gate: Conv2d<R>,
    pub fusion: Conv2d<R>,
    d_m: usize,
    d_2: usize,
}

pub struct SuppressCache<R: Real> {
    r1_cache: ConvCache<R>,
    pre1: Tensor<R>,
    r2_cache: ConvCache<R>,
    sup_cache: ConvCache<R>,
    norm_cache: SpatialNormCache<R>,
    normed: Tensor<R>,
}

pub struct FuseCache<R: Real> {
    v2p: Tensor<R>,
    gate_cache: ConvCache<R>,
    /// One-channel intensity map, strictly inside (0,1).
    pub a2: Tensor<R>,
    fusion_cache: ConvCache<R>,
    lr_h: usize,
    lr_w: usize,
}

pub struct AmfCache<R: Real> {
    pub suppress: SuppressCache<R>,
    pub fuse: FuseCache<R>,
}

/// Multiplies a one-channel map onto every channel of `v`.
fn broadcast_mul<R: Real>(a: &Tensor<R>, v: &Tensor<R>) -> Tensor<R> {
    let c = v.shape()[2];
    let mut out = Tensor::zeros(v.shape());
    let (ad, vd, od) = (a.data(), v.data(), out.data_mut());
    for p in 0..ad.len() {
        for ch in 0..c {
            od[p * c + ch] = ad[p] * vd[p * c + ch];
        }
    }
    out
}

/// Channel-sum reduction, the adjoint of `broadcast_mul` in its map slot.
fn channel_sum<R: Real>(g: &Tensor<R>) -> Tensor<R> {
    let (h, w, c) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let mut out = Tensor::zeros(&[h, w, 1]);
    let (gd, od) = (g.data(), out.data_mut());
    for p in 0..h * w {
        let mut s = R::zero();
        for ch in 0..c {
            s = s + gd[p * c + ch];
        }
        od[p] = s;
    }
    out
}

impl<R: Real> Amf<R> {
    pub fn new(cfg: &Config) -> Self {
        let d_m = cfg.multimodal_width;
        let d_2 = cfg.level_channels[1];
        Amf {
            refine1: Conv2d::new(d_m, d_m, 3, 1, 1, true),
            refine2: Conv2d::new(d_m, 4 * d_2, 3, 1, 1, true),
            // No bias: the following standardization subtracts per-channel
            // means, so a bias here is unreachable by gradients.
            suppress: Conv2d::new(d_2 + d_2, d_2, 3, 1, 1, false),
            norm: SpatialNorm::new(d_2),
            gate: Conv2d::new(d_2 + d_m, 1, 3, 1, 1, true),
            fusion: Conv2d::new(d_m + d_2, d_m, 3, 1, 1, true),
            d_m,
            d_2,
        }
    }

    pub fn init(&mut self, rng: &mut Rng) {
        self.refine1.init(rng, 1.0);
        self.refine2.init(rng, 1.0);
        self.suppress.init(rng, 1.0);
        self.gate.init(rng, 1.0);
        self.fusion.init(rng, 1.0);
    }

    fn check_pair(&self, m_fine: &Tensor<R>, hr: &Tensor<R>, hr_c: usize, what: &str) -> Result<()> {
        let (h, w) = (m_fine.shape()[0], m_fine.shape()[1]);
        if m_fine.shape()[2] != self.d_m {
            return Err(Error::shape(format!(
                "fine map must have {} channels, got {}",
                self.d_m,
                m_fine.shape()[2]
            )));
        }
        if hr.shape() != [2 * h, 2 * w, hr_c] {
            return Err(Error::shape(format!(
                "{what} must be [{},{},{}], got {:?}",
                2 * h,
                2 * w,
                hr_c,
                hr.shape()
            )));
        }
        Ok(())
    }

    /// Suppression path: refined fine-map context is pixel-shuffled up and
    /// fused with the level-2 features, then standardized and rectified.
    pub fn suppress_background(
        &self,
        m_fine: &Tensor<R>,
        v2: &Tensor<R>,
    ) -> Result<(Tensor<R>, SuppressCache<R>)> {
        self.check_pair(m_fine, v2, self.d_2, "level-2 features")?;
        let (pre1, r1_cache) = self.refine1.forward(m_fine);
        let (c_lr, r2_cache) = self.refine2.forward(&relu(&pre1));
        let c_hr = pixel_shuffle(&c_lr);
        let (pre_sup, sup_cache) = self.suppress.forward(&concat_channels(&c_hr, v2));
        let (normed, norm_cache) = self.norm.forward(&pre_sup);
        let v2p = relu(&normed);
        Ok((v2p, SuppressCache { r1_cache, pre1, r2_cache, sup_cache, norm_cache, normed }))
    }

    /// Returns gradients for (m_fine, v2).
    fn suppress_backward(
        &mut self,
        cache: &SuppressCache<R>,
        g_v2p: &Tensor<R>,
    ) -> (Tensor<R>, Tensor<R>) {
        let g_normed = relu_backward(&cache.normed, g_v2p);
        let g_pre_sup = self.norm.backward(&cache.norm_cache, &g_normed);
        let g_cat = self.suppress.backward(&cache.sup_cache, &g_pre_sup);
        let (g_chr, g_v2) = split_channels(&g_cat, self.d_2);
        let g_clr = pixel_unshuffle(&g_chr);
        let g_relu1 = self.refine2.backward(&cache.r2_cache, &g_clr);
        let g_pre1 = relu_backward(&cache.pre1, &g_relu1);
        let g_fine = self.refine1.backward(&cache.r1_cache, &g_pre1);
        (g_fine, g_v2)
    }

    /// Intensity-gated fusion of the upsampled fine map with the suppressed
    /// level-2 features.
    pub fn intensity_fuse(
        &self,
        m_fine: &Tensor<R>,
        v2p: &Tensor<R>,
    ) -> Result<(Tensor<R>, FuseCache<R>)> {
        self.check_pair(m_fine, v2p, self.d_2, "suppressed features")?;
        let (lr_h, lr_w) = (m_fine.shape()[0], m_fine.shape()[1]);
        let up = bilinear_resize(m_fine, 2 * lr_h, 2 * lr_w);
        let (pre_gate, gate_cache) = self.gate.forward(&concat_channels(v2p, &up));
        let a2 = sigmoid(&pre_gate);
        let gated = broadcast_mul(&a2, v2p);
        let (out, fusion_cache) = self.fusion.forward(&concat_channels(&up, &gated));
        Ok((
            out,
            FuseCache { v2p: v2p.clone(), gate_cache, a2, fusion_cache, lr_h, lr_w },
        ))
    }

    /// Returns gradients for (m_fine, v2p).
    fn fuse_backward(&mut self, cache: &FuseCache<R>, g_out: &Tensor<R>) -> (Tensor<R>, Tensor<R>) {
        let g_cat = self.fusion.backward(&cache.fusion_cache, g_out);
        let (g_up_direct, g_gated) = split_channels(&g_cat, self.d_m);
        let gated_grad_a2 = channel_sum(&hadamard_like(&g_gated, &cache.v2p));
        let mut g_v2p = broadcast_mul(&cache.a2, &g_gated);
        let g_pre_gate = sigmoid_backward(&cache.a2, &gated_grad_a2);
        let g_cat2 = self.gate.backward(&cache.gate_cache, &g_pre_gate);
        let (g_v2p2, g_up2) = split_channels(&g_cat2, self.d_2);
        g_v2p.add_assign(&g_v2p2);
        let mut g_up = g_up_direct;
        g_up.add_assign(&g_up2);
        let g_fine = bilinear_resize_backward(&g_up, cache.lr_h, cache.lr_w);
        (g_fine, g_v2p)
    }

    pub fn forward(&self, m_fine: &Tensor<R>, v2: &Tensor<R>) -> Result<(Tensor<R>, AmfCache<R>)> {
        let (v2p, sup) = self.suppress_background(m_fine, v2)?;
        let (out, fuse) = self.intensity_fuse(m_fine, &v2p)?;
        Ok((out, AmfCache { suppress: sup, fuse }))
    }

    /// Returns gradients for (m_fine, v2).
    pub fn backward(&mut self, cache: &AmfCache<R>, g_out: &Tensor<R>) -> (Tensor<R>, Tensor<R>) {
        let (mut g_fine, g_v2p) = self.fuse_backward(&cache.fuse, g_out);
        let (g_fine_sup, g_v2) = self.suppress_backward(&cache.suppress, &g_v2p);
        g_fine.add_assign(&g_fine_sup);
        (g_fine, g_v2)
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        let mut out = Vec::new();
        for (part, conv) in [
            ("refine1", &mut self.refine1),
            ("refine2", &mut self.refine2),
            ("suppress", &mut self.suppress),
            ("gate", &mut self.gate),
            ("fusion", &mut self.fusion),
        ] {
            for (name, p) in conv.params_mut() {
                out.push((format!("amf.{part}.{name}"), p));
            }
        }
        for (name, p) in self.norm.params_mut() {
            out.push((format!("amf.norm.{name}"), p));
        }
        out
    }
}

fn hadamard_like<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    crate::ops::hadamard(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_close, numeric_grad, FD_STEP};
    use crate::rng::{stream, Rng, Stream};
    use crate::tensor::dot;
    use rand_distr::{Distribution, Normal};

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        let d = Normal::new(0.0, 0.7).unwrap();
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| d.sample(rng)).collect())
    }

    /// d_m = 1, d_2 = 1 so every kernel is hand-settable.
    fn toy() -> Amf<f64> {
        Amf {
            refine1: Conv2d::new(1, 1, 3, 1, 1, true),
            refine2: Conv2d::new(1, 4, 3, 1, 1, true),
            suppress: Conv2d::new(2, 1, 3, 1, 1, false),
            norm: SpatialNorm::new(1),
            gate: Conv2d::new(2, 1, 3, 1, 1, true),
            fusion: Conv2d::new(2, 1, 3, 1, 1, true),
            d_m: 1,
            d_2: 1,
        }
    }

    /// Zeroes a 3x3 kernel and sets only its center taps, making the
    /// convolution act pointwise.
    fn set_center(conv: &mut Conv2d<f64>, taps: &[&[f64]], bias: &[f64]) {
        let cin = taps[0].len();
        conv.weight.value.fill(0.0);
        for (row, t) in taps.iter().enumerate() {
            let base = (row * 9 + 4) * cin;
            conv.weight.value.data_mut()[base..base + cin].copy_from_slice(t);
        }
        if let Some(b) = conv.bias.as_mut() {
            b.value.data_mut().copy_from_slice(bias);
        } else {
            assert!(bias.is_empty(), "bias values given for a bias-free conv");
        }
    }

    #[test]
    fn shuffle_bijection_holds_here_too() {
        let mut rng = stream(51, Stream::Init);
        let x = rand_tensor(&[3, 3, 8], &mut rng);
        let y = pixel_shuffle(&x);
        assert_eq!(y.shape(), &[6, 6, 2]);
        let mut a: Vec<f64> = x.data().to_vec();
        let mut b: Vec<f64> = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert_eq!(pixel_unshuffle(&y).data(), x.data());
        // fixed order: 1x1x4 [a,b,c,d] -> [[a,b],[c,d]]
        let q = Tensor::from_vec(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pixel_shuffle(&q).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn upsampling_preserves_constant_maps() {
        let x = Tensor::from_vec(&[2, 2, 1], vec![0.7; 4]);
        let y = bilinear_resize(&x, 4, 4);
        assert!(y.data().iter().all(|&v| (v - 0.7f64).abs() < 1e-12));
    }

    #[test]
    fn zero_suppression_weights_give_constant_bias_map() {
        let mut amf = toy();
        // every conv weight and bias zero, affine scale zero, bias 0.4
        amf.norm.gamma.value.fill(0.0);
        amf.norm.beta.value.fill(0.4);
        let m = Tensor::from_vec(&[2, 2, 1], vec![1.0, -2.0, 3.0, 0.5]);
        let v2 = Tensor::from_vec(&[4, 4, 1], vec![0.25; 16]);
        let (v2p, _) = amf.suppress_background(&m, &v2).unwrap();
        assert!(v2p.data().iter().all(|&v| (v - 0.4f64).abs() < 1e-12));
    }

    #[test]
    fn suppressed_features_are_nonnegative() {
        let mut rng = stream(52, Stream::Init);
        let mut amf = toy();
        amf.init(&mut rng);
        let m = rand_tensor(&[2, 2, 1], &mut rng);
        let v2 = rand_tensor(&[4, 4, 1], &mut rng);
        let (v2p, _) = amf.suppress_background(&m, &v2).unwrap();
        assert!(v2p.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn suppression_matches_pointwise_hand_evaluation() {
        let mut amf = toy();
        set_center(&mut amf.refine1, &[&[2.0]], &[0.5]);
        set_center(&mut amf.refine2, &[&[1.0], &[-1.0], &[0.5], &[2.0]], &[0.0, 0.25, -0.5, 1.0]);
        set_center(&mut amf.suppress, &[&[1.0, 0.5]], &[]);
        amf.norm.gamma.value.fill(1.5);
        amf.norm.beta.value.fill(-0.3);
        let m = Tensor::from_vec(&[2, 2, 1], vec![1.0, -2.0, 3.0, 0.5]);
        let v2_vals: Vec<f64> = (0..16).map(|i| 0.1 * i as f64 - 0.6).collect();
        let v2 = Tensor::from_vec(&[4, 4, 1], v2_vals.clone());
        let (v2p, _) = amf.suppress_background(&m, &v2).unwrap();

        // oracle: same arithmetic, plain loops
        let r: Vec<f64> = m.data().iter().map(|&v| (2.0 * v + 0.5).max(0.0)).collect();
        let w = [1.0, -1.0, 0.5, 2.0];
        let b = [0.0, 0.25, -0.5, 1.0];
        let mut chr = vec![0.0; 16];
        for cell in 0..4 {
            let (cy, cx) = (cell / 2, cell % 2);
            for g in 0..4 {
                let (dy, dx) = (g / 2, g % 2);
                chr[(2 * cy + dy) * 4 + (2 * cx + dx)] = w[g] * r[cell] + b[g];
            }
        }
        let pre: Vec<f64> = (0..16).map(|i| chr[i] + 0.5 * v2_vals[i]).collect();
        let mean = pre.iter().sum::<f64>() / 16.0;
        let var = pre.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        let inv = 1.0 / (var + 1e-5).sqrt();
        let want: Vec<f64> =
            pre.iter().map(|v| (1.5 * (v - mean) * inv - 0.3).max(0.0)).collect();
        for (got, want) in v2p.data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn closed_intensity_gate_drops_suppressed_features() {
        let mut rng = stream(53, Stream::Init);
        let mut amf = toy();
        amf.init(&mut rng);
        amf.gate.weight.value.fill(0.0);
        amf.gate.bias.as_mut().unwrap().value.fill(-80.0);
        let m = rand_tensor(&[2, 2, 1], &mut rng);
        let v2p = rand_tensor(&[4, 4, 1], &mut rng).map(f64::abs);
        let (out, _) = amf.intensity_fuse(&m, &v2p).unwrap();
        let zeros = Tensor::zeros(&[4, 4, 1]);
        let (want, _) = amf.intensity_fuse(&m, &zeros).unwrap();
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gate_weights_give_half_intensity() {
        let mut rng = stream(54, Stream::Init);
        let mut amf = toy();
        amf.init(&mut rng);
        amf.gate.weight.value.fill(0.0);
        amf.gate.bias.as_mut().unwrap().value.fill(0.0);
        let m = rand_tensor(&[2, 2, 1], &mut rng);
        let v2p = rand_tensor(&[4, 4, 1], &mut rng).map(f64::abs);
        let (_, cache) = amf.intensity_fuse(&m, &v2p).unwrap();
        assert!(cache.a2.data().iter().all(|&v| v == 0.5));
        assert_eq!(cache.a2.shape()[2], 1);
    }

    #[test]
    fn intensity_fusion_matches_pointwise_hand_evaluation() {
        let mut amf = toy();
        set_center(&mut amf.gate, &[&[0.8, -0.6]], &[0.1]);
        set_center(&mut amf.fusion, &[&[1.2, 2.0]], &[-0.05]);
        let m_vals = [1.0, -2.0, 3.0, 0.5];
        let m = Tensor::from_vec(&[2, 2, 1], m_vals.to_vec());
        let v2p_vals: Vec<f64> = (0..16)
            .map(|i| 0.05 * ((i / 4 + 1) * (i % 4 + 2)) as f64)
            .collect();
        let v2p = Tensor::from_vec(&[4, 4, 1], v2p_vals.clone());
        let (out, cache) = amf.intensity_fuse(&m, &v2p).unwrap();

        // the 2->4 half-pixel plan with clamped borders
        let rows = [[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
        let at = |y: usize, x: usize| m_vals[y * 2 + x];
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        for oy in 0..4 {
            for ox in 0..4 {
                let mut up = 0.0;
                for iy in 0..2 {
                    for ix in 0..2 {
                        up += rows[oy][iy] * rows[ox][ix] * at(iy, ix);
                    }
                }
                let v = v2p_vals[oy * 4 + ox];
                let a2 = sig(0.8 * v - 0.6 * up + 0.1);
                let want = 1.2 * up + 2.0 * (a2 * v) - 0.05;
                let got = out.data()[oy * 4 + ox];
                assert!((got - want).abs() < 1e-12, "({oy},{ox}): {got} vs {want}");
                assert!((cache.a2.data()[oy * 4 + ox] - a2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn intensity_map_is_single_channel_in_open_interval() {
        let mut rng = stream(55, Stream::Init);
        let cfg = Config::default();
        let mut amf = Amf::<f32>::new(&cfg);
        amf.init(&mut rng);
        let d = Normal::new(0.0, 0.5).unwrap();
        let m = Tensor::<f32>::from_vec(
            &[8, 8, cfg.multimodal_width],
            (0..8 * 8 * cfg.multimodal_width).map(|_| d.sample(&mut rng) as f32).collect(),
        );
        let v2 = Tensor::<f32>::from_vec(
            &[16, 16, cfg.level_channels[1]],
            (0..16 * 16 * cfg.level_channels[1]).map(|_| d.sample(&mut rng) as f32).collect(),
        );
        let (out, cache) = amf.forward(&m, &v2).unwrap();
        assert!(out.is_3d(16, 16, cfg.multimodal_width));
        assert!(out.all_finite());
        assert_eq!(cache.fuse.a2.shape(), &[16, 16, 1]);
        assert!(cache.fuse.a2.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let mut rng = stream(56, Stream::Init);
        let mut amf = toy();
        amf.init(&mut rng);
        let m = rand_tensor(&[2, 2, 1], &mut rng);
        let v2_bad = rand_tensor(&[3, 3, 1], &mut rng);
        assert!(amf.suppress_background(&m, &v2_bad).is_err());
        assert!(amf.intensity_fuse(&m, &v2_bad).is_err());
        let m_bad = rand_tensor(&[2, 2, 2], &mut rng);
        assert!(amf.forward(&m_bad, &rand_tensor(&[4, 4, 1], &mut rng)).is_err());
    }

    struct Toy {
        amf: Amf<f64>,
        m: Tensor<f64>,
        v2: Tensor<f64>,
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream(57, Stream::Init);
        let mut amf = Amf {
            refine1: Conv2d::new(2, 2, 3, 1, 1, true),
            refine2: Conv2d::new(2, 4, 3, 1, 1, true),
            suppress: Conv2d::new(2, 1, 3, 1, 1, false),
            norm: SpatialNorm::new(1),
            gate: Conv2d::new(3, 1, 3, 1, 1, true),
            fusion: Conv2d::new(3, 2, 3, 1, 1, true),
            d_m: 2,
            d_2: 1,
        };
        amf.init(&mut rng);
        // jitter the affine so no ReLU input sits exactly at the kink
        let jit = Normal::new(0.0, 0.05).unwrap();
        for (_, p) in amf.params_mut() {
            for v in p.value.data_mut() {
                *v += jit.sample(&mut rng);
            }
        }
        let m = rand_tensor(&[2, 2, 2], &mut rng);
        let v2 = rand_tensor(&[4, 4, 1], &mut rng);
        let probe = rand_tensor(&[4, 4, 2], &mut rng);
        let mut toy = Toy { amf, m, v2 };
        let loss = |t: &Toy| {
            let (out, _) = t.amf.forward(&t.m, &t.v2).unwrap();
            dot(out.data(), probe.data())
        };

        let (_, cache) = toy.amf.forward(&toy.m, &toy.v2).unwrap();
        for (_, p) in toy.amf.params_mut() {
            p.zero_grad();
        }
        let (g_m, g_v2) = toy.amf.backward(&cache, &probe);

        let specs: Vec<(String, usize)> = toy
            .amf
            .params_mut()
            .iter()
            .map(|(n, p)| (n.clone(), p.value.numel()))
            .collect();
        for (name, numel) in specs {
            for i in 0..numel {
                let analytic = {
                    let params = toy.amf.params_mut();
                    let p = params.into_iter().find(|(n, _)| *n == name).unwrap().1;
                    p.grad.data()[i]
                };
                let num = numeric_grad(
                    &mut toy,
                    |t| {
                        let params = t.amf.params_mut();
                        let p = params.into_iter().find(|(n, _)| *n == name).unwrap().1;
                        &mut p.value.data_mut()[i]
                    },
                    loss,
                    FD_STEP,
                );
                assert_close(&format!("{name}[{i}]"), analytic, num);
            }
        }
        for i in 0..toy.m.numel() {
            let num = numeric_grad(&mut toy, |t| &mut t.m.data_mut()[i], loss, FD_STEP);
            assert_close(&format!("m_fine[{i}]"), g_m.data()[i], num);
        }
        for i in 0..toy.v2.numel() {
            let num = numeric_grad(&mut toy, |t| &mut t.v2.data_mut()[i], loss, FD_STEP);
            assert_close(&format!("v2[{i}]"), g_v2.data()[i], num);
        }
    }
}

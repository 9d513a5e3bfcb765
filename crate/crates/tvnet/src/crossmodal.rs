//! Language-visual fusion of the three enriched low-resolution levels into
//! a single multimodal map.
//!
//! Per level: the sentence vector is projected to the multimodal width and
//! broadcast-multiplied against a linearly transformed fusion of the visual
//! features with an 8-channel coordinate map, then passed through a leaky
//! nonlinearity and L2-normalized per location (bilinear products are
//! unbounded otherwise; the leaky form keeps the map positively homogeneous
//! in the sentence vector, so its scale cancels in the normalization).
//!
//! The three fused maps then exchange information: each level adds the
//! sigmoid-gated maps of the other two, with one gate convolution shared
//! across source levels and conditioned on the projected sentence vector.
//! Finally a convolutional GRU consumes the maps deepest first and its last
//! hidden state is the fine multimodal map.

use crate::config::Config;
use crate::data::FeaturePyramid;
use crate::error::{Error, Result};
use crate::ops::{
    concat_channels, hadamard, l2_normalize, l2_normalize_backward, leaky_relu,
    leaky_relu_backward, sigmoid, sigmoid_backward, split_channels, Conv2d, ConvCache, ConvGru,
    ConvGruCache, L2NormCache, Linear, LEAK,
};
use crate::rng::Rng;
use crate::tensor::{Param, Real, Tensor};

/// Channels of the coordinate map fed to every fusion convolution.
pub const COORD_CHANNELS: usize = 8;

/// Per-cell coordinate features: [x_min, y_min, x_center, y_center, x_max,
/// y_max, 1/w, 1/h], positions normalized so the image spans [-1, 1].
pub fn spatial_coords<R: Real>(h: usize, w: usize) -> Tensor<R> {
    assert!(h >= 1 && w >= 1);
    let mut o = Tensor::zeros(&[h, w, COORD_CHANNELS]);
    let norm = |i: usize, n: usize| 2.0 * i as f64 / n as f64 - 1.0;
    let norm_c = |i: usize, n: usize| 2.0 * (i as f64 + 0.5) / n as f64 - 1.0;
    for y in 0..h {
        for x in 0..w {
            let cell = [
                norm(x, w),
                norm(y, h),
                norm_c(x, w),
                norm_c(y, h),
                norm(x + 1, w),
                norm(y + 1, h),
                1.0 / w as f64,
                1.0 / h as f64,
            ];
            for (c, v) in cell.iter().enumerate() {
                *o.at3_mut(y, x, c) = R::from_f64(*v);
            }
        }
    }
    o
}

fn tile<R: Real>(v: &Tensor<R>, h: usize, w: usize) -> Tensor<R> {
    let d = v.numel();
    let mut out = Tensor::zeros(&[h, w, d]);
    for p in 0..h * w {
        out.data_mut()[p * d..(p + 1) * d].copy_from_slice(v.data());
    }
    out
}

fn untile<R: Real>(g: &Tensor<R>) -> Tensor<R> {
    let d = g.shape()[2];
    let mut out = Tensor::zeros(&[d]);
    for p in 0..g.shape()[0] * g.shape()[1] {
        for c in 0..d {
            out.data_mut()[c] = out.data()[c] + g.data()[p * d + c];
        }
    }
    out
}

/// Fusion stack: sentence projection, shared channel transform, per-level
/// fusion convolutions, one shared exchange gate, and the recurrent cell.
pub struct CrossModal<R: Real> {
    pub lang_proj: Linear<R>,
    pub w5: Conv2d<R>,
    pub fuse: Vec<Conv2d<R>>,
    pub gate: Conv2d<R>,
    pub cell: ConvGru<R>,
    d_s: usize,
    d_m: usize,
}

pub struct FuseCache<R: Real> {
    concat_cache: ConvCache<R>,
    w5_cache: ConvCache<R>,
    t: Tensor<R>,
    raw: Tensor<R>,
    norm_cache: L2NormCache<R>,
    d_l: usize,
}

pub struct ExchangeCache<R: Real> {
    gate_caches: Vec<ConvCache<R>>,
    /// Gate activations per source level, all strictly inside (0,1).
    pub gates: Vec<Tensor<R>>,
    raws: Vec<Tensor<R>>,
}

pub struct CrossModalCache<R: Real> {
    s_input: Tensor<R>,
    lang: Tensor<R>,
    fuse: Vec<FuseCache<R>>,
    pub exchange: ExchangeCache<R>,
    gru: Vec<ConvGruCache<R>>,
}

impl<R: Real> CrossModal<R> {
    pub fn new(cfg: &Config) -> Self {
        let d_s = cfg.lang_feature_width;
        let d_m = cfg.multimodal_width;
        let fuse = cfg.level_channels[2..5]
            .iter()
            .map(|&d_l| Conv2d::new(d_l + COORD_CHANNELS, d_m, 1, 1, 1, true))
            .collect();
        CrossModal {
            lang_proj: Linear::new(d_s, d_m, false),
            w5: Conv2d::new(d_m, d_m, 1, 1, 1, false),
            fuse,
            gate: Conv2d::new(2 * d_m, d_m, 1, 1, 1, true),
            cell: ConvGru::new(d_m, d_m),
            d_s,
            d_m,
        }
    }

    pub fn init(&mut self, rng: &mut Rng) {
        self.lang_proj.init(rng, 1.0);
        self.w5.init(rng, 1.0);
        for f in &mut self.fuse {
            f.init(rng, 1.0);
        }
        self.gate.init(rng, 1.0);
        self.cell.init(rng, 1.0);
    }

    /// Bilinear fusion of one level with the broadcast sentence projection.
    pub fn fuse_level(
        &self,
        i: usize,
        v: &Tensor<R>,
        lang: &Tensor<R>,
    ) -> Result<(Tensor<R>, FuseCache<R>)> {
        let d_l = self.fuse[i].cin - COORD_CHANNELS;
        if v.shape()[2] != d_l {
            return Err(Error::shape(format!(
                "fusion level {i} expects {d_l} channels, got {}",
                v.shape()[2]
            )));
        }
        if lang.numel() != self.d_m {
            return Err(Error::shape(format!(
                "sentence projection must have width {}, got {}",
                self.d_m,
                lang.numel()
            )));
        }
        let (h, w) = (v.shape()[0], v.shape()[1]);
        let o = spatial_coords::<R>(h, w);
        let x = concat_channels(v, &o);
        let (f, concat_cache) = self.fuse[i].forward(&x);
        let (t, w5_cache) = self.w5.forward(&f);
        let raw = hadamard(&tile(lang, h, w), &t);
        let act = leaky_relu(&raw, LEAK);
        let (m, norm_cache) = l2_normalize(&act);
        Ok((m, FuseCache { concat_cache, w5_cache, t, raw, norm_cache, d_l }))
    }

    /// Returns gradients for (v, lang).
    fn fuse_level_backward(
        &mut self,
        i: usize,
        cache: &FuseCache<R>,
        lang: &Tensor<R>,
        gm: &Tensor<R>,
    ) -> (Tensor<R>, Tensor<R>) {
        let (h, w) = (cache.raw.shape()[0], cache.raw.shape()[1]);
        let g_act = l2_normalize_backward(&cache.norm_cache, gm);
        let g_raw = leaky_relu_backward(&cache.raw, &g_act, LEAK);
        let g_lang = untile(&hadamard(&g_raw, &cache.t));
        let g_t = hadamard(&g_raw, &tile(lang, h, w));
        let g_f = self.w5.backward(&cache.w5_cache, &g_t);
        let g_cat = self.fuse[i].backward(&cache.concat_cache, &g_f);
        let (g_v, _g_coords) = split_channels(&g_cat, cache.d_l);
        (g_v, g_lang)
    }

    /// Cross-level exchange: each map adds the gated other two. The gate is
    /// one shared convolution over [map ; tiled sentence projection].
    pub fn exchange(
        &self,
        raws: &[Tensor<R>; 3],
        lang: &Tensor<R>,
    ) -> Result<([Tensor<R>; 3], ExchangeCache<R>)> {
        if raws[1].shape() != raws[0].shape() || raws[2].shape() != raws[0].shape() {
            return Err(Error::shape(format!(
                "exchange maps must share one shape: {:?} {:?} {:?}",
                raws[0].shape(),
                raws[1].shape(),
                raws[2].shape()
            )));
        }
        let (h, w) = (raws[0].shape()[0], raws[0].shape()[1]);
        let lang_map = tile(lang, h, w);
        let mut gated = Vec::new();
        let mut gate_caches = Vec::new();
        let mut gates = Vec::new();
        for m in raws {
            let x = concat_channels(m, &lang_map);
            let (a, c) = self.gate.forward(&x);
            let s = sigmoid(&a);
            gated.push(hadamard(&s, m));
            gate_caches.push(c);
            gates.push(s);
        }
        let mut primes = [raws[0].clone(), raws[1].clone(), raws[2].clone()];
        for l in 0..3 {
            for k in 0..3 {
                if k != l {
                    primes[l].add_assign(&gated[k]);
                }
            }
        }
        Ok((
            primes,
            ExchangeCache { gate_caches, gates, raws: raws.clone().to_vec() },
        ))
    }

    /// Returns gradients for (raw maps, lang).
    fn exchange_backward(
        &mut self,
        cache: &ExchangeCache<R>,
        gp: &[Tensor<R>; 3],
    ) -> ([Tensor<R>; 3], Tensor<R>) {
        let mut g_raws = [gp[0].clone(), gp[1].clone(), gp[2].clone()];
        let mut g_lang = Tensor::zeros(&[self.d_m]);
        for k in 0..3 {
            let mut g_gated = Tensor::zeros(gp[k].shape());
            for l in 0..3 {
                if l != k {
                    g_gated.add_assign(&gp[l]);
                }
            }
            g_raws[k].add_assign(&hadamard(&cache.gates[k], &g_gated));
            let g_s = hadamard(&g_gated, &cache.raws[k]);
            let g_a = sigmoid_backward(&cache.gates[k], &g_s);
            let g_x = self.gate.backward(&cache.gate_caches[k], &g_a);
            let (g_m, g_l) = split_channels(&g_x, self.d_m);
            g_raws[k].add_assign(&g_m);
            g_lang.add_assign(&untile(&g_l));
        }
        (g_raws, g_lang)
    }

    /// Recurrent pass over the sequence from a zero state; the final hidden
    /// state is the aggregate.
    pub fn aggregate(&self, seq: &[&Tensor<R>]) -> Result<(Tensor<R>, Vec<ConvGruCache<R>>)> {
        let first = seq.first().ok_or_else(|| Error::shape("empty aggregation sequence"))?;
        if seq.iter().any(|t| t.shape() != first.shape()) {
            return Err(Error::shape("aggregation sequence shapes differ"));
        }
        let mut h = Tensor::zeros(first.shape());
        let mut caches = Vec::new();
        for m in seq {
            let (hp, c) = self.cell.step(m, &h);
            caches.push(c);
            h = hp;
        }
        Ok((h, caches))
    }

    /// Fuses levels 3..=5 of the pyramid with the sentence vector `s`.
    pub fn forward(
        &self,
        pyr: &FeaturePyramid<R>,
        s: &Tensor<R>,
    ) -> Result<(Tensor<R>, CrossModalCache<R>)> {
        if s.numel() != self.d_s {
            return Err(Error::shape(format!(
                "sentence vector must have width {}, got {}",
                self.d_s,
                s.numel()
            )));
        }
        let lang = self.lang_proj.forward(s);
        let mut raws = Vec::new();
        let mut fuse_caches = Vec::new();
        for (i, l) in (3..=5).enumerate() {
            let (m, c) = self.fuse_level(i, pyr.level(l), &lang)?;
            raws.push(m);
            fuse_caches.push(c);
        }
        let raws: [Tensor<R>; 3] = raws.try_into().unwrap();
        let (primes, exchange) = self.exchange(&raws, &lang)?;
        // deepest level first so coarse semantics condition the finer maps
        let (fine, gru) = self.aggregate(&[&primes[2], &primes[1], &primes[0]])?;
        Ok((
            fine,
            CrossModalCache { s_input: s.clone(), lang, fuse: fuse_caches, exchange, gru },
        ))
    }

    /// Returns per-level pyramid gradients (levels 3..=5) and the sentence
    /// vector gradient.
    pub fn backward(
        &mut self,
        cache: &CrossModalCache<R>,
        g_fine: &Tensor<R>,
    ) -> ([Option<Tensor<R>>; 5], Tensor<R>) {
        // replay the GRU in reverse; feed order was primes[2], [1], [0]
        let mut gh = g_fine.clone();
        let mut gp: [Option<Tensor<R>>; 3] = [None, None, None];
        for (step, prime_idx) in [(2usize, 0usize), (1, 1), (0, 2)] {
            let (gx, ghp) = self.cell.step_backward(&cache.gru[step], &gh);
            gp[prime_idx] = Some(gx);
            gh = ghp;
        }
        let gp = [gp[0].take().unwrap(), gp[1].take().unwrap(), gp[2].take().unwrap()];
        let (g_raws, mut g_lang) = self.exchange_backward(&cache.exchange, &gp);
        let mut out: [Option<Tensor<R>>; 5] = [None, None, None, None, None];
        for (i, g_raw) in g_raws.iter().enumerate() {
            let (g_v, g_l) = self.fuse_level_backward(i, &cache.fuse[i], &cache.lang, g_raw);
            out[i + 2] = Some(g_v);
            g_lang.add_assign(&g_l);
        }
        let g_s = self.lang_proj.backward(&cache.s_input, &g_lang);
        (out, g_s)
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        let mut out = Vec::new();
        for (name, p) in self.lang_proj.params_mut() {
            out.push((format!("crossmodal.lang_proj.{name}"), p));
        }
        for (name, p) in self.w5.params_mut() {
            out.push((format!("crossmodal.w5.{name}"), p));
        }
        for (i, f) in self.fuse.iter_mut().enumerate() {
            for (name, p) in f.params_mut() {
                out.push((format!("crossmodal.fuse.l{}.{name}", i + 3), p));
            }
        }
        for (name, p) in self.gate.params_mut() {
            out.push((format!("crossmodal.gate.{name}"), p));
        }
        for (name, p) in self.cell.params_mut() {
            out.push((format!("crossmodal.cell.{name}"), p));
        }
        out
    }
}

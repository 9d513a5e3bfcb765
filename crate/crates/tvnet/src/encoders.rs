//! Trainable encoders: a five-stage convolutional backbone shared by both
//! image branches, and the recurrent expression encoder.
//!
//! Stages 1-3 downsample by stride 2; stages 4 and 5 keep the stage-3
//! resolution with dilations 2 and 4, so levels 3-5 form the equal-resolution
//! set the fusion stack consumes. One parameter set serves both branches:
//! calling forward twice and backward twice accumulates both branches'
//! gradients into the same tensors.

use crate::config::Config;
use crate::data::FeaturePyramid;
use crate::error::{Error, Result};
use crate::ops::{leaky_relu, leaky_relu_backward, Conv2d, ConvCache, LanguageGru, SpatialNorm, SpatialNormCache};
use crate::rng::Rng;
use crate::tensor::{Param, Real, Tensor};

pub use crate::ops::LEAK;

#[derive(Clone, Debug)]
struct Stage<R> {
    conv: Conv2d<R>,
    norm: SpatialNorm<R>,
}

#[derive(Clone, Debug)]
pub struct Backbone<R> {
    stages: Vec<Stage<R>>,
}

#[derive(Clone, Debug)]
pub struct BackboneCache<R> {
    convs: Vec<ConvCache<R>>,
    norms: Vec<SpatialNormCache<R>>,
    /// Post-norm pre-activation values, needed by the leaky-relu backward.
    pre_act: Vec<Tensor<R>>,
}

impl<R: Real> Backbone<R> {
    pub fn new(cfg: &Config) -> Self {
        let strides = [2usize, 2, 2, 1, 1];
        let dilations = [1usize, 1, 1, 2, 4];
        let mut stages = Vec::with_capacity(5);
        let mut cin = 3usize;
        for l in 0..5 {
            let cout = cfg.level_channels[l];
            stages.push(Stage {
                conv: Conv2d::new(cin, cout, 3, strides[l], dilations[l], true),
                norm: SpatialNorm::new(cout),
            });
            cin = cout;
        }
        Backbone { stages }
    }

    pub fn init(&mut self, rng: &mut Rng) {
        for s in &mut self.stages {
            s.conv.init(rng, 1.0);
        }
    }

    pub fn forward(&self, image: &Tensor<f32>) -> (FeaturePyramid<R>, BackboneCache<R>)
    where
        R: Real,
    {
        let x: Tensor<R> = image.cast();
        self.forward_real(&x)
    }

    /// Forward from an already-cast tensor; the generic entry point used by
    /// the finite-difference checks.
    pub fn forward_real(&self, image: &Tensor<R>) -> (FeaturePyramid<R>, BackboneCache<R>) {
        let mut convs = Vec::with_capacity(5);
        let mut norms = Vec::with_capacity(5);
        let mut pre_act = Vec::with_capacity(5);
        let mut levels = Vec::with_capacity(5);
        let mut x = image.clone();
        for s in &self.stages {
            let (c, ccache) = s.conv.forward(&x);
            let (n, ncache) = s.norm.forward(&c);
            let y = leaky_relu(&n, LEAK);
            convs.push(ccache);
            norms.push(ncache);
            pre_act.push(n);
            levels.push(y.clone());
            x = y;
        }
        (FeaturePyramid { levels }, BackboneCache { convs, norms, pre_act })
    }

    /// Backpropagates per-level gradients (None for levels that receive no
    /// gradient) and returns the gradient w.r.t. the input image.
    pub fn backward(
        &mut self,
        cache: &BackboneCache<R>,
        level_grads: [Option<Tensor<R>>; 5],
    ) -> Tensor<R> {
        let mut upstream: Option<Tensor<R>> = None;
        for l in (0..5).rev() {
            let mut g = match (upstream.take(), &level_grads[l]) {
                (Some(mut u), Some(extra)) => {
                    u.add_assign(extra);
                    u
                }
                (Some(u), None) => u,
                (None, Some(extra)) => extra.clone(),
                (None, None) => Tensor::zeros(cache.pre_act[l].shape()),
            };
            g = leaky_relu_backward(&cache.pre_act[l], &g, LEAK);
            let g = self.stages[l].norm.backward(&cache.norms[l], &g);
            upstream = Some(self.stages[l].conv.backward(&cache.convs[l], &g));
        }
        upstream.expect("five stages ran")
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        let mut out = Vec::new();
        for (l, s) in self.stages.iter_mut().enumerate() {
            let stage = l + 1;
            for (name, p) in s.conv.params_mut() {
                out.push((format!("backbone.stage{stage}.conv.{name}"), p));
            }
            out.push((format!("backbone.stage{stage}.norm.gamma"), &mut s.norm.gamma));
            out.push((format!("backbone.stage{stage}.norm.beta"), &mut s.norm.beta));
        }
        out
    }
}

/// Builds the expression encoder at the configured widths.
pub fn language_encoder<R: Real>(cfg: &Config, vocab_size: usize) -> LanguageGru<R> {
    LanguageGru::new(
        vocab_size,
        cfg.lang_embed_width,
        cfg.lang_feature_width,
        cfg.lang_feature_width,
    )
}

/// Encodes tokens, rejecting sequences with no real content.
pub fn encode_expression<R: Real>(
    enc: &LanguageGru<R>,
    tokens: &[usize],
) -> Result<(Tensor<R>, crate::ops::rnn::LangCache<R>)> {
    if tokens.iter().all(|&t| t == crate::data::PAD) {
        return Err(Error::data(
            "expression is empty or all padding; nothing to encode",
        ));
    }
    Ok(enc.forward(tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_close, numeric_grad, FD_STEP};
    use crate::rng::{stream, Stream};
    use crate::tensor::dot;
    use rand_distr::{Distribution, Normal};

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.image_size = 16;
        cfg.level_resolutions = [8, 4, 2, 2, 2];
        cfg.level_channels = [2, 3, 4, 4, 4];
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn default_config_shapes_and_finiteness() {
        let cfg = Config::default();
        let mut bb = Backbone::<f32>::new(&cfg);
        let mut rng = stream(21, Stream::Init);
        bb.init(&mut rng);
        let mut img = Tensor::zeros(&[64, 64, 3]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 31) % 256) as f32 / 255.0;
        }
        let (pyr, _) = bb.forward(&img);
        pyr.validate(&cfg).unwrap();
        assert!(pyr.level(2).is_3d(16, 16, 32));
        assert!(pyr.level(5).is_3d(8, 8, 64));
        for t in &pyr.levels {
            assert!(t.all_finite());
        }
        // different inputs give different pyramids
        let mut img2 = img.clone();
        img2.data_mut()[0] = 1.0 - img2.data()[0];
        let (pyr2, _) = bb.forward(&img2);
        assert_ne!(pyr.level(5).data(), pyr2.level(5).data());
    }

    #[test]
    fn siamese_branches_share_weights_exactly() {
        let cfg = tiny_config();
        let mut bb = Backbone::<f64>::new(&cfg);
        let mut rng = stream(22, Stream::Init);
        bb.init(&mut rng);
        let d = Normal::new(0.5, 0.2).unwrap();
        let a = Tensor::from_vec(&[16, 16, 3], (0..768).map(|_| d.sample(&mut rng)).collect());
        let (pa1, _) = bb.forward_real(&a);
        let (pa2, _) = bb.forward_real(&a);
        for (x, y) in pa1.levels.iter().zip(&pa2.levels) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn both_branch_gradients_accumulate_into_shared_params() {
        let cfg = tiny_config();
        let mut bb = Backbone::<f64>::new(&cfg);
        let mut rng = stream(23, Stream::Init);
        bb.init(&mut rng);
        let d = Normal::new(0.4, 0.25).unwrap();
        // jitter every parameter (norm affines start at 0/1) so no
        // pre-activation lands exactly on the leaky-relu kink, where
        // central differences measure the average of the two slopes
        let jit = Normal::new(0.0, 0.05).unwrap();
        for (_, p) in bb.params_mut() {
            for v in p.value.data_mut() {
                *v += jit.sample(&mut rng);
            }
        }
        let n_in = 16 * 16 * 3;
        let a = Tensor::from_vec(&[16, 16, 3], (0..n_in).map(|_| d.sample(&mut rng)).collect());
        let b = Tensor::from_vec(&[16, 16, 3], (0..n_in).map(|_| d.sample(&mut rng)).collect());
        let ga = Tensor::from_vec(&[2, 2, 4], (0..16).map(|_| d.sample(&mut rng)).collect());
        let gb = Tensor::from_vec(&[2, 2, 4], (0..16).map(|_| d.sample(&mut rng)).collect());

        // loss touches level 5 of branch A and level 4 of branch B
        let loss = |bb: &Backbone<f64>| {
            let (pa, _) = bb.forward_real(&a);
            let (pb, _) = bb.forward_real(&b);
            dot(pa.level(5).data(), ga.data()) + dot(pb.level(4).data(), gb.data())
        };

        let (_, ca) = bb.forward_real(&a);
        let (_, cb) = bb.forward_real(&b);
        bb.backward(&ca, [None, None, None, None, Some(ga.clone())]);
        bb.backward(&cb, [None, None, None, Some(gb.clone()), None]);

        // probe the first element of every parameter, including norm affines
        let probes: Vec<(String, f64)> = {
            let mut v = Vec::new();
            for (name, p) in bb.params_mut() {
                if p.value.numel() == 0 {
                    continue;
                }
                v.push((name, p.grad.data()[0]));
            }
            v
        };
        for (name, analytic) in probes {
            let num = numeric_grad(
                &mut bb,
                |m| {
                    let params = m.params_mut();
                    let p = params.into_iter().find(|(n, _)| *n == name).unwrap().1;
                    &mut p.value.data_mut()[0]
                },
                |m| loss(m),
                FD_STEP,
            );
            assert_close(&name, analytic, num);
        }
    }

    #[test]
    fn all_padding_expression_is_rejected() {
        let cfg = Config::default();
        let enc = language_encoder::<f64>(&cfg, 22);
        assert!(encode_expression(&enc, &[0, 0, 0]).is_err());
        assert!(encode_expression(&enc, &[]).is_err());
        assert!(encode_expression(&enc, &[2, 0]).is_ok());
    }
}

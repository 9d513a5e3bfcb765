//! Full network assembly for the three ablation variants.
//!
//! Every variant shares the siamese backbone, the expression encoder, the
//! cross-modal fusion, and a 1x1 prediction head whose single-channel output
//! is bilinearly upsampled to image resolution. The baseline stops there;
//! adding cross-image enrichment gives the retrieval variant; adding the
//! high-resolution fusion on top gives the full model, whose head reads the
//! double-resolution map instead.

use crate::config::Config;
use crate::crossmodal::{CrossModal, CrossModalCache};
use crate::data::SceneSample;
use crate::encoders::{encode_expression, language_encoder, Backbone, BackboneCache};
use crate::enrich::{Enrich, EnrichCache};
use crate::error::{Error, Result};
use crate::multires::{Amf, AmfCache};
use crate::ops::rnn::LangCache;
use crate::ops::{bilinear_resize, bilinear_resize_backward, sigmoid, Conv2d, ConvCache, LanguageGru};
use crate::rng::Rng;
use crate::tensor::{Param, Real, Tensor};

/// Ablation variants: the baseline, the baseline plus cross-image
/// enrichment, and the full model with high-resolution fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    BaselineRes,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::BaselineRes, Variant::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::BaselineRes => "baseline-res",
            Variant::Full => "full",
        }
    }

    pub fn from_str(s: &str) -> Result<Variant> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "baseline-res" => Ok(Variant::BaselineRes),
            "full" => Ok(Variant::Full),
            other => Err(Error::config(format!(
                "unknown variant {other:?}; expected baseline, baseline-res, or full"
            ))),
        }
    }

    /// Checkpoint tag byte.
    pub fn tag(self) -> u8 {
        match self {
            Variant::Baseline => 0,
            Variant::BaselineRes => 1,
            Variant::Full => 2,
        }
    }

    pub fn from_tag(t: u8) -> Result<Variant> {
        match t {
            0 => Ok(Variant::Baseline),
            1 => Ok(Variant::BaselineRes),
            2 => Ok(Variant::Full),
            other => Err(Error::checkpoint(format!("unknown variant tag {other}"))),
        }
    }

    /// Whether this variant consumes a retrieved similar image.
    pub fn uses_retrieval(self) -> bool {
        !matches!(self, Variant::Baseline)
    }

    pub fn uses_amf(self) -> bool {
        matches!(self, Variant::Full)
    }
}

pub struct Model<R: Real> {
    pub cfg: Config,
    pub variant: Variant,
    pub backbone: Backbone<R>,
    pub lang: LanguageGru<R>,
    pub enrich: Option<Enrich<R>>,
    pub fusion: CrossModal<R>,
    pub amf: Option<Amf<R>>,
    pub head: Conv2d<R>,
}

pub struct ModelCache<R: Real> {
    bb_in: BackboneCache<R>,
    bb_sim: Option<BackboneCache<R>>,
    enrich: Option<EnrichCache<R>>,
    lang: LangCache<R>,
    cm: CrossModalCache<R>,
    amf: Option<AmfCache<R>>,
    head: ConvCache<R>,
    head_res: (usize, usize),
    out_res: (usize, usize),
}

impl<R: Real> Model<R> {
    pub fn new(cfg: &Config, variant: Variant, vocab_size: usize) -> Self {
        Model {
            cfg: cfg.clone(),
            variant,
            backbone: Backbone::new(cfg),
            lang: language_encoder(cfg, vocab_size),
            enrich: variant.uses_retrieval().then(|| Enrich::new(cfg)),
            fusion: CrossModal::new(cfg),
            amf: variant.uses_amf().then(|| Amf::new(cfg)),
            head: Conv2d::new(cfg.multimodal_width, 1, 1, 1, 1, true),
        }
    }

    pub fn init(&mut self, rng: &mut Rng) {
        self.backbone.init(rng);
        self.lang.init(rng);
        if let Some(e) = &mut self.enrich {
            e.init(rng);
        }
        self.fusion.init(rng);
        if let Some(a) = &mut self.amf {
            a.init(rng);
        }
        self.head.init(rng, 1.0);
    }

    /// Per-pixel foreground logits at image resolution, plus everything the
    /// backward pass needs. `retrieved` must be present exactly when the
    /// variant uses retrieval.
    pub fn forward(
        &self,
        image: &Tensor<R>,
        tokens: &[usize],
        retrieved: Option<&Tensor<R>>,
    ) -> Result<(Tensor<R>, ModelCache<R>)> {
        if self.variant.uses_retrieval() != retrieved.is_some() {
            return Err(Error::config(format!(
                "variant {} {} a retrieved image",
                self.variant.as_str(),
                if self.variant.uses_retrieval() { "requires" } else { "does not take" }
            )));
        }
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let (pyr_in, bb_in) = self.backbone.forward_real(image);
        let (enriched, bb_sim, enrich_cache) = match (&self.enrich, retrieved) {
            (Some(e), Some(sim)) => {
                let (pyr_sim, bb_sim) = self.backbone.forward_real(sim);
                let (enriched, ec) = e.forward(&pyr_in, &pyr_sim)?;
                (enriched, Some(bb_sim), Some(ec))
            }
            _ => (pyr_in, None, None),
        };
        let (s, lang_cache) = encode_expression(&self.lang, tokens)?;
        let (m_fine, cm_cache) = self.fusion.forward(&enriched, &s)?;
        let (head_in, amf_cache) = match &self.amf {
            Some(a) => {
                let (m, c) = a.forward(&m_fine, enriched.level(2))?;
                (m, Some(c))
            }
            None => (m_fine, None),
        };
        let head_res = (head_in.shape()[0], head_in.shape()[1]);
        let (lr_logits, head_cache) = self.head.forward(&head_in);
        let logits = bilinear_resize(&lr_logits, h, w);
        Ok((
            logits,
            ModelCache {
                bb_in,
                bb_sim,
                enrich: enrich_cache,
                lang: lang_cache,
                cm: cm_cache,
                amf: amf_cache,
                head: head_cache,
                head_res,
                out_res: (h, w),
            },
        ))
    }

    /// Accumulates parameter gradients from a logit-space gradient map.
    pub fn backward(&mut self, cache: &ModelCache<R>, g_logits: &Tensor<R>) {
        assert_eq!(g_logits.shape(), [cache.out_res.0, cache.out_res.1, 1]);
        let g_lr = bilinear_resize_backward(g_logits, cache.head_res.0, cache.head_res.1);
        let g_head_in = self.head.backward(&cache.head, &g_lr);
        let (g_fine, g_v2) = match (&mut self.amf, &cache.amf) {
            (Some(a), Some(ac)) => {
                let (gf, gv2) = a.backward(ac, &g_head_in);
                (gf, Some(gv2))
            }
            _ => (g_head_in, None),
        };
        let (mut level_grads, g_s) = self.fusion.backward(&cache.cm, &g_fine);
        self.lang.backward(&cache.lang, &g_s);
        if let Some(gv2) = g_v2 {
            level_grads[1] = Some(gv2);
        }
        match (&mut self.enrich, &cache.enrich) {
            (Some(e), Some(ec)) => {
                let (g_in, g_sim) = e.backward(ec, level_grads);
                self.backbone.backward(&cache.bb_in, g_in);
                self.backbone.backward(cache.bb_sim.as_ref().expect("siamese cache"), g_sim);
            }
            _ => {
                self.backbone.backward(&cache.bb_in, level_grads);
            }
        }
    }

    /// Evaluation entry point: forwards a sample (and its retrieved partner
    /// when the variant needs one) and returns image-resolution logits.
    pub fn predict_logits(
        &self,
        sample: &SceneSample,
        retrieved: Option<&SceneSample>,
    ) -> Result<Tensor<R>> {
        let image: Tensor<R> = sample.image.cast();
        let sim: Option<Tensor<R>> = retrieved.map(|r| r.image.cast());
        let (logits, _) = self.forward(&image, &sample.tokens, sim.as_ref())?;
        Ok(logits)
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        let mut out = self.backbone.params_mut();
        for (name, p) in self.lang.params_mut() {
            out.push((format!("lang.{name}"), p));
        }
        if let Some(e) = &mut self.enrich {
            out.extend(e.params_mut());
        }
        out.extend(self.fusion.params_mut());
        if let Some(a) = &mut self.amf {
            out.extend(a.params_mut());
        }
        for (name, p) in self.head.params_mut() {
            out.push((format!("head.{name}"), p));
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Binarizes a logit map: foreground where sigmoid(score) exceeds the
/// threshold strictly.
pub fn predict_mask<R: Real>(scores: &Tensor<R>, threshold: f64) -> Tensor<f32> {
    let probs = sigmoid(scores);
    let mut out = Tensor::zeros(scores.shape());
    let (pd, od) = (probs.data(), out.data_mut());
    let t = R::from_f64(threshold);
    for i in 0..pd.len() {
        od[i] = if pd[i] > t { 1.0 } else { 0.0 };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand_distr::{Distribution, Normal};

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.image_size = 16;
        cfg.level_resolutions = [8, 4, 2, 2, 2];
        cfg.level_channels = [2, 3, 4, 4, 4];
        cfg.multimodal_width = 4;
        cfg.lang_embed_width = 4;
        cfg.lang_feature_width = 5;
        cfg.validate().unwrap();
        cfg
    }

    fn rand_image(size: usize, rng: &mut Rng) -> Tensor<f32> {
        let d = Normal::new(0.45, 0.2).unwrap();
        Tensor::from_vec(
            &[size, size, 3],
            (0..size * size * 3).map(|_| d.sample(rng) as f32).collect(),
        )
    }

    #[test]
    fn constant_head_gives_constant_map() {
        let cfg = tiny_config();
        let mut rng = stream(61, Stream::Init);
        let mut model = Model::<f32>::new(&cfg, Variant::Baseline, 22);
        model.init(&mut rng);
        model.head.weight.value.fill(0.0);
        model.head.bias.as_mut().unwrap().value.fill(0.75);
        let image = rand_image(16, &mut rng);
        let (logits, _) = model.forward(&image, &[2, 10], None).unwrap();
        assert!(logits.data().iter().all(|&v| (v - 0.75).abs() < 1e-6));
    }

    #[test]
    fn output_shape_matches_image_for_all_variants() {
        let cfg = tiny_config();
        let mut rng = stream(62, Stream::Init);
        let image = rand_image(16, &mut rng);
        let sim = rand_image(16, &mut rng);
        for variant in Variant::ALL {
            let mut model = Model::<f32>::new(&cfg, variant, 22);
            model.init(&mut rng);
            let retrieved = variant.uses_retrieval().then_some(&sim);
            let (logits, _) = model.forward(&image, &[2, 10], retrieved).unwrap();
            assert_eq!(logits.shape(), &[16, 16, 1], "variant {}", variant.as_str());
            assert!(logits.all_finite());
        }
    }

    #[test]
    fn shared_weights_still_give_distinct_variant_maps() {
        let cfg = tiny_config();
        let mut rng = stream(63, Stream::Init);
        let mut model = Model::<f32>::new(&cfg, Variant::Full, 22);
        model.init(&mut rng);
        let image = rand_image(16, &mut rng);
        let sim = rand_image(16, &mut rng);
        let (full_logits, _) = model.forward(&image, &[2, 10], Some(&sim)).unwrap();
        // same shared weights, baseline dataflow
        let enrich = model.enrich.take();
        let amf = model.amf.take();
        model.variant = Variant::Baseline;
        let (base_logits, _) = model.forward(&image, &[2, 10], None).unwrap();
        model.enrich = enrich;
        model.amf = amf;
        assert_ne!(full_logits.data(), base_logits.data());
    }

    #[test]
    fn variant_retrieval_mismatch_is_rejected() {
        let cfg = tiny_config();
        let mut rng = stream(64, Stream::Init);
        let image = rand_image(16, &mut rng);
        let sim = rand_image(16, &mut rng);
        let mut base = Model::<f32>::new(&cfg, Variant::Baseline, 22);
        base.init(&mut rng);
        assert!(base.forward(&image, &[2, 10], Some(&sim)).is_err());
        let mut full = Model::<f32>::new(&cfg, Variant::Full, 22);
        full.init(&mut rng);
        assert!(full.forward(&image, &[2, 10], None).is_err());
    }

    #[test]
    fn mask_thresholding_boundaries_and_monotonicity() {
        let mut rng = stream(65, Stream::Init);
        let zeros = Tensor::<f32>::zeros(&[4, 4, 1]);
        assert!(predict_mask(&zeros, 0.5).data().iter().all(|&v| v == 0.0));
        assert!(predict_mask(&zeros, 0.0).data().iter().all(|&v| v == 1.0));
        let d = Normal::new(0.0, 2.0).unwrap();
        let scores =
            Tensor::<f32>::from_vec(&[8, 8, 1], (0..64).map(|_| d.sample(&mut rng) as f32).collect());
        let lo = predict_mask(&scores, 0.3);
        let hi = predict_mask(&scores, 0.6);
        for (l, h) in lo.data().iter().zip(hi.data()) {
            assert!(h <= l, "raising the threshold must never add foreground");
        }
    }

    #[test]
    fn variant_round_trips() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_str(v.as_str()).unwrap(), v);
            assert_eq!(Variant::from_tag(v.tag()).unwrap(), v);
        }
        assert!(Variant::from_str("resnet").is_err());
        assert!(Variant::from_tag(9).is_err());
    }
}

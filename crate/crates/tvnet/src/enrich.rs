//! Cross-image enrichment of the low-resolution pyramid levels.
//!
//! For each level l in {3,4,5}, features of the input image attend over the
//! same level of a retrieved similar image: attention logits are the inner
//! products of two learned 1x1 projections (no logit scaling), normalized by
//! a row softmax over retrieved locations, and the reorganized value
//! projection is folded back through a sigmoid gate computed from the input
//! features alone:
//!
//!   V' = V_in + sigmoid(Conv1x1(V_in)) * A (W3 V_sim)
//!
//! Levels 1 and 2 pass through untouched. The retrieved image is never
//! enriched; gradients still flow into it so the shared backbone trains
//! from both branches.

use crate::config::Config;
use crate::data::FeaturePyramid;
use crate::error::{Error, Result};
use crate::ops::{
    hadamard, matmul_nn, matmul_nn_backward, matmul_nt, matmul_nt_backward, sigmoid,
    sigmoid_backward, softmax_rows, softmax_rows_backward, Conv2d, ConvCache,
};
use crate::rng::Rng;
use crate::tensor::{Param, Real, Tensor};

/// Levels that get enriched. Earlier levels stay on the identity path.
pub const ENRICHED_LEVELS: [usize; 3] = [3, 4, 5];

/// Per-level parameters: three bias-free 1x1 projections and a biased
/// 1x1 gate convolution, all width-preserving.
pub struct EnrichLevel<R: Real> {
    pub query: Conv2d<R>,
    pub key: Conv2d<R>,
    pub value: Conv2d<R>,
    pub gate: Conv2d<R>,
}

pub struct AttentionCache<R: Real> {
    q_cache: ConvCache<R>,
    k_cache: ConvCache<R>,
    v_cache: ConvCache<R>,
    theta: Tensor<R>,
    phi: Tensor<R>,
    g: Tensor<R>,
    /// Row-stochastic attention matrix, one row per input location.
    pub att: Tensor<R>,
    h: usize,
    w: usize,
    d: usize,
}

pub struct LevelCache<R: Real> {
    pub att: AttentionCache<R>,
    gate_cache: ConvCache<R>,
    /// Sigmoid gate activations, strictly inside (0,1).
    pub gates: Tensor<R>,
    v_sim_prime: Tensor<R>,
}

impl<R: Real> EnrichLevel<R> {
    pub fn new(d: usize) -> Self {
        EnrichLevel {
            query: Conv2d::new(d, d, 1, 1, 1, false),
            key: Conv2d::new(d, d, 1, 1, 1, false),
            value: Conv2d::new(d, d, 1, 1, 1, false),
            gate: Conv2d::new(d, d, 1, 1, 1, true),
        }
    }

    pub fn init(&mut self, rng: &mut Rng) {
        self.query.init(rng, 1.0);
        self.key.init(rng, 1.0);
        self.value.init(rng, 1.0);
        self.gate.init(rng, 1.0);
    }

    /// Reorganizes retrieved features: each input location takes a convex
    /// combination of value-projected retrieved locations, weighted by the
    /// softmax of unscaled projection inner products.
    pub fn attention(
        &self,
        v_in: &Tensor<R>,
        v_sim: &Tensor<R>,
    ) -> Result<(Tensor<R>, AttentionCache<R>)> {
        if v_in.shape() != v_sim.shape() {
            return Err(Error::shape(format!(
                "attention inputs must match: {:?} vs {:?}",
                v_in.shape(),
                v_sim.shape()
            )));
        }
        let (h, w, d) = (v_in.shape()[0], v_in.shape()[1], v_in.shape()[2]);
        let n = h * w;
        let (theta, q_cache) = self.query.forward(v_in);
        let (phi, k_cache) = self.key.forward(v_sim);
        let (g, v_cache) = self.value.forward(v_sim);
        let theta = theta.reshaped(&[n, d]);
        let phi = phi.reshaped(&[n, d]);
        let g = g.reshaped(&[n, d]);
        let att = softmax_rows(&matmul_nt(&theta, &phi));
        let out = matmul_nn(&att, &g).reshaped(&[h, w, d]);
        Ok((
            out,
            AttentionCache { q_cache, k_cache, v_cache, theta, phi, g, att, h, w, d },
        ))
    }

    fn attention_backward(
        &mut self,
        cache: &AttentionCache<R>,
        gy: &Tensor<R>,
    ) -> (Tensor<R>, Tensor<R>) {
        let n = cache.h * cache.w;
        let g_out = gy.clone().reshaped(&[n, cache.d]);
        let (g_att, g_g) = matmul_nn_backward(&cache.att, &cache.g, &g_out);
        let g_logits = softmax_rows_backward(&cache.att, &g_att);
        let (g_theta, g_phi) = matmul_nt_backward(&cache.theta, &cache.phi, &g_logits);
        let hw_d = [cache.h, cache.w, cache.d];
        let g_vin = self.query.backward(&cache.q_cache, &g_theta.reshaped(&hw_d));
        let mut g_vsim = self.key.backward(&cache.k_cache, &g_phi.reshaped(&hw_d));
        g_vsim.add_assign(&self.value.backward(&cache.v_cache, &g_g.reshaped(&hw_d)));
        (g_vin, g_vsim)
    }

    /// Residual gated mix: V_in + sigmoid(gate(V_in)) * V_sim'.
    pub fn gated(
        &self,
        v_in: &Tensor<R>,
        v_sim_prime: &Tensor<R>,
    ) -> Result<(Tensor<R>, ConvCache<R>, Tensor<R>)> {
        if v_in.shape() != v_sim_prime.shape() {
            return Err(Error::shape(format!(
                "gate inputs must match: {:?} vs {:?}",
                v_in.shape(),
                v_sim_prime.shape()
            )));
        }
        let (a, gate_cache) = self.gate.forward(v_in);
        let gates = sigmoid(&a);
        let mut out = v_in.clone();
        out.add_assign(&hadamard(&gates, v_sim_prime));
        Ok((out, gate_cache, gates))
    }

    pub fn forward(
        &self,
        v_in: &Tensor<R>,
        v_sim: &Tensor<R>,
    ) -> Result<(Tensor<R>, LevelCache<R>)> {
        let (v_sim_prime, att) = self.attention(v_in, v_sim)?;
        let (out, gate_cache, gates) = self.gated(v_in, &v_sim_prime)?;
        Ok((out, LevelCache { att, gate_cache, gates, v_sim_prime }))
    }

    /// Returns gradients for (v_in, v_sim).
    pub fn backward(&mut self, cache: &LevelCache<R>, gy: &Tensor<R>) -> (Tensor<R>, Tensor<R>) {
        let g_prime = hadamard(gy, &cache.gates);
        let g_gates = hadamard(gy, &cache.v_sim_prime);
        let g_a = sigmoid_backward(&cache.gates, &g_gates);
        let mut g_vin = gy.clone();
        g_vin.add_assign(&self.gate.backward(&cache.gate_cache, &g_a));
        let (g_vin_att, g_vsim) = self.attention_backward(&cache.att, &g_prime);
        g_vin.add_assign(&g_vin_att);
        (g_vin, g_vsim)
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        let mut out = Vec::new();
        for (part, conv) in [
            ("query", &mut self.query),
            ("key", &mut self.key),
            ("value", &mut self.value),
            ("gate", &mut self.gate),
        ] {
            for (name, p) in conv.params_mut() {
                out.push((format!("{part}.{name}"), p));
            }
        }
        out
    }
}

/// Enrichment stack over the three low-resolution levels.
pub struct Enrich<R: Real> {
    pub levels: Vec<EnrichLevel<R>>,
}

pub struct EnrichCache<R: Real> {
    pub levels: Vec<LevelCache<R>>,
}

impl<R: Real> Enrich<R> {
    pub fn new(cfg: &Config) -> Self {
        let levels = ENRICHED_LEVELS
            .iter()
            .map(|&l| EnrichLevel::new(cfg.level_channels[l - 1]))
            .collect();
        Enrich { levels }
    }

    pub fn init(&mut self, rng: &mut Rng) {
        for lvl in &mut self.levels {
            lvl.init(rng);
        }
    }

    /// Enriches levels 3..=5 of `pyr_in` against the same levels of
    /// `pyr_sim`; levels 1..=2 are copied through.
    pub fn forward(
        &self,
        pyr_in: &FeaturePyramid<R>,
        pyr_sim: &FeaturePyramid<R>,
    ) -> Result<(FeaturePyramid<R>, EnrichCache<R>)> {
        let mut levels = vec![pyr_in.level(1).clone(), pyr_in.level(2).clone()];
        let mut caches = Vec::new();
        for (i, &l) in ENRICHED_LEVELS.iter().enumerate() {
            let (out, cache) = self.levels[i].forward(pyr_in.level(l), pyr_sim.level(l))?;
            levels.push(out);
            caches.push(cache);
        }
        Ok((FeaturePyramid { levels }, EnrichCache { levels: caches }))
    }

    /// Routes per-level output gradients back to both pyramids. Levels 1..=2
    /// flow straight to the input pyramid; the retrieved pyramid only ever
    /// receives gradient at enriched levels.
    pub fn backward(
        &mut self,
        cache: &EnrichCache<R>,
        grads: [Option<Tensor<R>>; 5],
    ) -> ([Option<Tensor<R>>; 5], [Option<Tensor<R>>; 5]) {
        let mut g_in: [Option<Tensor<R>>; 5] = [None, None, None, None, None];
        let mut g_sim: [Option<Tensor<R>>; 5] = [None, None, None, None, None];
        let mut grads = grads;
        for l in [1usize, 2] {
            g_in[l - 1] = grads[l - 1].take();
        }
        for (i, &l) in ENRICHED_LEVELS.iter().enumerate() {
            if let Some(gy) = grads[l - 1].take() {
                let (gi, gs) = self.levels[i].backward(&cache.levels[i], &gy);
                g_in[l - 1] = Some(gi);
                g_sim[l - 1] = Some(gs);
            }
        }
        (g_in, g_sim)
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        let mut out = Vec::new();
        for (lvl, &l) in self.levels.iter_mut().zip(ENRICHED_LEVELS.iter()) {
            for (name, p) in lvl.params_mut() {
                out.push((format!("enrich.l{l}.{name}"), p));
            }
        }
        out
    }
}

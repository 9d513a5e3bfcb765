//! Recurrent pieces: a vector GRU for the expression encoder and a
//! convolutional GRU that folds the per-level multimodal maps into one.

use crate::ops::{concat_channels, hadamard, sigmoid, split_channels, tanh};
use crate::ops::{Conv2d, ConvCache, Embedding, Linear};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

fn one_minus<R: Real>(t: &Tensor<R>) -> Tensor<R> {
    t.map(|v| R::one() - v)
}

fn sub<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o - bv;
    }
    out
}

/// Update-gate recurrence shared by both GRUs:
/// `h' = (1 - z) * n + z * h` with `n` computed from the reset-gated state.
#[derive(Clone, Debug)]
pub struct GruCell<R> {
    pub xz: Linear<R>,
    pub hz: Linear<R>,
    pub xr: Linear<R>,
    pub hr: Linear<R>,
    pub xn: Linear<R>,
    pub hn: Linear<R>,
    pub dx: usize,
    pub dh: usize,
}

#[derive(Clone, Debug)]
pub struct GruStepCache<R> {
    x: Tensor<R>,
    h: Tensor<R>,
    z: Tensor<R>,
    r: Tensor<R>,
    n: Tensor<R>,
    rh: Tensor<R>,
}

impl<R: Real> GruCell<R> {
    pub fn new(dx: usize, dh: usize) -> Self {
        GruCell {
            xz: Linear::new(dx, dh, true),
            hz: Linear::new(dh, dh, false),
            xr: Linear::new(dx, dh, true),
            hr: Linear::new(dh, dh, false),
            xn: Linear::new(dx, dh, true),
            hn: Linear::new(dh, dh, false),
            dx,
            dh,
        }
    }

    pub fn init(&mut self, rng: &mut Rng, gain: f64) {
        self.xz.init(rng, gain);
        self.hz.init(rng, gain);
        self.xr.init(rng, gain);
        self.hr.init(rng, gain);
        self.xn.init(rng, gain);
        self.hn.init(rng, gain);
    }

    pub fn step(&self, x: &Tensor<R>, h: &Tensor<R>) -> (Tensor<R>, GruStepCache<R>) {
        let mut az = self.xz.forward(x);
        az.add_assign(&self.hz.forward(h));
        let z = sigmoid(&az);
        let mut ar = self.xr.forward(x);
        ar.add_assign(&self.hr.forward(h));
        let r = sigmoid(&ar);
        let rh = hadamard(&r, h);
        let mut an = self.xn.forward(x);
        an.add_assign(&self.hn.forward(&rh));
        let n = tanh(&an);
        let mut hp = hadamard(&one_minus(&z), &n);
        hp.add_assign(&hadamard(&z, h));
        (
            hp,
            GruStepCache {
                x: x.clone(),
                h: h.clone(),
                z,
                r,
                n,
                rh,
            },
        )
    }

    /// Returns `(gx, gh)` for one step given the gradient w.r.t. `h'`.
    pub fn step_backward(&mut self, c: &GruStepCache<R>, ghp: &Tensor<R>) -> (Tensor<R>, Tensor<R>) {
        let gn = hadamard(ghp, &one_minus(&c.z));
        let gz = hadamard(ghp, &sub(&c.h, &c.n));
        let mut gh = hadamard(ghp, &c.z);

        // n = tanh(an), an = xn(x) + hn(r*h)
        let gan = hadamard(&gn, &c.n.map(|t| R::one() - t * t));
        let mut gx = self.xn.backward(&c.x, &gan);
        let grh = self.hn.backward(&c.rh, &gan);
        let gr = hadamard(&grh, &c.h);
        gh.add_assign(&hadamard(&grh, &c.r));

        let gaz = hadamard(&gz, &c.z.map(|z| z * (R::one() - z)));
        gx.add_assign(&self.xz.backward(&c.x, &gaz));
        gh.add_assign(&self.hz.backward(&c.h, &gaz));

        let gar = hadamard(&gr, &c.r.map(|r| r * (R::one() - r)));
        gx.add_assign(&self.xr.backward(&c.x, &gar));
        gh.add_assign(&self.hr.backward(&c.h, &gar));

        (gx, gh)
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut crate::tensor::Param<R>)> {
        let mut out = Vec::new();
        for (tag, lin) in [
            ("xz", &mut self.xz),
            ("hz", &mut self.hz),
            ("xr", &mut self.xr),
            ("hr", &mut self.hr),
            ("xn", &mut self.xn),
            ("hn", &mut self.hn),
        ] {
            for (name, p) in lin.params_mut() {
                out.push((format!("{tag}.{name}"), p));
            }
        }
        out
    }
}

/// Token sequence to a fixed-width sentence vector: embedding, GRU over the
/// non-padding tokens, then a dense projection of the final hidden state.
/// Padding (token id 0) leaves the hidden state untouched, so trailing or
/// interior padding never changes the output.
#[derive(Clone, Debug)]
pub struct LanguageGru<R> {
    pub embed: Embedding<R>,
    pub cell: GruCell<R>,
    pub proj: Linear<R>,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct LangCache<R> {
    steps: Vec<(usize, GruStepCache<R>)>,
    h_final: Tensor<R>,
}

impl<R: Real> LanguageGru<R> {
    pub fn new(vocab: usize, embed_dim: usize, hidden: usize, out_dim: usize) -> Self {
        LanguageGru {
            embed: Embedding::new(vocab, embed_dim),
            cell: GruCell::new(embed_dim, hidden),
            proj: Linear::new(hidden, out_dim, true),
            hidden,
        }
    }

    pub fn init(&mut self, rng: &mut Rng) {
        self.embed.init(rng, 1.0 / (self.embed.dim as f64).sqrt());
        self.cell.init(rng, 1.0);
        self.proj.init(rng, 1.0);
    }

    pub fn forward(&self, tokens: &[usize]) -> (Tensor<R>, LangCache<R>) {
        let mut h = Tensor::zeros(&[self.hidden]);
        let mut steps = Vec::new();
        for &id in tokens {
            if id == 0 {
                continue;
            }
            let x = self.embed.forward(id);
            let (hp, cache) = self.cell.step(&x, &h);
            steps.push((id, cache));
            h = hp;
        }
        let s = self.proj.forward(&h);
        (s, LangCache { steps, h_final: h })
    }

    pub fn backward(&mut self, cache: &LangCache<R>, gs: &Tensor<R>) {
        let mut gh = self.proj.backward(&cache.h_final, gs);
        for (id, step) in cache.steps.iter().rev() {
            let (gx, gh_prev) = self.cell.step_backward(step, &gh);
            self.embed.backward(*id, &gx);
            gh = gh_prev;
        }
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut crate::tensor::Param<R>)> {
        let mut out = vec![("embed.table".to_string(), &mut self.embed.table)];
        for (name, p) in self.cell.params_mut() {
            out.push((format!("cell.{name}"), p));
        }
        for (name, p) in self.proj.params_mut() {
            out.push((format!("proj.{name}"), p));
        }
        out
    }
}

/// GRU over spatial maps; gates are 3x3 convolutions of `[input; state]`.
/// With all-zero weights every gate is constant 0.5 and the candidate is
/// zero, so a zero initial state stays exactly zero through any sequence.
#[derive(Clone, Debug)]
pub struct ConvGru<R> {
    pub zc: Conv2d<R>,
    pub rc: Conv2d<R>,
    pub nc: Conv2d<R>,
    pub cx: usize,
    pub ch: usize,
}

#[derive(Clone, Debug)]
pub struct ConvGruCache<R> {
    cz: ConvCache<R>,
    cr: ConvCache<R>,
    cn: ConvCache<R>,
    h: Tensor<R>,
    z: Tensor<R>,
    r: Tensor<R>,
    n: Tensor<R>,
}

impl<R: Real> ConvGru<R> {
    pub fn new(cx: usize, ch: usize) -> Self {
        ConvGru {
            zc: Conv2d::new(cx + ch, ch, 3, 1, 1, true),
            rc: Conv2d::new(cx + ch, ch, 3, 1, 1, true),
            nc: Conv2d::new(cx + ch, ch, 3, 1, 1, true),
            cx,
            ch,
        }
    }

    pub fn init(&mut self, rng: &mut Rng, gain: f64) {
        self.zc.init(rng, gain);
        self.rc.init(rng, gain);
        self.nc.init(rng, gain);
    }

    pub fn zero_state(&self, h: usize, w: usize) -> Tensor<R> {
        Tensor::zeros(&[h, w, self.ch])
    }

    pub fn step(&self, x: &Tensor<R>, h: &Tensor<R>) -> (Tensor<R>, ConvGruCache<R>) {
        let xh = concat_channels(x, h);
        let (az, cz) = self.zc.forward(&xh);
        let z = sigmoid(&az);
        let (ar, cr) = self.rc.forward(&xh);
        let r = sigmoid(&ar);
        let xrh = concat_channels(x, &hadamard(&r, h));
        let (an, cn) = self.nc.forward(&xrh);
        let n = tanh(&an);
        let mut hp = hadamard(&one_minus(&z), &n);
        hp.add_assign(&hadamard(&z, h));
        (
            hp,
            ConvGruCache {
                cz,
                cr,
                cn,
                h: h.clone(),
                z,
                r,
                n,
            },
        )
    }

    pub fn step_backward(
        &mut self,
        c: &ConvGruCache<R>,
        ghp: &Tensor<R>,
    ) -> (Tensor<R>, Tensor<R>) {
        let gn = hadamard(ghp, &one_minus(&c.z));
        let gz = hadamard(ghp, &sub(&c.h, &c.n));
        let mut gh = hadamard(ghp, &c.z);

        let gan = hadamard(&gn, &c.n.map(|t| R::one() - t * t));
        let g_xrh = self.nc.backward(&c.cn, &gan);
        let (mut gx, grh) = split_channels(&g_xrh, self.cx);
        let gr = hadamard(&grh, &c.h);
        gh.add_assign(&hadamard(&grh, &c.r));

        let gaz = hadamard(&gz, &c.z.map(|z| z * (R::one() - z)));
        let g_xh_z = self.zc.backward(&c.cz, &gaz);
        let gar = hadamard(&gr, &c.r.map(|r| r * (R::one() - r)));
        let g_xh_r = self.rc.backward(&c.cr, &gar);

        let (gx_z, gh_z) = split_channels(&g_xh_z, self.cx);
        let (gx_r, gh_r) = split_channels(&g_xh_r, self.cx);
        gx.add_assign(&gx_z);
        gx.add_assign(&gx_r);
        gh.add_assign(&gh_z);
        gh.add_assign(&gh_r);
        (gx, gh)
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut crate::tensor::Param<R>)> {
        let mut out = Vec::new();
        for (tag, conv) in [("zc", &mut self.zc), ("rc", &mut self.rc), ("nc", &mut self.nc)] {
            for (name, p) in conv.params_mut() {
                out.push((format!("{tag}.{name}"), p));
            }
        }
        out
    }
}

//! Dense layer and token embedding for the language path.

use crate::rng::Rng;
use crate::tensor::{axpy, dot, Param, Real, Tensor};
use rand_distr::{Distribution, Normal};

/// Fully connected map on 1-D vectors. Weight layout `[out][in]`.
#[derive(Clone, Debug)]
pub struct Linear<R> {
    pub weight: Param<R>,
    pub bias: Option<Param<R>>,
    pub din: usize,
    pub dout: usize,
}

impl<R: Real> Linear<R> {
    pub fn new(din: usize, dout: usize, bias: bool) -> Self {
        Linear {
            weight: Param::zeros(&[dout, din]),
            bias: if bias { Some(Param::zeros(&[dout])) } else { None },
            din,
            dout,
        }
    }

    /// Glorot-style normal init.
    pub fn init(&mut self, rng: &mut Rng, gain: f64) {
        let std = gain * (2.0 / (self.din + self.dout) as f64).sqrt();
        let dist = Normal::new(0.0, std).unwrap();
        for w in self.weight.value.data_mut() {
            *w = R::from_f64(dist.sample(rng));
        }
        if let Some(b) = &mut self.bias {
            b.value.fill(R::zero());
        }
    }

    pub fn forward(&self, x: &Tensor<R>) -> Tensor<R> {
        assert_eq!(x.numel(), self.din, "linear input width mismatch");
        let mut y = Tensor::zeros(&[self.dout]);
        let w = self.weight.value.data();
        let yd = y.data_mut();
        for o in 0..self.dout {
            let mut v = dot(&w[o * self.din..(o + 1) * self.din], x.data());
            if let Some(b) = &self.bias {
                v = v + b.value.data()[o];
            }
            yd[o] = v;
        }
        y
    }

    /// Accumulates dW/db from (x, gy) and returns dx.
    pub fn backward(&mut self, x: &Tensor<R>, gy: &Tensor<R>) -> Tensor<R> {
        assert_eq!(gy.numel(), self.dout);
        let gyd = gy.data();
        {
            let dw = self.weight.grad.data_mut();
            for o in 0..self.dout {
                axpy(gyd[o], x.data(), &mut dw[o * self.din..(o + 1) * self.din]);
            }
        }
        if let Some(b) = &mut self.bias {
            let db = b.grad.data_mut();
            for o in 0..self.dout {
                db[o] = db[o] + gyd[o];
            }
        }
        let mut gx = Tensor::zeros(&[self.din]);
        let w = self.weight.value.data();
        for o in 0..self.dout {
            axpy(gyd[o], &w[o * self.din..(o + 1) * self.din], gx.data_mut());
        }
        gx
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<R>)> {
        let mut v = vec![("weight", &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("bias", b));
        }
        v
    }
}

/// Token id -> dense vector lookup table. Row 0 is the padding token and is
/// never updated (padding positions are skipped upstream anyway).
#[derive(Clone, Debug)]
pub struct Embedding<R> {
    pub table: Param<R>,
    pub vocab: usize,
    pub dim: usize,
}

impl<R: Real> Embedding<R> {
    pub fn new(vocab: usize, dim: usize) -> Self {
        Embedding {
            table: Param::zeros(&[vocab, dim]),
            vocab,
            dim,
        }
    }

    pub fn init(&mut self, rng: &mut Rng, std: f64) {
        let dist = Normal::new(0.0, std).unwrap();
        for w in self.table.value.data_mut() {
            *w = R::from_f64(dist.sample(rng));
        }
        // pad row stays zero
        for v in self.table.value.data_mut()[..self.dim].iter_mut() {
            *v = R::zero();
        }
    }

    pub fn forward(&self, id: usize) -> Tensor<R> {
        assert!(id < self.vocab, "token id {id} out of vocab");
        Tensor::from_vec(
            &[self.dim],
            self.table.value.data()[id * self.dim..(id + 1) * self.dim].to_vec(),
        )
    }

    pub fn backward(&mut self, id: usize, gy: &Tensor<R>) {
        if id == 0 {
            return;
        }
        let dst = &mut self.table.grad.data_mut()[id * self.dim..(id + 1) * self.dim];
        axpy(R::one(), gy.data(), dst);
    }
}

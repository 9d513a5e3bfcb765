//! Flat dense tensors and learnable parameters.
//!
//! Everything numeric in this crate is generic over [`Real`] so the same
//! module code runs in f32 for training and in f64 for the finite-difference
//! gradient checks. Feature maps are stored row-major in `[h, w, c]` order
//! (channels contiguous per pixel), which keeps convolution inner loops on
//! contiguous slices.

use num_traits::Float;

/// Scalar type the network runs on. Implemented for `f32` and `f64`.
pub trait Real:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Tag written into checkpoints so a round-trip is bit-exact per dtype.
    const DTYPE_TAG: u8;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    const DTYPE_TAG: u8 = 0;
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    const DTYPE_TAG: u8 = 1;
}

/// Dense tensor: a shape and a flat row-major buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![R::zero(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<R>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn full(shape: &[usize], value: R) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn fill(&mut self, value: R) {
        for v in &mut self.data {
            *v = value;
        }
    }

    /// Flat index for a `[h, w, c]` tensor.
    #[inline(always)]
    pub fn idx3(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (y * self.shape[1] + x) * self.shape[2] + c
    }

    #[inline(always)]
    pub fn at3(&self, y: usize, x: usize, c: usize) -> R {
        self.data[self.idx3(y, x, c)]
    }

    #[inline(always)]
    pub fn at3_mut(&mut self, y: usize, x: usize, c: usize) -> &mut R {
        let i = self.idx3(y, x, c);
        &mut self.data[i]
    }

    /// Pixel slice (all channels) of a `[h, w, c]` tensor.
    #[inline(always)]
    pub fn pixel(&self, y: usize, x: usize) -> &[R] {
        let c = self.shape[2];
        let base = (y * self.shape[1] + x) * c;
        &self.data[base..base + c]
    }

    pub fn is_3d(&self, h: usize, w: usize, c: usize) -> bool {
        self.shape == [h, w, c]
    }

    /// Same data, new shape; the element count must be unchanged.
    pub fn reshaped(mut self, shape: &[usize]) -> Tensor<R> {
        assert_eq!(
            self.numel(),
            shape.iter().product::<usize>(),
            "reshape cannot change element count"
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Tensor<R> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<R>) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn scale(&mut self, s: R) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A learnable tensor together with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<R> {
    pub value: Tensor<R>,
    pub grad: Tensor<R>,
}

impl<R: Real> Param<R> {
    pub fn new(value: Tensor<R>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(Tensor::zeros(shape))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(R::zero());
    }

    pub fn cast<T: Real>(&self) -> Param<T> {
        Param {
            value: self.value.cast(),
            grad: self.grad.cast(),
        }
    }
}

/// Unrolled dot product over contiguous slices; the workhorse of every
/// convolution and linear layer here.
#[inline]
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let n4 = n / 4 * 4;
    let mut s0 = R::zero();
    let mut s1 = R::zero();
    let mut s2 = R::zero();
    let mut s3 = R::zero();
    let mut i = 0;
    while i < n4 {
        s0 = s0 + a[i] * b[i];
        s1 = s1 + a[i + 1] * b[i + 1];
        s2 = s2 + a[i + 2] * b[i + 2];
        s3 = s3 + a[i + 3] * b[i + 3];
        i += 4;
    }
    while i < n {
        s0 = s0 + a[i] * b[i];
        i += 1;
    }
    (s0 + s1) + (s2 + s3)
}

/// `y += alpha * x` over contiguous slices.
#[inline]
pub fn axpy<R: Real>(alpha: R, x: &[R], y: &mut [R]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] = y[i] + alpha * x[i];
    }
}

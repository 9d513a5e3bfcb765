//! Dense matrix products and row softmax, the pieces of cross-image
//! attention. Matrices are 2-D tensors in row-major order.

use crate::tensor::{axpy, dot, Real, Tensor};

fn dims2<R: Real>(t: &Tensor<R>) -> (usize, usize) {
    assert_eq!(t.shape().len(), 2, "expected a matrix");
    (t.shape()[0], t.shape()[1])
}

/// `a [m,k] * b [k,n] -> [m,n]`.
pub fn matmul_nn<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    let (m, k) = dims2(a);
    let (kb, n) = dims2(b);
    assert_eq!(k, kb, "matmul_nn inner dim mismatch");
    let mut c = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    let cd = c.data_mut();
    for i in 0..m {
        let crow = &mut cd[i * n..(i + 1) * n];
        for kk in 0..k {
            axpy(ad[i * k + kk], &bd[kk * n..(kk + 1) * n], crow);
        }
    }
    c
}

/// `a [m,k] * b^T` where `b [n,k]`, giving `[m,n]`.
pub fn matmul_nt<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    let (m, k) = dims2(a);
    let (n, kb) = dims2(b);
    assert_eq!(k, kb, "matmul_nt inner dim mismatch");
    let mut c = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    let cd = c.data_mut();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            cd[i * n + j] = dot(arow, &bd[j * k..(j + 1) * k]);
        }
    }
    c
}

/// `a^T * b` where `a [m,k]`, `b [m,n]`, giving `[k,n]`.
pub fn matmul_tn<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    let (m, k) = dims2(a);
    let (mb, n) = dims2(b);
    assert_eq!(m, mb, "matmul_tn outer dim mismatch");
    let mut c = Tensor::zeros(&[k, n]);
    let (ad, bd) = (a.data(), b.data());
    let cd = c.data_mut();
    for mm in 0..m {
        let brow = &bd[mm * n..(mm + 1) * n];
        for i in 0..k {
            axpy(ad[mm * k + i], brow, &mut cd[i * n..(i + 1) * n]);
        }
    }
    c
}

/// Gradients of `c = a b` w.r.t. both factors.
pub fn matmul_nn_backward<R: Real>(
    a: &Tensor<R>,
    b: &Tensor<R>,
    gc: &Tensor<R>,
) -> (Tensor<R>, Tensor<R>) {
    (matmul_nt(gc, b), matmul_tn(a, gc))
}

/// Gradients of `c = a b^T` w.r.t. both factors.
pub fn matmul_nt_backward<R: Real>(
    a: &Tensor<R>,
    b: &Tensor<R>,
    gc: &Tensor<R>,
) -> (Tensor<R>, Tensor<R>) {
    (matmul_nn(gc, b), matmul_tn(gc, a))
}

/// Row-wise softmax with max subtraction. Rows of the result sum to one.
pub fn softmax_rows<R: Real>(x: &Tensor<R>) -> Tensor<R> {
    let (m, n) = dims2(x);
    let mut y = Tensor::zeros(&[m, n]);
    let xd = x.data();
    let yd = y.data_mut();
    for i in 0..m {
        let row = &xd[i * n..(i + 1) * n];
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let out = &mut yd[i * n..(i + 1) * n];
        let mut sum = R::zero();
        for j in 0..n {
            let e = (row[j] - mx).exp();
            out[j] = e;
            sum = sum + e;
        }
        for v in out.iter_mut() {
            *v = *v / sum;
        }
    }
    y
}

/// Backward through row softmax given the forward *output* `y`:
/// `gx_ij = y_ij (gy_ij - sum_k y_ik gy_ik)`.
pub fn softmax_rows_backward<R: Real>(y: &Tensor<R>, gy: &Tensor<R>) -> Tensor<R> {
    let (m, n) = dims2(y);
    let mut gx = Tensor::zeros(&[m, n]);
    let (yd, gyd) = (y.data(), gy.data());
    let gxd = gx.data_mut();
    for i in 0..m {
        let yr = &yd[i * n..(i + 1) * n];
        let gr = &gyd[i * n..(i + 1) * n];
        let s = dot(yr, gr);
        for j in 0..n {
            gxd[i * n + j] = yr[j] * (gr[j] - s);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand_distr::{Distribution, Normal};

    fn rand_m(m: usize, n: usize, rng: &mut crate::rng::Rng) -> Tensor<f64> {
        let d = Normal::new(0.0, 1.0).unwrap();
        Tensor::from_vec(&[m, n], (0..m * n).map(|_| d.sample(rng)).collect())
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut rng = stream(9, Stream::Probe);
        let a = rand_m(3, 4, &mut rng);
        let b = rand_m(4, 5, &mut rng);
        let c = matmul_nn(&a, &b);
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.data()[i * 4 + k] * b.data()[k * 5 + j];
                }
                assert!((c.data()[i * 5 + j] - acc).abs() < 1e-12);
            }
        }
        let bt = rand_m(5, 4, &mut rng);
        let c2 = matmul_nt(&a, &bt);
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.data()[i * 4 + k] * bt.data()[j * 4 + k];
                }
                assert!((c2.data()[i * 5 + j] - acc).abs() < 1e-12);
            }
        }
        let at = rand_m(4, 3, &mut rng);
        let c3 = matmul_tn(&at, &b);
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += at.data()[k * 3 + i] * b.data()[k * 5 + j];
                }
                assert!((c3.data()[i * 5 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = stream(10, Stream::Probe);
        let x = rand_m(4, 6, &mut rng);
        let y = softmax_rows(&x);
        for i in 0..4 {
            let s: f64 = y.data()[i * 6..(i + 1) * 6].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let mut xs = x.clone();
        for v in xs.data_mut() {
            *v += 123.0;
        }
        let ys = softmax_rows(&xs);
        for (a, b) in y.data().iter().zip(ys.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // large logits stay finite
        let big = Tensor::from_vec(&[1, 3], vec![1e4f64, 1e4 - 2.0, -1e4]);
        assert!(softmax_rows(&big).all_finite());
    }

    #[test]
    fn backwards_match_finite_differences() {
        let mut rng = stream(11, Stream::Probe);
        let a = rand_m(3, 4, &mut rng);
        let b = rand_m(5, 4, &mut rng);
        let gy = rand_m(3, 5, &mut rng);
        let h = 1e-6;

        // loss = <softmax_rows(a b^T), gy>
        let loss = |a: &Tensor<f64>, b: &Tensor<f64>| {
            dot(softmax_rows(&matmul_nt(a, b)).data(), gy.data())
        };
        let logits = matmul_nt(&a, &b);
        let att = softmax_rows(&logits);
        let g_logits = softmax_rows_backward(&att, &gy);
        let (ga, gb) = matmul_nt_backward(&a, &b, &g_logits);
        for i in 0..a.numel() {
            let mut ap = a.clone();
            ap.data_mut()[i] += h;
            let mut am = a.clone();
            am.data_mut()[i] -= h;
            let num = (loss(&ap, &b) - loss(&am, &b)) / (2.0 * h);
            assert!((ga.data()[i] - num).abs() < 1e-6, "ga[{i}]");
        }
        for i in 0..b.numel() {
            let mut bp = b.clone();
            bp.data_mut()[i] += h;
            let mut bm = b.clone();
            bm.data_mut()[i] -= h;
            let num = (loss(&a, &bp) - loss(&a, &bm)) / (2.0 * h);
            assert!((gb.data()[i] - num).abs() < 1e-6, "gb[{i}]");
        }

        // matmul_nn gradient
        let b2 = rand_m(4, 5, &mut rng);
        let gy2 = rand_m(3, 5, &mut rng);
        let (ga, gb) = matmul_nn_backward(&a, &b2, &gy2);
        let loss2 =
            |a: &Tensor<f64>, b: &Tensor<f64>| dot(matmul_nn(a, b).data(), gy2.data());
        for i in 0..a.numel() {
            let mut ap = a.clone();
            ap.data_mut()[i] += h;
            let mut am = a.clone();
            am.data_mut()[i] -= h;
            let num = (loss2(&ap, &b2) - loss2(&am, &b2)) / (2.0 * h);
            assert!((ga.data()[i] - num).abs() < 1e-6);
        }
        for i in 0..b2.numel() {
            let mut bp = b2.clone();
            bp.data_mut()[i] += h;
            let mut bm = b2.clone();
            bm.data_mut()[i] -= h;
            let num = (loss2(&a, &bp) - loss2(&a, &bm)) / (2.0 * h);
            assert!((gb.data()[i] - num).abs() < 1e-6);
        }
    }
}

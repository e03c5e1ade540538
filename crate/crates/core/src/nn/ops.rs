//! Forward math shared by the autodiff tape and the direct inference path.

use super::tensor::{Scalar, Tensor};

/// Sinusoidal positional encoding vector for one position.
pub fn pos_encoding<T: Scalar>(pos: usize, dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); dim];
    for i in 0..dim {
        let k = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * k / dim as f64);
        out[i] = T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
    }
    out
}

/// Positional-encoding matrix for `len` positions.
pub fn pos_encoding_matrix<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * dim);
    for p in 0..len {
        data.extend(pos_encoding::<T>(p, dim));
    }
    Tensor::from_vec(&[len, dim], data)
}

/// 2-D convolution over a [Cin,H,W] input with an [Cout,Cin,KH,KW] kernel.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (cin, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (win + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for co in 0..cout {
        let bias = b.data()[co];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (ci * h + iy as usize) * win;
                        let wrow = ((co * cin + ci) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= win as isize {
                                continue;
                            }
                            acc = acc + xd[xrow + ix as usize] * wd[wrow + kx];
                        }
                    }
                }
                od[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Gradients of `conv2d` w.r.t. input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (cin, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[cout]);
    let xd = x.data();
    let wd = w.data();
    let gd = g.data();
    let dxd = dx.data_mut();
    {
        let dwd = dw.data_mut();
        let dbd = db.data_mut();
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = gd[(co * oh + oy) * ow + ox];
                    dbd[co] = dbd[co] + go;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = (ci * h + iy as usize) * win;
                            let wrow = ((co * cin + ci) * kh + ky) * kw;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= win as isize {
                                    continue;
                                }
                                dwd[wrow + kx] = dwd[wrow + kx] + go * xd[xrow + ix as usize];
                                dxd[xrow + ix as usize] =
                                    dxd[xrow + ix as usize] + go * wd[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// y = x * w^T + b for x [n,in], w [out,in], b [out].
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, din) = x.dims2();
    let (dout, win) = w.dims2();
    assert_eq!(din, win, "linear shape mismatch");
    let mut out = Tensor::zeros(&[n, dout]);
    let od = out.data_mut();
    for i in 0..n {
        let xrow = &x.data()[i * din..(i + 1) * din];
        for o in 0..dout {
            let wrow = &w.data()[o * din..(o + 1) * din];
            let mut acc = b.data()[o];
            for k in 0..din {
                acc = acc + xrow[k] * wrow[k];
            }
            od[i * dout + o] = acc;
        }
    }
    out
}

/// a [n,k] * b [k,m].
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, k) = a.dims2();
    let (kb, m) = b.dims2();
    assert_eq!(k, kb, "matmul shape mismatch");
    let mut out = Tensor::zeros(&[n, m]);
    let od = out.data_mut();
    for i in 0..n {
        for kk in 0..k {
            let av = a.data()[i * k + kk];
            let brow = &b.data()[kk * m..(kk + 1) * m];
            for j in 0..m {
                od[i * m + j] = od[i * m + j] + av * brow[j];
            }
        }
    }
    out
}

pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, m) = x.dims2();
    let mut out = Tensor::zeros(&[m, n]);
    let od = out.data_mut();
    for i in 0..n {
        for j in 0..m {
            od[j * n + i] = x.data()[i * m + j];
        }
    }
    out
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = sigmoid_scalar(*v);
    }
    out
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    let one = T::one();
    if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    }
}

/// Row-wise softmax of a rank-2 tensor.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, m) = x.dims2();
    let mut out = x.clone();
    for i in 0..n {
        softmax_in_place(&mut out.data_mut()[i * m..(i + 1) * m]);
    }
    out
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm: gamma * (x - mean)/sqrt(var + eps) + beta.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Tensor<T> {
    let (n, d) = x.dims2();
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let row = &x.data()[i * d..(i + 1) * d];
        let orow = &mut out.data_mut()[i * d..(i + 1) * d];
        layer_norm_row(row, gamma.data(), beta.data(), orow);
    }
    out
}

pub fn layer_norm_row<T: Scalar>(row: &[T], gamma: &[T], beta: &[T], out: &mut [T]) {
    let d = row.len();
    let dn = T::from_f64(d as f64);
    let mean = row.iter().copied().sum::<T>() / dn;
    let mut var = T::zero();
    for &v in row {
        var = var + (v - mean) * (v - mean);
    }
    var = var / dn;
    let inv = T::one() / (var + T::from_f64(LAYER_NORM_EPS)).sqrt();
    for k in 0..d {
        out[k] = gamma[k] * (row[k] - mean) * inv + beta[k];
    }
}

/// Numerically stable binary cross-entropy from logits, scaled:
/// scale * sum_i [ max(z,0) - z*y + ln(1 + exp(-|z|)) ].
pub fn bce_with_logits<T: Scalar>(z: &[T], targets: &[T], scale: T) -> T {
    assert_eq!(z.len(), targets.len());
    let mut total = T::zero();
    for (&zi, &yi) in z.iter().zip(targets) {
        let pos = zi.max(T::zero());
        let softplus = (T::one() + (-zi.abs()).exp()).ln();
        total = total + pos - zi * yi + softplus;
    }
    total * scale
}

/// Token cross-entropy summed over rows of [L,V] logits, scaled.
pub fn token_ce<T: Scalar>(logits: &Tensor<T>, targets: &[usize], scale: T) -> T {
    let (n, v) = logits.dims2();
    assert_eq!(n, targets.len());
    let mut total = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits.data()[i * v..(i + 1) * v];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
        total = total + lse - row[t];
    }
    total * scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_identity_kernel() {
        let x = Tensor::from_vec(&[1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]);
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d(&x, &w, &b, 1, 0).data(), x.data());
        // stride 2 picks every other sample
        let strided = conv2d(&x, &w, &b, 2, 0);
        assert_eq!(strided.shape(), &[1, 2, 2]);
        assert_eq!(strided.data(), &[1.0, 3.0, 7.0, 9.0]);
    }

    #[test]
    fn conv2d_valid_shrinks_by_kernel() {
        let x = Tensor::<f64>::zeros(&[1, 66, 66]);
        let w = Tensor::<f64>::zeros(&[4, 1, 3, 3]);
        let b = Tensor::<f64>::zeros(&[4]);
        assert_eq!(conv2d(&x, &w, &b, 1, 0).shape(), &[4, 64, 64]);
        let y = Tensor::<f64>::zeros(&[4, 64, 64]);
        let w2 = Tensor::<f64>::zeros(&[8, 4, 3, 3]);
        let b2 = Tensor::<f64>::zeros(&[8]);
        assert_eq!(conv2d(&y, &w2, &b2, 2, 1).shape(), &[8, 32, 32]);
    }

    #[test]
    fn linear_matches_matmul() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]);
        let b = Tensor::from_vec(&[2], vec![10.0, -10.0]);
        let y = linear(&x, &w, &b);
        let via_matmul = matmul(&x, &transpose(&w));
        for i in 0..2 {
            for o in 0..2 {
                let expect = via_matmul.data()[i * 2 + o] + b.data()[o];
                assert!((y.data()[i * 2 + o] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_normalize() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1000.0, 0.0, 1000.0]);
        let s = softmax_rows(&x);
        for i in 0..2 {
            let sum: f64 = s.data()[i * 3..(i + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!(s.data()[5] > 0.999);
    }

    #[test]
    fn bce_of_fifty_fifty_is_ln2() {
        let z = [0.0f64; 480];
        let y: Vec<f64> = (0..480).map(|i| (i % 2) as f64).collect();
        let loss = bce_with_logits(&z, &y, 1.0 / 480.0);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn token_ce_is_zero_for_saturated_correct_logits() {
        let mut logits = Tensor::from_vec(&[2, 6], vec![-100.0f64; 12]);
        logits.data_mut()[0 * 6 + 2] = 100.0;
        logits.data_mut()[1 * 6 + 0] = 100.0;
        let ce = token_ce(&logits, &[2, 0], 0.5);
        assert!(ce.abs() < 1e-12);
    }

    #[test]
    fn pos_encoding_positions_differ() {
        let a = pos_encoding::<f64>(0, 16);
        let b = pos_encoding::<f64>(5, 16);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3));
        // position 0 is [0,1,0,1,...]
        for (i, v) in a.iter().enumerate() {
            let expect = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert!((v - expect).abs() < 1e-12);
        }
    }
}

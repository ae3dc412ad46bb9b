use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|x| x * s)
}

/// Integer power `x^k`, `k >= 1`.
pub fn powi(a: &Tensor, k: i32) -> Tensor {
    a.map(|x| x.powi(k))
}

pub fn powi_backward(a: &Tensor, k: i32, grad: &Tensor) -> Tensor {
    let kf = k as f64;
    a.zip_map(grad, |x, g| g * kf * x.powi(k - 1)).expect("shape checked by forward")
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|x| x.max(0.0))
}

pub fn relu_backward(a: &Tensor, grad: &Tensor) -> Tensor {
    a.zip_map(grad, |x, g| if x > 0.0 { g } else { 0.0 }).expect("shape checked by forward")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * sigmoid(x)`: a smooth ReLU-shaped nonlinearity, so finite-difference
/// checks never straddle a kink.
pub fn silu(a: &Tensor) -> Tensor {
    a.map(|x| x * sigmoid(x))
}

pub fn silu_backward(a: &Tensor, grad: &Tensor) -> Tensor {
    a.zip_map(grad, |x, g| {
        let s = sigmoid(x);
        g * s * (1.0 + x * (1.0 - s))
    })
    .expect("shape checked by forward")
}

/// Adds a per-channel bias to a `(batch, channel, ...)` tensor.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, inner) = channel_dims(x)?;
    if bias.shape() != [c] {
        return Err(shape_mismatch("channel bias", bias.shape(), &[c]));
    }
    let mut out = x.clone();
    for (plane, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let b = bias.data()[plane % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    debug_assert_eq!(out.numel(), n * c * inner);
    Ok(out)
}

pub fn add_channel_bias_backward(x_shape: &[usize], grad: &Tensor) -> Tensor {
    let c = x_shape[1];
    let inner: usize = x_shape[2..].iter().product();
    let mut gb = vec![0.0; c];
    for (plane, chunk) in grad.data().chunks(inner).enumerate() {
        gb[plane % c] += chunk.iter().sum::<f64>();
    }
    Tensor::from_parts(vec![c], gb)
}

pub(crate) fn channel_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::config(format!("expected (batch, channel, ...) tensor, got {:?}", x.shape())));
    }
    let inner = x.shape()[2..].iter().product();
    Ok((x.dim(0), x.dim(1), inner))
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(shape_mismatch("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            let brow = &b.data()[p * n..(p + 1) * n];
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.dim(0), a.dim(1));
    Tensor::from_fn(&[n, m], |idx| a.data()[(idx % m) * n + idx / m])
}

/// Returns `(d a, d b)` for `a @ b`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul(grad, &transpose(b))?, matmul(&transpose(a), grad)?))
}

/// Softmax over the last axis, max-subtracted.
pub fn softmax(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

pub fn softmax_backward(y: &Tensor, grad: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap();
    let mut out = grad.clone();
    for (row, yrow) in out.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
        let s: f64 = row.iter().zip(yrow).map(|(g, y)| g * y).sum();
        for (g, y) in row.iter_mut().zip(yrow) {
            *g = y * (*g - s);
        }
    }
    out
}

/// Concatenates two `(batch, channel, ...)` tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, ca, ia) = channel_dims(a)?;
    let (nb, cb, ib) = channel_dims(b)?;
    if na != nb || ia != ib || a.shape()[2..] != b.shape()[2..] {
        return Err(shape_mismatch("concat_channels", a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for n in 0..na {
        data.extend_from_slice(&a.data()[n * ca * ia..(n + 1) * ca * ia]);
        data.extend_from_slice(&b.data()[n * cb * ib..(n + 1) * cb * ib]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] = ca + cb;
    Ok(Tensor::from_parts(shape, data))
}

/// Splits a channel gradient back into the `a` and `b` halves.
pub fn concat_channels_backward(a_channels: usize, grad: &Tensor) -> (Tensor, Tensor) {
    let (n, c, inner) = channel_dims(grad).expect("rank checked by forward");
    let cb = c - a_channels;
    let mut ga = Vec::with_capacity(n * a_channels * inner);
    let mut gb = Vec::with_capacity(n * cb * inner);
    for i in 0..n {
        let base = i * c * inner;
        ga.extend_from_slice(&grad.data()[base..base + a_channels * inner]);
        gb.extend_from_slice(&grad.data()[base + a_channels * inner..base + c * inner]);
    }
    let mut sa = grad.shape().to_vec();
    sa[1] = a_channels;
    let mut sb = grad.shape().to_vec();
    sb[1] = cb;
    (Tensor::from_parts(sa, ga), Tensor::from_parts(sb, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let y = softmax(&Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap());
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax(&Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
        assert!(y.all_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] < 1e-300);
        // exp(k)/(e + e^2 + e^3) evaluated by hand
        let y = softmax(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        for (v, e) in y.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((v - e).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_at_large_magnitude() {
        let x = Tensor::from_fn(&[50, 7], |i| ((i * 7919) % 2001) as f64 * 10.0 - 1.0e4);
        let y = softmax(&x);
        for row in y.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn concat_then_split() {
        let a = Tensor::from_fn(&[2, 1, 2, 1, 1], |i| i as f64);
        let b = Tensor::from_fn(&[2, 3, 2, 1, 1], |i| 100.0 + i as f64);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 4, 2, 1, 1]);
        assert_eq!(c.get(&[1, 0, 1, 0, 0]), a.get(&[1, 0, 1, 0, 0]));
        assert_eq!(c.get(&[1, 2, 0, 0, 0]), b.get(&[1, 1, 0, 0, 0]));
        let (ga, gb) = concat_channels_backward(1, &c);
        assert_eq!(ga, a);
        assert_eq!(gb, b);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(&[3, 1], vec![1., 0., -1.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[-2.0, -2.0]);
        assert!(matmul(&b, &b).is_err());
    }
}

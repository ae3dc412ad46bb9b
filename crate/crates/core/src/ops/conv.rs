//! Direct 3D cross-correlation.
//!
//! Each output row along the fastest axis is accumulated as a sequence of
//! scaled, shifted input rows, which keeps the inner loops contiguous for
//! stride 1. Work is split over independent output planes so the result is
//! bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let mismatch = || {
            Error::config(format!("conv3d: input shape {input:?} is incompatible with kernel shape {kernel:?}"))
        };
        if input.len() != 5 || kernel.len() != 5 {
            return Err(mismatch());
        }
        if kernel[1] != input[1] {
            return Err(mismatch());
        }
        let k = kernel[2];
        if kernel[3] != k || kernel[4] != k || k % 2 == 0 {
            return Err(Error::config(format!("conv3d: kernel must be cubic with odd extent, got {kernel:?}")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::config(format!("conv3d: stride must be 1 or 2, got {stride}")));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let n = input[2 + a] + 2 * padding;
            if n < k {
                return Err(mismatch());
            }
            output[a] = (n - k) / stride + 1;
        }
        Ok(ConvGeometry {
            batch: input[0],
            c_in: input[1],
            c_out: kernel[0],
            k,
            stride,
            padding,
            input: [input[2], input[3], input[4]],
            output,
        })
    }

    pub fn output_shape(&self) -> [usize; 5] {
        [self.batch, self.c_out, self.output[0], self.output[1], self.output[2]]
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    /// Output index range along one axis for which `o*stride + tap - padding`
    /// lands inside `[0, n)`.
    fn valid(&self, tap: usize, n: usize, n_out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let shift = tap as isize - p;
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi = ((n as isize - 1 - shift).div_euclid(s) + 1).clamp(0, n_out as isize);
        (lo as usize, (hi as usize).max(lo as usize))
    }

    fn taps(&self, axis: usize) -> Vec<(usize, usize)> {
        (0..self.k).map(|t| self.valid(t, self.input[axis], self.output[axis])).collect()
    }
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Visits every (output row, input row, depth tap) triple that contributes
/// to the cross-correlation between one input and one output plane.
#[inline]
fn for_each_row(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize, usize, (usize, usize))) {
    let [_, w_in, d_in] = g.input;
    let [_, w_out, d_out] = g.output;
    let (th, tw, td) = (g.taps(0), g.taps(1), g.taps(2));
    let (s, p) = (g.stride, g.padding);
    for (kh, &(h_lo, h_hi)) in th.iter().enumerate() {
        for oh in h_lo..h_hi {
            let ih = oh * s + kh - p;
            for (kw, &(w_lo, w_hi)) in tw.iter().enumerate() {
                for ow in w_lo..w_hi {
                    let iw = ow * s + kw - p;
                    let out_row = (oh * w_out + ow) * d_out;
                    let in_row = (ih * w_in + iw) * d_in;
                    for (kd, &range) in td.iter().enumerate() {
                        if range.0 >= range.1 {
                            continue;
                        }
                        f((kh * g.k + kw) * g.k + kd, out_row, in_row, kd, range);
                    }
                }
            }
        }
    }
}

pub fn conv3d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    Ok(conv3d_with(&g, input.data(), kernel.data()))
}

pub(crate) fn conv3d_with(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Tensor {
    let (si, so, k3) = (g.in_volume(), g.out_volume(), g.k * g.k * g.k);
    let mut out = vec![0.0; g.batch * g.c_out * so];
    out.par_chunks_mut(so).enumerate().for_each(|(plane, out_plane)| {
        let (n, o) = (plane / g.c_out, plane % g.c_out);
        for c in 0..g.c_in {
            let x = &input[(n * g.c_in + c) * si..][..si];
            let w = &kernel[(o * g.c_in + c) * k3..][..k3];
            for_each_row(g, |tap, out_row, in_row, kd, (lo, hi)| {
                let wv = w[tap];
                let src0 = in_row + lo * g.stride + kd - g.padding;
                let dst = &mut out_plane[out_row + lo..out_row + hi];
                if g.stride == 1 {
                    axpy(dst, wv, &x[src0..src0 + (hi - lo)]);
                } else {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d += wv * x[src0 + j * g.stride];
                    }
                }
            });
        }
    });
    Tensor::from_parts(g.output_shape().to_vec(), out)
}

/// Vector-Jacobian product of [`conv3d`]: returns `(d input, d kernel)`.
pub fn conv3d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if grad_out.shape() != g.output_shape() {
        return Err(crate::error::shape_mismatch("conv3d backward", grad_out.shape(), &g.output_shape()));
    }
    let (si, so, k3) = (g.in_volume(), g.out_volume(), g.k * g.k * g.k);
    let (x, w, gy) = (input.data(), kernel.data(), grad_out.data());

    let mut gx = vec![0.0; g.batch * g.c_in * si];
    gx.par_chunks_mut(si).enumerate().for_each(|(plane, gx_plane)| {
        let (n, c) = (plane / g.c_in, plane % g.c_in);
        for o in 0..g.c_out {
            let gyp = &gy[(n * g.c_out + o) * so..][..so];
            let wk = &w[(o * g.c_in + c) * k3..][..k3];
            for_each_row(&g, |tap, out_row, in_row, kd, (lo, hi)| {
                let wv = wk[tap];
                let dst0 = in_row + lo * g.stride + kd - g.padding;
                let src = &gyp[out_row + lo..out_row + hi];
                if g.stride == 1 {
                    axpy(&mut gx_plane[dst0..dst0 + (hi - lo)], wv, src);
                } else {
                    for (j, s) in src.iter().enumerate() {
                        gx_plane[dst0 + j * g.stride] += wv * s;
                    }
                }
            });
        }
    });

    let mut gw = vec![0.0; g.c_out * g.c_in * k3];
    gw.par_chunks_mut(k3).enumerate().for_each(|(pair, gw_k)| {
        let (o, c) = (pair / g.c_in, pair % g.c_in);
        for n in 0..g.batch {
            let xp = &x[(n * g.c_in + c) * si..][..si];
            let gyp = &gy[(n * g.c_out + o) * so..][..so];
            for_each_row(&g, |tap, out_row, in_row, kd, (lo, hi)| {
                let src0 = in_row + lo * g.stride + kd - g.padding;
                let go = &gyp[out_row + lo..out_row + hi];
                gw_k[tap] += if g.stride == 1 {
                    dot(go, &xp[src0..src0 + (hi - lo)])
                } else {
                    go.iter().enumerate().map(|(j, v)| v * xp[src0 + j * g.stride]).sum()
                };
            });
        }
    });

    Ok((
        Tensor::from_parts(input.shape().to_vec(), gx),
        Tensor::from_parts(kernel.shape().to_vec(), gw),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Six nested loops straight from the definition of cross-correlation.
    fn naive(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Tensor {
        let s = input.shape();
        let ks = kernel.shape();
        let k = ks[2];
        let out_ext: Vec<usize> = (0..3).map(|a| (s[2 + a] + 2 * pad - k) / stride + 1).collect();
        let mut out = Tensor::zeros(&[s[0], ks[0], out_ext[0], out_ext[1], out_ext[2]]);
        for n in 0..s[0] {
            for o in 0..ks[0] {
                for oh in 0..out_ext[0] {
                    for ow in 0..out_ext[1] {
                        for od in 0..out_ext[2] {
                            let mut acc = 0.0;
                            for c in 0..s[1] {
                                for a in 0..k {
                                    for b in 0..k {
                                        for e in 0..k {
                                            let ih = (oh * stride + a) as isize - pad as isize;
                                            let iw = (ow * stride + b) as isize - pad as isize;
                                            let id = (od * stride + e) as isize - pad as isize;
                                            if ih < 0 || iw < 0 || id < 0 {
                                                continue;
                                            }
                                            let (ih, iw, id) = (ih as usize, iw as usize, id as usize);
                                            if ih >= s[2] || iw >= s[3] || id >= s[4] {
                                                continue;
                                            }
                                            acc += input.get(&[n, c, ih, iw, id]) * kernel.get(&[o, c, a, b, e]);
                                        }
                                    }
                                }
                            }
                            out.set(&[n, o, oh, ow, od], acc);
                        }
                    }
                }
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sum_of_ones() {
        let x = Tensor::ones(&[1, 1, 3, 3, 3]);
        let k = Tensor::ones(&[1, 1, 3, 3, 3]);
        let y = conv3d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.item(), 27.0);
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 1, 4, 5, 3], &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 3, 3, 3]);
        k.set(&[0, 0, 1, 1, 1], 1.0);
        let y = conv3d(&x, &k, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matches_naive_on_fixed_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[1, 2, 4, 4, 4], &mut rng);
        let k = random(&[3, 2, 3, 3, 3], &mut rng);
        let fast = conv3d(&x, &k, 1, 0).unwrap();
        assert!(fast.max_abs_diff(&naive(&x, &k, 1, 0)) < 1e-10);
    }

    #[test]
    fn matches_naive_on_random_configurations() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let k = [1, 3, 5][rng.random_range(0..3)];
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=k / 2 + 1);
            let ext: Vec<usize> = (0..3).map(|_| rng.random_range(k.max(2)..=7)).collect();
            let x = random(&[rng.random_range(1..=2), rng.random_range(1..=3), ext[0], ext[1], ext[2]], &mut rng);
            let w = random(&[rng.random_range(1..=3), x.dim(1), k, k, k], &mut rng);
            let fast = conv3d(&x, &w, stride, pad).unwrap();
            let slow = naive(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-10, "k={k} stride={stride} pad={pad}");
        }
    }

    #[test]
    fn output_extent_formula() {
        let g = ConvGeometry::new(&[1, 1, 9, 8, 7], &[1, 1, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.output, [5, 4, 4]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let x = Tensor::zeros(&[1, 2, 4, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3, 3]);
        let msg = conv3d(&x, &k, 1, 1).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 4, 4, 4]") && msg.contains("[1, 3, 3, 3, 3]"), "{msg}");
        assert!(conv3d(&x, &Tensor::zeros(&[1, 2, 2, 2, 2]), 1, 0).is_err());
        assert!(conv3d(&x, &Tensor::zeros(&[1, 2, 3, 3, 3]), 3, 0).is_err());
    }

    #[test]
    fn backward_matches_naive_adjoint() {
        // <conv(x), gy> = <x, gx> and the kernel gradient is linear in gy.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x = random(&[2, 2, 5, 4, 6], &mut rng);
            let w = random(&[3, 2, 3, 3, 3], &mut rng);
            let y = conv3d(&x, &w, stride, pad).unwrap();
            let gy = random(y.shape(), &mut rng);
            let (gx, gw) = conv3d_backward(&x, &w, &gy, stride, pad).unwrap();
            let lhs = y.dot(&gy);
            assert!((lhs - x.dot(&gx)).abs() < 1e-10);
            assert!((lhs - w.dot(&gw)).abs() < 1e-10);
        }
    }
}

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Nearest-neighbour x2 upsampling of the three spatial axes.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, _) = x.feature_dims()?;
    let [h, w, d] = x.spatial();
    let (h2, w2, d2) = (2 * h, 2 * w, 2 * d);
    let mut out = vec![0.0; n * c * h2 * w2 * d2];
    for (plane, src) in out.chunks_mut(h2 * w2 * d2).zip(x.data().chunks(h * w * d)) {
        for oh in 0..h2 {
            for ow in 0..w2 {
                let row = &src[((oh / 2) * w + ow / 2) * d..][..d];
                let dst = &mut plane[(oh * w2 + ow) * d2..][..d2];
                for (j, v) in dst.iter_mut().enumerate() {
                    *v = row[j / 2];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h2, w2, d2], out))
}

/// Adjoint of [`upsample2`]: sums each 2x2x2 block.
pub fn upsample2_backward(grad: &Tensor) -> Tensor {
    let (n, c) = (grad.dim(0), grad.dim(1));
    let [h2, w2, d2] = grad.spatial();
    let (h, w, d) = (h2 / 2, w2 / 2, d2 / 2);
    let mut out = vec![0.0; n * c * h * w * d];
    for (plane, src) in out.chunks_mut(h * w * d).zip(grad.data().chunks(h2 * w2 * d2)) {
        for oh in 0..h2 {
            for ow in 0..w2 {
                let row = &src[(oh * w2 + ow) * d2..][..d2];
                let dst = &mut plane[((oh / 2) * w + ow / 2) * d..][..d];
                for (j, g) in row.iter().enumerate() {
                    dst[j / 2] += g;
                }
            }
        }
    }
    Tensor::from_parts(vec![n, c, h, w, d], out)
}

/// Stride-2 downsampling by 2x2x2 block averaging.
pub fn downsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, _) = x.feature_dims()?;
    let [h2, w2, d2] = x.spatial();
    if h2 % 2 != 0 || w2 % 2 != 0 || d2 % 2 != 0 {
        return Err(Error::config(format!("downsample2 needs even spatial extents, got {:?}", x.shape())));
    }
    let (h, w, d) = (h2 / 2, w2 / 2, d2 / 2);
    let mut out = vec![0.0; n * c * h * w * d];
    for (plane, src) in out.chunks_mut(h * w * d).zip(x.data().chunks(h2 * w2 * d2)) {
        for ih in 0..h2 {
            for iw in 0..w2 {
                let row = &src[(ih * w2 + iw) * d2..][..d2];
                let dst = &mut plane[((ih / 2) * w + iw / 2) * d..][..d];
                for (j, v) in row.iter().enumerate() {
                    dst[j / 2] += 0.125 * v;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w, d], out))
}

pub fn downsample2_backward(grad: &Tensor) -> Tensor {
    let mut up = upsample2(grad).expect("gradient has feature layout");
    up.data_mut().iter_mut().for_each(|v| *v *= 0.125);
    up
}

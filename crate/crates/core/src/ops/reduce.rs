use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    /// Population variance: divides by the number of spatial positions.
    Var,
}

/// Per-`(i, c)` mean or population variance over all spatial positions of a
/// `(batch, channel, h, w, d)` tensor. Returns a `[batch, channel]` tensor.
pub fn reduce_spatial(x: &Tensor, kind: Reduction) -> Result<Tensor> {
    let (n, c, p) = x.feature_dims()?;
    let data = x
        .data()
        .chunks(p)
        .map(|plane| {
            let mean = plane.iter().sum::<f64>() / p as f64;
            match kind {
                Reduction::Mean => mean,
                Reduction::Var => plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64,
            }
        })
        .collect();
    Ok(Tensor::from_parts(vec![n, c], data))
}

pub fn reduce_spatial_backward(x: &Tensor, kind: Reduction, grad: &Tensor) -> Tensor {
    let p: usize = x.shape()[2..].iter().product();
    let inv = 1.0 / p as f64;
    let mut out = Vec::with_capacity(x.numel());
    for (plane, &g) in x.data().chunks(p).zip(grad.data()) {
        match kind {
            Reduction::Mean => out.extend(std::iter::repeat_n(g * inv, p)),
            Reduction::Var => {
                let mean = plane.iter().sum::<f64>() * inv;
                out.extend(plane.iter().map(|v| 2.0 * g * (v - mean) * inv));
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

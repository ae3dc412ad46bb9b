use rand::Rng;

use super::generate::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FOREGROUND_CROP_PROB: f64 = 0.7;

/// One draw of the augmentation parameters, kept explicit so transforms can
/// be replayed and tested without an RNG.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flip: [bool; 3],
    /// Rotation plane `(a, b)` and number of quarter turns.
    pub rotation: Option<((usize, usize), u8)>,
    pub scale: f64,
    pub shift: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw { flip: [false; 3], rotation: None, scale: 1.0, shift: 0.0 };

    /// Flips with p = 0.5 per axis, a quarter-turn multiple in a random plane
    /// whose two extents agree, intensity `a*x + b` with `a` in [0.9, 1.1] and
    /// `b` in [-0.1, 0.1].
    pub fn sample<R: Rng>(shape: [usize; 3], rng: &mut R) -> Self {
        let flip = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
        let planes: Vec<(usize, usize)> =
            [(0, 1), (0, 2), (1, 2)].into_iter().filter(|&(a, b)| shape[a] == shape[b]).collect();
        let turns = rng.random_range(0..4u8);
        let rotation = if planes.is_empty() {
            None
        } else {
            let p = planes[rng.random_range(0..planes.len())];
            (turns > 0).then_some((p, turns))
        };
        AugmentDraw { flip, rotation, scale: rng.random_range(0.9..=1.1), shift: rng.random_range(-0.1..=0.1) }
    }
}

/// Source coordinate for each destination coordinate under `draw`.
fn source_of(dst: [usize; 3], shape: [usize; 3], draw: &AugmentDraw) -> [usize; 3] {
    // Undo the rotation, then the flips (the forward order is flip, rotate).
    let mut p = dst;
    if let Some(((a, b), k)) = draw.rotation {
        let n = shape[a];
        for _ in 0..k {
            // Inverse of one quarter turn (x, y) -> (y, n-1-x).
            let (x, y) = (p[a], p[b]);
            p[a] = n - 1 - y;
            p[b] = x;
        }
    }
    for ax in 0..3 {
        if draw.flip[ax] {
            p[ax] = shape[ax] - 1 - p[ax];
        }
    }
    p
}

fn remap<T: Copy>(src: &[T], channels: usize, shape: [usize; 3], draw: &AugmentDraw) -> Vec<T> {
    let vox = shape[0] * shape[1] * shape[2];
    let mut out = Vec::with_capacity(src.len());
    for c in 0..channels {
        let plane = &src[c * vox..(c + 1) * vox];
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    let s = source_of([x, y, z], shape, draw);
                    out.push(plane[(s[0] * shape[1] + s[1]) * shape[2] + s[2]]);
                }
            }
        }
    }
    out
}

/// Applies `draw`: geometric transforms to volume and labels alike, the
/// intensity transform to the volume only.
pub fn apply_augment(sample: &Sample, draw: &AugmentDraw) -> Result<Sample> {
    let shape = sample.shape();
    if let Some(((a, b), _)) = draw.rotation {
        if shape[a] != shape[b] {
            return Err(Error::config(format!("cannot rotate in plane ({a}, {b}) of a {shape:?} volume")));
        }
    }
    let m = sample.volume.dim(0);
    let data: Vec<f64> = remap(sample.volume.data(), m, shape, draw)
        .into_iter()
        .map(|v| draw.scale * v + draw.shift)
        .collect();
    let labels = remap(&sample.labels, 1, shape, draw);
    Ok(Sample { volume: Tensor::new(sample.volume.shape(), data)?.cast(sample.volume.dtype()), labels })
}

pub fn augment<R: Rng>(sample: &Sample, rng: &mut R) -> Result<Sample> {
    let draw = AugmentDraw::sample(sample.shape(), rng);
    apply_augment(sample, &draw)
}

/// Cuts a `patch` sized block. With `foreground_bias`, a block containing a
/// random labelled voxel is chosen with probability 0.7 (when the sample has
/// any); otherwise the origin is uniform.
pub fn crop_patch<R: Rng>(sample: &Sample, patch: [usize; 3], foreground_bias: bool, rng: &mut R) -> Result<Sample> {
    let shape = sample.shape();
    if (0..3).any(|a| patch[a] == 0 || patch[a] > shape[a]) {
        return Err(Error::config(format!("patch {patch:?} does not fit a {shape:?} volume")));
    }
    let mut origin = [0; 3];
    let fg = if foreground_bias && rng.random_bool(FOREGROUND_CROP_PROB) {
        let n_fg = sample.labels.iter().filter(|&&l| l != 0).count();
        (n_fg > 0).then(|| {
            let k = rng.random_range(0..n_fg);
            let flat = sample.labels.iter().enumerate().filter(|(_, &l)| l != 0).nth(k).expect("k < n_fg").0;
            [flat / (shape[1] * shape[2]), (flat / shape[2]) % shape[1], flat % shape[2]]
        })
    } else {
        None
    };
    for a in 0..3 {
        let max_origin = shape[a] - patch[a];
        origin[a] = match fg {
            Some(v) => {
                let lo = v[a].saturating_sub(patch[a] - 1);
                let hi = v[a].min(max_origin);
                rng.random_range(lo..=hi)
            }
            None => rng.random_range(0..=max_origin),
        };
    }
    Ok(extract(sample, origin, patch))
}

pub fn extract(sample: &Sample, origin: [usize; 3], patch: [usize; 3]) -> Sample {
    let shape = sample.shape();
    let m = sample.volume.dim(0);
    let vox = shape[0] * shape[1] * shape[2];
    let mut data = Vec::with_capacity(m * patch.iter().product::<usize>());
    let mut labels = Vec::with_capacity(patch.iter().product::<usize>());
    for c in 0..m {
        for x in 0..patch[0] {
            for y in 0..patch[1] {
                let start = c * vox + ((origin[0] + x) * shape[1] + origin[1] + y) * shape[2] + origin[2];
                data.extend_from_slice(&sample.volume.data()[start..start + patch[2]]);
                if c == 0 {
                    labels.extend_from_slice(&sample.labels[start..start + patch[2]]);
                }
            }
        }
    }
    let volume = Tensor::new(&[m, patch[0], patch[1], patch[2]], data).expect("patch shape").cast(sample.volume.dtype());
    Sample { volume, labels }
}

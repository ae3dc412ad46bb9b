//! Harmonization, polynomial affine transform and restoration, each with an
//! analytic vector-Jacobian product.
//!
//! With `xhat = (x - mu) / sigma`, `sigma = sqrt(var + eps)`:
//!
//! ```text
//! xt = w * xhat + b + sum_j lambda_j * xhat^j
//! y  = sigma * (xt - b - sum_j gamma_j * xt^j) / (w + eps + sum_j delta_j * xt^j) + mu
//! ```

use super::params::{Coefs, HarmonyParams, InstanceStats};
use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

/// Smallest magnitude the restoration denominator may take.
pub const DENOMINATOR_FLOOR: f64 = 1e-3;

/// `(sum_j c_j x^j, sum_j j c_j x^(j-1))` for `j = 1..=coefs.len()`.
#[inline]
pub(crate) fn poly(coefs: &[f64], x: f64) -> (f64, f64) {
    let mut value = 0.0;
    let mut deriv = 0.0;
    let mut pow = 1.0; // x^(j-1)
    for (j, &c) in coefs.iter().enumerate() {
        deriv += (j + 1) as f64 * c * pow;
        pow *= x;
        value += c * pow;
    }
    (value, deriv)
}

/// Clamps `|d|` to at least [`DENOMINATOR_FLOOR`], keeping its sign (`+` at
/// exactly zero). The flag is false when the clamp is active, in which case
/// the denominator does not depend on its inputs.
#[inline]
pub(crate) fn guard(d: f64) -> (f64, bool) {
    if d.abs() >= DENOMINATOR_FLOOR {
        (d, true)
    } else if d < 0.0 {
        (-DENOMINATOR_FLOOR, false)
    } else {
        (DENOMINATOR_FLOOR, false)
    }
}

fn check_channels(x: &Tensor, c: usize, what: &str) -> Result<(usize, usize)> {
    let (n, cx, p) = x.feature_dims()?;
    if cx != c {
        return Err(Error::config(format!(
            "{what}: feature shape {:?} has {cx} channels, parameters have {c}",
            x.shape()
        )));
    }
    Ok((n, p))
}

/// First-stage harmonization: per-sample, per-channel standardization over
/// all spatial positions.
pub fn harmonize(x: &Tensor, eps: f64) -> Result<(Tensor, InstanceStats)> {
    let (n, c, p) = x.feature_dims()?;
    if !(eps > 0.0) {
        return Err(Error::config(format!("eps must be positive, got {eps}")));
    }
    let mut out = Vec::with_capacity(x.numel());
    let mut mu = Vec::with_capacity(n * c);
    let mut sigma = Vec::with_capacity(n * c);
    for (plane_idx, plane) in x.data().chunks(p).enumerate() {
        if plane.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite feature at (sample {}, channel {})",
                plane_idx / c,
                plane_idx % c
            )));
        }
        let m = plane.iter().sum::<f64>() / p as f64;
        let var = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / p as f64;
        let s = (var + eps).sqrt();
        out.extend(plane.iter().map(|v| (v - m) / s));
        mu.push(m);
        sigma.push(s);
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        InstanceStats { mu: Tensor::from_parts(vec![n, c], mu), sigma: Tensor::from_parts(vec![n, c], sigma) },
    ))
}

/// Gradient of [`harmonize`] w.r.t. `x`, given upstream gradients on `xhat`
/// and (optionally) on the emitted statistics.
///
/// `dL/dx = (g - mean(g) - xhat * mean(g * xhat)) / sigma + g_mu / P + g_sigma * xhat / P`
pub fn harmonize_backward(
    xhat: &Tensor,
    stats: &InstanceStats,
    g_xhat: &Tensor,
    g_mu: Option<&Tensor>,
    g_sigma: Option<&Tensor>,
) -> Tensor {
    let p: usize = xhat.shape()[2..].iter().product();
    let inv_p = 1.0 / p as f64;
    let mut out = Vec::with_capacity(xhat.numel());
    for (k, (xh, g)) in xhat.data().chunks(p).zip(g_xhat.data().chunks(p)).enumerate() {
        let s = stats.sigma.data()[k];
        let mean_g = g.iter().sum::<f64>() * inv_p;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() * inv_p;
        let gm = g_mu.map_or(0.0, |t| t.data()[k]) * inv_p;
        let gs = g_sigma.map_or(0.0, |t| t.data()[k]) * inv_p;
        out.extend(xh.iter().zip(g).map(|(&xh, &gv)| (gv - mean_g - xh * mean_gx) / s + gm + gs * xh));
    }
    Tensor::from_parts(xhat.shape().to_vec(), out)
}

pub fn affine(xhat: &Tensor, params: &HarmonyParams) -> Result<Tensor> {
    params.validate()?;
    affine_with(xhat, params.coefs())
}

pub(crate) fn affine_with(xhat: &Tensor, k: Coefs<'_>) -> Result<Tensor> {
    let c = k.w.len();
    let (_, p) = check_channels(xhat, c, "affine")?;
    let mut out = Vec::with_capacity(xhat.numel());
    for (plane_idx, plane) in xhat.data().chunks(p).enumerate() {
        let ch = plane_idx % c;
        let (w, b, lam) = (k.w[ch], k.b[ch], k.row(k.lambda, ch));
        out.extend(plane.iter().map(|&x| w * x + b + poly(lam, x).0));
    }
    Ok(Tensor::from_parts(xhat.shape().to_vec(), out))
}

#[derive(Clone, Debug)]
pub struct AffineGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
    pub lambda: Option<Tensor>,
}

pub fn affine_backward(xhat: &Tensor, params: &HarmonyParams, grad: &Tensor) -> AffineGrads {
    affine_backward_with(xhat, params.coefs(), grad)
}

pub(crate) fn affine_backward_with(xhat: &Tensor, k: Coefs<'_>, grad: &Tensor) -> AffineGrads {
    let (c, j) = (k.w.len(), k.j_poly);
    let p: usize = xhat.shape()[2..].iter().product();
    let mut gx = Vec::with_capacity(xhat.numel());
    let mut gw = vec![0.0; c];
    let mut gb = vec![0.0; c];
    let mut gl = vec![0.0; c * j];
    for (plane_idx, (xs, gs)) in xhat.data().chunks(p).zip(grad.data().chunks(p)).enumerate() {
        let ch = plane_idx % c;
        let (w, lam) = (k.w[ch], k.row(k.lambda, ch));
        let glc = &mut gl[ch * j..(ch + 1) * j];
        for (&x, &g) in xs.iter().zip(gs) {
            gx.push(g * (w + poly(lam, x).1));
            gw[ch] += g * x;
            gb[ch] += g;
            let mut pow = 1.0;
            for gl_j in glc.iter_mut() {
                pow *= x;
                *gl_j += g * pow;
            }
        }
    }
    AffineGrads {
        x: Tensor::from_parts(xhat.shape().to_vec(), gx),
        w: Tensor::from_parts(vec![c], gw),
        b: Tensor::from_parts(vec![c], gb),
        lambda: (j > 0).then(|| Tensor::from_parts(vec![c, j], gl)),
    }
}

fn check_stats(x: &Tensor, stats: &InstanceStats, c: usize) -> Result<usize> {
    let (n, p) = check_channels(x, c, "restore")?;
    if stats.mu.shape() != [n, c] || stats.sigma.shape() != [n, c] {
        return Err(shape_mismatch("restore statistics vs feature (batch, channel)", stats.mu.shape(), &[n, c]));
    }
    Ok(p)
}

/// Second-stage restoration with the statistics captured by [`harmonize`].
pub fn restore(xt: &Tensor, params: &HarmonyParams, stats: &InstanceStats) -> Result<Tensor> {
    params.validate()?;
    restore_with(xt, params.coefs(), stats)
}

pub(crate) fn restore_with(xt: &Tensor, k: Coefs<'_>, stats: &InstanceStats) -> Result<Tensor> {
    let c = k.w.len();
    let p = check_stats(xt, stats, c)?;
    let mut out = Vec::with_capacity(xt.numel());
    for (plane_idx, plane) in xt.data().chunks(p).enumerate() {
        let ch = plane_idx % c;
        let (s, m) = (stats.sigma.data()[plane_idx], stats.mu.data()[plane_idx]);
        let (w, b) = (k.w[ch], k.b[ch]);
        let (gam, del) = (k.row(k.gamma, ch), k.row(k.delta, ch));
        out.extend(plane.iter().map(|&x| {
            let num = x - b - poly(gam, x).0;
            let (den, _) = guard(w + k.eps + poly(del, x).0);
            s * num / den + m
        }));
    }
    Ok(Tensor::from_parts(xt.shape().to_vec(), out))
}

#[derive(Clone, Debug)]
pub struct RestoreGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
    pub gamma: Option<Tensor>,
    pub delta: Option<Tensor>,
    pub mu: Tensor,
    pub sigma: Tensor,
}

pub fn restore_backward(xt: &Tensor, params: &HarmonyParams, stats: &InstanceStats, grad: &Tensor) -> RestoreGrads {
    restore_backward_with(xt, params.coefs(), stats, grad)
}

pub(crate) fn restore_backward_with(xt: &Tensor, k: Coefs<'_>, stats: &InstanceStats, grad: &Tensor) -> RestoreGrads {
    let (c, j) = (k.w.len(), k.j_poly);
    let p: usize = xt.shape()[2..].iter().product();
    let nc = stats.mu.numel();
    let mut gx = Vec::with_capacity(xt.numel());
    let (mut gw, mut gb) = (vec![0.0; c], vec![0.0; c]);
    let (mut gg, mut gd) = (vec![0.0; c * j], vec![0.0; c * j]);
    let (mut gmu, mut gsig) = (vec![0.0; nc], vec![0.0; nc]);
    for (plane_idx, (xs, gs)) in xt.data().chunks(p).zip(grad.data().chunks(p)).enumerate() {
        let ch = plane_idx % c;
        let s = stats.sigma.data()[plane_idx];
        let (w, b) = (k.w[ch], k.b[ch]);
        let (gam, del) = (k.row(k.gamma, ch), k.row(k.delta, ch));
        let (ggc, gdc) = (&mut gg[ch * j..(ch + 1) * j], &mut gd[ch * j..(ch + 1) * j]);
        for (&x, &g) in xs.iter().zip(gs) {
            let (pg, dpg) = poly(gam, x);
            let (pd, dpd) = poly(del, x);
            let num = x - b - pg;
            let (den, live) = guard(w + k.eps + pd);
            let live = if live { 1.0 } else { 0.0 };
            let q = num / den;
            gmu[plane_idx] += g;
            gsig[plane_idx] += g * q;
            let gs_den = g * s / den;
            // d num / d x = 1 - P_gamma'(x),  d den / d x = P_delta'(x)
            gx.push(gs_den * ((1.0 - dpg) - live * q * dpd));
            gb[ch] -= gs_den;
            gw[ch] -= live * gs_den * q;
            let mut pow = 1.0;
            for (gg_j, gd_j) in ggc.iter_mut().zip(gdc.iter_mut()) {
                pow *= x;
                *gg_j -= gs_den * pow;
                *gd_j -= live * gs_den * q * pow;
            }
        }
    }
    let n = stats.mu.dim(0);
    RestoreGrads {
        x: Tensor::from_parts(xt.shape().to_vec(), gx),
        w: Tensor::from_parts(vec![c], gw),
        b: Tensor::from_parts(vec![c], gb),
        gamma: (j > 0).then(|| Tensor::from_parts(vec![c, j], gg)),
        delta: (j > 0).then(|| Tensor::from_parts(vec![c, j], gd)),
        mu: Tensor::from_parts(vec![n, c], gmu),
        sigma: Tensor::from_parts(vec![n, c], gsig),
    }
}

/// Gradients of the whole harmonize -> affine -> restore stack.
#[derive(Clone, Debug)]
pub struct HarmonyGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
    pub lambda: Option<Tensor>,
    pub gamma: Option<Tensor>,
    pub delta: Option<Tensor>,
}

/// Saved forward state of the full stack applied to one tensor.
#[derive(Clone, Debug)]
pub struct HarmonyForward {
    pub xhat: Tensor,
    pub stats: InstanceStats,
    pub xtilde: Tensor,
    pub output: Tensor,
}

pub fn harmony_forward(x: &Tensor, params: &HarmonyParams) -> Result<HarmonyForward> {
    params.validate()?;
    let (xhat, stats) = harmonize(x, params.eps)?;
    let xtilde = affine(&xhat, params)?;
    let output = restore(&xtilde, params, &stats)?;
    Ok(HarmonyForward { xhat, stats, xtilde, output })
}

/// Chains the three VJPs, including the restoration's dependence on the
/// statistics (and through them on `x`).
pub fn harmony_backward(saved: &HarmonyForward, params: &HarmonyParams, grad: &Tensor) -> HarmonyGrads {
    let r = restore_backward(&saved.xtilde, params, &saved.stats, grad);
    let a = affine_backward(&saved.xhat, params, &r.x);
    let gx = harmonize_backward(&saved.xhat, &saved.stats, &a.x, Some(&r.mu), Some(&r.sigma));
    let mut w = a.w;
    w.add_assign(&r.w);
    let mut b = a.b;
    b.add_assign(&r.b);
    HarmonyGrads { x: gx, w, b, lambda: a.lambda, gamma: r.gamma, delta: r.delta }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmony::DEFAULT_EPS;

    fn scalar5(v: f64) -> Tensor {
        Tensor::new(&[1, 1, 1, 1, 1], vec![v]).unwrap()
    }

    fn params_1ch(w: f64, b: f64, j: usize, lam: &[f64], gam: &[f64], del: &[f64], eps: f64) -> HarmonyParams {
        let mut p = HarmonyParams::identity(1, j, eps).unwrap();
        p.w = Tensor::new(&[1], vec![w]).unwrap();
        p.b = Tensor::new(&[1], vec![b]).unwrap();
        if j > 0 {
            p.lambda = Some(Tensor::new(&[1, j], lam.to_vec()).unwrap());
            p.gamma = Some(Tensor::new(&[1, j], gam.to_vec()).unwrap());
            p.delta = Some(Tensor::new(&[1, j], del.to_vec()).unwrap());
        }
        p
    }

    #[test]
    fn poly_value_and_derivative() {
        let (v, d) = poly(&[1.0, 2.0, 3.0], 2.0);
        assert_eq!(v, 2.0 + 8.0 + 24.0);
        assert_eq!(d, 1.0 + 8.0 + 36.0);
        assert_eq!(poly(&[], 5.0), (0.0, 0.0));
    }

    #[test]
    fn constant_volume_harmonizes_to_zero() {
        let x = Tensor::full(&[1, 2, 2, 2, 2], 7.5);
        let (xh, stats) = harmonize(&x, DEFAULT_EPS).unwrap();
        assert!(xh.data().iter().all(|&v| v == 0.0));
        assert!(stats.mu.data().iter().all(|&m| m == 7.5));
        assert!(stats.sigma.data().iter().all(|&s| (s - DEFAULT_EPS.sqrt()).abs() < 1e-18));
    }

    #[test]
    fn hand_computed_harmonization() {
        // (x - 2.5) / sqrt(1.25)
        let x = Tensor::new(&[1, 1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (xh, _) = harmonize(&x, 1e-5).unwrap();
        for (v, e) in xh.data().iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
            assert!((v - e).abs() < 1e-3);
        }
    }

    #[test]
    fn non_finite_input_names_sample_and_channel() {
        let mut x = Tensor::zeros(&[2, 3, 1, 1, 2]);
        x.set(&[1, 2, 0, 0, 1], f64::NAN);
        let err = harmonize(&x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        assert!(err.to_string().contains("sample 1, channel 2"), "{err}");
    }

    #[test]
    fn affine_examples() {
        let p = params_1ch(2.0, 1.0, 1, &[0.5], &[0.0], &[0.0], 1e-5);
        assert_eq!(affine(&scalar5(1.0), &p).unwrap().item(), 3.5);
        let p = params_1ch(1.0, 0.0, 2, &[0.0, 0.25], &[0.0, 0.0], &[0.0, 0.0], 1e-5);
        assert_eq!(affine(&scalar5(2.0), &p).unwrap().item(), 3.0);
        let p = HarmonyParams::identity(1, 3, 1e-5).unwrap();
        let x = Tensor::from_fn(&[1, 1, 2, 2, 2], |i| i as f64 * 0.3 - 1.0);
        assert_eq!(affine(&x, &p).unwrap(), x);
    }

    #[test]
    fn affine_channel_mismatch() {
        let p = HarmonyParams::identity(2, 1, 1e-5).unwrap();
        assert!(matches!(affine(&Tensor::zeros(&[1, 3, 1, 1, 1]), &p), Err(Error::Config(_))));
    }

    #[test]
    fn restore_examples() {
        let stats = |m: f64, s: f64| InstanceStats { mu: Tensor::full(&[1, 1], m), sigma: Tensor::full(&[1, 1], s) };
        // eps -> 0 limit approximated by a tiny eps: (3.5 - 1) / 2
        let p = params_1ch(2.0, 1.0, 1, &[0.0], &[0.0], &[0.0], 1e-300);
        assert!((restore(&scalar5(3.5), &p, &stats(0.0, 1.0)).unwrap().item() - 1.25).abs() < 1e-12);
        // 2 * (1 - 0.1) / (1 + 1e-5 + 0.1) + 3
        let p = params_1ch(1.0, 0.0, 1, &[0.0], &[0.1], &[0.1], 1e-5);
        assert!((restore(&scalar5(1.0), &p, &stats(3.0, 2.0)).unwrap().item() - 4.63635).abs() < 1e-4);
    }

    #[test]
    fn restore_shape_mismatch() {
        let p = HarmonyParams::identity(1, 1, 1e-5).unwrap();
        let stats = InstanceStats { mu: Tensor::zeros(&[2, 1]), sigma: Tensor::ones(&[2, 1]) };
        assert!(matches!(restore(&Tensor::zeros(&[1, 1, 2, 2, 2]), &p, &stats), Err(Error::Config(_))));
    }

    #[test]
    fn guard_keeps_sign() {
        assert_eq!(guard(0.5), (0.5, true));
        assert_eq!(guard(1e-4), (DENOMINATOR_FLOOR, false));
        assert_eq!(guard(-1e-4), (-DENOMINATOR_FLOOR, false));
        assert_eq!(guard(0.0), (DENOMINATOR_FLOOR, false));
    }

    #[test]
    fn constant_input_round_trip_and_finite_gradient() {
        let x = Tensor::full(&[1, 2, 2, 2, 2], -4.0);
        let p = HarmonyParams::identity(2, 2, DEFAULT_EPS).unwrap();
        let fwd = harmony_forward(&x, &p).unwrap();
        assert!(fwd.output.max_abs_diff(&x) < 1e-4);
        let g = harmony_backward(&fwd, &p, &Tensor::ones(x.shape()));
        assert!(g.x.all_finite() && g.w.all_finite() && g.gamma.unwrap().all_finite());
    }
}

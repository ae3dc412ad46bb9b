//! Central finite-difference checks of recorded backward maps.

pub mod suite;

use rand::{seq::index, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many elements per input (sampled without
    /// replacement); `None` checks all of them.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: DEFAULT_STEP, tol: 1e-4, max_elements: None, seed: 0 }
    }
}

impl GradCheckOptions {
    pub fn tol(self, tol: f64) -> Self {
        Self { tol, ..self }
    }

    pub fn sampled(self, n: usize) -> Self {
        Self { max_elements: Some(n), ..self }
    }
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub input: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub tol: f64,
    pub max_rel_err: f64,
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|c| c.passed)
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the tape's gradients of `sum(r * f(inputs))` (with a fixed random
/// projection `r`) against central differences `(L(x+h) - L(x-h)) / 2h`.
pub fn grad_check<F>(op: &str, f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let proj = Tensor::from_fn(tape.value(out).shape(), |_| rng.random_range(-1.0..1.0));
    let loss = tape.weighted_sum(out, &proj)?;
    let grads = tape.backward(loss)?;

    let eval = |point: &[Tensor]| -> Result<f64> {
        let mut t = GradTape::new();
        let vs: Vec<Var> = point.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).dot(&proj))
    };

    let mut report = GradCheckReport { op: op.to_string(), tol: opts.tol, max_rel_err: 0.0, inputs: Vec::new() };
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        if !analytic.all_finite() {
            return Err(Error::Numerical(format!("{op}: non-finite analytic gradient for input {k}")));
        }
        let elements: Vec<usize> = match opts.max_elements {
            Some(m) if m < x.numel() => {
                let mut idx = index::sample(&mut rng, x.numel(), m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..x.numel()).collect(),
        };
        let mut point = inputs.to_vec();
        let mut worst = 0.0f64;
        for &e in &elements {
            let orig = x.data()[e];
            point[k].data_mut()[e] = orig + opts.step;
            let up = eval(&point)?;
            point[k].data_mut()[e] = orig - opts.step;
            let down = eval(&point)?;
            point[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic.data()[e], numeric));
        }
        report.max_rel_err = report.max_rel_err.max(worst);
        report.inputs.push(InputCheck { input: k, checked: elements.len(), max_rel_err: worst, passed: worst < opts.tol });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_linear_op() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let r = grad_check("3x", |t, v| Ok(t.scale(v[0], 3.0)), &[x], &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_err < 1e-10, "{r:?}");
    }

    #[test]
    fn softmax_random_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(&[8], |_| rng.random_range(-2.0..2.0));
        let r = grad_check("softmax", |t, v| Ok(t.softmax(v[0])), &[x], &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn wrong_backward_is_caught() {
        let x = Tensor::from_fn(&[4], |i| 0.3 + i as f64);
        let r = grad_check(
            "bad",
            |t, v| {
                let y = crate::ops::scale(t.value(v[0]), 2.0);
                Ok(t.push1(&[v[0]], y, Box::new(|ctx| vec![Some(crate::ops::scale(ctx.grad(0), 2.5))])))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn non_finite_analytic_is_hard_failure() {
        let x = Tensor::scalar(1.0);
        let err = grad_check(
            "nan-op",
            |t, v| {
                let y = t.value(v[0]).clone();
                Ok(t.push1(&[v[0]], y, Box::new(|_| vec![Some(Tensor::scalar(f64::NAN))])))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("nan-op"));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}

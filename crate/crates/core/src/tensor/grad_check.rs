//! Central-difference gradient checking.
//!
//! Runs the analytic backward pass once, then probes selected input
//! coordinates with a symmetric difference quotient. Intended to be used
//! with `f64` tensors: in single precision the difference quotient drowns
//! in roundoff and the comparison is meaningless.

use super::{no_grad, Tensor};
use crate::Result;
use rand::Rng;

/// Which input coordinates to probe.
pub enum Probe {
    /// Every coordinate — affordable only for small inputs.
    All,
    /// `n` coordinates drawn without replacement using the given seed.
    Sample(usize, u64),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all probed coordinates.
    pub max_rel_err: f64,
    /// Flat index where it occurred.
    pub worst_index: usize,
    /// Analytic and numeric gradient at that index.
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Check `d f / d x` at `x0` for a scalar-valued differentiable function.
///
/// The step is `6e-6 * max(1, |x_i|)` (near the optimum `eps^(1/3)` for
/// central differences in `f64`); the relative error denominator is floored
/// at `1e-3` so that coordinates where both gradients are essentially zero
/// do not amplify roundoff into spurious failures.
pub fn grad_check(
    f: &dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
    shape: &[usize],
    x0: &[f64],
    probe: Probe,
) -> Result<GradCheckReport> {
    let x = Tensor::<f64>::from_vec(shape, x0.to_vec(), true);
    let y = f(&x)?;
    y.backward()?;
    let analytic = x.grad();

    let indices: Vec<usize> = match probe {
        Probe::All => (0..x0.len()).collect(),
        Probe::Sample(n, seed) => {
            let mut rng = crate::rng::stream_rng(seed, 0x67ad, 0);
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < n.min(x0.len()) {
                picked.insert(rng.gen_range(0..x0.len()));
            }
            picked.into_iter().collect()
        }
    };

    let eval = |xs: Vec<f64>| -> Result<f64> {
        no_grad(|| {
            let xt = Tensor::<f64>::from_vec(shape, xs, false);
            Ok(f(&xt)?.item())
        })
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: indices.len(),
    };
    for &i in &indices {
        let h = 6e-6 * x0[i].abs().max(1.0);
        let mut plus = x0.to_vec();
        plus[i] += h;
        let mut minus = x0.to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // y = sum(x^2) but pretend backward is that of sum(x): build the
        // broken op inline.
        let broken = |x: &Tensor<f64>| -> Result<Tensor<f64>> {
            let data: Vec<f64> = x.data().iter().map(|&v| v * v).collect();
            let p = x.clone();
            let out = Tensor::from_op(
                vec![x.numel()],
                data,
                vec![x.clone()],
                Box::new(move |g: &[f64]| p.accumulate_grad(g)), // wrong: misses 2x factor
            );
            Ok(out.sum())
        };
        let rep = grad_check(&broken, &[3], &[0.5, 1.5, -2.0], Probe::All).unwrap();
        assert!(rep.max_rel_err > 0.1, "broken adjoint not detected: {rep:?}");
    }

    #[test]
    fn passes_a_correct_gradient() {
        let ok = |x: &Tensor<f64>| Ok(x.mul(x)?.sum());
        let rep = grad_check(&ok, &[3], &[0.5, 1.5, -2.0], Probe::All).unwrap();
        assert!(rep.passes(1e-8), "correct gradient flagged: {rep:?}");
    }
}

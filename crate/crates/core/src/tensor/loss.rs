//! Scalar losses: numerically-stable binary cross-entropy on logits, and
//! mean absolute error.

use super::Tensor;
use crate::{Error, Result, Scalar};

/// Mean binary cross-entropy over raw logits.
///
/// Uses the stable form `max(x, 0) - x*t + ln(1 + exp(-|x|))`, so large
/// positive or negative logits never produce non-finite values. Targets
/// must lie in `[0, 1]`.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, targets: &[T]) -> Result<Tensor<T>> {
    if logits.numel() != targets.len() {
        return Err(Error::shape(format!(
            "bce_with_logits: {} logits vs {} targets",
            logits.numel(),
            targets.len()
        )));
    }
    if targets.iter().any(|&t| t < T::zero() || t > T::one()) {
        return Err(Error::numeric(
            "bce_with_logits: targets must lie in [0, 1]".to_string(),
        ));
    }
    let n = targets.len();
    let inv = T::one() / T::from_f64(n as f64);
    let mut acc = T::zero();
    {
        let x = logits.data();
        for (&xi, &ti) in x.iter().zip(targets) {
            let max0 = if xi > T::zero() { xi } else { T::zero() };
            acc += max0 - xi * ti + (T::one() + (-xi.abs()).exp()).ln();
        }
    }
    let p = logits.clone();
    let t = targets.to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![acc * inv],
        vec![logits.clone()],
        Box::new(move |g: &[T]| {
            if p.requires_grad() {
                // d/dx = sigmoid(x) - t, averaged.
                let x = p.data();
                let scale = g[0] * inv;
                let d: Vec<T> = x
                    .iter()
                    .zip(&t)
                    .map(|(&xi, &ti)| {
                        let s = if xi >= T::zero() {
                            T::one() / (T::one() + (-xi).exp())
                        } else {
                            let e = xi.exp();
                            e / (T::one() + e)
                        };
                        (s - ti) * scale
                    })
                    .collect();
                p.accumulate_grad(&d);
            }
        }),
    ))
}

/// Mean absolute error between two same-shape tensors. The subgradient of
/// `|x|` at 0 is taken as 0; gradients flow to both operands when tracked.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "l1_loss: shapes {:?} and {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.numel();
    let inv = T::one() / T::from_f64(n as f64);
    let mut acc = T::zero();
    {
        let a = pred.data();
        let b = target.data();
        for (&ai, &bi) in a.iter().zip(b.iter()) {
            acc += (ai - bi).abs();
        }
    }
    let (pa, pb) = (pred.clone(), target.clone());
    Ok(Tensor::from_op(
        vec![1],
        vec![acc * inv],
        vec![pred.clone(), target.clone()],
        Box::new(move |g: &[T]| {
            let scale = g[0] * inv;
            let sign = |d: T| {
                if d > T::zero() {
                    T::one()
                } else if d < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            };
            if pa.requires_grad() {
                let a = pa.data();
                let b = pb.data();
                let d: Vec<T> = a.iter().zip(b.iter()).map(|(&x, &y)| sign(x - y) * scale).collect();
                drop(a);
                pa.accumulate_grad(&d);
            }
            if pb.requires_grad() {
                let a = pa.data();
                let b = pb.data();
                let d: Vec<T> = a.iter().zip(b.iter()).map(|(&x, &y)| -sign(x - y) * scale).collect();
                drop(a);
                pb.accumulate_grad(&d);
            }
        }),
    ))
}

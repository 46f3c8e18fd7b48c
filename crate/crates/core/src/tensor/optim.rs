//! Optimizers: SGD with momentum and Adam, with named parameters, per-group
//! learning-rate scaling, and exportable state so interrupted runs resume
//! exactly.

use super::Tensor;
use crate::{Error, Result, Scalar};

/// A set of named parameters sharing one learning-rate multiplier.
#[derive(Clone)]
pub struct ParamGroup<T: Scalar> {
    pub params: Vec<(String, Tensor<T>)>,
    /// Multiplier on the optimizer's base learning rate.
    pub lr_scale: T,
}

impl<T: Scalar> ParamGroup<T> {
    pub fn new(params: Vec<(String, Tensor<T>)>) -> Self {
        ParamGroup { params, lr_scale: T::one() }
    }
    pub fn with_lr_scale(params: Vec<(String, Tensor<T>)>, lr_scale: T) -> Self {
        ParamGroup { params, lr_scale }
    }
}

pub trait Optimizer<T: Scalar> {
    /// Apply one update from the accumulated gradients. Errors if any
    /// managed parameter has never received a gradient since the last
    /// reset — that is a wiring bug, not a valid zero step.
    fn step(&mut self) -> Result<()>;

    /// Reset gradients of all managed parameters.
    fn zero_grad(&self);

    /// Named state buffers (momentum/moment estimates) for checkpointing.
    fn state(&self) -> Vec<(String, Vec<T>)>;

    /// Restore state buffers produced by [`state`](Optimizer::state).
    fn load_state(&mut self, state: &[(String, Vec<T>)]) -> Result<()>;
}

fn take_grads<T: Scalar>(groups: &[ParamGroup<T>]) -> Result<Vec<Vec<T>>> {
    let mut grads = Vec::new();
    for g in groups {
        for (name, p) in &g.params {
            if !p.has_grad() {
                return Err(Error::Training(format!(
                    "optimizer step: parameter '{name}' has no gradient (backward not run or \
                     parameter detached from the loss)"
                )));
            }
            grads.push(p.grad());
        }
    }
    Ok(grads)
}

// ── SGD ─────────────────────────────────────────────────────────────────

/// Stochastic gradient descent with classical momentum:
/// `v <- momentum * v + g; w <- w - lr * v`.
pub struct Sgd<T: Scalar> {
    groups: Vec<ParamGroup<T>>,
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(groups: Vec<ParamGroup<T>>, lr: T, momentum: T) -> Self {
        let velocity = groups
            .iter()
            .flat_map(|g| g.params.iter().map(|(_, p)| vec![T::zero(); p.numel()]))
            .collect();
        Sgd { groups, lr, momentum, velocity }
    }
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self) -> Result<()> {
        let grads = take_grads(&self.groups)?;
        let mut i = 0;
        for group in &self.groups {
            let lr = self.lr * group.lr_scale;
            for (_, p) in &group.params {
                let v = &mut self.velocity[i];
                let g = &grads[i];
                let mut new = p.to_vec();
                for ((w, vi), &gi) in new.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = self.momentum * *vi + gi;
                    *w -= lr * *vi;
                }
                p.set_data(&new);
                i += 1;
            }
        }
        Ok(())
    }

    fn zero_grad(&self) {
        for g in &self.groups {
            for (_, p) in &g.params {
                p.zero_grad();
            }
        }
    }

    fn state(&self) -> Vec<(String, Vec<T>)> {
        self.groups
            .iter()
            .flat_map(|g| g.params.iter())
            .zip(&self.velocity)
            .map(|((name, _), v)| (format!("opt.sgd.v.{name}"), v.clone()))
            .collect()
    }

    fn load_state(&mut self, state: &[(String, Vec<T>)]) -> Result<()> {
        let map: std::collections::HashMap<&str, &Vec<T>> =
            state.iter().map(|(k, v)| (k.as_str(), v)).collect();
        for (i, (name, _)) in self.groups.iter().flat_map(|g| g.params.iter()).enumerate() {
            let key = format!("opt.sgd.v.{name}");
            let v = map
                .get(key.as_str())
                .ok_or_else(|| Error::format(format!("optimizer state missing '{key}'")))?;
            if v.len() != self.velocity[i].len() {
                return Err(Error::format(format!("optimizer state '{key}' has wrong length")));
            }
            self.velocity[i] = (*v).clone();
        }
        Ok(())
    }
}

// ── Adam ────────────────────────────────────────────────────────────────

/// Adam with bias-corrected first/second moment estimates.
pub struct Adam<T: Scalar> {
    groups: Vec<ParamGroup<T>>,
    pub lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(groups: Vec<ParamGroup<T>>, lr: T) -> Self {
        let zeros: Vec<Vec<T>> = groups
            .iter()
            .flat_map(|g| g.params.iter().map(|(_, p)| vec![T::zero(); p.numel()]))
            .collect();
        Adam {
            groups,
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self) -> Result<()> {
        let grads = take_grads(&self.groups)?;
        self.t += 1;
        let t = T::from_f64(self.t as f64);
        let bc1 = T::one() - self.beta1.powf(t);
        let bc2 = T::one() - self.beta2.powf(t);
        let mut i = 0;
        for group in &self.groups {
            let lr = self.lr * group.lr_scale;
            for (_, p) in &group.params {
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                let g = &grads[i];
                let mut new = p.to_vec();
                for (((w, mi), vi), &gi) in new.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                    *mi = self.beta1 * *mi + (T::one() - self.beta1) * gi;
                    *vi = self.beta2 * *vi + (T::one() - self.beta2) * gi * gi;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + self.eps);
                }
                p.set_data(&new);
                i += 1;
            }
        }
        Ok(())
    }

    fn zero_grad(&self) {
        for g in &self.groups {
            for (_, p) in &g.params {
                p.zero_grad();
            }
        }
    }

    fn state(&self) -> Vec<(String, Vec<T>)> {
        let mut out: Vec<(String, Vec<T>)> = Vec::new();
        for (((name, _), m), v) in self
            .groups
            .iter()
            .flat_map(|g| g.params.iter())
            .zip(&self.m)
            .zip(&self.v)
        {
            out.push((format!("opt.adam.m.{name}"), m.clone()));
            out.push((format!("opt.adam.v.{name}"), v.clone()));
        }
        out.push(("opt.adam.t".to_string(), vec![T::from_f64(self.t as f64)]));
        out
    }

    fn load_state(&mut self, state: &[(String, Vec<T>)]) -> Result<()> {
        let map: std::collections::HashMap<&str, &Vec<T>> =
            state.iter().map(|(k, v)| (k.as_str(), v)).collect();
        for (i, (name, _)) in self.groups.iter().flat_map(|g| g.params.iter()).enumerate() {
            for (prefix, store) in [("m", &mut self.m), ("v", &mut self.v)] {
                let key = format!("opt.adam.{prefix}.{name}");
                let v = map
                    .get(key.as_str())
                    .ok_or_else(|| Error::format(format!("optimizer state missing '{key}'")))?;
                if v.len() != store[i].len() {
                    return Err(Error::format(format!("optimizer state '{key}' has wrong length")));
                }
                store[i] = (*v).clone();
            }
        }
        let t = map
            .get("opt.adam.t")
            .ok_or_else(|| Error::format("optimizer state missing 'opt.adam.t'".to_string()))?;
        self.t = t[0].to_f64() as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_step(w: &Tensor<f64>) {
        // loss = w^2 -> grad = 2w
        let loss = w.mul(w).unwrap().sum();
        loss.backward().unwrap();
    }

    #[test]
    fn sgd_textbook_step() {
        // w = 1, loss = w^2, lr = 0.1 -> w' = 1 - 0.1 * 2 = 0.8
        let w = Tensor::<f64>::from_vec(&[1], vec![1.0], true);
        let mut opt = Sgd::new(vec![ParamGroup::new(vec![("w".into(), w.clone())])], 0.1, 0.0);
        quadratic_step(&w);
        opt.step().unwrap();
        assert!((w.data()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum_two_step_recurrence() {
        // g1 = 2w0 = 2, v1 = 2, w1 = 1 - 0.1*2 = 0.8
        // g2 = 2w1 = 1.6, v2 = 0.9*2 + 1.6 = 3.4, w2 = 0.8 - 0.34 = 0.46
        let w = Tensor::<f64>::from_vec(&[1], vec![1.0], true);
        let mut opt = Sgd::new(vec![ParamGroup::new(vec![("w".into(), w.clone())])], 0.1, 0.9);
        quadratic_step(&w);
        opt.step().unwrap();
        assert!((w.data()[0] - 0.8).abs() < 1e-12);
        opt.zero_grad();
        quadratic_step(&w);
        opt.step().unwrap();
        assert!((w.data()[0] - 0.46).abs() < 1e-12);
    }

    #[test]
    fn step_without_backward_names_parameter() {
        let w = Tensor::<f64>::from_vec(&[1], vec![1.0], true);
        let mut opt = Sgd::new(
            vec![ParamGroup::new(vec![("encoder.w".into(), w.clone())])],
            0.1,
            0.0,
        );
        let err = opt.step().unwrap_err();
        assert!(err.to_string().contains("encoder.w"));
    }

    #[test]
    fn adam_first_step_is_signlike() {
        // After one step m_hat = g, v_hat = g^2, so the update is close to
        // lr * sign(g).
        let w = Tensor::<f64>::from_vec(&[1], vec![1.0], true);
        let mut opt = Adam::new(vec![ParamGroup::new(vec![("w".into(), w.clone())])], 0.01);
        quadratic_step(&w);
        opt.step().unwrap();
        assert!((w.data()[0] - (1.0 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn lr_scale_applies_per_group() {
        let a = Tensor::<f64>::from_vec(&[1], vec![1.0], true);
        let b = Tensor::<f64>::from_vec(&[1], vec![1.0], true);
        let mut opt = Sgd::new(
            vec![
                ParamGroup::new(vec![("a".into(), a.clone())]),
                ParamGroup::with_lr_scale(vec![("b".into(), b.clone())], 0.1),
            ],
            0.1,
            0.0,
        );
        let loss = a.mul(&a).unwrap().sum().add(&b.mul(&b).unwrap().sum()).unwrap();
        loss.backward().unwrap();
        opt.step().unwrap();
        assert!((a.data()[0] - 0.8).abs() < 1e-12);
        assert!((b.data()[0] - 0.98).abs() < 1e-12);
    }

    #[test]
    fn state_roundtrip_resumes_identically() {
        let run = |resume: bool| -> f64 {
            let w = Tensor::<f64>::from_vec(&[1], vec![1.0], true);
            let mut opt = Sgd::new(vec![ParamGroup::new(vec![("w".into(), w.clone())])], 0.05, 0.9);
            quadratic_step(&w);
            opt.step().unwrap();
            if resume {
                let state = opt.state();
                let data = w.to_vec();
                let w2 = Tensor::<f64>::from_vec(&[1], data, true);
                let mut opt2 =
                    Sgd::new(vec![ParamGroup::new(vec![("w".into(), w2.clone())])], 0.05, 0.9);
                opt2.load_state(&state).unwrap();
                quadratic_step(&w2);
                opt2.step().unwrap();
                return w2.data()[0];
            }
            opt.zero_grad();
            quadratic_step(&w);
            opt.step().unwrap();
            let out = w.data()[0];
            out
        };
        assert_eq!(run(false).to_bits(), run(true).to_bits());
    }
}

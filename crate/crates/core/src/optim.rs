//! Optimizers over gradient-carrying tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_slots(slots: &mut Vec<Vec<f64>>, params: &[&mut Tensor]) -> Result<()> {
    if slots.is_empty() {
        *slots = params.iter().map(|p| vec![0.0; p.numel()]).collect();
    }
    if slots.len() != params.len() || slots.iter().zip(params).any(|(s, p)| s.len() != p.numel()) {
        return Err(Error::contract("optimizer state does not match the parameter list"));
    }
    Ok(())
}

/// Adam with coupled (L2-style) weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Adam { lr, betas, eps: 1e-8, weight_decay, step: 0, m: vec![], v: vec![] }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using each tensor's accumulated gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        check_slots(&mut self.m, params)?;
        check_slots(&mut self.v, params)?;
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] + self.weight_decay * *x;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                *x -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and coupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buf: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, buf: vec![] }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        check_slots(&mut self.buf, params)?;
        for (p, b) in params.iter_mut().zip(&mut self.buf) {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] + self.weight_decay * *x;
                b[i] = self.momentum * b[i] + gi;
                *x -= self.lr * b[i];
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `base` at epoch 0 to zero at `total`.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (epoch.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let norm = params.iter().filter_map(|p| p.grad()).flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad() {
                let scaled: Vec<f64> = g.iter().map(|x| x * scale).collect();
                p.zero_grad();
                p.accumulate_grad(&scaled).expect("same length");
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(data: &[f64], grad: &[f64]) -> Tensor {
        let mut t = Tensor::from_slice(data).with_grad();
        t.accumulate_grad(grad).unwrap();
        t
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut t = with_grad(&[1.0, -2.0], &[0.3, -5.0]);
        let mut opt = Adam::new(0.1, (0.5, 0.999), 0.0);
        opt.step(&mut [&mut t]).unwrap();
        assert!((t.data()[0] - 0.9).abs() < 1e-6);
        assert!((t.data()[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut t = with_grad(&[0.0], &[1.0]);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        opt.step(&mut [&mut t]).unwrap();
        opt.step(&mut [&mut t]).unwrap();
        assert!((t.data()[0] + 0.1 + 0.19).abs() < 1e-12);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.025, 0, 50), 0.025);
        assert!(cosine_lr(0.025, 50, 50) <= 1e-8 * 0.025);
        assert!((cosine_lr(1.0, 25, 50) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut a = with_grad(&[0.0; 2], &[30.0, 40.0]);
        let mut b = with_grad(&[0.0], &[0.0]);
        let before = clip_grad_norm(&mut [&mut a, &mut b], 5.0);
        assert_eq!(before, 50.0);
        let after: f64 = a.grad().unwrap().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((after - 5.0).abs() < 1e-9);
        assert_eq!(clip_grad_norm(&mut [&mut a], 10.0), after);
    }
}

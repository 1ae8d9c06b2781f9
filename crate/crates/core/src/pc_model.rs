//! Linear-unit model of a partially connected mixed op.
//!
//! `E = ½ (t − Σ_l Σ_n β_l w_{l,n} s_n x_n)²` with independent masks
//! `s_n ~ Bernoulli(p_n)`. The ensemble model replaces `s_n` by `p_n`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixed::beta_of;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearUnitModel {
    /// `[L][N]` op weights.
    pub w: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub p: Vec<f64>,
    pub x: Vec<f64>,
    pub t: f64,
}

/// Gradients of `E` with respect to `w`, `β` and `α`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGrads {
    pub w: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl LinearUnitModel {
    /// Random model: `w, x ~ U(-1, 1)`, `α ~ U(-1, 1)`, `p ~ U(0.2, 0.8)`.
    pub fn random(ops: usize, neurons: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let w = (0..ops).map(|_| (0..neurons).map(|_| u(-1.0, 1.0)).collect()).collect();
        let alpha = (0..ops).map(|_| u(-1.0, 1.0)).collect();
        let p = (0..neurons).map(|_| u(0.2, 0.8)).collect();
        let x = (0..neurons).map(|_| u(-1.0, 1.0)).collect();
        let t = u(-1.0, 1.0);
        LinearUnitModel { w, alpha, p, x, t }
    }

    pub fn ops(&self) -> usize {
        self.w.len()
    }

    pub fn neurons(&self) -> usize {
        self.x.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.neurons();
        if self.ops() == 0 || n == 0 {
            return Err(Error::contract("linear-unit model needs at least one op and one neuron"));
        }
        if self.alpha.len() != self.ops() || self.p.len() != n || self.w.iter().any(|r| r.len() != n) {
            return Err(Error::dim("linear_unit_model", "w must be [L][N], α [L], p and x [N]"));
        }
        if self.p.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract("mask probabilities must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn beta(&self) -> Vec<f64> {
        beta_of(&self.alpha)
    }

    /// Gradients for a given channel gate vector (a 0/1 mask or `p` itself).
    pub fn grads(&self, s: &[f64]) -> ModelGrads {
        let beta = self.beta();
        let y: f64 = self
            .w
            .iter()
            .zip(&beta)
            .map(|(row, b)| b * row.iter().zip(s).zip(&self.x).map(|((w, s), x)| w * s * x).sum::<f64>())
            .sum();
        let r = self.t - y;
        let w = beta
            .iter()
            .map(|b| s.iter().zip(&self.x).map(|(s, x)| -r * b * s * x).collect())
            .collect();
        let dbeta: Vec<f64> = self
            .w
            .iter()
            .map(|row| -r * row.iter().zip(s).zip(&self.x).map(|((w, s), x)| w * s * x).sum::<f64>())
            .collect();
        let alpha = chain_softmax(&beta, &dbeta);
        ModelGrads { w, beta: dbeta, alpha }
    }

    /// Ensemble gradients plus the mask-variance terms.
    pub fn expected_grads(&self) -> ModelGrads {
        let beta = self.beta();
        let ens = self.grads(&self.p);
        let var: Vec<f64> = self.p.iter().zip(&self.x).map(|(p, x)| p * (1.0 - p) * x * x).collect();
        // Σ_z β_z w_{z,n}
        let mixed: Vec<f64> = (0..self.neurons()).map(|n| self.w.iter().zip(&beta).map(|(row, b)| b * row[n]).sum()).collect();
        let w = ens
            .w
            .iter()
            .zip(&beta)
            .map(|(row, b)| row.iter().enumerate().map(|(n, g)| g + b * mixed[n] * var[n]).collect())
            .collect();
        let dbeta: Vec<f64> = ens
            .beta
            .iter()
            .zip(&self.w)
            .map(|(g, row)| g + (0..self.neurons()).map(|n| row[n] * mixed[n] * var[n]).sum::<f64>())
            .collect();
        let alpha = chain_softmax(&beta, &dbeta);
        ModelGrads { w, beta: dbeta, alpha }
    }
}

/// `∂E/∂α_l = Σ_l' β_l' (δ_ll' − β_l) ∂E/∂β_l'`.
pub fn chain_softmax(beta: &[f64], dbeta: &[f64]) -> Vec<f64> {
    let dot: f64 = beta.iter().zip(dbeta).map(|(b, g)| b * g).sum();
    beta.iter().zip(dbeta).map(|(b, g)| b * (g - dot)).collect()
}

/// One compared quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectationRow {
    pub name: String,
    pub mc_mean: f64,
    pub std_err: f64,
    pub analytic: f64,
    pub z: f64,
}

/// Monte-Carlo means with standard errors against the closed forms, for
/// every `w_{l,n}`, `β_l` and `α_l`.
pub fn expectation_check(model: &LinearUnitModel, samples: usize, seed: u64) -> Result<Vec<ExpectationRow>> {
    model.validate()?;
    if samples < 2 {
        return Err(Error::contract("Monte-Carlo check needs at least two samples"));
    }
    let (l, n) = (model.ops(), model.neurons());
    let count = l * n + 2 * l;
    // Welford running mean and sum of squared deviations.
    let mut mean = vec![0.0; count];
    let mut m2 = vec![0.0; count];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = vec![0.0; n];
    for draw in 1..=samples {
        for (si, &p) in s.iter_mut().zip(&model.p) {
            *si = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
        }
        let g = model.grads(&s);
        for (i, v) in flatten(&g).enumerate() {
            let d = v - mean[i];
            mean[i] += d / draw as f64;
            m2[i] += d * (v - mean[i]);
        }
    }
    let exact = model.expected_grads();
    let k = samples as f64;
    let rows = names(l, n)
        .into_iter()
        .zip(flatten(&exact))
        .enumerate()
        .map(|(i, (name, analytic))| {
            let std_err = (m2[i] / (k - 1.0) / k).sqrt();
            let diff = mean[i] - analytic;
            let z = if std_err > 0.0 {
                diff / std_err
            } else if diff.abs() <= 1e-12 * analytic.abs().max(1.0) {
                0.0
            } else {
                f64::INFINITY
            };
            ExpectationRow { name, mc_mean: mean[i], std_err, analytic, z }
        })
        .collect();
    Ok(rows)
}

fn flatten(g: &ModelGrads) -> impl Iterator<Item = f64> + '_ {
    g.w.iter().flatten().chain(&g.beta).chain(&g.alpha).copied()
}

fn names(l: usize, n: usize) -> Vec<String> {
    let mut out: Vec<String> = (0..l).flat_map(|i| (0..n).map(move |j| format!("dw[{i},{j}]"))).collect();
    out.extend((0..l).map(|i| format!("dbeta[{i}]")));
    out.extend((0..l).map(|i| format!("dalpha[{i}]")));
    out
}

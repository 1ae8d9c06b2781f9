//! Auxiliary losses on the architecture weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{erf, erf_derivative, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    None,
    L2,
    Lse,
    /// Smooth activation on every α entry.
    Sa,
}

/// Per-epoch regularization coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaSchedule {
    /// `epoch / divisor`.
    Linear { divisor: f64 },
    Constant { value: f64 },
    /// Zero during warm-up, then `(epoch - warm_up) / divisor`.
    AfterWarmup { divisor: f64 },
}

impl LambdaSchedule {
    pub fn value(&self, epoch: usize, warm_up: usize) -> Result<f64> {
        let linear = |d: f64, e: usize| {
            if d > 0.0 && d.is_finite() {
                Ok(e as f64 / d)
            } else {
                Err(Error::contract(format!("lambda divisor must be positive, got {d}")))
            }
        };
        match *self {
            LambdaSchedule::Linear { divisor } => linear(divisor, epoch),
            LambdaSchedule::AfterWarmup { divisor } => linear(divisor, epoch.saturating_sub(warm_up)),
            LambdaSchedule::Constant { value } if value >= 0.0 => Ok(value),
            LambdaSchedule::Constant { value } => Err(Error::contract(format!("negative lambda {value}"))),
        }
    }
}

fn default_nu() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSpec {
    pub kind: RegKind,
    pub lambda: LambdaSchedule,
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub flops_weight: f64,
}

impl RegularizerSpec {
    pub fn none() -> Self {
        RegularizerSpec { kind: RegKind::None, lambda: LambdaSchedule::Constant { value: 0.0 }, nu: 1.0, mu: 0.0, flops_weight: 0.0 }
    }

    pub fn l2(lambda: f64) -> Self {
        RegularizerSpec { kind: RegKind::L2, lambda: LambdaSchedule::Constant { value: lambda }, ..Self::none() }
    }

    pub fn lse(lambda: f64) -> Self {
        RegularizerSpec { kind: RegKind::Lse, lambda: LambdaSchedule::Constant { value: lambda }, ..Self::none() }
    }

    /// Smooth activation with `λ_e = epoch / 5`.
    pub fn sa(nu: f64, mu: f64) -> Self {
        RegularizerSpec { kind: RegKind::Sa, lambda: LambdaSchedule::Linear { divisor: 5.0 }, nu, mu, flops_weight: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.nu) {
            return Err(Error::contract(format!("nu must lie in [0, 1], got {}", self.nu)));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::contract(format!("mu must be nonnegative, got {}", self.mu)));
        }
        if !(self.flops_weight >= 0.0) {
            return Err(Error::contract(format!("flops weight must be nonnegative, got {}", self.flops_weight)));
        }
        self.lambda.value(0, 0).map(|_| ())
    }

    /// Adam weight decay on α used with this regularizer by default.
    pub fn default_alpha_weight_decay(&self) -> f64 {
        if self.kind == RegKind::Sa {
            0.0
        } else {
            1e-3
        }
    }

    /// Regularization term for one step, or `None` when it is identically zero.
    /// `alphas` and `betas` are per-table `[edges, ops]` vars.
    pub fn loss(&self, tape: &mut Tape, alphas: &[Var], betas: &[Var], lambda: f64, costs: &[f64]) -> Result<Option<Var>> {
        let mut terms = Vec::new();
        if lambda != 0.0 {
            match self.kind {
                RegKind::None => {}
                RegKind::L2 => terms.push(l2_loss(tape, alphas, lambda)?),
                RegKind::Lse => terms.push(lse_loss(tape, alphas, lambda)?),
                RegKind::Sa => terms.push(sa_loss(tape, alphas, lambda, self.nu, self.mu)?),
            }
        }
        if self.flops_weight > 0.0 {
            let f = flops_loss(tape, betas, costs)?;
            terms.push(tape.mul_scalar(f, self.flops_weight));
        }
        if terms.is_empty() {
            Ok(None)
        } else {
            tape.add_n(&terms).map(Some)
        }
    }
}

/// Per-entry smooth activation `[(1+ν)a + (1-ν)a·erf(μ(1-ν)a)] / 2`.
pub fn sa_entry(a: f64, nu: f64, mu: f64) -> f64 {
    0.5 * ((1.0 + nu) * a + (1.0 - nu) * a * erf(mu * (1.0 - nu) * a))
}

/// Derivative of [`sa_entry`] with respect to `a`.
pub fn sa_entry_slope(a: f64, nu: f64, mu: f64) -> f64 {
    let k = mu * (1.0 - nu);
    0.5 * ((1.0 + nu) + (1.0 - nu) * (erf(k * a) + a * k * erf_derivative(k * a)))
}

fn table_dims(tape: &Tape, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match *tape.shape(v) {
        [e, o] if e > 0 && o > 0 => Ok((e, o)),
        ref s => Err(Error::dim(op, format!("expected an [edges, ops] table, got {s:?}"))),
    }
}

/// `Σ_tables λ/(N_o·N_e) Σ sa_entry(α)`.
pub fn sa_loss(tape: &mut Tape, alphas: &[Var], lambda: f64, nu: f64, mu: f64) -> Result<Var> {
    let mut parts = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let (e, o) = table_dims(tape, a, "sa_loss")?;
        let k = mu * (1.0 - nu);
        let lin = tape.mul_scalar(a, 1.0 + nu);
        let per_entry = if k == 0.0 {
            lin
        } else {
            let s = tape.mul_scalar(a, k);
            let g = tape.erf(s);
            let ag = tape.mul(a, g)?;
            let bent = tape.mul_scalar(ag, 1.0 - nu);
            tape.add(lin, bent)?
        };
        let s = tape.sum(per_entry);
        parts.push(tape.mul_scalar(s, 0.5 * lambda / (e * o) as f64));
    }
    tape.add_n(&parts)
}

/// `λ · Σ_edges log Σ_ops exp(α)`.
pub fn lse_loss(tape: &mut Tape, alphas: &[Var], lambda: f64) -> Result<Var> {
    let mut parts = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let (e, _) = table_dims(tape, a, "lse_loss")?;
        let m = tape.value(a).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let shifted = tape.add_scalar(a, -m);
        let ex = tape.exp(shifted);
        let z = tape.sum_axis(ex, 1)?;
        let lz = tape.log(z);
        let s = tape.sum(lz);
        let s = tape.add_scalar(s, m * e as f64);
        parts.push(tape.mul_scalar(s, lambda));
    }
    tape.add_n(&parts)
}

/// `λ · Σ α²`.
pub fn l2_loss(tape: &mut Tape, alphas: &[Var], lambda: f64) -> Result<Var> {
    let mut parts = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let sq = tape.mul(a, a)?;
        let s = tape.sum(sq);
        parts.push(tape.mul_scalar(s, lambda));
    }
    tape.add_n(&parts)
}

/// `Σ_sites Σ_i β_i c_i / Σ c` over every row of every β table.
pub fn flops_loss(tape: &mut Tape, betas: &[Var], costs: &[f64]) -> Result<Var> {
    let total: f64 = costs.iter().sum();
    if costs.iter().any(|c| !(*c >= 0.0)) || total <= 0.0 {
        return Err(Error::contract("FLOPs costs must be nonnegative with a positive sum"));
    }
    let mut parts = Vec::with_capacity(betas.len());
    for &b in betas {
        let (e, o) = table_dims(tape, b, "flops_loss")?;
        if o != costs.len() {
            return Err(Error::dim("flops_loss", format!("{} costs for {o} ops", costs.len())));
        }
        let tiled: Vec<f64> = (0..e).flat_map(|_| costs.iter().map(|c| c / total)).collect();
        let c = tape.constant(&[e, o], tiled)?;
        let w = tape.mul(b, c)?;
        parts.push(tape.sum(w));
    }
    tape.add_n(&parts)
}

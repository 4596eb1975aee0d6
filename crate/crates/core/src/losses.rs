//! Gaussian NLL, MSE and the Normal-Inverse-Gamma evidential loss, as plain
//! functions and as tape builders for training.
//!
//! All losses sum over the 9 pose coordinates of an image (MSE averages) and
//! average over the batch.

use std::f64::consts::PI;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::net::tape::{softplus, Tape, Var};
use crate::net::{Forward, Method};

/// Default weight of the evidential regularizer.
pub const NIG_LAMBDA: f64 = 0.01;

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{what}: [{}] vs [{}]",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `Σ [½ log σ² + (μ − p)² / (2σ²)]` over coordinates.
pub fn gnll(mu: &[f64], var: &[f64], p: &[f64]) -> Result<f64> {
    same_len(mu, var, "gnll")?;
    same_len(mu, p, "gnll")?;
    if let Some(v) = var.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidVariance(format!(
            "variance {v} must be positive and finite"
        )));
    }
    Ok(mu
        .iter()
        .zip(var)
        .zip(p)
        .map(|((m, v), t)| 0.5 * v.ln() + (m - t) * (m - t) / (2.0 * v))
        .sum())
}

/// Mean of squared coordinate differences.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len(pred, target, "mse")?;
    if pred.is_empty() {
        return Err(Error::InvalidInput("mse of empty vectors".into()));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Normal-Inverse-Gamma output for 9 coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NigParams {
    pub gamma: [f64; 9],
    pub nu: [f64; 9],
    pub alpha: [f64; 9],
    pub beta: [f64; 9],
}

impl NigParams {
    /// Maps raw evidence `[ν | α | β]` (27 values) through softplus, adding
    /// 1 to `α`.
    pub fn from_raw(gamma: [f64; 9], raw: &[f64]) -> Self {
        Self {
            gamma,
            nu: std::array::from_fn(|i| softplus(raw[i])),
            alpha: std::array::from_fn(|i| softplus(raw[9 + i]) + 1.0),
            beta: std::array::from_fn(|i| softplus(raw[18 + i])),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..9 {
            let (nu, a, b) = (self.nu[i], self.alpha[i], self.beta[i]);
            if !(nu > 0.0 && a > 1.0 && b > 0.0)
                || !(nu.is_finite() && a.is_finite() && b.is_finite())
            {
                return Err(Error::InvalidEvidence(format!(
                    "coordinate {i}: need ν > 0, α > 1, β > 0, got ({nu}, {a}, {b})"
                )));
            }
        }
        Ok(())
    }

    /// `β(1 + ν) / (ν(α − 1))`.
    pub fn predictive_variance(&self, i: usize) -> f64 {
        self.beta[i] * (1.0 + self.nu[i]) / (self.nu[i] * (self.alpha[i] - 1.0))
    }
}

/// Evidential NLL plus `λ·|p − γ|·(2ν + α)`, summed over coordinates.
pub fn nig_loss(h: &NigParams, p: &[f64; 9], lambda: f64) -> Result<f64> {
    h.validate()?;
    let mut total = 0.0;
    for i in 0..9 {
        let (g, nu, a, b) = (h.gamma[i], h.nu[i], h.alpha[i], h.beta[i]);
        let r = p[i] - g;
        let omega = 2.0 * b * (1.0 + nu);
        let nll = 0.5 * (PI / nu).ln() - a * omega.ln()
            + (a + 0.5) * (nu * r * r + omega).ln()
            + ln_gamma(a)
            - ln_gamma(a + 0.5);
        total += nll + lambda * r.abs() * (2.0 * nu + a);
    }
    Ok(total)
}

fn batch_of(tape: &Tape, v: Var) -> f64 {
    tape.shape(v)[0] as f64
}

/// Batch-mean Gaussian NLL of `[B, 9]` tensors.
pub fn gnll_on(tape: &mut Tape, mu: Var, var: Var, target: Var) -> Result<Var> {
    let r = tape.sub(mu, target)?;
    let r2 = tape.square(r);
    let log_var = tape.log(var);
    let a = tape.scale(log_var, 0.5);
    let q = tape.div(r2, var)?;
    let b = tape.scale(q, 0.5);
    let per = tape.add(a, b)?;
    let s = tape.sum(per);
    Ok(tape.scale(s, 1.0 / batch_of(tape, mu)))
}

pub fn mse_on(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let r = tape.sub(pred, target)?;
    let r2 = tape.square(r);
    Ok(tape.mean(r2))
}

/// Batch-mean evidential loss; `raw` is the `[B, 27]` evidence output.
pub fn nig_on(tape: &mut Tape, gamma: Var, raw: Var, target: Var, lambda: f64) -> Result<Var> {
    let nu_raw = tape.cols(raw, 0, 9)?;
    let alpha_raw = tape.cols(raw, 9, 9)?;
    let beta_raw = tape.cols(raw, 18, 9)?;
    let nu = tape.softplus(nu_raw);
    let alpha = tape.softplus(alpha_raw);
    let alpha = tape.add_scalar(alpha, 1.0);
    let beta = tape.softplus(beta_raw);

    let log_nu = tape.log(nu);
    let t1 = tape.scale(log_nu, -0.5);
    let t1 = tape.add_scalar(t1, 0.5 * PI.ln());
    let one_nu = tape.add_scalar(nu, 1.0);
    let omega = tape.mul(beta, one_nu)?;
    let omega = tape.scale(omega, 2.0);
    let log_omega = tape.log(omega);
    let t2 = tape.mul(alpha, log_omega)?;
    let r = tape.sub(target, gamma)?;
    let r2 = tape.square(r);
    let nr2 = tape.mul(nu, r2)?;
    let inner = tape.add(nr2, omega)?;
    let log_inner = tape.log(inner);
    let a_half = tape.add_scalar(alpha, 0.5);
    let t3 = tape.mul(a_half, log_inner)?;
    let lg_a = tape.ln_gamma(alpha);
    let lg_ah = tape.ln_gamma(a_half);
    let t4 = tape.sub(lg_a, lg_ah)?;
    let nll = tape.sub(t1, t2)?;
    let nll = tape.add(nll, t3)?;
    let nll = tape.add(nll, t4)?;

    let abs_r = tape.abs(r);
    let two_nu = tape.scale(nu, 2.0);
    let ev = tape.add(two_nu, alpha)?;
    let reg = tape.mul(abs_r, ev)?;
    let reg = tape.scale(reg, lambda);
    let per = tape.add(nll, reg)?;
    let s = tape.sum(per);
    Ok(tape.scale(s, 1.0 / batch_of(tape, gamma)))
}

/// The training objective of `method` given a forward pass and `[B, 9]`
/// targets in the network's normalized units. QAERTS averages head poses
/// and head variances first, then applies one Gaussian NLL.
pub fn method_loss(method: Method, tape: &mut Tape, fwd: &Forward, target: Var) -> Result<Var> {
    method_loss_with(method, tape, fwd, target, false)
}

/// As [`method_loss`]. With `unit_variance` set, Gaussian methods score
/// their (fused) mean under σ² = 1 and the variance heads get no gradient.
pub fn method_loss_with(
    method: Method,
    tape: &mut Tape,
    fwd: &Forward,
    target: Var,
    unit_variance: bool,
) -> Result<Var> {
    let direct = fwd
        .heads
        .iter()
        .find(|h| h.kind == crate::net::HeadKind::Direct)
        .ok_or_else(|| Error::InvalidConfig("model has no direct head".into()))?;
    let missing_var = || Error::InvalidConfig(format!("{method} model lacks variance heads"));
    match method {
        Method::PlaneInVol => mse_on(tape, direct.pose, target),
        Method::Mve | Method::Mcd | Method::De => {
            let var = match unit_variance {
                true => unit(tape, direct.pose)?,
                false => direct.var.ok_or_else(missing_var)?,
            };
            gnll_on(tape, direct.pose, var, target)
        }
        Method::Qaerts => {
            let poses: Vec<Var> = fwd.heads.iter().map(|h| h.pose).collect();
            let vars = fwd
                .heads
                .iter()
                .map(|h| h.var.ok_or_else(missing_var))
                .collect::<Result<Vec<Var>>>()?;
            let mu = tape.mean_of(&poses)?;
            let var = match unit_variance {
                true => unit(tape, mu)?,
                false => tape.mean_of(&vars)?,
            };
            gnll_on(tape, mu, var, target)
        }
        Method::Edl => {
            let raw = fwd
                .evidence
                .ok_or_else(|| Error::InvalidConfig("edl model lacks an evidence head".into()))?;
            nig_on(tape, direct.pose, raw, target, NIG_LAMBDA)
        }
    }
}

fn unit(tape: &mut Tape, like: Var) -> Result<Var> {
    let shape = tape.shape(like).to_vec();
    tape.constant(vec![1.0; shape.iter().product()], &shape)
}

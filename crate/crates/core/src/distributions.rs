//! Reparameterised samplers and closed-form divergences.
//!
//! Weibull samples are drawn through the inverse CDF so gradients reach the
//! scale; the Weibull → Gamma divergence is the specialisation of the
//! generalised-gamma divergence with `(a, d, p) = (λ, k, k)` against
//! `(1/β, α, 1)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::special::{digamma, gamma, ln_gamma, EULER_GAMMA};
use crate::tensor::{Tape, Tensor, Var};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `Weibull(k, λ)`: shape `k` is a fixed hyperparameter, the scale lives on
/// the tape.
#[derive(Clone, Copy, Debug)]
pub struct WeibullParams {
    pub k: f64,
    pub lambda: Var,
}

/// `Gamma(α, β)` with rate `β`.
#[derive(Clone, Copy, Debug)]
pub struct GammaParams {
    pub alpha: Var,
    pub beta: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct DiagGaussianParams {
    pub mu: Var,
    pub sigma: Var,
}

/// Stacy's three-parameter generalised gamma: scale `a`, shapes `d` and `p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenGamma {
    pub a: f64,
    pub d: f64,
    pub p: f64,
}

impl GenGamma {
    pub fn weibull(k: f64, lambda: f64) -> Self {
        Self { a: lambda, d: k, p: k }
    }

    pub fn gamma(alpha: f64, beta: f64) -> Self {
        Self { a: 1.0 / beta, d: alpha, p: 1.0 }
    }

    fn validate(&self) -> Result<()> {
        if [self.a, self.d, self.p].iter().all(|&v| v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::domain("kl_generalized_gamma", format!("non-positive parameter in {self:?}")))
        }
    }
}

fn check_positive(op: &'static str, name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(op, format!("{name} = {v} must be positive")))
    }
}

fn check_tensor_positive(tape: &Tape, op: &'static str, name: &str, v: Var) -> Result<()> {
    if tape.value(v).data().iter().all(|&x| x > 0.0 && x.is_finite()) {
        Ok(())
    } else {
        Err(Error::domain(op, format!("{name} must be positive everywhere")))
    }
}

/// `(−ln(1 − ε))^{1/k}`, the unit-scale Weibull draw for uniform `ε`.
pub fn weibull_unit_draw(k: f64, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::domain("weibull_rsample", format!("noise {eps} outside (0, 1)")));
    }
    Ok((-(-eps).ln_1p()).powf(1.0 / k))
}

/// `λ (−ln(1 − ε))^{1/k}` elementwise. `ε` is a constant; gradients reach `λ`.
pub fn weibull_rsample(tape: &mut Tape, q: &WeibullParams, eps: &Tensor) -> Result<Var> {
    check_positive("weibull_rsample", "k", q.k)?;
    if eps.shape() != tape.shape(q.lambda) {
        return Err(Error::shape(
            "weibull_rsample",
            format!("noise {:?} vs scale {:?}", eps.shape(), tape.shape(q.lambda)),
        ));
    }
    let draws = eps
        .data()
        .iter()
        .map(|&e| weibull_unit_draw(q.k, e))
        .collect::<Result<Vec<_>>>()?;
    let factor = tape.constant(Tensor::new(eps.shape().to_vec(), draws)?);
    tape.mul(q.lambda, factor)
}

/// Mean `λΓ(1+1/k)` and variance `λ²[Γ(1+2/k) − Γ(1+1/k)²]` of `Weibull(k, λ)`.
pub fn weibull_moments(k: f64, lambda: f64) -> (f64, f64) {
    let g1 = gamma(1.0 + 1.0 / k);
    let g2 = gamma(1.0 + 2.0 / k);
    (lambda * g1, lambda * lambda * (g2 - g1 * g1))
}

/// Closed-form `KL(Weibull(k, λ) ‖ Gamma(α, β))`.
///
/// Returned unclamped; round-off can push it a hair below zero.
pub fn kl_weibull_gamma(k: f64, lambda: f64, alpha: f64, beta: f64) -> Result<f64> {
    const OP: &str = "kl_weibull_gamma";
    check_positive(OP, "k", k)?;
    check_positive(OP, "lambda", lambda)?;
    check_positive(OP, "alpha", alpha)?;
    check_positive(OP, "beta", beta)?;
    Ok(EULER_GAMMA * alpha / k - alpha * lambda.ln() + k.ln() + beta * lambda * gamma(1.0 + 1.0 / k)
        - EULER_GAMMA
        - 1.0
        - alpha * beta.ln()
        + ln_gamma(alpha))
}

/// Elementwise Weibull → Gamma divergence on the tape. `λ` and `α` must
/// have the same shape; the result is differentiable in both.
pub fn kl_weibull_gamma_var(tape: &mut Tape, q: &WeibullParams, p: &GammaParams) -> Result<Var> {
    const OP: &str = "kl_weibull_gamma";
    check_positive(OP, "k", q.k)?;
    check_positive(OP, "beta", p.beta)?;
    check_tensor_positive(tape, OP, "lambda", q.lambda)?;
    check_tensor_positive(tape, OP, "alpha", p.alpha)?;
    if tape.shape(q.lambda) != tape.shape(p.alpha) {
        return Err(Error::shape(OP, "lambda and alpha shapes differ"));
    }
    let (k, beta) = (q.k, p.beta);
    let log_lambda = tape.log(q.lambda)?;
    let alpha_log_lambda = tape.mul(p.alpha, log_lambda)?;
    // α (γ/k − ln β) − α ln λ
    let alpha_lin = tape.scale(p.alpha, EULER_GAMMA / k - beta.ln())?;
    let mut acc = tape.sub(alpha_lin, alpha_log_lambda)?;
    let lam_term = tape.scale(q.lambda, beta * gamma(1.0 + 1.0 / k))?;
    acc = tape.add(acc, lam_term)?;
    let lg = tape.lgamma(p.alpha)?;
    acc = tape.add(acc, lg)?;
    tape.add_scalar(acc, k.ln() - EULER_GAMMA - 1.0)
}

/// Closed-form divergence between two generalised gamma densities
/// `f(x | a, d, p) = p x^{d−1} exp(−(x/a)^p) / (a^d Γ(d/p))`.
pub fn kl_generalized_gamma(f1: GenGamma, f2: GenGamma) -> Result<f64> {
    f1.validate()?;
    f2.validate()?;
    let c1 = f1.d / f1.p;
    let log_norm = f1.p.ln() - f2.p.ln() + f2.d * f2.a.ln() - f1.d * f1.a.ln() + ln_gamma(f2.d / f2.p)
        - ln_gamma(c1);
    let log_moment = (digamma(c1) / f1.p + f1.a.ln()) * (f1.d - f2.d);
    let cross = (ln_gamma((f1.d + f2.p) / f1.p) - ln_gamma(c1) + f2.p * (f1.a / f2.a).ln()).exp();
    Ok(log_norm + log_moment + cross - c1)
}

/// `μ + ε σ`, with gradients to both `μ` and `σ`.
pub fn gaussian_rsample(tape: &mut Tape, q: &DiagGaussianParams, eps: &Tensor) -> Result<Var> {
    if eps.shape() != tape.shape(q.mu) || tape.shape(q.mu) != tape.shape(q.sigma) {
        return Err(Error::shape("gaussian_rsample", "mu, sigma and noise must share a shape"));
    }
    let e = tape.constant(eps.clone());
    let scaled = tape.mul(q.sigma, e)?;
    tape.add(q.mu, scaled)
}

/// `Σ_d KL(N(μ_q, σ_q²) ‖ N(μ_p, σ_p²))` as a single value.
pub fn kl_diag_gaussian_var(tape: &mut Tape, q: &DiagGaussianParams, p: &DiagGaussianParams) -> Result<Var> {
    let shape = tape.shape(q.mu).to_vec();
    for v in [q.sigma, p.mu, p.sigma] {
        if tape.shape(v) != shape.as_slice() {
            return Err(Error::shape("kl_diag_gaussian", "parameter shapes differ"));
        }
    }
    let ratio = tape.div(p.sigma, q.sigma)?;
    let log_ratio = tape.log(ratio)?;
    let dmu = tape.sub(q.mu, p.mu)?;
    let dmu2 = tape.mul(dmu, dmu)?;
    let sq2 = tape.mul(q.sigma, q.sigma)?;
    let num = tape.add(sq2, dmu2)?;
    let sp2 = tape.mul(p.sigma, p.sigma)?;
    let den = tape.scale(sp2, 2.0)?;
    let quad = tape.div(num, den)?;
    let per_dim = tape.add(log_ratio, quad)?;
    let per_dim = tape.add_scalar(per_dim, -0.5)?;
    tape.sum(per_dim)
}

/// Scalar form of [`kl_diag_gaussian_var`].
pub fn kl_diag_gaussian(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> f64 {
    (0..mu_q.len())
        .map(|d| {
            (sigma_p[d] / sigma_q[d]).ln()
                + (sigma_q[d] * sigma_q[d] + (mu_q[d] - mu_p[d]).powi(2)) / (2.0 * sigma_p[d] * sigma_p[d])
                - 0.5
        })
        .sum()
}

/// Per-row Gaussian log-density summed over columns: `[n×d] → [n×1]`.
pub fn gaussian_log_likelihood(tape: &mut Tape, y: Var, mu: Var, sigma: Var) -> Result<Var> {
    if tape.shape(y) != tape.shape(mu) || tape.shape(mu) != tape.shape(sigma) {
        return Err(Error::shape("gaussian_log_likelihood", "y, mu and sigma must share a shape"));
    }
    let resid = tape.sub(y, mu)?;
    let z = tape.div(resid, sigma)?;
    let z2 = tape.mul(z, z)?;
    let half_z2 = tape.scale(z2, -0.5)?;
    let log_sigma = tape.log(sigma)?;
    let elem = tape.sub(half_z2, log_sigma)?;
    let elem = tape.add_scalar(elem, -HALF_LN_2PI)?;
    tape.sum_cols(elem)
}

/// Scalar Gaussian log-density.
pub fn gaussian_log_density(y: f64, mu: f64, sigma: f64) -> f64 {
    let z = (y - mu) / sigma;
    -0.5 * (2.0 * PI).ln() - sigma.ln() - 0.5 * z * z
}

//! Samplers and log-densities used by the inference engines.
//!
//! The gamma distribution uses the shape/rate parameterization everywhere:
//! `Gamma(a, b)` has mean `a / b`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use statrs::function::gamma::{digamma, ln_gamma};

/// Shape/rate hyperparameters of a gamma prior over one cell's firing rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaHyper {
    pub a: f64,
    pub b: f64,
}

impl GammaHyper {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite() && b > 0.0 && b.is_finite()) {
            return Err(Error::domain(format!("gamma hyperparameters must be positive, got ({a}, {b})")));
        }
        Ok(Self { a, b })
    }

    pub fn mean(&self) -> f64 {
        self.a / self.b
    }
}

impl Default for GammaHyper {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0 }
    }
}

/// `ln Σ exp(x_i)`, with `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Uniform draw on the half-open interval `(0, 1]`.
pub(crate) fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} must be positive and finite, got {v}")))
    }
}

pub fn gamma_logpdf(x: f64, shape: f64, rate: f64) -> Result<f64> {
    check_positive("shape", shape)?;
    check_positive("rate", rate)?;
    check_positive("x", x)?;
    Ok(gamma_logpdf_unchecked(x, shape, rate))
}

pub(crate) fn gamma_logpdf_unchecked(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

pub fn gamma_sample<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    check_positive("shape", shape)?;
    check_positive("rate", rate)?;
    Ok(gamma_sample_unchecked(rng, shape, rate))
}

pub(crate) fn gamma_sample_unchecked<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    let x = log_gamma_sample(rng, shape) - rate.ln();
    // Keep draws strictly positive; tiny shapes can underflow exp().
    x.exp().max(f64::MIN_POSITIVE)
}

/// Log of a `Gamma(shape, 1)` draw, stable for very small shapes:
/// `G(a) = G(a + 1) · U^{1/a}`.
pub(crate) fn log_gamma_sample<R: Rng + ?Sized>(rng: &mut R, shape: f64) -> f64 {
    if shape < 1.0 {
        let g = Gamma::new(shape + 1.0, 1.0).expect("valid gamma").sample(rng);
        g.ln() + open_uniform(rng).ln() / shape
    } else {
        Gamma::new(shape, 1.0).expect("valid gamma").sample(rng).ln()
    }
}

pub fn dirichlet_sample<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(Error::domain("Dirichlet needs at least one concentration"));
    }
    for &a in alpha {
        check_positive("Dirichlet concentration", a)?;
    }
    Ok(dirichlet_sample_unchecked(rng, alpha))
}

/// Dirichlet draw computed in log space, so concentrations far below one
/// still produce a normalized vector.
pub(crate) fn dirichlet_sample_unchecked<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = alpha.iter().map(|&a| log_gamma_sample(rng, a)).collect();
    let lse = log_sum_exp(&logs);
    let mut out: Vec<f64> = logs.iter().map(|&l| (l - lse).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

pub fn dirichlet_logpdf(x: &[f64], alpha: &[f64]) -> Result<f64> {
    if x.len() != alpha.len() {
        return Err(Error::ShapeMismatch(format!(
            "Dirichlet point has {} entries, concentration has {}",
            x.len(),
            alpha.len()
        )));
    }
    for &a in alpha {
        check_positive("Dirichlet concentration", a)?;
    }
    let s: f64 = x.iter().sum();
    if x.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > 1e-9 {
        return Err(Error::domain("Dirichlet point is not on the simplex"));
    }
    Ok(dirichlet_logpdf_unchecked(x, alpha))
}

pub(crate) fn dirichlet_logpdf_unchecked(x: &[f64], alpha: &[f64]) -> f64 {
    let sum_a: f64 = alpha.iter().sum();
    let mut lp = ln_gamma(sum_a);
    for (&xi, &ai) in x.iter().zip(alpha) {
        lp -= ln_gamma(ai);
        if ai != 1.0 {
            lp += (ai - 1.0) * xi.ln();
        }
    }
    lp
}

pub fn poisson_logpmf(k: u64, rate: f64) -> Result<f64> {
    if !(rate >= 0.0) || !rate.is_finite() {
        return Err(Error::domain(format!("Poisson rate must be nonnegative, got {rate}")));
    }
    Ok(poisson_logpmf_unchecked(k, rate))
}

pub(crate) fn poisson_logpmf_unchecked(k: u64, rate: f64) -> f64 {
    if rate == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let kf = k as f64;
    kf * rate.ln() - rate - ln_gamma(kf + 1.0)
}

pub fn poisson_sample<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> Result<u64> {
    if !(rate >= 0.0) || !rate.is_finite() {
        return Err(Error::domain(format!("Poisson rate must be nonnegative, got {rate}")));
    }
    Ok(poisson_sample_unchecked(rng, rate))
}

pub(crate) fn poisson_sample_unchecked<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("valid Poisson").sample(rng) as u64
}

pub fn beta_sample<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> Result<f64> {
    check_positive("a", a)?;
    check_positive("b", b)?;
    Ok(beta_sample_unchecked(rng, a, b))
}

pub(crate) fn beta_sample_unchecked<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    let la = log_gamma_sample(rng, a);
    let lb = log_gamma_sample(rng, b);
    // x = 1 / (1 + exp(lb - la)), kept strictly inside (0, 1).
    let x = 1.0 / (1.0 + (lb - la).exp());
    x.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub fn categorical_sample<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> Result<usize> {
    if weights.is_empty() {
        return Err(Error::domain("categorical needs at least one weight"));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::domain("categorical weights must be nonnegative and finite"));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("categorical weights sum to {s}, expected 1")));
    }
    Ok(categorical_unnormalized(rng, weights, s))
}

/// Inverse-CDF draw from nonnegative weights with known total `total > 0`.
pub(crate) fn categorical_unnormalized<R: Rng + ?Sized>(rng: &mut R, weights: &[f64], total: f64) -> usize {
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Log pmf of the negative binomial with `p` the probability attached to
/// each counted event: `p(k) = Γ(k+r) / (k! Γ(r)) · (1-p)^r · p^k`.
///
/// A `Gamma(a, b)` mixture over a Poisson rate gives `r = a`, `p = 1/(1+b)`.
pub fn negbinom_logpmf(k: u64, r: f64, p: f64) -> Result<f64> {
    check_positive("r", r)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("negative binomial p must lie in (0, 1), got {p}")));
    }
    Ok(negbinom_logpmf_unchecked(k, r, p))
}

pub(crate) fn negbinom_logpmf_unchecked(k: u64, r: f64, p: f64) -> f64 {
    let kf = k as f64;
    ln_gamma(kf + r) - ln_gamma(r) - ln_gamma(kf + 1.0) + r * (-p).ln_1p() + kf * p.ln()
}

/// Negative binomial draw through its gamma-Poisson representation.
pub fn negbinom_sample<R: Rng + ?Sized>(rng: &mut R, r: f64, p: f64) -> Result<u64> {
    check_positive("r", r)?;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("negative binomial p must lie in (0, 1), got {p}")));
    }
    let rate = (1.0 - p) / p;
    let lambda = gamma_sample_unchecked(rng, r, rate);
    Ok(poisson_sample_unchecked(rng, lambda))
}

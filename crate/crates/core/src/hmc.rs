//! Hamiltonian Monte Carlo over per-cell gamma-rate hyperparameters, and the
//! empirical-Bayes alternative (negative-binomial maximum likelihood).
//!
//! The HMC target for cell `c` lives on `(ln a, ln b)` with a flat prior there:
//!
//! ```text
//! L(ln a, ln b) = Σ_i [a ln b - lnΓ(a) + (a-1) ln λ_i - b λ_i]
//! ```

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dist::{digamma, ln_gamma, GammaHyper};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcConfig {
    pub n_leapfrog: usize,
    pub step_size: f64,
    pub mass: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            n_leapfrog: 10,
            step_size: 0.08,
            mass: 1.0,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_leapfrog == 0 || !(self.step_size > 0.0) || !(self.mass > 0.0) {
            return Err(Error::Config(format!("invalid HMC settings {self:?}")));
        }
        Ok(())
    }
}

/// A differentiable log density.
pub trait HmcTarget {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], grad: &mut [f64]);
}

/// Conditional of one cell's `(ln a, ln b)` given its M firing rates.
#[derive(Debug, Clone)]
pub struct HyperTarget {
    n_rates: f64,
    sum_rates: f64,
    sum_log_rates: f64,
}

impl HyperTarget {
    pub fn new(rates: &[f64]) -> Result<Self> {
        if rates.is_empty() || rates.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(Error::domain("hyperparameter target needs positive finite rates"));
        }
        Ok(Self {
            n_rates: rates.len() as f64,
            sum_rates: rates.iter().sum(),
            sum_log_rates: rates.iter().map(|r| r.ln()).sum(),
        })
    }
}

impl HmcTarget for HyperTarget {
    fn dim(&self) -> usize {
        2
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let (a, b) = (x[0].exp(), x[1].exp());
        self.n_rates * (a * x[1] - ln_gamma(a)) + (a - 1.0) * self.sum_log_rates - b * self.sum_rates
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        let (a, b) = (x[0].exp(), x[1].exp());
        grad[0] = a * (self.n_rates * (x[1] - digamma(a)) + self.sum_log_rates);
        grad[1] = b * (self.n_rates * a / b - self.sum_rates);
    }
}

pub fn hyper_logpdf(pos: (f64, f64), rates: &[f64]) -> Result<f64> {
    Ok(HyperTarget::new(rates)?.log_density(&[pos.0, pos.1]))
}

/// `(∂L/∂ln a, ∂L/∂ln b)`.
pub fn hyper_grad(pos: (f64, f64), rates: &[f64]) -> Result<(f64, f64)> {
    let mut g = [0.0; 2];
    HyperTarget::new(rates)?.gradient(&[pos.0, pos.1], &mut g);
    Ok((g[0], g[1]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcOutcome {
    pub position: Vec<f64>,
    pub accepted: bool,
    /// `H(end) - H(start)`; `NaN` for a divergent trajectory.
    pub energy_error: f64,
}

/// Run `n_steps` leapfrog steps in place. Returns `false` if the trajectory
/// left the finite region.
pub fn leapfrog<T: HmcTarget + ?Sized>(target: &T, x: &mut [f64], p: &mut [f64], step: f64, n_steps: usize, mass: f64) -> bool {
    let mut g = vec![0.0; x.len()];
    target.gradient(x, &mut g);
    for _ in 0..n_steps {
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi += 0.5 * step * gi;
        }
        for (xi, pi) in x.iter_mut().zip(p.iter()) {
            *xi += step * pi / mass;
        }
        target.gradient(x, &mut g);
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi += 0.5 * step * gi;
        }
        if x.iter().chain(p.iter()).chain(g.iter()).any(|v| !v.is_finite()) {
            return false;
        }
    }
    true
}

fn hamiltonian<T: HmcTarget + ?Sized>(target: &T, x: &[f64], p: &[f64], mass: f64) -> f64 {
    -target.log_density(x) + p.iter().map(|v| v * v).sum::<f64>() / (2.0 * mass)
}

/// One HMC transition with a Metropolis correction. A divergent trajectory
/// is rejected and the start position kept.
pub fn hmc_step<R: Rng + ?Sized, T: HmcTarget + ?Sized>(rng: &mut R, target: &T, position: &[f64], config: &HmcConfig) -> HmcOutcome {
    let sd = config.mass.sqrt();
    let mut p: Vec<f64> = (0..position.len())
        .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    let h0 = hamiltonian(target, position, &p, config.mass);
    let mut x = position.to_vec();
    let finite = leapfrog(target, &mut x, &mut p, config.step_size, config.n_leapfrog, config.mass);
    let h1 = if finite {
        hamiltonian(target, &x, &p, config.mass)
    } else {
        f64::NAN
    };
    let energy_error = h1 - h0;
    let u: f64 = rng.random();
    let accepted = energy_error.is_finite() && u.ln() < -energy_error;
    HmcOutcome {
        position: if accepted { x } else { position.to_vec() },
        accepted,
        energy_error,
    }
}

/// Largest shape returned when the counts show no overdispersion.
pub const EB_MAX_SHAPE: f64 = 1e6;

/// Profile-likelihood score in `a` for the negative-binomial fit, with the
/// rate profiled out as `b = a / ȳ`:
/// `Σ_t [ψ(y_t + a) - ψ(a)] - T ln(1 + ȳ / a)`.
fn nb_profile_score(counts: &[u64], mean: f64, a: f64) -> f64 {
    let psi_a = digamma(a);
    let s: f64 = counts.iter().filter(|&&y| y > 0).map(|&y| digamma(y as f64 + a) - psi_a).sum();
    s - counts.len() as f64 * (mean / a).ln_1p()
}

/// Profile log-likelihood `Σ_t ln NB(y_t; a, 1/(1+b))` at `b = a / ȳ`.
pub fn nb_profile_loglik(counts: &[u64], a: f64) -> f64 {
    let t = counts.len() as f64;
    let total: f64 = counts.iter().map(|&y| y as f64).sum();
    let mean = total / t;
    let b = a / mean;
    let lg_a = ln_gamma(a);
    counts
        .iter()
        .map(|&y| ln_gamma(y as f64 + a) - lg_a - ln_gamma(y as f64 + 1.0))
        .sum::<f64>()
        + t * a * b.ln()
        - (t * a + total) * b.ln_1p()
}

/// Maximum-likelihood gamma hyperparameters from one cell's raw counts,
/// or `DegenerateData` for an all-zero row.
pub fn try_eb_fit(counts: &[u64]) -> Result<GammaHyper> {
    let total: u64 = counts.iter().sum();
    if counts.is_empty() || total == 0 {
        return Err(Error::DegenerateData("all-zero count row".into()));
    }
    let mean = total as f64 / counts.len() as f64;
    let score = |a: f64| nb_profile_score(counts, mean, a);
    let (mut lo, mut hi) = (1e-8f64.ln(), EB_MAX_SHAPE.ln());
    if score(hi.exp()) >= 0.0 {
        // No overdispersion: the likelihood keeps rising toward the Poisson limit.
        return GammaHyper::new(EB_MAX_SHAPE, EB_MAX_SHAPE / mean);
    }
    let mut a = hi.exp();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        a = mid.exp();
        let g = score(a);
        if g.abs() < 1e-8 || hi - lo < 1e-14 {
            break;
        }
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    GammaHyper::new(a, a / mean)
}

/// As [`try_eb_fit`], falling back to `(1, 1)` with a warning on all-zero rows.
pub fn eb_fit(counts: &[u64]) -> GammaHyper {
    match try_eb_fit(counts) {
        Ok(h) => h,
        Err(e) => {
            log::warn!("empirical Bayes fit failed ({e}); using Gamma(1, 1)");
            GammaHyper::default()
        }
    }
}

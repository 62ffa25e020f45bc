//! Mean-field variational Bayes for the HDP-HMM under the direct-assignment
//! truncation, and for the finite Bayesian HMM.
//!
//! The approximation is `q(S) q(Λ) q(π) q(P)` with a point estimate `β*` of
//! the global weights. For the HDP model every Dirichlet factor has `M + 1`
//! entries; the last one collects the mass of all states beyond the
//! truncation. The finite model uses `M` entries and a symmetric prior.
//!
//! The state factor is an HMM on the sub-normalized surrogate
//! `π̃ = exp E[ln π]`, `P̃ = exp E[ln P]`, `L̃ = exp E[ln p(y | Λ)]`. The ELBO
//! keeps the surrogate that produced the current `q(S)`, so it stays exact
//! after the other factors move:
//!
//! ```text
//! E_q[ln p(y, S | ·)] - E_q[ln q(S)] = ln Z_q + <E_q[stats], ln surrogate_now - ln surrogate_q>
//! ```
//!
//! The GEM density of `β*` written in stick fractions, `M ln γ + (γ-1) Σ ln(1-v_i)`,
//! telescopes to `M ln γ + (γ-1) ln β*_{M+1}`. It is part of both the `β*`
//! objective and the ELBO.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::CountMatrix;
use crate::dist::{categorical_sample, digamma, ln_gamma, log_sum_exp, GammaHyper};
use crate::error::{Error, Result};
use crate::hmc::eb_fit;
use crate::hmm::{expected_emission_logliks, log_factorial_sums, smoothed_stats, viterbi, EmissionTable, StateSequence};
use crate::matrix::Matrix;
use crate::rng::RngHandle;

/// Which model the factors approximate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VbModel {
    /// HDP-HMM: `Dir(α₀β*)` over `M + 1` entries, `β*` optimized.
    Hdp { alpha0: f64, gamma: f64 },
    /// Finite HMM: `Dir(α₀·1)` over `M` entries.
    Finite { alpha0: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VbConfig {
    pub n_states: usize,
    pub n_iters: usize,
    /// Concentrations of the HDP prior, held fixed.
    pub alpha0: f64,
    pub gamma: f64,
    /// Per-entry concentration for the finite model.
    pub finite_alpha0: f64,
    /// Per-cell rate priors; empirical Bayes when absent.
    pub hypers: Option<Vec<GammaHyper>>,
    /// Stop once the ELBO changes by less than this between sweeps.
    pub tol: f64,
    /// Largest allowed ELBO decrease per sweep.
    pub monotone_tol: f64,
    /// Clusters used by the initial soft clustering, capped at M.
    pub init_clusters: usize,
    pub init_iters: usize,
    /// Seed for the initial clustering.
    pub seed: u64,
    /// Largest over-relaxation factor; 1 gives plain coordinate ascent.
    pub max_overrelax: f64,
}

impl Default for VbConfig {
    fn default() -> Self {
        Self {
            n_states: 80,
            n_iters: 100,
            alpha0: 4.0,
            gamma: 8.0,
            finite_alpha0: 1.0,
            hypers: None,
            tol: 1e-6,
            monotone_tol: 1e-8,
            init_clusters: 25,
            init_iters: 10,
            seed: 0,
            max_overrelax: 16.0,
        }
    }
}

impl VbConfig {
    pub fn validate(&self, n_cells: usize) -> Result<()> {
        if self.n_states == 0 || self.init_clusters == 0 {
            return Err(Error::Config("n_states and init_clusters must be at least 1".into()));
        }
        for (name, v) in [("alpha0", self.alpha0), ("gamma", self.gamma), ("finite_alpha0", self.finite_alpha0)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.max_overrelax >= 1.0 && self.max_overrelax.is_finite()) {
            return Err(Error::Config("max_overrelax must be at least 1".into()));
        }
        if let Some(h) = &self.hypers {
            if h.len() != n_cells {
                return Err(Error::Config(format!("{} hyperparameters for {n_cells} cells", h.len())));
            }
        }
        Ok(())
    }

    fn hypers_for(&self, counts: &CountMatrix) -> Vec<GammaHyper> {
        match &self.hypers {
            Some(h) => h.clone(),
            None => counts.rows().map(eb_fit).collect(),
        }
    }
}

/// Logs of the surrogate HMM over the first `M` states.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateHmm {
    pub log_pi: Vec<f64>,
    pub log_trans: Matrix,
    /// `ln L̃`, T×M.
    pub log_lik: EmissionTable,
}

impl SurrogateHmm {
    pub fn pi_tilde(&self) -> Vec<f64> {
        self.log_pi.iter().map(|v| v.exp()).collect()
    }

    pub fn trans_tilde(&self) -> Matrix {
        self.log_trans.map(f64::exp)
    }
}

/// Expected sufficient statistics of `q(S)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMarginals {
    /// `q(S_t = i)`, T×M.
    pub gamma: Matrix,
    /// `Σ_t q(S_t = i, S_{t+1} = j)`.
    pub trans_counts: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub model: VbModel,
    /// Gamma shapes ã, C×M.
    pub rate_a: Matrix,
    /// Gamma rates b̃, C×M.
    pub rate_b: Matrix,
    /// Dirichlet parameters of each transition row, M×K.
    pub trans_factors: Matrix,
    pub init_factor: Vec<f64>,
    /// Point estimate of the global weights, length K (empty for the finite model).
    pub beta_star: Vec<f64>,
    pub marginals: StateMarginals,
    /// Surrogate that produced `marginals`, and its log normalizer.
    pub q_surrogate: SurrogateHmm,
    pub log_z: f64,
}

impl VariationalState {
    pub fn n_states(&self) -> usize {
        self.rate_a.cols()
    }

    pub fn n_cells(&self) -> usize {
        self.rate_a.rows()
    }

    /// Dirichlet prior shared by π and the transition rows.
    pub fn prior(&self) -> Vec<f64> {
        prior_vector(&self.model, &self.beta_star, self.n_states())
    }

    /// Relabel the first `M` states so that new state `k` is old state `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let m = self.n_states();
        let k = self.trans_factors.cols();
        // Column map over all K entries; the overflow entry stays last.
        let cols: Vec<usize> = perm.iter().copied().chain(m..k).collect();
        let pick = |v: &[f64]| cols.iter().map(|&c| v[c]).collect::<Vec<f64>>();
        let mut trans_factors = Matrix::zeros(m, k);
        for (i, &p) in perm.iter().enumerate() {
            trans_factors.row_mut(i).copy_from_slice(&pick(self.trans_factors.row(p)));
        }
        let beta_star = if self.beta_star.is_empty() {
            Vec::new()
        } else {
            pick(&self.beta_star)
        };
        let log_lik = self.q_surrogate.log_lik.loglik.permute_cols(perm);
        Self {
            model: self.model,
            rate_a: self.rate_a.permute_cols(perm),
            rate_b: self.rate_b.permute_cols(perm),
            trans_factors,
            init_factor: pick(&self.init_factor),
            beta_star,
            marginals: StateMarginals {
                gamma: self.marginals.gamma.permute_cols(perm),
                trans_counts: self.marginals.trans_counts.permute_square(perm),
            },
            q_surrogate: SurrogateHmm {
                log_pi: perm.iter().map(|&p| self.q_surrogate.log_pi[p]).collect(),
                log_trans: self.q_surrogate.log_trans.permute_square(perm),
                log_lik: EmissionTable { loglik: log_lik },
            },
            log_z: self.log_z,
        }
    }

    /// Posterior mean rates `ã / b̃`.
    pub fn mean_rates(&self) -> Matrix {
        let mut out = self.rate_a.clone();
        for (o, b) in out.as_mut_slice().iter_mut().zip(self.rate_b.as_slice()) {
            *o /= b;
        }
        out
    }
}

/// The variational factors without `q(S)`; what a fit exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VbFactors {
    pub model: VbModel,
    pub rate_a: Matrix,
    pub rate_b: Matrix,
    pub trans_factors: Matrix,
    pub init_factor: Vec<f64>,
    pub beta_star: Vec<f64>,
}

impl VariationalState {
    pub fn factors(&self) -> VbFactors {
        VbFactors {
            model: self.model,
            rate_a: self.rate_a.clone(),
            rate_b: self.rate_b.clone(),
            trans_factors: self.trans_factors.clone(),
            init_factor: self.init_factor.clone(),
            beta_star: self.beta_star.clone(),
        }
    }

    /// Rebuild a state from exported factors, fitting `q(S)` to `counts`.
    pub fn from_factors(f: VbFactors, counts: &CountMatrix) -> Result<Self> {
        let m = f.rate_a.cols();
        let k = match f.model {
            VbModel::Hdp { .. } => m + 1,
            VbModel::Finite { .. } => m,
        };
        let beta_ok = match f.model {
            VbModel::Hdp { .. } => f.beta_star.len() == k,
            VbModel::Finite { .. } => f.beta_star.is_empty(),
        };
        if m == 0
            || f.rate_b.rows() != f.rate_a.rows()
            || f.rate_b.cols() != m
            || f.rate_a.rows() != counts.n_cells()
            || f.trans_factors.rows() != m
            || f.trans_factors.cols() != k
            || f.init_factor.len() != k
            || !beta_ok
        {
            return Err(Error::ShapeMismatch("variational factors have inconsistent shapes".into()));
        }
        let all = f
            .rate_a
            .as_slice()
            .iter()
            .chain(f.rate_b.as_slice())
            .chain(f.trans_factors.as_slice())
            .chain(&f.init_factor);
        for v in all {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(Error::domain("variational factor parameters must be positive"));
            }
        }
        let mut vs = Self {
            model: f.model,
            rate_a: f.rate_a,
            rate_b: f.rate_b,
            trans_factors: f.trans_factors,
            init_factor: f.init_factor,
            beta_star: f.beta_star,
            marginals: StateMarginals {
                gamma: Matrix::zeros(counts.n_bins(), m),
                trans_counts: Matrix::zeros(m, m),
            },
            q_surrogate: SurrogateHmm {
                log_pi: vec![0.0; m],
                log_trans: Matrix::zeros(m, m),
                log_lik: EmissionTable {
                    loglik: Matrix::zeros(counts.n_bins(), m),
                },
            },
            log_z: 0.0,
        };
        state_step(&mut vs, counts, &log_factorial_sums(counts))?;
        Ok(vs)
    }

    /// Most probable path under `q(S)`.
    pub fn most_likely_path(&self) -> Result<StateSequence> {
        let q = &self.q_surrogate;
        viterbi(&q.log_lik, &q.pi_tilde(), &q.trans_tilde())
    }
}

fn prior_vector(model: &VbModel, beta_star: &[f64], m: usize) -> Vec<f64> {
    match model {
        VbModel::Hdp { alpha0, .. } => beta_star.iter().map(|b| alpha0 * b).collect(),
        VbModel::Finite { alpha0 } => vec![*alpha0; m],
    }
}

/// `ã_{c,i} = a_c + Σ_t y_{c,t} γ_{t,i}`, `b̃_{c,i} = b_c + Σ_t γ_{t,i}`.
pub fn update_rate_factors(counts: &CountMatrix, gamma: &Matrix, hypers: &[GammaHyper]) -> Result<(Matrix, Matrix)> {
    if gamma.rows() != counts.n_bins() {
        return Err(Error::LengthMismatch {
            what: "state marginals vs bins",
            left: gamma.rows(),
            right: counts.n_bins(),
        });
    }
    if hypers.len() != counts.n_cells() {
        return Err(Error::LengthMismatch {
            what: "hyperparameters vs cells",
            left: hypers.len(),
            right: counts.n_cells(),
        });
    }
    let m = gamma.cols();
    let mut occ = vec![0.0; m];
    for row in gamma.iter_rows() {
        for (o, g) in occ.iter_mut().zip(row) {
            *o += g;
        }
    }
    let mut a = Matrix::zeros(counts.n_cells(), m);
    let mut b = Matrix::zeros(counts.n_cells(), m);
    for (c, h) in hypers.iter().enumerate() {
        let ar = a.row_mut(c);
        for (t, &y) in counts.row(c).iter().enumerate() {
            if y > 0 {
                for (o, g) in ar.iter_mut().zip(gamma.row(t)) {
                    *o += y as f64 * g;
                }
            }
        }
        ar.iter_mut().for_each(|v| *v += h.a);
        for (o, &n) in b.row_mut(c).iter_mut().zip(&occ) {
            *o = h.b + n;
        }
    }
    Ok((a, b))
}

/// `E[ln x_j] = ψ(α_j) - ψ(Σ α)` for the first `m` entries of a Dirichlet.
fn dirichlet_expected_logs(alpha: &[f64], m: usize) -> Vec<f64> {
    let total = digamma(alpha.iter().sum());
    alpha[..m].iter().map(|&a| digamma(a) - total).collect()
}

pub fn build_surrogate(vs: &VariationalState, counts: &CountMatrix) -> SurrogateHmm {
    build_surrogate_with(vs, counts, &log_factorial_sums(counts))
}

fn build_surrogate_with(vs: &VariationalState, counts: &CountMatrix, lfact: &[f64]) -> SurrogateHmm {
    let m = vs.n_states();
    let log_pi = dirichlet_expected_logs(&vs.init_factor, m);
    let mut log_trans = Matrix::zeros(m, m);
    for i in 0..m {
        log_trans.row_mut(i).copy_from_slice(&dirichlet_expected_logs(vs.trans_factors.row(i), m));
    }
    let mut e_log_rate = Matrix::zeros(vs.n_cells(), m);
    let mut rate_sums = vec![0.0; m];
    for c in 0..vs.n_cells() {
        for i in 0..m {
            let (a, b) = (vs.rate_a[(c, i)], vs.rate_b[(c, i)]);
            e_log_rate[(c, i)] = digamma(a) - b.ln();
            rate_sums[i] += a / b;
        }
    }
    SurrogateHmm {
        log_pi,
        log_trans,
        log_lik: expected_emission_logliks(counts, &e_log_rate, &rate_sums, lfact),
    }
}

/// Optimal `q(S)` given the surrogate. Returns the expected statistics and `ln Z_q`.
pub fn update_state_factor(surrogate: &SurrogateHmm) -> Result<(StateMarginals, f64)> {
    let s = smoothed_stats(&surrogate.log_lik, &surrogate.pi_tilde(), &surrogate.trans_tilde())?;
    Ok((
        StateMarginals {
            gamma: s.gamma,
            trans_counts: s.trans_counts,
        },
        s.log_evidence,
    ))
}

/// `α̃_{i,j} = prior_j + Σ_t ξ_t(i, j)` on the first M entries, `prior_j`
/// on any overflow entry; the π factor gets `prior + γ_0`.
pub fn update_transition_factors(marginals: &StateMarginals, prior: &[f64]) -> Result<(Matrix, Vec<f64>)> {
    let m = marginals.trans_counts.rows();
    if prior.len() < m {
        return Err(Error::ShapeMismatch(format!("prior has {} entries for {m} states", prior.len())));
    }
    let k = prior.len();
    let mut trans = Matrix::zeros(m, k);
    for i in 0..m {
        let row = trans.row_mut(i);
        row.copy_from_slice(prior);
        for (o, x) in row.iter_mut().zip(marginals.trans_counts.row(i)) {
            *o += x;
        }
    }
    let mut init = prior.to_vec();
    for (o, g) in init.iter_mut().zip(marginals.gamma.row(0)) {
        *o += g;
    }
    Ok((trans, init))
}

/// `f(β*) = Σ_rows [ln B(α₀β* + n_r) - ln B(α₀β*)] + ln GEM(β*)`, the ELBO
/// terms depending on β* once the π and transition factors are set to their
/// optimum `α₀β* + n_r` for the current `q(S)`. The rows are the initial
/// state marginal and the expected transition counts; the overflow entry
/// never has counts.
struct BetaObjective<'a> {
    alpha0: f64,
    gamma: f64,
    rows: Vec<&'a [f64]>,
}

impl<'a> BetaObjective<'a> {
    fn new(marginals: &'a StateMarginals, alpha0: f64, gamma: f64) -> Self {
        let mut rows = vec![marginals.gamma.row(0)];
        rows.extend(marginals.trans_counts.iter_rows());
        Self { alpha0, gamma, rows }
    }

    fn value(&self, beta: &[f64]) -> f64 {
        let mut f = gem_log_density(beta, self.gamma);
        for (j, &b) in beta[..beta.len() - 1].iter().enumerate() {
            let x = self.alpha0 * b;
            let lg = ln_gamma(x);
            for row in &self.rows {
                let n = row[j];
                if n > 0.0 {
                    f += ln_gamma(x + n) - lg;
                }
            }
        }
        f
    }

    /// `∂f/∂β_j`.
    fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let k = beta.len();
        let mut g = vec![0.0; k];
        for (j, &b) in beta[..k - 1].iter().enumerate() {
            let x = self.alpha0 * b;
            let dg = digamma(x);
            let mut acc = 0.0;
            for row in &self.rows {
                let n = row[j];
                if n > 0.0 {
                    acc += digamma(x + n) - dg;
                }
            }
            g[j] = self.alpha0 * acc;
        }
        g[k - 1] = (self.gamma - 1.0) / beta[k - 1];
        g
    }
}

/// Truncated GEM log density of `β*` in stick-fraction coordinates.
pub fn gem_log_density(beta: &[f64], gamma: f64) -> f64 {
    let m = beta.len() - 1;
    m as f64 * gamma.ln() + (gamma - 1.0) * beta[m].ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// Outcome of one `β*` update.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaStep {
    pub beta: Vec<f64>,
    pub objective_before: f64,
    pub objective_after: f64,
    /// The line search ran out of halvings; the last accepted point is kept.
    pub stalled: bool,
}

const MAX_HALVINGS: usize = 50;
const MAX_BETA_STEPS: usize = 200;
/// Lower bound on every entry of β*. States with no expected visits push
/// their weight toward zero; the floor keeps `α₀β*` a valid Dirichlet
/// parameter and lets the ascent settle.
pub const BETA_STAR_FLOOR: f64 = 1e-10;

fn floored(mut beta: Vec<f64>) -> Vec<f64> {
    for b in beta.iter_mut() {
        *b = b.max(BETA_STAR_FLOOR);
    }
    let s: f64 = beta.iter().sum();
    beta.iter_mut().for_each(|b| *b /= s);
    beta
}

/// Exponentiated-gradient ascent on `f(β*)` with a backtracking line
/// search: `β ← normalize(β ⊙ exp(step · (g - β·g)))`. Every accepted step
/// does not decrease `f`; after 50 halvings the last accepted point is kept.
pub fn update_beta_star(beta_star: &[f64], marginals: &StateMarginals, alpha0: f64, gamma: f64) -> Result<BetaStep> {
    let k = beta_star.len();
    if k != marginals.trans_counts.cols() + 1 || marginals.gamma.cols() + 1 != k {
        return Err(Error::ShapeMismatch("beta* must have one entry more than there are states".into()));
    }
    if beta_star.iter().any(|&b| !(b > 0.0)) {
        return Err(Error::domain("beta* must lie in the simplex interior"));
    }
    let obj = BetaObjective::new(marginals, alpha0, gamma);
    let mut beta = beta_star.to_vec();
    let mut f = obj.value(&beta);
    let before = f;
    let mut step = 1.0;
    let mut stalled = false;
    for _ in 0..MAX_BETA_STEPS {
        let g = obj.gradient(&beta);
        let mean: f64 = beta.iter().zip(&g).map(|(b, gi)| b * gi).sum();
        let dir: Vec<f64> = g.iter().map(|gi| gi - mean).collect();
        // Entries held at the floor with a downhill direction cannot move.
        let slack = beta
            .iter()
            .zip(&dir)
            .filter(|&(&b, &d)| !(b <= BETA_STAR_FLOOR * 1.000001 && d < 0.0))
            .map(|(b, d)| (b * d).abs())
            .fold(0.0, f64::max);
        if slack < 1e-12 {
            break;
        }
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let z: Vec<f64> = beta.iter().zip(&dir).map(|(b, d)| b.ln() + step * d).collect();
            let bn = floored(softmax(&z));
            let fnew = obj.value(&bn);
            if fnew.is_finite() && fnew >= f {
                let gain = fnew - f;
                beta = bn;
                f = fnew;
                step *= 2.0;
                accepted = true;
                if gain <= 1e-15 * f.abs().max(1.0) {
                    return Ok(BetaStep {
                        beta,
                        objective_before: before,
                        objective_after: f,
                        stalled,
                    });
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            stalled = true;
            log::debug!("beta* line search stalled after {MAX_HALVINGS} halvings");
            break;
        }
    }
    Ok(BetaStep {
        beta,
        objective_before: before,
        objective_after: f,
        stalled,
    })
}

/// `KL(Gamma(a1, b1) || Gamma(a0, b0))`, rate parameterization.
fn gamma_kl(a1: f64, b1: f64, a0: f64, b0: f64) -> f64 {
    (a1 - a0) * digamma(a1) - ln_gamma(a1) + ln_gamma(a0) + a0 * (b1.ln() - b0.ln()) + a1 * (b0 - b1) / b1
}

/// `KL(Dir(q) || Dir(p))`.
fn dirichlet_kl(q: &[f64], p: &[f64]) -> f64 {
    let sq: f64 = q.iter().sum();
    let sp: f64 = p.iter().sum();
    let psi_sq = digamma(sq);
    let mut kl = ln_gamma(sq) - ln_gamma(sp);
    for (&qi, &pi) in q.iter().zip(p) {
        kl += ln_gamma(pi) - ln_gamma(qi) + (qi - pi) * (digamma(qi) - psi_sq);
    }
    kl
}

/// ELBO broken into its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboParts {
    /// `E_q[ln p(y, S | Λ, π, P)] - E_q[ln q(S)]`.
    pub state: f64,
    /// `-Σ KL(q(λ) || p(λ))`.
    pub rates: f64,
    /// `-KL` of the π and transition factors.
    pub transitions: f64,
    /// GEM log density of `β*` (zero for the finite model).
    pub gem: f64,
}

impl ElboParts {
    pub fn total(&self) -> f64 {
        self.state + self.rates + self.transitions + self.gem
    }
}

pub fn elbo_parts(vs: &VariationalState, counts: &CountMatrix, hypers: &[GammaHyper]) -> ElboParts {
    elbo_parts_with(vs, counts, hypers, &log_factorial_sums(counts))
}

fn elbo_parts_with(vs: &VariationalState, counts: &CountMatrix, hypers: &[GammaHyper], lfact: &[f64]) -> ElboParts {
    let m = vs.n_states();
    let cur = build_surrogate_with(vs, counts, lfact);
    let q = &vs.q_surrogate;
    let mk = &vs.marginals;
    let mut state = vs.log_z;
    for i in 0..m {
        let g0 = mk.gamma[(0, i)];
        if g0 > 0.0 {
            state += g0 * (cur.log_pi[i] - q.log_pi[i]);
        }
        for j in 0..m {
            let x = mk.trans_counts[(i, j)];
            if x > 0.0 {
                state += x * (cur.log_trans[(i, j)] - q.log_trans[(i, j)]);
            }
        }
    }
    for t in 0..mk.gamma.rows() {
        for i in 0..m {
            let g = mk.gamma[(t, i)];
            if g > 0.0 {
                state += g * (cur.log_lik.loglik[(t, i)] - q.log_lik.loglik[(t, i)]);
            }
        }
    }
    let mut rates = 0.0;
    for (c, h) in hypers.iter().enumerate() {
        for i in 0..m {
            rates -= gamma_kl(vs.rate_a[(c, i)], vs.rate_b[(c, i)], h.a, h.b);
        }
    }
    let prior = vs.prior();
    let mut transitions = -dirichlet_kl(&vs.init_factor, &prior);
    for row in vs.trans_factors.iter_rows() {
        transitions -= dirichlet_kl(row, &prior);
    }
    let gem = match vs.model {
        VbModel::Hdp { gamma, .. } => gem_log_density(&vs.beta_star, gamma),
        VbModel::Finite { .. } => 0.0,
    };
    ElboParts {
        state,
        rates,
        transitions,
        gem,
    }
}

pub fn elbo(vs: &VariationalState, counts: &CountMatrix, hypers: &[GammaHyper]) -> f64 {
    elbo_parts(vs, counts, hypers).total()
}

/// Soft Poisson-mixture clustering of the per-bin count vectors. Returns
/// T×M responsibilities with mass only on the first `min(M, k)` states.
pub fn soft_cluster_init(rng: &mut RngHandle, counts: &CountMatrix, m: usize, k: usize, iters: usize) -> Matrix {
    let (n_cells, n_bins) = (counts.n_cells(), counts.n_bins());
    let k = k.min(m).min(n_bins).max(1);
    let cell_means: Vec<f64> = counts.rows().map(|r| r.iter().sum::<u64>() as f64 / n_bins as f64).collect();
    // Centers are seeded k-means++ style: each new center is a bin drawn with
    // probability proportional to its Poisson deviance from the nearest
    // existing center. Centers are lightly smoothed toward the cell means.
    let center_at = |t: usize| -> Vec<f64> { (0..n_cells).map(|c| (counts.get(c, t) as f64 + cell_means[c] + 0.1) / 2.0).collect() };
    let deviance = |t: usize, center: &[f64]| -> f64 {
        center
            .iter()
            .enumerate()
            .map(|(c, &m)| {
                let y = counts.get(c, t) as f64;
                let yl = if y > 0.0 { y * (y / m).ln() } else { 0.0 };
                2.0 * (yl - (y - m))
            })
            .sum()
    };
    let mut mu = Matrix::zeros(n_cells, k);
    let mut nearest = vec![f64::INFINITY; n_bins];
    let mut pick = rng.random_range(0..n_bins);
    for kk in 0..k {
        let center = center_at(pick);
        for (t, d) in nearest.iter_mut().enumerate() {
            *d = d.min(deviance(t, &center).max(0.0));
        }
        for c in 0..n_cells {
            mu[(c, kk)] = center[c];
        }
        let total: f64 = nearest.iter().sum();
        pick = if total > 0.0 && total.is_finite() {
            categorical_sample(rng, &nearest.iter().map(|d| d / total).collect::<Vec<_>>()).unwrap_or(0)
        } else {
            rng.random_range(0..n_bins)
        };
    }
    let mut weights = vec![1.0 / k as f64; k];
    let mut resp = Matrix::zeros(n_bins, k);
    let mut logp = vec![0.0; k];
    for _ in 0..iters.max(1) {
        let log_mu = mu.map(f64::ln);
        for t in 0..n_bins {
            for kk in 0..k {
                let mut l = weights[kk].ln();
                for c in 0..n_cells {
                    let y = counts.get(c, t) as f64;
                    l += y * log_mu[(c, kk)] - mu[(c, kk)];
                }
                logp[kk] = l;
            }
            let z = log_sum_exp(&logp);
            for kk in 0..k {
                resp[(t, kk)] = (logp[kk] - z).exp();
            }
        }
        let mut occ = vec![0.0; k];
        let mut sums = Matrix::zeros(n_cells, k);
        for t in 0..n_bins {
            for kk in 0..k {
                let r = resp[(t, kk)];
                occ[kk] += r;
                for c in 0..n_cells {
                    sums[(c, kk)] += r * counts.get(c, t) as f64;
                }
            }
        }
        for kk in 0..k {
            weights[kk] = (occ[kk] + 1e-3) / (n_bins as f64 + 1e-3 * k as f64);
            for c in 0..n_cells {
                mu[(c, kk)] = (sums[(c, kk)] + cell_means[c] + 0.01) / (occ[kk] + 1.0);
            }
        }
    }
    let mut out = Matrix::zeros(n_bins, m);
    for t in 0..n_bins {
        out.row_mut(t)[..k].copy_from_slice(resp.row(t));
    }
    out
}

/// Build factors from initial state marginals, then fit `q(S)` once.
pub fn initialize_from_marginals(
    counts: &CountMatrix,
    model: VbModel,
    gamma0: &Matrix,
    hypers: &[GammaHyper],
) -> Result<VariationalState> {
    let m = gamma0.cols();
    if m == 0 {
        return Err(Error::Config("need at least one state".into()));
    }
    let mut trans_counts = Matrix::zeros(m, m);
    for t in 0..gamma0.rows().saturating_sub(1) {
        for i in 0..m {
            let gi = gamma0[(t, i)];
            if gi == 0.0 {
                continue;
            }
            for (o, g) in trans_counts.row_mut(i).iter_mut().zip(gamma0.row(t + 1)) {
                *o += gi * g;
            }
        }
    }
    let marginals = StateMarginals {
        gamma: gamma0.clone(),
        trans_counts,
    };
    let beta_star = match model {
        VbModel::Hdp { .. } => vec![1.0 / (m + 1) as f64; m + 1],
        VbModel::Finite { .. } => Vec::new(),
    };
    let prior = prior_vector(&model, &beta_star, m);
    let (rate_a, rate_b) = update_rate_factors(counts, gamma0, hypers)?;
    let (trans_factors, init_factor) = update_transition_factors(&marginals, &prior)?;
    let mut vs = VariationalState {
        model,
        rate_a,
        rate_b,
        trans_factors,
        init_factor,
        beta_star,
        marginals,
        q_surrogate: SurrogateHmm {
            log_pi: vec![0.0; m],
            log_trans: Matrix::zeros(m, m),
            log_lik: EmissionTable {
                loglik: Matrix::zeros(counts.n_bins(), m),
            },
        },
        log_z: 0.0,
    };
    let lfact = log_factorial_sums(counts);
    state_step(&mut vs, counts, &lfact)?;
    Ok(vs)
}

fn state_step(vs: &mut VariationalState, counts: &CountMatrix, lfact: &[f64]) -> Result<()> {
    let sur = build_surrogate_with(vs, counts, lfact);
    let (marginals, log_z) = update_state_factor(&sur)?;
    vs.marginals = marginals;
    vs.log_z = log_z;
    vs.q_surrogate = sur;
    Ok(())
}

/// Result of a variational fit.
#[derive(Debug, Clone)]
pub struct VbFit {
    pub state: VariationalState,
    pub hypers: Vec<GammaHyper>,
    /// ELBO after initialization, then after each sweep.
    pub elbo: Vec<f64>,
    /// Sweep at which the ELBO change first fell below the tolerance.
    pub converged_at: Option<usize>,
}

/// One coordinate-ascent sweep: state factor, rate factors, transition
/// factors, then `β*`.
pub fn vb_sweep(vs: &mut VariationalState, counts: &CountMatrix, hypers: &[GammaHyper]) -> Result<()> {
    vb_sweep_with(vs, counts, hypers, &log_factorial_sums(counts))
}

fn vb_sweep_with(vs: &mut VariationalState, counts: &CountMatrix, hypers: &[GammaHyper], lfact: &[f64]) -> Result<()> {
    state_step(vs, counts, lfact)?;
    factor_step(vs, counts, hypers)
}

/// Rate factors, transition factors and `β*` from the current `q(S)`.
fn factor_step(vs: &mut VariationalState, counts: &CountMatrix, hypers: &[GammaHyper]) -> Result<()> {
    let (a, b) = update_rate_factors(counts, &vs.marginals.gamma, hypers)?;
    vs.rate_a = a;
    vs.rate_b = b;
    let (tf, init) = update_transition_factors(&vs.marginals, &vs.prior())?;
    vs.trans_factors = tf;
    vs.init_factor = init;
    if let VbModel::Hdp { alpha0, gamma } = vs.model {
        // β* is optimized with the Dirichlet factors profiled out, then the
        // factors are refreshed from it.
        let step = update_beta_star(&vs.beta_star, &vs.marginals, alpha0, gamma)?;
        vs.beta_star = step.beta;
        let (tf, init) = update_transition_factors(&vs.marginals, &vs.prior())?;
        vs.trans_factors = tf;
        vs.init_factor = init;
    }
    Ok(())
}

/// Step `from → to` scaled by `eta` in the log domain of every positive
/// factor parameter; `β*` is renormalized. `q(S)` is left stale.
fn extrapolate(from: &VariationalState, to: &VariationalState, eta: f64) -> VariationalState {
    let step = |a: f64, b: f64| (a.ln() + eta * (b.ln() - a.ln())).exp();
    let blend = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(&x, &y)| step(x, y)).collect::<Vec<f64>>();
    let blend_matrix = |a: &Matrix, b: &Matrix| {
        let mut out = b.clone();
        for (o, (&x, &y)) in out.as_mut_slice().iter_mut().zip(a.as_slice().iter().zip(b.as_slice())) {
            *o = step(x, y);
        }
        out
    };
    let mut out = to.clone();
    out.rate_a = blend_matrix(&from.rate_a, &to.rate_a);
    out.rate_b = blend_matrix(&from.rate_b, &to.rate_b);
    out.trans_factors = blend_matrix(&from.trans_factors, &to.trans_factors);
    out.init_factor = blend(&from.init_factor, &to.init_factor);
    if !to.beta_star.is_empty() {
        out.beta_star = floored(blend(&from.beta_star, &to.beta_star));
    }
    out
}

fn is_valid(vs: &VariationalState) -> bool {
    vs.rate_a
        .as_slice()
        .iter()
        .chain(vs.rate_b.as_slice())
        .chain(vs.trans_factors.as_slice())
        .chain(&vs.init_factor)
        .all(|v| *v > 0.0 && v.is_finite())
}

/// Coordinate ascent with adaptive over-relaxation. Each sweep computes the
/// plain update `θ' = M(θ)` of the rate, transition and `β*` factors, then
/// tries `θ + η(θ' - θ)` (in log parameters) with `q(S)` refit to it. The
/// trial is kept if the ELBO does not drop, and `η` doubles; otherwise the
/// sweep falls back to `θ'` and `η` resets to 1. Every recorded state has
/// `q(S)` optimal for its factors.
fn run_overrelaxed(counts: &CountMatrix, mut vs: VariationalState, hypers: Vec<GammaHyper>, config: &VbConfig) -> Result<VbFit> {
    let lfact = log_factorial_sums(counts);
    let mut value = elbo_parts_with(&vs, counts, &hypers, &lfact).total();
    let mut trace = vec![value];
    let mut converged_at = None;
    let mut eta = 1.0;
    for sweep in 1..=config.n_iters {
        let mut plain = vs.clone();
        factor_step(&mut plain, counts, &hypers)?;
        let mut next = None;
        if eta > 1.0 {
            let mut trial = extrapolate(&vs, &plain, eta);
            if is_valid(&trial) && state_step(&mut trial, counts, &lfact).is_ok() {
                let v = elbo_parts_with(&trial, counts, &hypers, &lfact).total();
                if v.is_finite() && v >= value {
                    next = Some((trial, v));
                }
            }
        }
        let (new_vs, new_value) = match next {
            Some(accepted) => {
                eta = (eta * 2.0).min(config.max_overrelax);
                accepted
            }
            None => {
                eta = config.max_overrelax.min(2.0);
                state_step(&mut plain, counts, &lfact)?;
                let v = elbo_parts_with(&plain, counts, &hypers, &lfact).total();
                (plain, v)
            }
        };
        if !new_value.is_finite() {
            return Err(Error::numerical(format!("ELBO is {new_value} at sweep {sweep}")));
        }
        trace.push(new_value);
        if new_value < value - config.monotone_tol {
            return Err(Error::MonotonicityViolation {
                sweep,
                drop: value - new_value,
            });
        }
        let delta = new_value - value;
        vs = new_vs;
        value = new_value;
        if delta.abs() < config.tol {
            converged_at = Some(sweep);
            break;
        }
    }
    Ok(VbFit {
        state: vs,
        hypers,
        elbo: trace,
        converged_at,
    })
}

/// Coordinate ascent from a given initial state.
pub fn run_vb_from(counts: &CountMatrix, vs: VariationalState, hypers: Vec<GammaHyper>, config: &VbConfig) -> Result<VbFit> {
    if config.max_overrelax > 1.0 {
        return run_overrelaxed(counts, vs, hypers, config);
    }
    let mut vs = vs;
    let lfact = log_factorial_sums(counts);
    let mut trace = vec![elbo_parts_with(&vs, counts, &hypers, &lfact).total()];
    let mut converged_at = None;
    for sweep in 1..=config.n_iters {
        vb_sweep_with(&mut vs, counts, &hypers, &lfact)?;
        let value = elbo_parts_with(&vs, counts, &hypers, &lfact).total();
        if !value.is_finite() {
            return Err(Error::numerical(format!("ELBO is {value} at sweep {sweep}")));
        }
        let prev = trace[trace.len() - 1];
        trace.push(value);
        if value < prev - config.monotone_tol {
            return Err(Error::MonotonicityViolation {
                sweep,
                drop: prev - value,
            });
        }
        if (value - prev).abs() < config.tol {
            converged_at = Some(sweep);
            break;
        }
    }
    Ok(VbFit {
        state: vs,
        hypers,
        elbo: trace,
        converged_at,
    })
}

fn run_model(counts: &CountMatrix, config: &VbConfig, model: VbModel) -> Result<VbFit> {
    config.validate(counts.n_cells())?;
    let hypers = config.hypers_for(counts);
    let mut rng = RngHandle::new(config.seed);
    let gamma0 = soft_cluster_init(&mut rng, counts, config.n_states, config.init_clusters, config.init_iters);
    let vs = initialize_from_marginals(counts, model, &gamma0, &hypers)?;
    run_vb_from(counts, vs, hypers, config)
}

/// HDP-HMM variational fit with `α₀` and `γ` held at their configured values.
pub fn run_vb(counts: &CountMatrix, config: &VbConfig) -> Result<VbFit> {
    run_model(
        counts,
        config,
        VbModel::Hdp {
            alpha0: config.alpha0,
            gamma: config.gamma,
        },
    )
}

/// Finite HMM variational fit with `Dir(finite_alpha0 · 1)` rows.
pub fn run_finite_vb(counts: &CountMatrix, config: &VbConfig) -> Result<VbFit> {
    run_model(
        counts,
        config,
        VbModel::Finite {
            alpha0: config.finite_alpha0,
        },
    )
}

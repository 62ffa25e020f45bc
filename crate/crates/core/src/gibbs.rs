//! Weak-limit Gibbs sampler for the HDP-HMM, with the finite Bayesian HMM as
//! a special case.
//!
//! One sweep updates, in order: the state path (forward filtering, backward
//! sampling), the rate panel, the initial distribution and transition rows,
//! the global stick weights β, the concentrations α₀ and γ, and finally the
//! per-cell rate hyperparameters when they are sampled by HMC.
//!
//! β and the concentrations use the auxiliary table-count scheme of the
//! hierarchical Dirichlet process. The initial state is treated as one more
//! restaurant with a single customer, matching `π ~ Dir(α₀β + 1_{S_1})`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::CountMatrix;
use crate::dist::{
    beta_sample_unchecked, dirichlet_logpdf_unchecked, dirichlet_sample_unchecked, gamma_logpdf_unchecked,
    gamma_sample_unchecked, GammaHyper,
};
use crate::error::{Error, Result};
use crate::hmc::{eb_fit, hmc_step, HmcConfig, HyperTarget};
use crate::hmm::{
    backward_sample, complete_data_loglik, emission_logliks, forward_messages, state_count, states_covering,
    EmissionTable, Forward, HmmParams, StateSequence,
};
use crate::matrix::Matrix;
use crate::rng::RngHandle;

/// Smallest stick weight kept after a draw, so that `α₀β` stays a valid
/// Dirichlet concentration.
const BETA_FLOOR: f64 = 1e-300;

/// Global stick weights and concentrations of the weak-limit HDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HdpParams {
    pub beta: Vec<f64>,
    pub alpha0: f64,
    pub gamma: f64,
}

impl HdpParams {
    pub fn new(beta: Vec<f64>, alpha0: f64, gamma: f64) -> Result<Self> {
        let h = Self { beta, alpha0, gamma };
        h.validate()?;
        Ok(h)
    }

    pub fn n_states(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.is_empty() {
            return Err(Error::ShapeMismatch("beta needs at least one entry".into()));
        }
        if self.beta.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::domain("beta entries must be positive"));
        }
        let s: f64 = self.beta.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("beta sums to {s}")));
        }
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite() && self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::domain("concentrations must be positive and finite"));
        }
        Ok(())
    }

    /// Dirichlet concentration `α₀β` shared by π and every transition row.
    pub fn row_prior(&self) -> Vec<f64> {
        self.beta.iter().map(|b| self.alpha0 * b).collect()
    }
}

/// Prior over π and the transition rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionPrior {
    Hdp(HdpParams),
    /// Symmetric `Dir(α₀·1)` with a fixed per-entry concentration.
    Finite { alpha0: f64 },
}

impl TransitionPrior {
    pub fn row_prior(&self, m: usize) -> Vec<f64> {
        match self {
            TransitionPrior::Hdp(h) => h.row_prior(),
            TransitionPrior::Finite { alpha0 } => vec![*alpha0; m],
        }
    }

    pub fn hdp(&self) -> Option<&HdpParams> {
        match self {
            TransitionPrior::Hdp(h) => Some(h),
            TransitionPrior::Finite { .. } => None,
        }
    }

    fn alpha0(&self) -> f64 {
        match self {
            TransitionPrior::Hdp(h) => h.alpha0,
            TransitionPrior::Finite { alpha0 } => *alpha0,
        }
    }
}

/// Full sampler state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsState {
    pub hmm: HmmParams,
    pub prior: TransitionPrior,
    pub seq: StateSequence,
    pub hypers: Vec<GammaHyper>,
    pub iteration: usize,
}

impl GibbsState {
    pub fn n_states(&self) -> usize {
        self.hmm.n_states()
    }

    pub fn validate(&self, counts: &CountMatrix) -> Result<()> {
        self.hmm.validate()?;
        let m = self.n_states();
        if self.hmm.n_cells() != counts.n_cells() || self.hypers.len() != counts.n_cells() {
            return Err(Error::ShapeMismatch(format!(
                "state has {} rate rows and {} hyperparameters for {} cells",
                self.hmm.n_cells(),
                self.hypers.len(),
                counts.n_cells()
            )));
        }
        if self.seq.len() != counts.n_bins() {
            return Err(Error::LengthMismatch {
                what: "state sequence vs bins",
                left: self.seq.len(),
                right: counts.n_bins(),
            });
        }
        if let Some(&s) = self.seq.iter().find(|&&s| s >= m) {
            return Err(Error::Range(format!("state label {s} outside 0..{m}")));
        }
        if let TransitionPrior::Hdp(h) = &self.prior {
            h.validate()?;
            if h.n_states() != m {
                return Err(Error::ShapeMismatch(format!("beta has {} entries for {m} states", h.n_states())));
            }
        }
        Ok(())
    }

    /// Relabel states so that new state `k` is old state `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0; perm.len()];
        for (k, &p) in perm.iter().enumerate() {
            inv[p] = k;
        }
        let prior = match &self.prior {
            TransitionPrior::Hdp(h) => TransitionPrior::Hdp(HdpParams {
                beta: perm.iter().map(|&p| h.beta[p]).collect(),
                ..h.clone()
            }),
            p => p.clone(),
        };
        Self {
            hmm: self.hmm.permuted(perm),
            prior,
            seq: StateSequence(self.seq.iter().map(|&s| inv[s]).collect()),
            hypers: self.hypers.clone(),
            iteration: self.iteration,
        }
    }
}

/// Counts of a state path needed by the conjugate updates.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    /// `n[i][j]`: transitions from `i` to `j`.
    pub n: Matrix,
    pub occ: Vec<usize>,
    /// `cellsum[c][i]`: spikes of cell `c` in bins assigned to state `i`.
    pub cellsum: Matrix,
    pub first: usize,
}

impl SufficientStats {
    pub fn compute(counts: &CountMatrix, seq: &[usize], m: usize) -> Result<Self> {
        if seq.len() != counts.n_bins() {
            return Err(Error::LengthMismatch {
                what: "state sequence vs bins",
                left: seq.len(),
                right: counts.n_bins(),
            });
        }
        if seq.is_empty() {
            return Err(Error::EmptyData("state sequence is empty".into()));
        }
        if let Some(&s) = seq.iter().find(|&&s| s >= m) {
            return Err(Error::Range(format!("state label {s} outside 0..{m}")));
        }
        let mut n = Matrix::zeros(m, m);
        for w in seq.windows(2) {
            n[(w[0], w[1])] += 1.0;
        }
        let mut occ = vec![0; m];
        for &s in seq {
            occ[s] += 1;
        }
        let mut cellsum = Matrix::zeros(counts.n_cells(), m);
        for c in 0..counts.n_cells() {
            let out = cellsum.row_mut(c);
            for (&y, &s) in counts.row(c).iter().zip(seq) {
                out[s] += y as f64;
            }
        }
        Ok(Self {
            n,
            occ,
            cellsum,
            first: seq[0],
        })
    }

    pub fn n_states(&self) -> usize {
        self.occ.len()
    }
}

/// `λ_{c,i} ~ Gamma(a_c + cellsum[c,i], b_c + occ[i])`, drawn cell by cell.
pub fn resample_rates<R: Rng + ?Sized>(rng: &mut R, stats: &SufficientStats, hypers: &[GammaHyper]) -> Result<Matrix> {
    let (n_cells, m) = (stats.cellsum.rows(), stats.n_states());
    if hypers.len() != n_cells {
        return Err(Error::LengthMismatch {
            what: "hyperparameters vs cells",
            left: hypers.len(),
            right: n_cells,
        });
    }
    let mut rates = Matrix::zeros(n_cells, m);
    for (c, h) in hypers.iter().enumerate() {
        for i in 0..m {
            rates[(c, i)] = gamma_sample_unchecked(rng, h.a + stats.cellsum[(c, i)], h.b + stats.occ[i] as f64);
        }
    }
    Ok(rates)
}

/// `π ~ Dir(prior + 1_{S_1})` and `P_i ~ Dir(prior + n_i)`.
pub fn resample_transitions_with<R: Rng + ?Sized>(
    rng: &mut R,
    stats: &SufficientStats,
    prior: &[f64],
) -> Result<(Vec<f64>, Matrix)> {
    let m = stats.n_states();
    if prior.len() != m {
        return Err(Error::LengthMismatch {
            what: "transition prior vs states",
            left: prior.len(),
            right: m,
        });
    }
    if prior.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
        return Err(Error::domain("transition prior must be positive"));
    }
    let mut conc = prior.to_vec();
    conc[stats.first] += 1.0;
    let pi = dirichlet_sample_unchecked(rng, &conc);
    let mut trans = Matrix::zeros(m, m);
    for i in 0..m {
        for (c, (&p, &n)) in conc.iter_mut().zip(prior.iter().zip(stats.n.row(i))) {
            *c = p + n;
        }
        trans.row_mut(i).copy_from_slice(&dirichlet_sample_unchecked(rng, &conc));
    }
    Ok((pi, trans))
}

pub fn resample_transitions<R: Rng + ?Sized>(rng: &mut R, stats: &SufficientStats, hdp: &HdpParams) -> Result<(Vec<f64>, Matrix)> {
    resample_transitions_with(rng, stats, &hdp.row_prior())
}

/// Exact draw of the state path given the parameters.
pub fn resample_states<R: Rng + ?Sized>(rng: &mut R, counts: &CountMatrix, hmm: &HmmParams) -> Result<StateSequence> {
    let table = emission_logliks(counts, &hmm.rates)?;
    let fwd = forward_messages(&table, &hmm.pi, &hmm.trans)?;
    backward_sample(rng, &fwd.log_alpha, &hmm.trans)
}

/// Number of occupied tables when `n` customers enter a restaurant with
/// concentration `conc`: `Σ_{k=1}^{n} Bernoulli(conc / (conc + k - 1))`.
pub fn sample_table_count<R: Rng + ?Sized>(rng: &mut R, n: u64, conc: f64) -> u64 {
    (1..=n)
        .filter(|&k| {
            let p = conc / (conc + (k - 1) as f64);
            rng.random::<f64>() < p
        })
        .count() as u64
}

/// Auxiliary table counts from one β update.
#[derive(Debug, Clone, PartialEq)]
pub struct TableCounts {
    /// Tables serving each dish, summed over restaurants.
    pub dish_tables: Vec<f64>,
    /// `(customers, tables)` for every restaurant with at least one customer.
    pub groups: Vec<(f64, f64)>,
}

impl TableCounts {
    pub fn total_tables(&self) -> f64 {
        self.dish_tables.iter().sum()
    }

    pub fn distinct_dishes(&self) -> usize {
        self.dish_tables.iter().filter(|&&m| m > 0.0).count()
    }
}

/// Table counts for transition counts `n` plus an optional initial-state
/// restaurant, then `β ~ Dir(γ/M + m̄)`.
pub fn resample_beta_from_counts<R: Rng + ?Sized>(
    rng: &mut R,
    n: &Matrix,
    first: Option<usize>,
    hdp: &HdpParams,
) -> Result<(Vec<f64>, TableCounts)> {
    let m = hdp.n_states();
    if n.rows() != m || n.cols() != m {
        return Err(Error::ShapeMismatch(format!("transition counts are {}x{} for {m} states", n.rows(), n.cols())));
    }
    let conc = hdp.row_prior();
    let mut dish_tables = vec![0.0; m];
    let mut groups = Vec::with_capacity(m + 1);
    for i in 0..m {
        let (mut customers, mut tables) = (0.0, 0.0);
        for j in 0..m {
            let nij = n[(i, j)];
            if nij > 0.0 {
                let t = sample_table_count(rng, nij as u64, conc[j]) as f64;
                dish_tables[j] += t;
                customers += nij;
                tables += t;
            }
        }
        if customers > 0.0 {
            groups.push((customers, tables));
        }
    }
    if let Some(s) = first {
        // A lone customer always opens a table.
        dish_tables[s] += 1.0;
        groups.push((1.0, 1.0));
    }
    let base = hdp.gamma / m as f64;
    let post: Vec<f64> = dish_tables.iter().map(|&t| base + t).collect();
    let mut beta = dirichlet_sample_unchecked(rng, &post);
    beta.iter_mut().for_each(|b| *b = b.max(BETA_FLOOR));
    let s: f64 = beta.iter().sum();
    beta.iter_mut().for_each(|b| *b /= s);
    Ok((beta, TableCounts { dish_tables, groups }))
}

pub fn resample_beta<R: Rng + ?Sized>(rng: &mut R, stats: &SufficientStats, hdp: &HdpParams) -> Result<(Vec<f64>, TableCounts)> {
    resample_beta_from_counts(rng, &stats.n, Some(stats.first), hdp)
}

/// Auxiliary-variable update of the shared restaurant concentration α₀:
/// `w_j ~ Beta(α₀ + 1, n_j)`, `s_j ~ Bernoulli(n_j / (n_j + α₀))`, then
/// `α₀ ~ Gamma(a + Σ m_j - Σ s_j, b - Σ ln w_j)`.
pub fn resample_alpha0<R: Rng + ?Sized>(rng: &mut R, alpha0: f64, groups: &[(f64, f64)], prior: GammaHyper) -> f64 {
    let (mut shape, mut rate) = (prior.a, prior.b);
    for &(n, m) in groups.iter().filter(|g| g.0 > 0.0) {
        let w = beta_sample_unchecked(rng, alpha0 + 1.0, n);
        let s = rng.random::<f64>() < n / (n + alpha0);
        shape += m - s as u8 as f64;
        rate -= w.ln();
    }
    gamma_sample_unchecked(rng, shape, rate)
}

/// Auxiliary-variable update of the top-level concentration γ given the total
/// table count and the number of distinct dishes.
pub fn resample_gamma<R: Rng + ?Sized>(rng: &mut R, gamma: f64, total_tables: f64, dishes: usize, prior: GammaHyper) -> f64 {
    if total_tables <= 0.0 || dishes == 0 {
        return gamma_sample_unchecked(rng, prior.a, prior.b);
    }
    let k = dishes as f64;
    let eta = beta_sample_unchecked(rng, gamma + 1.0, total_tables);
    let rate = prior.b - eta.ln();
    let odds = (prior.a + k - 1.0) / (total_tables * rate);
    let shape = if rng.random::<f64>() < odds / (1.0 + odds) {
        prior.a + k
    } else {
        prior.a + k - 1.0
    };
    gamma_sample_unchecked(rng, shape, rate)
}

pub fn resample_concentrations<R: Rng + ?Sized>(
    rng: &mut R,
    hdp: &HdpParams,
    tables: &TableCounts,
    alpha0_prior: GammaHyper,
    gamma_prior: GammaHyper,
) -> (f64, f64) {
    let alpha0 = resample_alpha0(rng, hdp.alpha0, &tables.groups, alpha0_prior);
    let gamma = resample_gamma(rng, hdp.gamma, tables.total_tables(), tables.distinct_dishes(), gamma_prior);
    (alpha0, gamma)
}

/// How the per-cell rate hyperparameters are set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HyperMode {
    /// Sampled by HMC each sweep, starting from the empirical-Bayes fit.
    Hmc,
    /// Empirical-Bayes fit on raw counts, frozen.
    Eb,
    /// `fixed_hyper` for every cell.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GibbsConfig {
    /// Truncation level M.
    pub n_states: usize,
    pub n_iters: usize,
    pub hyper_mode: HyperMode,
    pub fixed_hyper: GammaHyper,
    pub alpha0_prior: GammaHyper,
    pub gamma_prior: GammaHyper,
    /// Per-entry concentration of the finite model's `Dir(α₀·1)` rows.
    pub finite_alpha0: f64,
    pub hmc: HmcConfig,
    /// Initial states are drawn uniformly over the first `min(M, init_states)` labels.
    pub init_states: usize,
    /// Keep a full state snapshot every `thin` iterations; 0 keeps none.
    pub thin: usize,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self {
            n_states: 80,
            n_iters: 300,
            hyper_mode: HyperMode::Hmc,
            fixed_hyper: GammaHyper::default(),
            alpha0_prior: GammaHyper { a: 1.0, b: 1.0 },
            gamma_prior: GammaHyper { a: 8.0, b: 1.0 },
            finite_alpha0: 1.0,
            hmc: HmcConfig::default(),
            init_states: 25,
            thin: 1,
        }
    }
}

impl GibbsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 {
            return Err(Error::Config("n_states must be at least 1".into()));
        }
        if self.init_states == 0 {
            return Err(Error::Config("init_states must be at least 1".into()));
        }
        if !(self.finite_alpha0 > 0.0 && self.finite_alpha0.is_finite()) {
            return Err(Error::Config("finite_alpha0 must be positive".into()));
        }
        for h in [self.fixed_hyper, self.alpha0_prior, self.gamma_prior] {
            GammaHyper::new(h.a, h.b).map_err(|e| Error::Config(e.to_string()))?;
        }
        self.hmc.validate()
    }
}

/// One line of the chain trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Completed sweeps, starting at 1.
    pub iter: usize,
    /// `ln p(y | π, P, Λ)` at the end-of-sweep parameters.
    pub loglik: f64,
    /// Log joint density of data, path, and parameters.
    pub log_joint: f64,
    pub n_states: usize,
    pub n_states_95: usize,
    pub alpha0: f64,
    pub gamma: Option<f64>,
    /// Fraction of cells whose HMC proposal was accepted this sweep.
    pub hmc_accept: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub records: Vec<TraceRecord>,
    pub snapshots: Vec<GibbsState>,
    pub final_state: Option<GibbsState>,
}

impl ChainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// A chain that stopped early, with everything recorded before the failure.
#[derive(Debug)]
pub struct ChainError {
    pub error: Error,
    pub partial: Box<ChainTrace>,
}

impl fmt::Display for ChainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} iterations)", self.error, self.partial.len())
    }
}

impl std::error::Error for ChainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<ChainError> for Error {
    fn from(e: ChainError) -> Self {
        e.error
    }
}

impl From<Error> for ChainError {
    fn from(error: Error) -> Self {
        Self {
            error,
            partial: Box::default(),
        }
    }
}

/// Log joint density `ln p(y, S, Λ, π, P, β, α₀, γ | hyperparameters)`.
///
/// The HMC mode's flat prior on the log hyperparameters is improper and
/// contributes nothing.
pub fn log_joint(counts: &CountMatrix, state: &GibbsState, config: &GibbsConfig) -> Result<f64> {
    state.validate(counts)?;
    let table = emission_logliks(counts, &state.hmm.rates)?;
    Ok(log_joint_with_table(&table, state, config))
}

fn log_joint_with_table(table: &EmissionTable, state: &GibbsState, config: &GibbsConfig) -> f64 {
    let hmm = &state.hmm;
    let m = hmm.n_states();
    let mut lp = complete_data_loglik(table, &hmm.pi, &hmm.trans, &state.seq);
    for (c, h) in state.hypers.iter().enumerate() {
        lp += hmm.rates.row(c).iter().map(|&l| gamma_logpdf_unchecked(l, h.a, h.b)).sum::<f64>();
    }
    let prior = state.prior.row_prior(m);
    let floored = |v: &[f64]| v.iter().map(|&x| x.max(f64::MIN_POSITIVE)).collect::<Vec<_>>();
    lp += dirichlet_logpdf_unchecked(&floored(&hmm.pi), &prior);
    for row in hmm.trans.iter_rows() {
        lp += dirichlet_logpdf_unchecked(&floored(row), &prior);
    }
    if let TransitionPrior::Hdp(h) = &state.prior {
        lp += dirichlet_logpdf_unchecked(&h.beta, &vec![h.gamma / m as f64; m]);
        lp += gamma_logpdf_unchecked(h.alpha0, config.alpha0_prior.a, config.alpha0_prior.b);
        lp += gamma_logpdf_unchecked(h.gamma, config.gamma_prior.a, config.gamma_prior.b);
    }
    lp
}

/// A Gibbs chain over fixed data.
#[derive(Debug, Clone)]
pub struct GibbsSampler {
    counts: CountMatrix,
    config: GibbsConfig,
    state: GibbsState,
    /// Forward pass at the current parameters, reused by the next state update.
    forward: Option<Forward>,
}

impl GibbsSampler {
    /// HDP-HMM chain with a random initialization.
    pub fn new_hdp<R: Rng + ?Sized>(rng: &mut R, counts: &CountMatrix, config: &GibbsConfig) -> Result<Self> {
        config.validate()?;
        let m = config.n_states;
        let alpha0 = gamma_sample_unchecked(rng, config.alpha0_prior.a, config.alpha0_prior.b);
        let gamma = gamma_sample_unchecked(rng, config.gamma_prior.a, config.gamma_prior.b);
        let prior = TransitionPrior::Hdp(HdpParams::new(vec![1.0 / m as f64; m], alpha0, gamma)?);
        Self::initialize(rng, counts, config, prior)
    }

    /// Finite HMM chain with `Dir(finite_alpha0 · 1)` rows.
    pub fn new_finite<R: Rng + ?Sized>(rng: &mut R, counts: &CountMatrix, config: &GibbsConfig) -> Result<Self> {
        config.validate()?;
        let prior = TransitionPrior::Finite {
            alpha0: config.finite_alpha0,
        };
        Self::initialize(rng, counts, config, prior)
    }

    /// Resume from a given state.
    pub fn from_state(counts: &CountMatrix, config: &GibbsConfig, state: GibbsState) -> Result<Self> {
        config.validate()?;
        state.validate(counts)?;
        Ok(Self {
            counts: counts.clone(),
            config: config.clone(),
            state,
            forward: None,
        })
    }

    fn initialize<R: Rng + ?Sized>(rng: &mut R, counts: &CountMatrix, config: &GibbsConfig, prior: TransitionPrior) -> Result<Self> {
        let m = config.n_states;
        let hypers = initial_hypers(counts, config);
        let mut rates = Matrix::zeros(counts.n_cells(), m);
        for (c, h) in hypers.iter().enumerate() {
            for v in rates.row_mut(c) {
                *v = gamma_sample_unchecked(rng, h.a, h.b);
            }
        }
        let k = m.min(config.init_states);
        let seq: Vec<usize> = (0..counts.n_bins()).map(|_| rng.random_range(0..k)).collect();
        let stats = SufficientStats::compute(counts, &seq, m)?;
        let (pi, trans) = resample_transitions_with(rng, &stats, &prior.row_prior(m))?;
        let state = GibbsState {
            hmm: HmmParams { pi, trans, rates },
            prior,
            seq: StateSequence(seq),
            hypers,
            iteration: 0,
        };
        Self::from_state(counts, config, state)
    }

    pub fn state(&self) -> &GibbsState {
        &self.state
    }

    pub fn into_state(self) -> GibbsState {
        self.state
    }

    pub fn counts(&self) -> &CountMatrix {
        &self.counts
    }

    pub fn config(&self) -> &GibbsConfig {
        &self.config
    }

    /// Swap in new data of the same shape, keeping the parameters.
    pub fn replace_counts(&mut self, counts: CountMatrix) -> Result<()> {
        if counts.n_cells() != self.counts.n_cells() || counts.n_bins() != self.counts.n_bins() {
            return Err(Error::ShapeMismatch("replacement counts must keep the data shape".into()));
        }
        self.counts = counts;
        self.forward = None;
        Ok(())
    }

    /// One full sweep.
    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<TraceRecord> {
        let m = self.state.n_states();
        let fwd = match self.forward.take() {
            Some(f) => f,
            None => {
                let table = emission_logliks(&self.counts, &self.state.hmm.rates)?;
                forward_messages(&table, &self.state.hmm.pi, &self.state.hmm.trans)?
            }
        };
        self.state.seq = backward_sample(rng, &fwd.log_alpha, &self.state.hmm.trans)?;
        drop(fwd);
        let stats = SufficientStats::compute(&self.counts, &self.state.seq, m)?;

        self.state.hmm.rates = resample_rates(rng, &stats, &self.state.hypers)?;
        let (pi, trans) = resample_transitions_with(rng, &stats, &self.state.prior.row_prior(m))?;
        self.state.hmm.pi = pi;
        self.state.hmm.trans = trans;

        if let TransitionPrior::Hdp(h) = &mut self.state.prior {
            let (beta, tables) = resample_beta(rng, &stats, h)?;
            h.beta = beta;
            let (alpha0, gamma) = resample_concentrations(rng, h, &tables, self.config.alpha0_prior, self.config.gamma_prior);
            h.alpha0 = alpha0;
            h.gamma = gamma;
        }

        let hmc_accept = if self.config.hyper_mode == HyperMode::Hmc {
            Some(self.update_hypers(rng)?)
        } else {
            None
        };

        let table = emission_logliks(&self.counts, &self.state.hmm.rates)?;
        let fwd = forward_messages(&table, &self.state.hmm.pi, &self.state.hmm.trans)?;
        if !fwd.log_evidence.is_finite() {
            return Err(Error::numerical(format!("log evidence {} after sweep", fwd.log_evidence)));
        }
        let log_joint = log_joint_with_table(&table, &self.state, &self.config);
        self.state.iteration += 1;
        let record = TraceRecord {
            iter: self.state.iteration,
            loglik: fwd.log_evidence,
            log_joint,
            n_states: state_count(&self.state.seq),
            n_states_95: states_covering(&self.state.seq, m, 0.95),
            alpha0: self.state.prior.alpha0(),
            gamma: self.state.prior.hdp().map(|h| h.gamma),
            hmc_accept,
        };
        self.forward = Some(fwd);
        Ok(record)
    }

    /// One HMC update of `(ln a_c, ln b_c)` per cell; returns the acceptance fraction.
    fn update_hypers<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<f64> {
        let mut accepted = 0;
        for (c, h) in self.state.hypers.iter_mut().enumerate() {
            let target = HyperTarget::new(self.state.hmm.rates.row(c))?;
            let out = hmc_step(rng, &target, &[h.a.ln(), h.b.ln()], &self.config.hmc);
            if out.accepted {
                let (a, b) = (out.position[0].exp(), out.position[1].exp());
                if let Ok(new) = GammaHyper::new(a, b) {
                    *h = new;
                    accepted += 1;
                }
            }
        }
        Ok(accepted as f64 / self.state.hypers.len() as f64)
    }

    /// Run `n_iters` sweeps, recording the trace.
    pub fn run<R: Rng + ?Sized>(mut self, rng: &mut R, n_iters: usize) -> std::result::Result<ChainTrace, ChainError> {
        let mut trace = ChainTrace::default();
        for _ in 0..n_iters {
            match self.sweep(rng) {
                Ok(rec) => {
                    trace.records.push(rec);
                    if self.config.thin > 0 && self.state.iteration.is_multiple_of(self.config.thin) {
                        trace.snapshots.push(self.state.clone());
                    }
                }
                Err(error) => {
                    trace.final_state = Some(self.state);
                    return Err(ChainError {
                        error,
                        partial: Box::new(trace),
                    });
                }
            }
        }
        trace.final_state = Some(self.state);
        Ok(trace)
    }
}

fn initial_hypers(counts: &CountMatrix, config: &GibbsConfig) -> Vec<GammaHyper> {
    match config.hyper_mode {
        HyperMode::Fixed => vec![config.fixed_hyper; counts.n_cells()],
        HyperMode::Eb | HyperMode::Hmc => counts.rows().map(eb_fit).collect(),
    }
}

/// HDP-HMM chain from a random initialization.
pub fn run_chain<R: Rng + ?Sized>(rng: &mut R, counts: &CountMatrix, config: &GibbsConfig) -> std::result::Result<ChainTrace, ChainError> {
    GibbsSampler::new_hdp(rng, counts, config)?.run(rng, config.n_iters)
}

/// Finite HMM chain with `config.n_states` states.
pub fn run_finite_hmm_chain<R: Rng + ?Sized>(
    rng: &mut R,
    counts: &CountMatrix,
    config: &GibbsConfig,
) -> std::result::Result<ChainTrace, ChainError> {
    GibbsSampler::new_finite(rng, counts, config)?.run(rng, config.n_iters)
}

/// Independent chains in parallel, chain `k` drawing from `rng.child(k)`.
pub fn run_chains(
    rng: &RngHandle,
    counts: &CountMatrix,
    config: &GibbsConfig,
    n_chains: usize,
    finite: bool,
) -> Vec<std::result::Result<ChainTrace, ChainError>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n_chains)
            .map(|k| {
                let mut r = rng.child(k as u64);
                scope.spawn(move || {
                    if finite {
                        run_finite_hmm_chain(&mut r, counts, config)
                    } else {
                        run_chain(&mut r, counts, config)
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    })
}

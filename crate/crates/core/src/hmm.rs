//! Exact HMM computations over a truncated state space.
//!
//! All message passing is carried out in log space. Each step shifts the
//! previous messages by their maximum before the matrix-vector product, and
//! falls back to a per-entry log-sum-exp whenever that product underflows, so
//! states whose mass is many orders of magnitude below the leader are still
//! tracked exactly. Emission entries of `-inf` (impossible observations) are
//! allowed and give the state zero mass at that bin.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::CountMatrix;
use crate::dist::{categorical_unnormalized, ln_gamma, log_sum_exp};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Latent state path with 0-based state labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateSequence(pub Vec<usize>);

impl StateSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl std::ops::Deref for StateSequence {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

/// Initial distribution, row-stochastic transition matrix, and C×M rate panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmParams {
    pub pi: Vec<f64>,
    pub trans: Matrix,
    pub rates: Matrix,
}

impl HmmParams {
    pub fn new(pi: Vec<f64>, trans: Matrix, rates: Matrix) -> Result<Self> {
        let p = Self { pi, trans, rates };
        p.validate()?;
        Ok(p)
    }

    pub fn n_states(&self) -> usize {
        self.pi.len()
    }

    pub fn n_cells(&self) -> usize {
        self.rates.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.pi.len();
        if m == 0 {
            return Err(Error::ShapeMismatch("HMM needs at least one state".into()));
        }
        if self.trans.rows() != m || self.trans.cols() != m || self.rates.cols() != m {
            return Err(Error::ShapeMismatch(format!(
                "pi has {m} states, P is {}x{}, rates have {} columns",
                self.trans.rows(),
                self.trans.cols(),
                self.rates.cols()
            )));
        }
        check_prob_vector("pi", &self.pi)?;
        for (i, row) in self.trans.iter_rows().enumerate() {
            check_prob_vector(&format!("transition row {i}"), row)?;
        }
        if self.rates.as_slice().iter().any(|&r| !(r >= 0.0) || !r.is_finite()) {
            return Err(Error::domain("rates must be nonnegative and finite"));
        }
        Ok(())
    }

    /// Relabel states so that new state `k` is old state `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            pi: perm.iter().map(|&p| self.pi[p]).collect(),
            trans: self.trans.permute_square(perm),
            rates: self.rates.permute_cols(perm),
        }
    }
}

fn check_prob_vector(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::domain(format!("{name} has negative or NaN entries")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("{name} sums to {s}, expected 1")));
    }
    Ok(())
}

/// Per-bin emission log-likelihoods, T×M.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionTable {
    pub loglik: Matrix,
}

impl EmissionTable {
    pub fn n_bins(&self) -> usize {
        self.loglik.rows()
    }

    pub fn n_states(&self) -> usize {
        self.loglik.cols()
    }
}

/// `Σ_c lnΓ(y_{c,t} + 1)` for each bin.
pub fn log_factorial_sums(counts: &CountMatrix) -> Vec<f64> {
    let mut out = vec![0.0; counts.n_bins()];
    for row in counts.rows() {
        for (o, &y) in out.iter_mut().zip(row) {
            if y > 1 {
                *o += ln_gamma(y as f64 + 1.0);
            }
        }
    }
    out
}

/// Poisson emission log-likelihoods `Σ_c [y ln λ - λ - ln y!]`.
pub fn emission_logliks(counts: &CountMatrix, rates: &Matrix) -> Result<EmissionTable> {
    if rates.rows() != counts.n_cells() {
        return Err(Error::ShapeMismatch(format!(
            "rate panel has {} rows for {} cells",
            rates.rows(),
            counts.n_cells()
        )));
    }
    if rates.as_slice().iter().any(|&r| !(r >= 0.0)) {
        return Err(Error::domain("rates must be nonnegative"));
    }
    let log_rates = rates.map(f64::ln);
    let rate_sums: Vec<f64> = (0..rates.cols()).map(|i| (0..rates.rows()).map(|c| rates[(c, i)]).sum()).collect();
    Ok(expected_emission_logliks(counts, &log_rates, &rate_sums, &log_factorial_sums(counts)))
}

/// Emission table from per-(cell, state) log-rates and per-state summed rates:
/// entry `(t, i) = Σ_c y_{c,t}·log_rates[c,i] - rate_sums[i] - lfact[t]`.
///
/// Zero counts contribute nothing from `log_rates`, so a zero rate with a zero
/// count is harmless. The variational surrogate reuses this with expected
/// log-rates and expected rates.
pub(crate) fn expected_emission_logliks(
    counts: &CountMatrix,
    log_rates: &Matrix,
    rate_sums: &[f64],
    lfact: &[f64],
) -> EmissionTable {
    let (n_cells, n_bins, m) = (counts.n_cells(), counts.n_bins(), log_rates.cols());
    let mut table = Matrix::zeros(n_bins, m);
    for t in 0..n_bins {
        let out = table.row_mut(t);
        for (o, &s) in out.iter_mut().zip(rate_sums) {
            *o = -s - lfact[t];
        }
        for c in 0..n_cells {
            let y = counts.get(c, t);
            if y == 0 {
                continue;
            }
            let yf = y as f64;
            for (o, &lr) in out.iter_mut().zip(log_rates.row(c)) {
                *o += yf * lr;
            }
        }
    }
    EmissionTable { loglik: table }
}

/// Forward pass output.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `log p(y_{0..=t}, S_t = i)`, T×M.
    pub log_alpha: Matrix,
    /// `log p(y_{0..T})`.
    pub log_evidence: f64,
}

fn check_shapes(table: &EmissionTable, pi: &[f64], trans: &Matrix) -> Result<()> {
    let m = table.n_states();
    if pi.len() != m || trans.rows() != m || trans.cols() != m {
        return Err(Error::ShapeMismatch(format!(
            "emission table has {m} states, pi {}, P {}x{}",
            pi.len(),
            trans.rows(),
            trans.cols()
        )));
    }
    if table.n_bins() == 0 {
        return Err(Error::EmptyData("emission table has no bins".into()));
    }
    Ok(())
}

/// One propagation step: `out_j = ln Σ_i exp(prev_i) · A[i, j]` where `A` is
/// nonnegative and `log_a` holds its logs.
fn propagate_forward(prev: &[f64], a: &Matrix, log_a: &Matrix, col_positive: &[bool], w: &mut [f64], out: &mut [f64]) {
    let m = prev.len();
    let shift = prev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = f64::NEG_INFINITY);
        return;
    }
    for (wi, &p) in w.iter_mut().zip(prev) {
        *wi = (p - shift).exp();
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    for i in 0..m {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for (o, &aij) in out.iter_mut().zip(a.row(i)) {
            *o += wi * aij;
        }
    }
    for j in 0..m {
        if out[j] > 0.0 {
            out[j] = shift + out[j].ln();
        } else if col_positive[j] {
            let mut best = f64::NEG_INFINITY;
            let mut terms = Vec::with_capacity(m);
            for i in 0..m {
                let v = prev[i] + log_a[(i, j)];
                best = best.max(v);
                terms.push(v);
            }
            out[j] = if best == f64::NEG_INFINITY { best } else { log_sum_exp(&terms) };
        } else {
            out[j] = f64::NEG_INFINITY;
        }
    }
}

/// One backward step: `out_i = ln Σ_j A[i, j] · exp(next_j)`.
fn propagate_backward(next: &[f64], a: &Matrix, log_a: &Matrix, row_positive: &[bool], w: &mut [f64], out: &mut [f64]) {
    let m = next.len();
    let shift = next.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = f64::NEG_INFINITY);
        return;
    }
    for (wj, &v) in w.iter_mut().zip(next) {
        *wj = (v - shift).exp();
    }
    for i in 0..m {
        let s: f64 = a.row(i).iter().zip(w.iter()).map(|(&aij, &wj)| aij * wj).sum();
        out[i] = if s > 0.0 {
            shift + s.ln()
        } else if row_positive[i] {
            let terms: Vec<f64> = (0..m).map(|j| log_a[(i, j)] + next[j]).collect();
            log_sum_exp(&terms)
        } else {
            f64::NEG_INFINITY
        };
    }
}

fn positivity(a: &Matrix) -> (Vec<bool>, Vec<bool>) {
    let m = a.rows();
    let rows = (0..m).map(|i| a.row(i).iter().any(|&v| v > 0.0)).collect();
    let cols = (0..a.cols()).map(|j| (0..m).any(|i| a[(i, j)] > 0.0)).collect();
    (rows, cols)
}

/// Forward messages for any nonnegative initial weights and transition
/// matrix; neither needs to be normalized.
pub fn forward_messages(table: &EmissionTable, pi: &[f64], trans: &Matrix) -> Result<Forward> {
    check_shapes(table, pi, trans)?;
    let (n_bins, m) = (table.n_bins(), table.n_states());
    let log_trans = trans.map(f64::ln);
    let (_, col_positive) = positivity(trans);
    let mut log_alpha = Matrix::zeros(n_bins, m);
    for (i, la) in log_alpha.row_mut(0).iter_mut().enumerate() {
        *la = pi[i].ln() + table.loglik[(0, i)];
    }
    let mut w = vec![0.0; m];
    let mut next = vec![0.0; m];
    for t in 1..n_bins {
        propagate_forward(log_alpha.row(t - 1), trans, &log_trans, &col_positive, &mut w, &mut next);
        let row = log_alpha.row_mut(t);
        for ((r, &n), &e) in row.iter_mut().zip(&next).zip(table.loglik.row(t)) {
            *r = n + e;
        }
    }
    let log_evidence = log_sum_exp(log_alpha.row(n_bins - 1));
    if log_evidence.is_nan() {
        return Err(Error::numerical("forward evidence is NaN"));
    }
    Ok(Forward { log_alpha, log_evidence })
}

/// Draw a state path from `p(S | y, π, P, Λ)` given forward messages.
pub fn backward_sample<R: Rng + ?Sized>(rng: &mut R, log_alpha: &Matrix, trans: &Matrix) -> Result<StateSequence> {
    let (n_bins, m) = (log_alpha.rows(), log_alpha.cols());
    if trans.rows() != m || trans.cols() != m {
        return Err(Error::ShapeMismatch("transition matrix does not match messages".into()));
    }
    if n_bins == 0 {
        return Ok(StateSequence(Vec::new()));
    }
    let mut seq = vec![0usize; n_bins];
    let mut w = vec![0.0; m];
    let draw = |rng: &mut R, logits: &[f64], w: &mut Vec<f64>| -> Option<usize> {
        let shift = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !shift.is_finite() {
            return None;
        }
        w.clear();
        w.extend(logits.iter().map(|&l| (l - shift).exp()));
        let total: f64 = w.iter().sum();
        Some(categorical_unnormalized(rng, w, total))
    };
    seq[n_bins - 1] = draw(rng, log_alpha.row(n_bins - 1), &mut w)
        .ok_or_else(|| Error::numerical(format!("all forward messages at t={} are -inf", n_bins - 1)))?;
    let mut logits = vec![0.0; m];
    for t in (0..n_bins - 1).rev() {
        let next = seq[t + 1];
        let la = log_alpha.row(t);
        for i in 0..m {
            logits[i] = la[i] + trans[(i, next)].ln();
        }
        seq[t] = draw(rng, &logits, &mut w)
            .ok_or_else(|| Error::numerical(format!("no state at t={t} can reach state {next}")))?;
    }
    Ok(StateSequence(seq))
}

/// Posterior marginals.
#[derive(Debug, Clone)]
pub struct Smoothed {
    /// `p(S_t = i | y)`, T×M.
    pub gamma: Matrix,
    /// `p(S_t = i, S_{t+1} = j | y)`, one M×M slice per `t < T-1`.
    pub xi: Vec<Matrix>,
    pub log_evidence: f64,
}

/// Posterior marginals with the pairwise terms summed over time, which is all
/// the variational updates need.
#[derive(Debug, Clone)]
pub struct SmoothedStats {
    pub gamma: Matrix,
    /// `Σ_t p(S_t = i, S_{t+1} = j | y)`.
    pub trans_counts: Matrix,
    /// Log of the normalizer `Σ_S π_{S_0} Π P Π exp(E)`.
    pub log_evidence: f64,
}

fn backward_messages(table: &EmissionTable, trans: &Matrix) -> Matrix {
    let (n_bins, m) = (table.n_bins(), table.n_states());
    let log_trans = trans.map(f64::ln);
    let (row_positive, _) = positivity(trans);
    let mut log_beta = Matrix::zeros(n_bins, m);
    let mut w = vec![0.0; m];
    let mut u = vec![0.0; m];
    let mut out = vec![0.0; m];
    for t in (0..n_bins.saturating_sub(1)).rev() {
        for j in 0..m {
            u[j] = table.loglik[(t + 1, j)] + log_beta[(t + 1, j)];
        }
        propagate_backward(&u, trans, &log_trans, &row_positive, &mut w, &mut out);
        log_beta.row_mut(t).copy_from_slice(&out);
    }
    log_beta
}

struct Passes {
    fwd: Forward,
    log_beta: Matrix,
}

fn both_passes(table: &EmissionTable, pi: &[f64], trans: &Matrix) -> Result<Passes> {
    let fwd = forward_messages(table, pi, trans)?;
    if !fwd.log_evidence.is_finite() {
        return Err(Error::numerical("data have zero probability under the model"));
    }
    let log_beta = backward_messages(table, trans);
    Ok(Passes { fwd, log_beta })
}

fn gamma_from(p: &Passes) -> Matrix {
    let (n_bins, m) = (p.fwd.log_alpha.rows(), p.fwd.log_alpha.cols());
    let mut gamma = Matrix::zeros(n_bins, m);
    for t in 0..n_bins {
        let row = gamma.row_mut(t);
        for i in 0..m {
            row[i] = p.fwd.log_alpha[(t, i)] + p.log_beta[(t, i)];
        }
        let z = log_sum_exp(row);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - z).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    gamma
}

/// Pairwise marginal at `t`, accumulated (scaled by `weight`) into `acc`.
fn accumulate_xi(table: &EmissionTable, trans: &Matrix, p: &Passes, t: usize, acc: &mut Matrix, a: &mut [f64], b: &mut [f64]) {
    let m = trans.rows();
    let la = p.fwd.log_alpha.row(t);
    let ma = la.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut mb = f64::NEG_INFINITY;
    for j in 0..m {
        b[j] = table.loglik[(t + 1, j)] + p.log_beta[(t + 1, j)];
        mb = mb.max(b[j]);
    }
    for i in 0..m {
        a[i] = (la[i] - ma).exp();
    }
    for v in b.iter_mut() {
        *v = (*v - mb).exp();
    }
    let mut total = 0.0;
    for i in 0..m {
        if a[i] == 0.0 {
            continue;
        }
        total += a[i] * trans.row(i).iter().zip(b.iter()).map(|(&pij, &bj)| pij * bj).sum::<f64>();
    }
    // Normalizing per slice keeps each slice summing to one exactly.
    let scale = 1.0 / total;
    for i in 0..m {
        let ai = a[i] * scale;
        if ai == 0.0 {
            continue;
        }
        for ((o, &pij), &bj) in acc.row_mut(i).iter_mut().zip(trans.row(i)).zip(b.iter()) {
            *o += ai * pij * bj;
        }
    }
}

pub fn smoothed_marginals(table: &EmissionTable, pi: &[f64], trans: &Matrix) -> Result<Smoothed> {
    let p = both_passes(table, pi, trans)?;
    let gamma = gamma_from(&p);
    let m = table.n_states();
    let (mut a, mut b) = (vec![0.0; m], vec![0.0; m]);
    let xi = (0..table.n_bins().saturating_sub(1))
        .map(|t| {
            let mut slice = Matrix::zeros(m, m);
            accumulate_xi(table, trans, &p, t, &mut slice, &mut a, &mut b);
            slice
        })
        .collect();
    Ok(Smoothed {
        gamma,
        xi,
        log_evidence: p.fwd.log_evidence,
    })
}

pub fn smoothed_stats(table: &EmissionTable, pi: &[f64], trans: &Matrix) -> Result<SmoothedStats> {
    let p = both_passes(table, pi, trans)?;
    let gamma = gamma_from(&p);
    let m = table.n_states();
    let (mut a, mut b) = (vec![0.0; m], vec![0.0; m]);
    let mut trans_counts = Matrix::zeros(m, m);
    for t in 0..table.n_bins().saturating_sub(1) {
        accumulate_xi(table, trans, &p, t, &mut trans_counts, &mut a, &mut b);
    }
    Ok(SmoothedStats {
        gamma,
        trans_counts,
        log_evidence: p.fwd.log_evidence,
    })
}

/// `log p(y, S | π, P, Λ)` for a fixed path.
pub fn complete_data_loglik(table: &EmissionTable, pi: &[f64], trans: &Matrix, seq: &[usize]) -> f64 {
    if seq.is_empty() {
        return 0.0;
    }
    let mut lp = pi[seq[0]].ln() + table.loglik[(0, seq[0])];
    for t in 1..seq.len() {
        lp += trans[(seq[t - 1], seq[t])].ln() + table.loglik[(t, seq[t])];
    }
    lp
}

/// Number of distinct states visited.
pub fn state_count(seq: &[usize]) -> usize {
    let mut seen: Vec<usize> = seq.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Visit counts for states `0..n_states`.
pub fn occupancy(seq: &[usize], n_states: usize) -> Vec<usize> {
    let mut occ = vec![0; n_states];
    for &s in seq {
        occ[s] += 1;
    }
    occ
}

/// Smallest number of states, taken by decreasing occupancy, that covers at
/// least `frac` of the bins.
pub fn states_covering(seq: &[usize], n_states: usize, frac: f64) -> usize {
    let mut occ = occupancy(seq, n_states);
    occ.sort_unstable_by(|a, b| b.cmp(a));
    let need = frac * seq.len() as f64;
    let mut acc = 0usize;
    for (k, &o) in occ.iter().enumerate() {
        if acc as f64 >= need {
            return k;
        }
        acc += o;
    }
    occ.iter().filter(|&&o| o > 0).count()
}

/// Most probable state path. Ties go to the lower state index.
pub fn viterbi(table: &EmissionTable, pi: &[f64], trans: &Matrix) -> Result<StateSequence> {
    check_shapes(table, pi, trans)?;
    let (n_bins, m) = (table.n_bins(), table.n_states());
    let log_trans = trans.map(f64::ln);
    let mut delta: Vec<f64> = (0..m).map(|i| pi[i].ln() + table.loglik[(0, i)]).collect();
    let mut back = vec![0usize; n_bins * m];
    let mut next = vec![0.0; m];
    for t in 1..n_bins {
        for j in 0..m {
            let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
            for i in 0..m {
                let v = delta[i] + log_trans[(i, j)];
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            next[j] = best + table.loglik[(t, j)];
            back[t * m + j] = arg;
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let (mut state, mut best) = (0, f64::NEG_INFINITY);
    for (i, &v) in delta.iter().enumerate() {
        if v > best {
            best = v;
            state = i;
        }
    }
    if !best.is_finite() {
        return Err(Error::numerical("no path has positive probability"));
    }
    let mut seq = vec![0usize; n_bins];
    seq[n_bins - 1] = state;
    for t in (1..n_bins).rev() {
        state = back[t * m + state];
        seq[t - 1] = state;
    }
    Ok(StateSequence(seq))
}

/// Per-bin argmax of posterior marginals.
pub fn marginal_argmax(gamma: &Matrix) -> StateSequence {
    StateSequence(
        gamma
            .iter_rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngHandle;
    use crate::testutil::{all_paths, random_instance};
    use proptest::prelude::*;

    #[test]
    fn viterbi_matches_enumeration() {
        let mut rng = RngHandle::new(77);
        for _ in 0..100 {
            let t_len = 1 + rand::Rng::random_range(&mut rng, 0..6);
            let m = 1 + rand::Rng::random_range(&mut rng, 0..3);
            let (table, pi, p) = random_instance(&mut rng, t_len, m);
            let mut best = (f64::NEG_INFINITY, Vec::new());
            for path in all_paths(t_len, m) {
                let mut l = pi[path[0]].ln() + table.loglik[(0, path[0])];
                for t in 1..t_len {
                    l += p[(path[t - 1], path[t])].ln() + table.loglik[(t, path[t])];
                }
                if l > best.0 {
                    best = (l, path);
                }
            }
            assert_eq!(viterbi(&table, &pi, &p).unwrap().0, best.1);
        }
    }

    fn table(rows: &[Vec<f64>]) -> EmissionTable {
        EmissionTable {
            loglik: Matrix::from_rows(rows).unwrap(),
        }
    }

    #[test]
    fn emission_examples() {
        let counts = CountMatrix::from_rows(vec![vec![0]]).unwrap();
        let rates = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let t = emission_logliks(&counts, &rates).unwrap();
        assert!((t.loglik[(0, 0)] + 2.0).abs() < 1e-14);

        let counts = CountMatrix::from_rows(vec![vec![1], vec![1]]).unwrap();
        let rates = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let t = emission_logliks(&counts, &rates).unwrap();
        assert!((t.loglik[(0, 0)] + 2.0).abs() < 1e-14);

        let counts = CountMatrix::from_rows(vec![vec![3, 0]]).unwrap();
        let rates = Matrix::from_rows(&[vec![0.0, 1.5]]).unwrap();
        let t = emission_logliks(&counts, &rates).unwrap();
        assert_eq!(t.loglik[(0, 0)], f64::NEG_INFINITY);
        assert!(t.loglik[(0, 1)].is_finite());
        assert_eq!(t.loglik[(1, 0)], 0.0);

        let rates = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let counts = CountMatrix::from_rows(vec![vec![1]]).unwrap();
        assert!(matches!(emission_logliks(&counts, &rates), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn single_state_evidence_is_sum() {
        let t = table(&[vec![-1.0], vec![-2.5], vec![-0.5]]);
        let f = forward_messages(&t, &[1.0], &Matrix::identity(1)).unwrap();
        assert!((f.log_evidence + 4.0).abs() < 1e-12);
    }

    #[test]
    fn absorbing_chain_evidence() {
        let t = table(&[vec![-1.0, -0.1], vec![-2.0, -0.2], vec![-3.0, -0.3]]);
        let f = forward_messages(&t, &[1.0, 0.0], &Matrix::identity(2)).unwrap();
        assert!((f.log_evidence + 6.0).abs() < 1e-12);
        let mut rng = RngHandle::new(1);
        let s = backward_sample(&mut rng, &f.log_alpha, &Matrix::identity(2)).unwrap();
        assert_eq!(s.0, vec![0, 0, 0]);
    }

    #[test]
    fn single_state_sample_is_constant() {
        let t = table(&vec![vec![-1.0]; 5]);
        let f = forward_messages(&t, &[1.0], &Matrix::identity(1)).unwrap();
        let s = backward_sample(&mut RngHandle::new(3), &f.log_alpha, &Matrix::identity(1)).unwrap();
        assert_eq!(s.0, vec![0; 5]);
    }

    #[test]
    fn impossible_rows_error() {
        let la = Matrix::filled(2, 2, f64::NEG_INFINITY);
        assert!(matches!(
            backward_sample(&mut RngHandle::new(0), &la, &Matrix::identity(2)),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn forward_matches_enumeration() {
        let mut rng = RngHandle::new(17);
        for _ in 0..50 {
            let (tab, pi, p) = random_instance(&mut rng, 3, 2);
            let f = forward_messages(&tab, &pi, &p).unwrap();
            let brute = log_sum_exp(
                &all_paths(3, 2)
                    .iter()
                    .map(|s| complete_data_loglik(&tab, &pi, &p, s))
                    .collect::<Vec<_>>(),
            );
            assert!((f.log_evidence - brute).abs() < 1e-10);
        }
    }

    #[test]
    fn smoothed_matches_enumeration() {
        let mut rng = RngHandle::new(23);
        for _ in 0..50 {
            let (tab, pi, p) = random_instance(&mut rng, 3, 2);
            let sm = smoothed_marginals(&tab, &pi, &p).unwrap();
            let paths = all_paths(3, 2);
            let lps: Vec<f64> = paths.iter().map(|s| complete_data_loglik(&tab, &pi, &p, s)).collect();
            let z = log_sum_exp(&lps);
            let mut g = Matrix::zeros(3, 2);
            let mut xi = vec![Matrix::zeros(2, 2); 2];
            for (s, lp) in paths.iter().zip(&lps) {
                let w = (lp - z).exp();
                for t in 0..3 {
                    g[(t, s[t])] += w;
                }
                for t in 0..2 {
                    xi[t][(s[t], s[t + 1])] += w;
                }
            }
            for (a, b) in sm.gamma.as_slice().iter().zip(g.as_slice()) {
                assert!((a - b).abs() < 1e-10);
            }
            for t in 0..2 {
                for (a, b) in sm.xi[t].as_slice().iter().zip(xi[t].as_slice()) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn uninformative_emissions_give_uniform_marginals() {
        let t = table(&vec![vec![0.0; 3]; 4]);
        let pi = vec![1.0 / 3.0; 3];
        let p = Matrix::filled(3, 3, 1.0 / 3.0);
        let sm = smoothed_marginals(&t, &pi, &p).unwrap();
        for v in sm.gamma.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_sampling_matches_path_posterior() {
        let mut rng = RngHandle::new(5);
        let (tab, pi, p) = random_instance(&mut rng, 4, 2);
        let f = forward_messages(&tab, &pi, &p).unwrap();
        let paths = all_paths(4, 2);
        let exact: Vec<f64> = paths
            .iter()
            .map(|s| (complete_data_loglik(&tab, &pi, &p, s) - f.log_evidence).exp())
            .collect();
        let n = 100_000;
        let mut freq = vec![0usize; paths.len()];
        for _ in 0..n {
            let s = backward_sample(&mut rng, &f.log_alpha, &p).unwrap();
            let idx = s.iter().fold(0, |acc, &x| acc * 2 + x);
            freq[idx] += 1;
        }
        let tv: f64 = 0.5 * freq.iter().zip(&exact).map(|(&c, &e)| (c as f64 / n as f64 - e).abs()).sum::<f64>();
        assert!(tv < 0.01, "total variation {tv}");
    }

    #[test]
    fn impossible_emission_gets_zero_mass() {
        let t = table(&[vec![-1.0, -1.0], vec![f64::NEG_INFINITY, -1.0], vec![-1.0, -1.0]]);
        let pi = vec![0.5, 0.5];
        let p = Matrix::filled(2, 2, 0.5);
        let sm = smoothed_marginals(&t, &pi, &p).unwrap();
        assert_eq!(sm.gamma[(1, 0)], 0.0);
        assert!((sm.gamma[(1, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn underflowed_states_are_still_tracked() {
        // State 1 falls ~2000 nats behind but is the only state that can
        // explain the last bin.
        let t = table(&[vec![0.0, -2000.0], vec![0.0, 0.0], vec![f64::NEG_INFINITY, 0.0]]);
        let pi = vec![0.5, 0.5];
        let p = Matrix::identity(2);
        let f = forward_messages(&t, &pi, &p).unwrap();
        assert!((f.log_evidence - (0.5f64.ln() - 2000.0)).abs() < 1e-9);
        let sm = smoothed_marginals(&t, &pi, &p).unwrap();
        assert!((sm.gamma[(0, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn state_count_examples() {
        assert_eq!(state_count(&[0, 0, 0]), 1);
        assert_eq!(occupancy(&[0, 0, 0], 3), vec![3, 0, 0]);
        assert_eq!(state_count(&[0, 1, 0]), 2);
        assert_eq!(state_count(&[]), 0);
        assert_eq!(states_covering(&[0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 2], 3, 0.8), 1);
        assert_eq!(states_covering(&[0, 0, 1, 1, 2], 3, 0.95), 3);
    }

    proptest! {
        #[test]
        fn evidence_invariant_under_relabeling(seed in 0u64..1000, t_len in 1usize..8, m in 1usize..4) {
            let mut rng = RngHandle::new(seed);
            let (tab, pi, p) = random_instance(&mut rng, t_len, m);
            let perm: Vec<usize> = (0..m).rev().collect();
            let tab2 = EmissionTable { loglik: tab.loglik.permute_cols(&perm) };
            let pi2: Vec<f64> = perm.iter().map(|&k| pi[k]).collect();
            let p2 = p.permute_square(&perm);
            let a = forward_messages(&tab, &pi, &p).unwrap().log_evidence;
            let b = forward_messages(&tab2, &pi2, &p2).unwrap().log_evidence;
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn marginals_normalize(seed in 0u64..1000, t_len in 2usize..8, m in 1usize..4) {
            let mut rng = RngHandle::new(seed);
            let (tab, pi, p) = random_instance(&mut rng, t_len, m);
            let sm = smoothed_marginals(&tab, &pi, &p).unwrap();
            for row in sm.gamma.iter_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            for (t, x) in sm.xi.iter().enumerate() {
                prop_assert!((x.sum() - 1.0).abs() < 1e-9);
                for i in 0..m {
                    prop_assert!((x.row(i).iter().sum::<f64>() - sm.gamma[(t, i)]).abs() < 1e-10);
                }
            }
        }
    }
}

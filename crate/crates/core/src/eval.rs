//! Predictive likelihoods, state alignment, position decoding and
//! information measures.
//!
//! All log-likelihoods here drop the `Σ lnΓ(y + 1)` constants, so model and
//! baseline values can be differenced directly.

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CountMatrix, PositionTrace};
use crate::dist::{dirichlet_sample, gamma_sample, log_sum_exp};
use crate::error::{Error, Result};
use crate::hmm::{emission_logliks, forward_messages, log_factorial_sums, smoothed_marginals, HmmParams};
use crate::matrix::Matrix;
use crate::vb::VariationalState;

/// Mean training count per bin for each cell.
pub fn baseline_rates(train: &CountMatrix) -> Result<Vec<f64>> {
    if train.n_bins() == 0 {
        return Err(Error::EmptyData("baseline needs at least one training bin".into()));
    }
    let t = train.n_bins() as f64;
    Ok(train.cell_totals().into_iter().map(|s| s as f64 / t).collect())
}

/// `Σ_c [-T λ̂_c + Σ_t y_{c,t} ln λ̂_c]`.
pub fn baseline_predictive_ll(test: &CountMatrix, rates: &[f64]) -> Result<f64> {
    if rates.len() != test.n_cells() {
        return Err(Error::LengthMismatch {
            what: "baseline rates vs cells",
            left: rates.len(),
            right: test.n_cells(),
        });
    }
    let t = test.n_bins() as f64;
    let mut ll = 0.0;
    for (c, (&lam, total)) in rates.iter().zip(test.cell_totals()).enumerate() {
        if total > 0 && lam <= 0.0 {
            return Err(Error::ZeroRateWithSpikes { cell: c });
        }
        ll -= t * lam;
        if total > 0 {
            ll += total as f64 * lam.ln();
        }
    }
    Ok(ll)
}

fn constant_free_evidence(params: &HmmParams, test: &CountMatrix, lfact_total: f64) -> Result<f64> {
    let table = emission_logliks(test, &params.rates)?;
    Ok(forward_messages(&table, &params.pi, &params.trans)?.log_evidence + lfact_total)
}

fn log_mean_exp(v: &[f64]) -> f64 {
    log_sum_exp(v) - (v.len() as f64).ln()
}

/// `ln (1/N) Σ_n p(y_test | θ_n)` with the hidden path summed out.
pub fn predictive_ll_mcmc(samples: &[HmmParams], test: &CountMatrix) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyData("no posterior samples".into()));
    }
    let lfact: f64 = log_factorial_sums(test).iter().sum();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(samples.len());
    let chunk = samples.len().div_ceil(workers);
    let per_sample: Vec<Result<f64>> = std::thread::scope(|s| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|p| constant_free_evidence(p, test, lfact)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evidence worker panicked")).collect()
    });
    let values = per_sample.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(log_mean_exp(&values))
}

/// One parameter draw from the variational factors. The Dirichlet draws
/// include the overflow entry; π and the transition rows are renormalized
/// over the `M` represented states.
pub fn sample_vb_params<R: Rng + ?Sized>(rng: &mut R, vs: &VariationalState) -> Result<HmmParams> {
    let m = vs.n_states();
    let truncate = |mut w: Vec<f64>| -> Vec<f64> {
        w.truncate(m);
        let s: f64 = w.iter().sum();
        if s > 0.0 {
            w.iter_mut().for_each(|v| *v /= s);
        } else {
            w = vec![1.0 / m as f64; m];
        }
        w
    };
    let pi = truncate(dirichlet_sample(rng, &vs.init_factor)?);
    let mut trans = Matrix::zeros(m, m);
    for i in 0..m {
        let row = truncate(dirichlet_sample(rng, vs.trans_factors.row(i))?);
        trans.row_mut(i).copy_from_slice(&row);
    }
    let mut rates = Matrix::zeros(vs.n_cells(), m);
    for c in 0..vs.n_cells() {
        for i in 0..m {
            rates[(c, i)] = gamma_sample(rng, vs.rate_a[(c, i)], vs.rate_b[(c, i)])?;
        }
    }
    HmmParams::new(pi, trans, rates)
}

/// `ln (1/N) Σ_n p(y_test | θ_n)` over `n_draws` parameter draws from the
/// variational factors.
pub fn predictive_ll_vb<R: Rng + ?Sized>(vs: &VariationalState, n_draws: usize, rng: &mut R, test: &CountMatrix) -> Result<f64> {
    if n_draws == 0 {
        return Err(Error::Config("need at least one variational draw".into()));
    }
    let draws = (0..n_draws).map(|_| sample_vb_params(rng, vs)).collect::<Result<Vec<_>>>()?;
    predictive_ll_mcmc(&draws, test)
}

/// `(model - baseline) / (ln 2 · spikes)`.
pub fn bits_per_spike(model_ll: f64, baseline_ll: f64, test: &CountMatrix) -> Result<f64> {
    let spikes = test.total_spikes();
    if spikes == 0 {
        return Err(Error::NoSpikes);
    }
    Ok((model_ll - baseline_ll) / (LN_2 * spikes as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMatch {
    /// `(true_state, inferred_state)` in the order they were matched.
    pub mapping: Vec<(usize, usize)>,
    /// Co-occupancy counts, true states by inferred states.
    pub overlap: Matrix,
}

impl StateMatch {
    /// Fraction of bins that fall on matched pairs.
    pub fn matched_fraction(&self) -> f64 {
        let total = self.overlap.sum();
        if total == 0.0 {
            return 0.0;
        }
        self.mapping.iter().map(|&(i, j)| self.overlap[(i, j)]).sum::<f64>() / total
    }

    pub fn inferred_for(&self, true_state: usize) -> Option<usize> {
        self.mapping.iter().find(|p| p.0 == true_state).map(|p| p.1)
    }
}

/// Repeatedly take the largest unmatched cell of the overlap matrix. Ties go
/// to the lower true index, then the lower inferred index.
pub fn greedy_match_overlap(overlap: &Matrix) -> Vec<(usize, usize)> {
    let (rows, cols) = (overlap.rows(), overlap.cols());
    let mut row_free = vec![true; rows];
    let mut col_free = vec![true; cols];
    let mut out = Vec::new();
    for _ in 0..rows.min(cols) {
        let mut best: Option<(usize, usize)> = None;
        for i in (0..rows).filter(|&i| row_free[i]) {
            for j in (0..cols).filter(|&j| col_free[j]) {
                if best.is_none_or(|(bi, bj)| overlap[(i, j)] > overlap[(bi, bj)]) {
                    best = Some((i, j));
                }
            }
        }
        let Some((i, j)) = best else { break };
        row_free[i] = false;
        col_free[j] = false;
        out.push((i, j));
    }
    out
}

pub fn greedy_state_match(true_seq: &[usize], inferred_seq: &[usize]) -> Result<StateMatch> {
    if true_seq.len() != inferred_seq.len() {
        return Err(Error::LengthMismatch {
            what: "state sequences",
            left: true_seq.len(),
            right: inferred_seq.len(),
        });
    }
    let kt = true_seq.iter().max().map_or(0, |m| m + 1);
    let ki = inferred_seq.iter().max().map_or(0, |m| m + 1);
    let mut overlap = Matrix::zeros(kt, ki);
    for (&a, &b) in true_seq.iter().zip(inferred_seq) {
        overlap[(a, b)] += 1.0;
    }
    Ok(StateMatch {
        mapping: greedy_match_overlap(&overlap),
        overlap,
    })
}

/// Polar grid over a disc with equal-area cells. Radial edges are
/// `r_k = R sqrt(k / K)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialBinning {
    pub n_angular: usize,
    pub n_radial: usize,
    pub arena_radius: f64,
}

impl SpatialBinning {
    pub fn new(n_angular: usize, n_radial: usize, arena_radius: f64) -> Result<Self> {
        if n_angular == 0 || n_radial == 0 {
            return Err(Error::Config("spatial binning needs at least one bin per axis".into()));
        }
        if !(arena_radius > 0.0 && arena_radius.is_finite()) {
            return Err(Error::Config("arena radius must be positive".into()));
        }
        Ok(Self {
            n_angular,
            n_radial,
            arena_radius,
        })
    }

    /// 11 angular by 20 radial bins, used for occupancy and location maps.
    pub fn occupancy(arena_radius: f64) -> Result<Self> {
        Self::new(11, 20, arena_radius)
    }

    /// 11 by 11 bins, used for mutual information.
    pub fn information(arena_radius: f64) -> Result<Self> {
        Self::new(11, 11, arena_radius)
    }

    pub fn n_bins(&self) -> usize {
        self.n_angular * self.n_radial
    }

    pub fn radial_edges(&self) -> Vec<f64> {
        (0..=self.n_radial)
            .map(|k| self.arena_radius * (k as f64 / self.n_radial as f64).sqrt())
            .collect()
    }

    pub fn bin_area(&self, index: usize) -> f64 {
        let edges = self.radial_edges();
        let k = index / self.n_angular;
        (edges[k + 1].powi(2) - edges[k].powi(2)) * PI / self.n_angular as f64
    }

    /// Radii beyond the arena fall in the outer ring.
    pub fn bin_index(&self, r: f64, theta: f64) -> usize {
        let frac = ((theta + PI).rem_euclid(2.0 * PI)) / (2.0 * PI);
        let a = ((frac * self.n_angular as f64) as usize).min(self.n_angular - 1);
        let rr = (r / self.arena_radius).max(0.0);
        let k = ((rr * rr * self.n_radial as f64) as usize).min(self.n_radial - 1);
        k * self.n_angular + a
    }

    pub fn assign(&self, pos: &PositionTrace) -> Vec<usize> {
        pos.samples().iter().map(|s| self.bin_index(s.r, s.theta)).collect()
    }
}

/// Fraction of time spent in each spatial bin.
pub fn occupancy_map(pos: &PositionTrace, binning: &SpatialBinning) -> Result<Vec<f64>> {
    if pos.is_empty() {
        return Err(Error::EmptyData("no positions".into()));
    }
    let mut occ = vec![0.0; binning.n_bins()];
    for b in binning.assign(pos) {
        occ[b] += 1.0;
    }
    let n = pos.len() as f64;
    occ.iter_mut().for_each(|v| *v /= n);
    Ok(occ)
}

/// How state angles are averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleMean {
    /// Plain weighted average of angles in `[-π, π)`; positions straddling
    /// the ±π cut average toward zero.
    #[default]
    Linear,
    /// Direction of the weighted mean unit vector.
    Circular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateLocationMap {
    pub binning: SpatialBinning,
    pub angle_mean: AngleMean,
    /// `(r̄_i, θ̄_i)` for states that were occupied.
    pub means: Vec<Option<(f64, f64)>>,
    /// Location distribution per state over the spatial bins (zero rows for
    /// unoccupied states).
    pub location: Matrix,
    /// Expected number of bins spent in each state.
    pub occupancy: Vec<f64>,
}

impl StateLocationMap {
    /// Map from soft state weights (T×M), e.g. smoothed marginals.
    pub fn from_marginals(marginals: &Matrix, pos: &PositionTrace, binning: &SpatialBinning, angle_mean: AngleMean) -> Result<Self> {
        if marginals.rows() != pos.len() {
            return Err(Error::LengthMismatch {
                what: "state weights vs positions",
                left: marginals.rows(),
                right: pos.len(),
            });
        }
        let m = marginals.cols();
        let mut occupancy = vec![0.0; m];
        let mut sum_r = vec![0.0; m];
        let mut sum_a = vec![(0.0, 0.0); m];
        let mut location = Matrix::zeros(m, binning.n_bins());
        for (w, s) in marginals.iter_rows().zip(pos.samples()) {
            let b = binning.bin_index(s.r, s.theta);
            for (i, &p) in w.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                occupancy[i] += p;
                sum_r[i] += p * s.r;
                match angle_mean {
                    AngleMean::Linear => sum_a[i].0 += p * s.theta,
                    AngleMean::Circular => {
                        sum_a[i].0 += p * s.theta.sin();
                        sum_a[i].1 += p * s.theta.cos();
                    }
                }
                location[(i, b)] += p;
            }
        }
        let mut means = vec![None; m];
        for i in 0..m {
            if occupancy[i] > 0.0 {
                let theta = match angle_mean {
                    AngleMean::Linear => sum_a[i].0 / occupancy[i],
                    AngleMean::Circular => sum_a[i].0.atan2(sum_a[i].1),
                };
                means[i] = Some((sum_r[i] / occupancy[i], theta));
                location.row_mut(i).iter_mut().for_each(|v| *v /= occupancy[i]);
            }
        }
        Ok(Self {
            binning: *binning,
            angle_mean,
            means,
            location,
            occupancy,
        })
    }

    /// Map from a hard state sequence over `n_states` labels.
    pub fn from_sequence(seq: &[usize], n_states: usize, pos: &PositionTrace, binning: &SpatialBinning, angle_mean: AngleMean) -> Result<Self> {
        if let Some(&s) = seq.iter().find(|&&s| s >= n_states) {
            return Err(Error::Range(format!("state {s} outside 0..{n_states}")));
        }
        let mut w = Matrix::zeros(seq.len(), n_states);
        for (t, &s) in seq.iter().enumerate() {
            w[(t, s)] = 1.0;
        }
        Self::from_marginals(&w, pos, binning, angle_mean)
    }

    pub fn n_states(&self) -> usize {
        self.means.len()
    }
}

/// Marginal mass on states without a training location that is dropped
/// (with renormalization) instead of raising `UncoveredState`.
pub const UNCOVERED_MASS_TOL: f64 = 1e-6;

/// `r̂_t = Σ_i r̄_i Pr(S_t = i)` and likewise for the angle; the circular
/// map averages unit vectors instead.
pub fn decode_positions(marginals: &Matrix, map: &StateLocationMap) -> Result<Vec<(f64, f64)>> {
    if marginals.cols() != map.n_states() {
        return Err(Error::ShapeMismatch(format!(
            "{} marginal columns for a map over {} states",
            marginals.cols(),
            map.n_states()
        )));
    }
    let mut out = Vec::with_capacity(marginals.rows());
    for row in marginals.iter_rows() {
        let (mut r, mut a, mut b, mut covered) = (0.0, 0.0, 0.0, 0.0);
        for (i, &p) in row.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            match map.means[i] {
                Some((ri, ti)) => {
                    covered += p;
                    r += p * ri;
                    match map.angle_mean {
                        AngleMean::Linear => a += p * ti,
                        AngleMean::Circular => {
                            a += p * ti.sin();
                            b += p * ti.cos();
                        }
                    }
                }
                None if p > UNCOVERED_MASS_TOL => return Err(Error::UncoveredState { state: i }),
                None => {}
            }
        }
        if covered <= 0.0 {
            return Err(Error::DegenerateData("a bin has no mass on covered states".into()));
        }
        let theta = match map.angle_mean {
            AngleMean::Linear => a / covered,
            AngleMean::Circular => a.atan2(b),
        };
        out.push((r / covered, theta));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeError {
    /// Euclidean error per bin, cm.
    pub per_bin: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

/// Euclidean distance between decoded and true positions after converting
/// both to Cartesian coordinates about the arena center.
pub fn decode_error(pred: &[(f64, f64)], truth: &PositionTrace) -> Result<DecodeError> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "decoded vs true positions",
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyData("nothing decoded".into()));
    }
    let per_bin: Vec<f64> = pred
        .iter()
        .zip(truth.samples())
        .map(|(&(r, th), s)| (r * th.cos() - s.r * s.theta.cos()).hypot(r * th.sin() - s.r * s.theta.sin()))
        .collect();
    let n = per_bin.len() as f64;
    let mean = per_bin.iter().sum::<f64>() / n;
    let sd = (per_bin.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(DecodeError { per_bin, mean, sd })
}

/// Smoothed marginals of `counts` under one parameter set.
pub fn state_marginals(params: &HmmParams, counts: &CountMatrix) -> Result<Matrix> {
    let table = emission_logliks(counts, &params.rates)?;
    Ok(smoothed_marginals(&table, &params.pi, &params.trans)?.gamma)
}

/// Elementwise mean of smoothed marginals over several parameter sets.
pub fn averaged_marginals(samples: &[HmmParams], counts: &CountMatrix) -> Result<Matrix> {
    let first = samples.first().ok_or_else(|| Error::EmptyData("no posterior samples".into()))?;
    let mut acc = Matrix::zeros(counts.n_bins(), first.n_states());
    for p in samples {
        let g = state_marginals(p, counts)?;
        if g.cols() != acc.cols() {
            return Err(Error::ShapeMismatch("samples disagree on the number of states".into()));
        }
        for (a, v) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    acc.as_mut_slice().iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// `field(ℓ) ∝ Σ_i λ_{c,i} Pr(S = i) p(ℓ | S = i)`, normalized over bins.
pub fn place_field(map: &StateLocationMap, rates: &[f64], state_probs: &[f64]) -> Result<Vec<f64>> {
    let m = map.n_states();
    if rates.len() != m || state_probs.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "{} rates and {} state probabilities for {m} states",
            rates.len(),
            state_probs.len()
        )));
    }
    let mut field = vec![0.0; map.binning.n_bins()];
    for i in 0..m {
        let w = rates[i] * state_probs[i];
        if w == 0.0 || map.means[i].is_none() {
            continue;
        }
        for (f, l) in field.iter_mut().zip(map.location.row(i)) {
            *f += w * l;
        }
    }
    let total: f64 = field.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateData("place field has no mass".into()));
    }
    field.iter_mut().for_each(|v| *v /= total);
    Ok(field)
}

fn joint_counts(a: &[usize], b: &[usize]) -> (Matrix, f64) {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut joint = Matrix::zeros(ka, kb);
    for (&x, &y) in a.iter().zip(b) {
        joint[(x, y)] += 1.0;
    }
    (joint, a.len() as f64)
}

/// Plug-in mutual information in bits of two label sequences.
pub fn discrete_mutual_information(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what: "label sequences",
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyData("mutual information of empty sequences".into()));
    }
    let (joint, n) = joint_counts(a, b);
    let pa: Vec<f64> = joint.iter_rows().map(|r| r.iter().sum::<f64>() / n).collect();
    let mut pb = vec![0.0; joint.cols()];
    for r in joint.iter_rows() {
        for (o, v) in pb.iter_mut().zip(r) {
            *o += v / n;
        }
    }
    let mut mi = 0.0;
    for i in 0..joint.rows() {
        for j in 0..joint.cols() {
            let p = joint[(i, j)] / n;
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).log2();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// `I(S; L)` between a state sequence and the spatial bin of the animal.
pub fn mutual_information(seq: &[usize], pos: &PositionTrace, binning: &SpatialBinning) -> Result<f64> {
    discrete_mutual_information(seq, &binning.assign(pos))
}

/// `I(1[S = i]; L)` for each state label `0..=max(seq)`.
pub fn per_state_information(seq: &[usize], pos: &PositionTrace, binning: &SpatialBinning) -> Result<Vec<f64>> {
    let bins = binning.assign(pos);
    let m = seq.iter().max().map_or(0, |m| m + 1);
    (0..m)
        .map(|i| {
            let ind: Vec<usize> = seq.iter().map(|&s| (s == i) as usize).collect();
            discrete_mutual_information(&ind, &bins)
        })
        .collect()
}

/// Linear-interpolation percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyData("percentile of no values".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::domain(format!("percentile {q} outside [0, 100]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q / 100.0;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

fn shifted(pos: &PositionTrace, shift: usize) -> PositionTrace {
    let n = pos.len();
    let keep: Vec<usize> = (0..n).map(|t| (t + shift) % n).collect();
    pos.select(&keep)
}

fn random_shift<R: Rng + ?Sized>(rng: &mut R, n: usize) -> usize {
    if n < 2 {
        0
    } else {
        rng.random_range(1..n)
    }
}

/// Shuffle control for decoding: the training positions are circularly
/// shifted against the training state weights before the location map is
/// built, then the test bins are decoded as usual. Returns the mean error of
/// each shuffle.
#[allow(clippy::too_many_arguments)]
pub fn shuffled_decode_errors<R: Rng + ?Sized>(
    rng: &mut R,
    train_marginals: &Matrix,
    train_pos: &PositionTrace,
    test_marginals: &Matrix,
    test_pos: &PositionTrace,
    binning: &SpatialBinning,
    angle_mean: AngleMean,
    n_shuffles: usize,
) -> Result<Vec<f64>> {
    (0..n_shuffles)
        .map(|_| {
            let s = random_shift(rng, train_pos.len());
            let map = StateLocationMap::from_marginals(train_marginals, &shifted(train_pos, s), binning, angle_mean)?;
            Ok(decode_error(&decode_positions(test_marginals, &map)?, test_pos)?.mean)
        })
        .collect()
}

/// Mutual information after circularly shifting positions against states.
pub fn shuffled_mutual_information<R: Rng + ?Sized>(
    rng: &mut R,
    seq: &[usize],
    pos: &PositionTrace,
    binning: &SpatialBinning,
    n_shuffles: usize,
) -> Result<Vec<f64>> {
    (0..n_shuffles)
        .map(|_| mutual_information(seq, &shifted(pos, random_shift(rng, pos.len())), binning))
        .collect()
}

/// Decoding error that 95% of shuffles exceed.
pub fn chance_level(shuffled_errors: &[f64]) -> Result<f64> {
    percentile(shuffled_errors, 5.0)
}

/// Summary metrics of a fit; absent entries are skipped in the JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_ll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_ll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits_per_spike: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_mean_cm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_sd_cm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mi_bits: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_states: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_states_95: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{ln_gamma, poisson_logpmf};
    use crate::rng::RngHandle;
    use crate::testutil::all_paths;
    use crate::vb::{initialize_from_marginals, VbModel};
    use proptest::prelude::*;
    use rand::Rng;

    fn cm(rows: Vec<Vec<u64>>) -> CountMatrix {
        CountMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn baseline_examples() {
        let r = baseline_rates(&cm(vec![vec![1, 3]])).unwrap();
        assert_eq!(r, vec![2.0]);
        let ll = baseline_predictive_ll(&cm(vec![vec![2]]), &r).unwrap();
        assert!((ll - (-0.613_705_638_880_109_4)).abs() < 1e-12);
        let ll = baseline_predictive_ll(&cm(vec![vec![0, 0, 0], vec![0, 0, 0]]), &[0.5, 1.5]).unwrap();
        assert_eq!(ll, -6.0);
        assert!(matches!(
            baseline_predictive_ll(&cm(vec![vec![1]]), &[0.0]),
            Err(Error::ZeroRateWithSpikes { cell: 0 })
        ));
    }

    #[test]
    fn baseline_matches_poisson_pmf() {
        let mut rng = RngHandle::new(1);
        let test = cm((0..3).map(|_| (0..20).map(|_| rng.random_range(0..6)).collect()).collect());
        let rates = [0.7, 2.3, 4.1];
        let ll = baseline_predictive_ll(&test, &rates).unwrap();
        let mut oracle = 0.0;
        for c in 0..3 {
            for &y in test.row(c) {
                oracle += poisson_logpmf(y, rates[c]).unwrap() + ln_gamma(y as f64 + 1.0);
            }
        }
        assert!((ll - oracle).abs() < 1e-10);
    }

    fn random_params(rng: &mut RngHandle, c: usize, m: usize) -> HmmParams {
        let pi = dirichlet_sample(rng, &vec![1.0; m]).unwrap();
        let mut trans = Matrix::zeros(m, m);
        for i in 0..m {
            trans.row_mut(i).copy_from_slice(&dirichlet_sample(rng, &vec![1.0; m]).unwrap());
        }
        let rates = Matrix::from_vec(c, m, (0..c * m).map(|_| 0.2 + 4.0 * rng.random::<f64>()).collect()).unwrap();
        HmmParams::new(pi, trans, rates).unwrap()
    }

    fn brute_force_evidence(p: &HmmParams, y: &CountMatrix) -> f64 {
        let (t_len, m) = (y.n_bins(), p.n_states());
        let terms: Vec<f64> = all_paths(t_len, m)
            .iter()
            .map(|path| {
                let mut l = p.pi[path[0]].ln();
                for t in 0..t_len {
                    if t > 0 {
                        l += p.trans[(path[t - 1], path[t])].ln();
                    }
                    for c in 0..y.n_cells() {
                        let k = y.get(c, t);
                        l += k as f64 * p.rates[(c, path[t])].ln() - p.rates[(c, path[t])];
                    }
                }
                l
            })
            .collect();
        log_sum_exp(&terms)
    }

    #[test]
    fn mcmc_predictive_matches_enumeration() {
        let mut rng = RngHandle::new(2);
        for _ in 0..20 {
            let y = cm((0..2).map(|_| (0..3).map(|_| rng.random_range(0..5)).collect()).collect());
            let samples: Vec<HmmParams> = (0..4).map(|_| random_params(&mut rng, 2, 2)).collect();
            let oracle: Vec<f64> = samples.iter().map(|p| brute_force_evidence(p, &y)).collect();
            let got = predictive_ll_mcmc(&samples, &y).unwrap();
            assert!((got - log_mean_exp(&oracle)).abs() < 1e-10);
            let single = predictive_ll_mcmc(&samples[..1], &y).unwrap();
            assert!((single - oracle[0]).abs() < 1e-10);
            let repeated = predictive_ll_mcmc(&vec![samples[0].clone(); 7], &y).unwrap();
            assert!((repeated - single).abs() < 1e-10);
        }
    }

    #[test]
    fn bits_per_spike_examples() {
        let y = cm(vec![vec![1, 0]]);
        assert_eq!(bits_per_spike(-3.0, -3.0, &y).unwrap(), 0.0);
        assert!((bits_per_spike(LN_2, 0.0, &y).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(bits_per_spike(0.0, 0.0, &cm(vec![vec![0]])), Err(Error::NoSpikes)));
    }

    fn vb_state(y: &CountMatrix, m: usize, scale: f64, rates: &Matrix) -> VariationalState {
        let h = vec![crate::dist::GammaHyper::default(); y.n_cells()];
        let g = Matrix::filled(y.n_bins(), m, 1.0 / m as f64);
        let mut vs = initialize_from_marginals(y, VbModel::Hdp { alpha0: 2.0, gamma: 3.0 }, &g, &h).unwrap();
        for c in 0..y.n_cells() {
            for i in 0..m {
                vs.rate_a[(c, i)] = rates[(c, i)] * scale;
                vs.rate_b[(c, i)] = scale;
            }
        }
        vs
    }

    #[test]
    fn vb_predictive_delta_limit() {
        let y = cm(vec![vec![2, 0, 3, 1], vec![0, 1, 1, 4]]);
        let rates = Matrix::from_rows(&[vec![1.5, 0.5], vec![0.8, 2.5]]).unwrap();
        let mut vs = vb_state(&y, 2, 1e9, &rates);
        let pi = [0.3, 0.6, 0.1];
        let p = [[0.7, 0.2, 0.1], [0.25, 0.7, 0.05]];
        let s = 1e9;
        vs.init_factor = pi.iter().map(|v| v * s).collect();
        for i in 0..2 {
            vs.trans_factors.row_mut(i).copy_from_slice(&p[i].map(|v| v * s));
        }
        // The overflow entry is dropped and the rest renormalized.
        let plug = HmmParams::new(
            vec![pi[0] / 0.9, pi[1] / 0.9],
            Matrix::from_rows(&[vec![0.7 / 0.9, 0.2 / 0.9], vec![0.25 / 0.95, 0.7 / 0.95]]).unwrap(),
            rates,
        )
        .unwrap();
        let exact = predictive_ll_mcmc(&[plug], &y).unwrap();
        let got = predictive_ll_vb(&vs, 20, &mut RngHandle::new(3), &y).unwrap();
        assert!((got - exact).abs() < 1e-3, "{got} vs {exact}");
    }

    #[test]
    fn vb_predictive_single_state_is_gamma_poisson() {
        let y = cm(vec![vec![2, 0, 3]]);
        let (a, b) = (4.0, 2.0);
        let mut vs = vb_state(&y, 1, 1.0, &Matrix::filled(1, 1, 1.0));
        vs.rate_a[(0, 0)] = a;
        vs.rate_b[(0, 0)] = b;
        let (s, t) = (5.0, 3.0);
        // Constant-free: the Σ lnΓ(y+1) term of the evidence is left out.
        let exact = a * f64::ln(b) - ln_gamma(a) + ln_gamma(a + s) - (a + s) * f64::ln(b + t);
        let got = predictive_ll_vb(&vs, 50_000, &mut RngHandle::new(4), &y).unwrap();
        assert!((got - exact).abs() < 1e-2, "{got} vs {exact}");
    }

    #[test]
    fn vb_predictive_monte_carlo_spread() {
        let mut rng = RngHandle::new(5);
        let y = cm((0..3).map(|_| (0..40).map(|_| rng.random_range(0..4)).collect()).collect());
        let rates = Matrix::from_vec(3, 3, (0..9).map(|_| 0.5 + 2.0 * rng.random::<f64>()).collect()).unwrap();
        let vs = vb_state(&y, 3, 200.0, &rates);
        let spikes = y.total_spikes() as f64;
        let vals: Vec<f64> = (0..20)
            .map(|_| predictive_ll_vb(&vs, 50, &mut rng, &y).unwrap() / (LN_2 * spikes))
            .collect();
        let mean = vals.iter().sum::<f64>() / 20.0;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 19.0).sqrt();
        assert!(sd < 0.01, "sd {sd}");
    }

    #[test]
    fn greedy_match_examples() {
        let seq = vec![0, 1, 2, 1, 0, 2, 2];
        let m = greedy_state_match(&seq, &seq).unwrap();
        assert_eq!(m.mapping, vec![(2, 2), (0, 0), (1, 1)]);
        assert_eq!(m.matched_fraction(), 1.0);
        let sigma = [2, 0, 1];
        let relabeled: Vec<usize> = seq.iter().map(|&s| sigma[s]).collect();
        let m = greedy_state_match(&seq, &relabeled).unwrap();
        for i in 0..3 {
            assert_eq!(m.inferred_for(i), Some(sigma[i]));
        }
        let overlap = Matrix::from_rows(&[vec![5.0, 0.0], vec![0.0, 4.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(greedy_match_overlap(&overlap), vec![(0, 0), (1, 1)]);
        // Ties prefer the lower true index, then the lower inferred index.
        let tie = Matrix::from_rows(&[vec![1.0, 3.0], vec![3.0, 3.0]]).unwrap();
        assert_eq!(greedy_match_overlap(&tie), vec![(0, 1), (1, 0)]);
    }

    proptest! {
        #[test]
        fn greedy_match_composes_with_relabeling(seed in 0u64..500) {
            // Distinct overlap values, so tie-breaking by label never applies.
            let mut rng = RngHandle::new(seed);
            let (kt, ki) = (4, 5);
            let overlap = Matrix::from_vec(kt, ki, (0..kt * ki).map(|_| rng.random::<f64>()).collect()).unwrap();
            let mut sigma: Vec<usize> = (0..ki).collect();
            for i in (1..ki).rev() {
                let j = rng.random_range(0..=i);
                sigma.swap(i, j);
            }
            // Column sigma[j] of the relabeled matrix is column j of the original.
            let mut relabeled = Matrix::zeros(kt, ki);
            for i in 0..kt {
                for j in 0..ki {
                    relabeled[(i, sigma[j])] = overlap[(i, j)];
                }
            }
            let a = greedy_match_overlap(&overlap);
            let b = greedy_match_overlap(&relabeled);
            let composed: Vec<(usize, usize)> = a.iter().map(|&(i, j)| (i, sigma[j])).collect();
            prop_assert_eq!(composed, b);
        }

        #[test]
        fn mutual_information_bounds(seed in 0u64..300) {
            let mut rng = RngHandle::new(seed);
            let n = 50;
            let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let b: Vec<usize> = a.iter().map(|&x| if rng.random::<f64>() < 0.5 { x } else { rng.random_range(0..6) }).collect();
            let entropy = |v: &[usize]| {
                let k = v.iter().max().unwrap() + 1;
                let mut c = vec![0.0; k];
                for &x in v { c[x] += 1.0; }
                c.iter().filter(|&&x| x > 0.0).map(|&x| { let p: f64 = x / n as f64; -p * p.log2() }).sum::<f64>()
            };
            let mi = discrete_mutual_information(&a, &b).unwrap();
            prop_assert!(mi >= 0.0);
            prop_assert!(mi <= entropy(&a).min(entropy(&b)) + 1e-12);
        }
    }

    #[test]
    fn equal_area_bins() {
        for b in [SpatialBinning::occupancy(60.0).unwrap(), SpatialBinning::information(45.0).unwrap()] {
            let a0 = b.bin_area(0);
            let total: f64 = (0..b.n_bins()).map(|k| b.bin_area(k)).sum();
            assert!((total - PI * b.arena_radius.powi(2)).abs() < 1e-9 * total);
            for k in 0..b.n_bins() {
                assert!((b.bin_area(k) - a0).abs() < 1e-9 * a0);
            }
        }
        let b = SpatialBinning::new(4, 2, 2.0).unwrap();
        assert_eq!(b.bin_index(0.1, -PI), 0);
        assert_eq!(b.bin_index(0.1, 0.1), 2);
        assert_eq!(b.bin_index(1.5, 0.1), 6);
        assert_eq!(b.bin_index(9.0, PI - 1e-9), 7);
    }

    fn trace(points: &[(f64, f64)]) -> PositionTrace {
        let rs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ts: Vec<f64> = points.iter().map(|p| p.1).collect();
        PositionTrace::from_polar(&rs, &ts, &vec![0.0; points.len()]).unwrap()
    }

    #[test]
    fn location_map_examples() {
        let bins = SpatialBinning::occupancy(60.0).unwrap();
        let pos = trace(&[(10.0, 0.5); 5]);
        let map = StateLocationMap::from_sequence(&[0; 5], 1, &pos, &bins, AngleMean::Linear).unwrap();
        let (r, th) = map.means[0].unwrap();
        assert!((r - 10.0).abs() < 1e-12 && (th - 0.5).abs() < 1e-12);
        let pos = trace(&[(10.0, 0.5), (30.0, -1.0), (10.0, 0.5), (30.0, -1.0)]);
        let map = StateLocationMap::from_sequence(&[0, 1, 0, 1], 3, &pos, &bins, AngleMean::Linear).unwrap();
        assert!((map.means[0].unwrap().0 - 10.0).abs() < 1e-12);
        assert!((map.means[1].unwrap().1 + 1.0).abs() < 1e-12);
        assert!(map.means[2].is_none());
        for i in 0..2 {
            assert!((map.location.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(matches!(
            StateLocationMap::from_sequence(&[0, 1], 2, &pos, &bins, AngleMean::Linear),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn decode_examples() {
        let bins = SpatialBinning::occupancy(60.0).unwrap();
        let pos = trace(&[(2.0, 0.3), (4.0, 0.3)]);
        let map = StateLocationMap::from_sequence(&[0, 1], 3, &pos, &bins, AngleMean::Linear).unwrap();
        let one_hot = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let pred = decode_positions(&one_hot, &map).unwrap();
        for (p, want) in pred.iter().zip([(2.0, 0.3), (4.0, 0.3)]) {
            assert!((p.0 - want.0).abs() < 1e-12 && (p.1 - want.1).abs() < 1e-12);
        }
        assert!(decode_error(&pred, &pos).unwrap().mean < 1e-12);
        let half = Matrix::from_rows(&[vec![0.5, 0.5, 0.0]]).unwrap();
        assert!((decode_positions(&half, &map).unwrap()[0].0 - 3.0).abs() < 1e-12);
        let uncovered = Matrix::from_rows(&[vec![0.5, 0.0, 0.5]]).unwrap();
        assert!(matches!(decode_positions(&uncovered, &map), Err(Error::UncoveredState { state: 2 })));
    }

    #[test]
    fn angle_means_across_the_cut() {
        let bins = SpatialBinning::occupancy(60.0).unwrap();
        let pos = trace(&[(10.0, PI - 0.1), (10.0, -PI + 0.1)]);
        let lin = StateLocationMap::from_sequence(&[0, 0], 1, &pos, &bins, AngleMean::Linear).unwrap();
        let circ = StateLocationMap::from_sequence(&[0, 0], 1, &pos, &bins, AngleMean::Circular).unwrap();
        assert!(lin.means[0].unwrap().1.abs() < 1e-9);
        assert!((circ.means[0].unwrap().1.abs() - PI).abs() < 1e-9);
    }

    #[test]
    fn decode_error_is_euclidean() {
        let truth = trace(&[(3.0, 0.0)]);
        let e = decode_error(&[(4.0, PI / 2.0)], &truth).unwrap();
        assert!((e.mean - 5.0).abs() < 1e-12);
        assert_eq!(e.sd, 0.0);
    }

    #[test]
    fn place_field_examples() {
        let bins = SpatialBinning::new(4, 1, 10.0).unwrap();
        let pos = trace(&[(5.0, -3.0), (5.0, -1.0), (5.0, 1.0), (5.0, 0.5)]);
        let map = StateLocationMap::from_sequence(&[0, 1, 1, 2], 3, &pos, &bins, AngleMean::Linear).unwrap();
        let f = place_field(&map, &[0.0, 2.0, 0.0], &[0.3, 0.3, 0.4]).unwrap();
        assert_eq!(f, map.location.row(1).to_vec());
        let f = place_field(&map, &[1.0, 2.0, 3.0], &[0.2, 0.5, 0.3]).unwrap();
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let single = StateLocationMap::from_sequence(&[0; 4], 1, &pos, &bins, AngleMean::Linear).unwrap();
        assert_eq!(place_field(&single, &[3.0], &[1.0]).unwrap(), single.location.row(0).to_vec());
    }

    #[test]
    fn mutual_information_examples() {
        // S a function of L with L uniform over 4 bins.
        let l: Vec<usize> = (0..400).map(|t| t % 4).collect();
        let s: Vec<usize> = l.iter().map(|&x| 3 - x).collect();
        assert!((discrete_mutual_information(&s, &l).unwrap() - 2.0).abs() < 1e-12);
        // Independent labels: the plug-in estimate is within its bias bound.
        let mut rng = RngHandle::new(6);
        let n = 20_000;
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let mi = discrete_mutual_information(&a, &b).unwrap();
        assert!(mi < 5.0 * 9.0 / (2.0 * n as f64 * LN_2));
        let pos = trace(&(0..400).map(|t| (20.0, -PI + 0.1 + (t % 4) as f64 * PI / 2.0)).collect::<Vec<_>>());
        let bins = SpatialBinning::new(4, 1, 60.0).unwrap();
        let per = per_state_information(&s, &pos, &bins).unwrap();
        assert_eq!(per.len(), 4);
        assert!(per.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn percentile_examples() {
        let v = [5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 50.0).unwrap(), 3.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 5.0);
        assert!((percentile(&v, 5.0).unwrap() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn shuffles_destroy_spatial_structure() {
        let mut rng = RngHandle::new(7);
        let bins = SpatialBinning::occupancy(60.0).unwrap();
        // Four states, each tied to one quadrant, dwelling for runs of bins.
        let mut seq = Vec::new();
        let mut pts = Vec::new();
        while seq.len() < 800 {
            let s = rng.random_range(0..4);
            for _ in 0..10 {
                seq.push(s);
                let th = -PI + (s as f64 + 0.2 + 0.6 * rng.random::<f64>()) * PI / 2.0;
                pts.push((15.0 + 30.0 * rng.random::<f64>(), th));
            }
        }
        let pos = trace(&pts);
        let m = Matrix::from_vec(seq.len(), 4, seq.iter().flat_map(|&s| (0..4).map(move |i| (i == s) as u8 as f64)).collect()).unwrap();
        let map = StateLocationMap::from_marginals(&m, &pos, &bins, AngleMean::Circular).unwrap();
        let err = decode_error(&decode_positions(&m, &map).unwrap(), &pos).unwrap().mean;
        let shuffled = shuffled_decode_errors(&mut rng, &m, &pos, &m, &pos, &bins, AngleMean::Circular, 100).unwrap();
        assert!(err < chance_level(&shuffled).unwrap());
        let info = information_with_shuffle(&mut rng, &seq, &pos);
        assert!(info.0 > 5.0 * info.1);
    }

    fn information_with_shuffle(rng: &mut RngHandle, seq: &[usize], pos: &PositionTrace) -> (f64, f64) {
        let bins = SpatialBinning::information(60.0).unwrap();
        let mi = mutual_information(seq, pos, &bins).unwrap();
        let sh = shuffled_mutual_information(rng, seq, pos, &bins, 100).unwrap();
        (mi, percentile(&sh, 95.0).unwrap())
    }

    #[test]
    fn averaged_marginals_of_identical_samples() {
        let mut rng = RngHandle::new(8);
        let y = cm((0..2).map(|_| (0..6).map(|_| rng.random_range(0..4)).collect()).collect());
        let p = random_params(&mut rng, 2, 3);
        let one = state_marginals(&p, &y).unwrap();
        let avg = averaged_marginals(&[p.clone(), p], &y).unwrap();
        for (a, b) in one.as_slice().iter().zip(avg.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

//! Synthetic datasets: weak-limit HDP-HMM parameter draws, ancestral
//! simulation, a spatial stand-in for tracked position, and additive
//! negative-binomial noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{CountMatrix, PositionTrace};
use crate::dist::{
    beta_sample_unchecked, categorical_unnormalized, dirichlet_sample_unchecked, gamma_sample_unchecked, negbinom_sample,
    poisson_sample_unchecked, GammaHyper,
};
use crate::error::{Error, Result};
use crate::gibbs::HdpParams;
use crate::hmm::{HmmParams, StateSequence};
use crate::matrix::Matrix;

/// Synthetic arena: a disc of radius `arena_radius` cm centered at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialConfig {
    pub arena_radius: f64,
    /// Standard deviation (cm) of the isotropic jitter about each state's center.
    #[serde(alias = "walk_step")]
    pub jitter: f64,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self {
            arena_radius: 60.0,
            jitter: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NbNoise {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_cells: usize,
    pub n_bins: usize,
    /// Truncation level M of the generating model.
    pub n_states: usize,
    pub alpha0: f64,
    pub gamma: f64,
    pub rate_prior: GammaHyper,
    pub seed: u64,
    pub bin_width: f64,
    pub spatial: Option<SpatialConfig>,
    pub nb_noise: Option<NbNoise>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_cells: 30,
            n_bins: 1000,
            n_states: 80,
            alpha0: 4.0,
            gamma: 8.0,
            rate_prior: GammaHyper { a: 1.0, b: 0.2 },
            seed: 0,
            bin_width: 0.25,
            spatial: None,
            nb_noise: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cells == 0 || self.n_bins == 0 || self.n_states == 0 {
            return Err(Error::Config("n_cells, n_bins and n_states must be positive".into()));
        }
        if !(self.alpha0 > 0.0 && self.gamma > 0.0 && self.bin_width > 0.0) {
            return Err(Error::Config("alpha0, gamma and bin_width must be positive".into()));
        }
        GammaHyper::new(self.rate_prior.a, self.rate_prior.b).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = self.spatial {
            if !(s.arena_radius > 0.0 && s.jitter >= 0.0) {
                return Err(Error::Config("arena radius must be positive and jitter nonnegative".into()));
            }
        }
        if let Some(nb) = self.nb_noise {
            if !(nb.mean > 0.0 && nb.variance > nb.mean) {
                return Err(Error::Config("NB noise needs variance > mean > 0".into()));
            }
        }
        Ok(())
    }
}

/// Stick weights from explicit breaking fractions; the last atom takes the
/// remaining stick.
pub fn gem_from_fractions(fractions: &[f64]) -> Vec<f64> {
    let m = fractions.len();
    let mut out = Vec::with_capacity(m);
    let mut rest = 1.0;
    for &f in &fractions[..m.saturating_sub(1)] {
        let piece = rest * f;
        out.push(piece);
        rest -= piece;
    }
    if m > 0 {
        out.push(rest.max(0.0));
    }
    out
}

/// Truncated stick-breaking with `Beta(1, γ)` fractions.
pub fn sample_gem<R: Rng + ?Sized>(rng: &mut R, gamma: f64, m: usize) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma.is_finite()) || m == 0 {
        return Err(Error::domain("GEM needs gamma > 0 and at least one atom"));
    }
    let fractions: Vec<f64> = (0..m).map(|_| beta_sample_unchecked(rng, 1.0, gamma)).collect();
    Ok(gem_from_fractions(&fractions))
}

fn floored_dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> Vec<f64> {
    let mut v = dirichlet_sample_unchecked(rng, alpha);
    v.iter_mut().for_each(|x| *x = x.max(1e-300));
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Weak-limit draw: `β ~ Dir(γ/M)`, π and every row of P from `Dir(α₀β)`,
/// rates i.i.d. from the rate prior.
pub fn sample_hdp_hmm<R: Rng + ?Sized>(rng: &mut R, config: &SimConfig) -> Result<(HmmParams, HdpParams)> {
    config.validate()?;
    let m = config.n_states;
    let beta = floored_dirichlet(rng, &vec![config.gamma / m as f64; m]);
    let hdp = HdpParams::new(beta, config.alpha0, config.gamma)?;
    let conc = hdp.row_prior();
    let pi = dirichlet_sample_unchecked(rng, &conc);
    let mut trans = Matrix::zeros(m, m);
    for i in 0..m {
        trans.row_mut(i).copy_from_slice(&dirichlet_sample_unchecked(rng, &conc));
    }
    let h = config.rate_prior;
    let rates = Matrix::from_vec(
        config.n_cells,
        m,
        (0..config.n_cells * m).map(|_| gamma_sample_unchecked(rng, h.a, h.b)).collect(),
    )?;
    Ok((HmmParams::new(pi, trans, rates)?, hdp))
}

/// Ancestral sampling of a state path.
pub fn simulate_states<R: Rng + ?Sized>(rng: &mut R, params: &HmmParams, n_bins: usize) -> Result<StateSequence> {
    params.validate()?;
    let mut seq = Vec::with_capacity(n_bins);
    if n_bins > 0 {
        seq.push(categorical_unnormalized(rng, &params.pi, 1.0));
    }
    for t in 1..n_bins {
        let row = params.trans.row(seq[t - 1]);
        seq.push(categorical_unnormalized(rng, row, row.iter().sum()));
    }
    Ok(StateSequence(seq))
}

/// Poisson counts for a given path.
pub fn simulate_counts<R: Rng + ?Sized>(rng: &mut R, params: &HmmParams, seq: &[usize]) -> Result<CountMatrix> {
    let rows = (0..params.n_cells())
        .map(|c| seq.iter().map(|&s| poisson_sample_unchecked(rng, params.rates[(c, s)])).collect())
        .collect();
    CountMatrix::from_rows(rows)
}

/// Draw a state path and its spike counts.
pub fn simulate<R: Rng + ?Sized>(rng: &mut R, params: &HmmParams, n_bins: usize) -> Result<(StateSequence, CountMatrix)> {
    if n_bins == 0 {
        return Err(Error::EmptyData("simulation needs at least one bin".into()));
    }
    let seq = simulate_states(rng, params, n_bins)?;
    let counts = simulate_counts(rng, params, &seq)?;
    Ok((seq, counts))
}

/// Spatially structured synthetic data.
#[derive(Debug, Clone)]
pub struct SpatialSim {
    pub seq: StateSequence,
    pub counts: CountMatrix,
    pub positions: PositionTrace,
    /// Center of each latent state, cm.
    pub centers: Vec<(f64, f64)>,
}

/// Fold a radius into `[0, R]` by reflecting at the boundary. Returns the new
/// radius and whether the direction flipped through the center.
fn reflect_radius(mut r: f64, radius: f64) -> (f64, bool) {
    let mut flipped = false;
    while r > radius {
        r = 2.0 * radius - r;
        if r < 0.0 {
            r = -r;
            flipped = !flipped;
        }
    }
    (r, flipped)
}

/// Simulate a path and counts, then place the animal at its state's center
/// plus Gaussian jitter, reflected back into the arena. Centers are uniform
/// over the disc.
pub fn simulate_spatial<R: Rng + ?Sized>(
    rng: &mut R,
    params: &HmmParams,
    n_bins: usize,
    spatial: &SpatialConfig,
    bin_width: f64,
) -> Result<SpatialSim> {
    if !(spatial.arena_radius > 0.0 && spatial.jitter >= 0.0 && bin_width > 0.0) {
        return Err(Error::Config("invalid spatial configuration".into()));
    }
    let radius = spatial.arena_radius;
    let centers: Vec<(f64, f64)> = (0..params.n_states())
        .map(|_| {
            let r = radius * rng.random::<f64>().sqrt();
            let th = 2.0 * std::f64::consts::PI * rng.random::<f64>();
            (r * th.cos(), r * th.sin())
        })
        .collect();
    let (seq, counts) = simulate(rng, params, n_bins)?;
    let mut xs = Vec::with_capacity(n_bins);
    let mut ys = Vec::with_capacity(n_bins);
    for &s in seq.iter() {
        let (cx, cy) = centers[s];
        let (mut x, mut y) = (cx, cy);
        if spatial.jitter > 0.0 {
            let dx: f64 = StandardNormal.sample(rng);
            let dy: f64 = StandardNormal.sample(rng);
            x += spatial.jitter * dx;
            y += spatial.jitter * dy;
            let r = x.hypot(y);
            if r > radius {
                let (nr, flipped) = reflect_radius(r, radius);
                let scale = if flipped { -nr / r } else { nr / r };
                x *= scale;
                y *= scale;
            }
        }
        xs.push(x);
        ys.push(y);
    }
    let mut speeds: Vec<f64> = (0..n_bins)
        .map(|t| if t == 0 { 0.0 } else { (xs[t] - xs[t - 1]).hypot(ys[t] - ys[t - 1]) / bin_width })
        .collect();
    if n_bins > 1 {
        speeds[0] = speeds[1];
    }
    let positions = PositionTrace::from_cartesian_with_center(&xs, &ys, &speeds, (0.0, 0.0));
    Ok(SpatialSim {
        seq,
        counts: counts.with_bin_width(bin_width),
        positions,
        centers,
    })
}

/// Add an independent negative-binomial draw with the given mean and
/// variance to every entry. The draw is the gamma-Poisson mixture with shape
/// `r = mean² / (variance - mean)`; in success-probability terms
/// `p = mean / variance`.
pub fn inject_nb_noise<R: Rng + ?Sized>(rng: &mut R, counts: &CountMatrix, mean: f64, variance: f64) -> Result<CountMatrix> {
    if !(mean > 0.0 && mean.is_finite() && variance > mean && variance.is_finite()) {
        return Err(Error::domain(format!("NB noise needs variance > mean > 0, got mean {mean}, variance {variance}")));
    }
    let r = mean * mean / (variance - mean);
    // Probability attached to each counted event.
    let p_event = 1.0 - mean / variance;
    let mut out = counts.clone();
    for c in 0..counts.n_cells() {
        for t in 0..counts.n_bins() {
            let noise = negbinom_sample(rng, r, p_event)?;
            out.set(c, t, counts.get(c, t) + noise);
        }
    }
    Ok(out)
}

/// Everything needed to score inference against the generating model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SimConfig,
    pub states: StateSequence,
    pub pi: Vec<f64>,
    pub trans: Matrix,
    pub rates: Matrix,
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<(f64, f64)>>,
}

/// A complete synthetic dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub counts: CountMatrix,
    pub positions: Option<PositionTrace>,
    pub truth: GroundTruth,
}

/// Generate a dataset from `config`, using `config.seed` for all randomness.
pub fn generate(config: &SimConfig) -> Result<Dataset> {
    let mut rng = crate::rng::RngHandle::new(config.seed);
    generate_with(&mut rng, config)
}

pub fn generate_with<R: Rng + ?Sized>(rng: &mut R, config: &SimConfig) -> Result<Dataset> {
    let (params, hdp) = sample_hdp_hmm(rng, config)?;
    let (seq, counts, positions, centers) = match &config.spatial {
        Some(sp) => {
            let s = simulate_spatial(rng, &params, config.n_bins, sp, config.bin_width)?;
            (s.seq, s.counts, Some(s.positions), Some(s.centers))
        }
        None => {
            let (seq, counts) = simulate(rng, &params, config.n_bins)?;
            (seq, counts.with_bin_width(config.bin_width), None, None)
        }
    };
    let counts = match config.nb_noise {
        Some(nb) => inject_nb_noise(rng, &counts, nb.mean, nb.variance)?,
        None => counts,
    };
    Ok(Dataset {
        counts,
        positions,
        truth: GroundTruth {
            config: config.clone(),
            states: seq,
            pi: params.pi,
            trans: params.trans,
            rates: params.rates,
            beta: hdp.beta,
            centers,
        },
    })
}

impl GroundTruth {
    pub fn params(&self) -> Result<HmmParams> {
        HmmParams::new(self.pi.clone(), self.trans.clone(), self.rates.clone())
    }
}

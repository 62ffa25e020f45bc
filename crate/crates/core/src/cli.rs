//! Batch front end: `simulate`, `fit`, `evaluate` and `decode`.
//!
//! Each command reads a JSON config, resolves relative paths against the
//! config file's directory, applies flag overrides, and writes its outputs
//! plus a `manifest.json` echoing the resolved config. Outputs depend only on
//! the inputs, the config and the seed.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{load_counts, load_positions, save_counts, save_positions, CountFormat, CountMatrix, PositionTrace};
use crate::dist::GammaHyper;
use crate::error::{Error, Result};
use crate::eval::{
    averaged_marginals, baseline_predictive_ll, baseline_rates, bits_per_spike, decode_error, decode_positions,
    greedy_state_match, mutual_information, predictive_ll_mcmc, predictive_ll_vb, AngleMean, Metrics, SpatialBinning,
    StateLocationMap,
};
use crate::gibbs::{run_chain, run_chains, run_finite_hmm_chain, GibbsConfig, GibbsState, HyperMode};
use crate::hmm::{state_count, states_covering, HmmParams};
use crate::matrix::Matrix;
use crate::report::{read_json, write_elbo_csv, write_json, write_trace_csv, write_trajectory_csv, Manifest};
use crate::rng::RngHandle;
use crate::synth::{generate, GroundTruth, SimConfig};
use crate::vb::{run_finite_vb, run_vb, VariationalState, VbConfig, VbFactors};

#[derive(Debug, Parser)]
#[command(name = "hdphmm", version, about = "HDP-HMM analysis of spike-count data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Simulate(CommonArgs),
    /// Fit a model to a count matrix.
    Fit(FitArgs),
    /// Score a fit on held-out bins.
    Evaluate(CommonArgs),
    /// Reconstruct positions from a fit.
    Decode(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to the config file's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Independent chains run in parallel, one output directory each.
    #[arg(long)]
    pub chains: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    /// HDP-HMM, Gibbs with HMC rate hyperparameters.
    McmcHmc,
    /// HDP-HMM, Gibbs with empirical-Bayes rate hyperparameters.
    McmcEb,
    /// HDP-HMM, variational.
    Vb,
    /// Finite HMM, Gibbs with HMC rate hyperparameters.
    HmmMcmc,
    /// Finite HMM, variational.
    HmmVb,
}

impl FitMethod {
    pub fn is_vb(self) -> bool {
        matches!(self, FitMethod::Vb | FitMethod::HmmVb)
    }

    pub fn is_finite(self) -> bool {
        matches!(self, FitMethod::HmmMcmc | FitMethod::HmmVb)
    }
}

fn default_chains() -> usize {
    1
}

fn default_n_keep() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRun {
    pub counts: PathBuf,
    pub method: FitMethod,
    /// Fit on the first `t_train` bins only.
    #[serde(default)]
    pub t_train: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_chains")]
    pub chains: usize,
    /// Posterior samples kept for prediction, taken from the end of the chain.
    #[serde(default = "default_n_keep")]
    pub n_keep: usize,
    #[serde(default)]
    pub gibbs: GibbsConfig,
    #[serde(default)]
    pub vb: VbConfig,
}

fn default_vb_draws() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRun {
    pub fit_dir: PathBuf,
    /// Defaults to the counts the fit used.
    #[serde(default)]
    pub counts: Option<PathBuf>,
    /// Defaults to the fit's training length.
    #[serde(default)]
    pub t_train: Option<usize>,
    /// Defaults to every bin after the training range.
    #[serde(default)]
    pub t_test: Option<usize>,
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub positions: Option<PathBuf>,
    #[serde(default)]
    pub arena_radius: Option<f64>,
    /// Parameter draws from the variational factors for the predictive.
    #[serde(default = "default_vb_draws")]
    pub vb_draws: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub chain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRun {
    /// Decode with a fitted model ...
    #[serde(default)]
    pub fit_dir: Option<PathBuf>,
    /// ... or with the generating parameters of a synthetic set.
    #[serde(default)]
    pub truth: Option<PathBuf>,
    #[serde(default)]
    pub counts: Option<PathBuf>,
    pub positions: PathBuf,
    #[serde(default)]
    pub t_train: Option<usize>,
    #[serde(default)]
    pub t_test: Option<usize>,
    #[serde(default)]
    pub arena_radius: Option<f64>,
    #[serde(default)]
    pub angle_mean: AngleMean,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub chain: usize,
}

/// Exported variational fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VbFitFile {
    pub factors: VbFactors,
    pub hypers: Vec<GammaHyper>,
    pub sweeps: usize,
    pub converged_at: Option<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Decode(a) => cmd_decode(&a),
    }
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() || base.as_os_str().is_empty() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_config<T: for<'de> Deserialize<'de>>(args: &CommonArgs) -> Result<(T, PathBuf, PathBuf)> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(args.config.clone()),
        _ => Error::Io(e),
    })?;
    let config: T = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", args.config.display())))?;
    let base = config_dir(&args.config);
    let out = match &args.out {
        Some(o) => o.clone(),
        None if base.as_os_str().is_empty() => PathBuf::from("."),
        None => base.clone(),
    };
    std::fs::create_dir_all(&out)?;
    Ok((config, base, out))
}

pub fn cmd_simulate(args: &CommonArgs) -> Result<()> {
    let (mut config, _, out) = load_config::<SimConfig>(args)?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    let data = generate(&config)?;
    let mut manifest = Manifest::new("simulate", config.seed, &config)?;
    save_counts(&data.counts, out.join("counts.csv"))?;
    manifest.outputs.push("counts.csv".into());
    if let Some(pos) = &data.positions {
        save_positions(pos, out.join("positions.csv"))?;
        manifest.outputs.push("positions.csv".into());
    }
    write_json(out.join("truth.json"), &data.truth)?;
    manifest.outputs.push("truth.json".into());
    manifest.summary = json!({
        "n_cells": data.counts.n_cells(),
        "n_bins": data.counts.n_bins(),
        "n_states_visited": state_count(data.truth.states.as_slice()),
        "total_spikes": data.counts.total_spikes(),
    });
    write_json(out.join("manifest.json"), &manifest)?;
    log::info!("simulated {}x{} counts into {}", data.counts.n_cells(), data.counts.n_bins(), out.display());
    Ok(())
}

fn training_prefix(counts: &CountMatrix, t_train: Option<usize>) -> Result<CountMatrix> {
    match t_train {
        None => Ok(counts.clone()),
        Some(t) if t == 0 || t > counts.n_bins() => Err(Error::Config(format!(
            "t_train {t} outside 1..={}",
            counts.n_bins()
        ))),
        Some(t) => counts.columns(0..t),
    }
}

fn chain_dir(out: &Path, chains: usize, k: usize) -> PathBuf {
    if chains > 1 {
        out.join(format!("chain_{k:03}"))
    } else {
        out.to_path_buf()
    }
}

fn chain_prefix(chains: usize, k: usize) -> String {
    if chains > 1 {
        format!("chain_{k:03}/")
    } else {
        String::new()
    }
}

/// Fill in method-implied settings and the seed.
pub fn resolve_fit(mut run: FitRun) -> Result<FitRun> {
    if run.chains == 0 {
        return Err(Error::Config("chains must be at least 1".into()));
    }
    if run.n_keep == 0 {
        return Err(Error::Config("n_keep must be at least 1".into()));
    }
    match run.method {
        FitMethod::McmcHmc | FitMethod::HmmMcmc => run.gibbs.hyper_mode = HyperMode::Hmc,
        FitMethod::McmcEb => run.gibbs.hyper_mode = HyperMode::Eb,
        FitMethod::Vb | FitMethod::HmmVb => {}
    }
    run.vb.seed = run.seed;
    Ok(run)
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let (run, base, out) = load_config::<FitRun>(&args.common)?;
    let mut run = run;
    run.counts = resolve(&base, &run.counts);
    if let Some(s) = args.common.seed {
        run.seed = s;
    }
    if let Some(c) = args.chains {
        run.chains = c;
    }
    let run = resolve_fit(run)?;
    let counts = load_counts(&run.counts, CountFormat::Csv)?;
    let train = training_prefix(&counts, run.t_train)?;
    let mut manifest = Manifest::new("fit", run.seed, &run)?;
    for k in 0..run.chains {
        std::fs::create_dir_all(chain_dir(&out, run.chains, k))?;
    }
    let summaries = if run.method.is_vb() {
        fit_vb(&run, &train, &out, &mut manifest)?
    } else {
        fit_mcmc(&run, &train, &out, &mut manifest)?
    };
    manifest.summary = json!({ "chains": summaries });
    write_json(out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn fit_mcmc(run: &FitRun, train: &CountMatrix, out: &Path, manifest: &mut Manifest) -> Result<Vec<serde_json::Value>> {
    run.gibbs.validate()?;
    if run.gibbs.thin == 0 {
        return Err(Error::Config("gibbs.thin must be positive to keep posterior samples".into()));
    }
    let rng = RngHandle::new(run.seed);
    let results = run_chains(&rng, train, &run.gibbs, run.chains, run.method.is_finite());
    let mut summaries = Vec::new();
    let mut first_err = None;
    for (k, res) in results.into_iter().enumerate() {
        let dir = chain_dir(out, run.chains, k);
        let prefix = chain_prefix(run.chains, k);
        let trace = match res {
            Ok(t) => t,
            Err(e) => {
                // Keep what was sampled before the failure.
                write_trace_csv(dir.join("trace.csv"), &e.partial.records)?;
                log::error!("chain {k} failed: {e}");
                first_err.get_or_insert(e.error);
                continue;
            }
        };
        write_trace_csv(dir.join("trace.csv"), &trace.records)?;
        let start = trace.snapshots.len().saturating_sub(run.n_keep);
        let kept = &trace.snapshots[start..];
        write_json(dir.join("snapshots.json"), kept)?;
        manifest.outputs.push(format!("{prefix}trace.csv"));
        manifest.outputs.push(format!("{prefix}snapshots.json"));
        let last = trace.records.last();
        summaries.push(json!({
            "iterations": trace.records.len(),
            "kept": kept.len(),
            "final_loglik": last.map(|r| r.loglik),
            "n_states": last.map(|r| r.n_states),
            "n_states_95": last.map(|r| r.n_states_95),
            "alpha0": last.map(|r| r.alpha0),
            "gamma": last.and_then(|r| r.gamma),
        }));
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(summaries),
    }
}

fn fit_vb(run: &FitRun, train: &CountMatrix, out: &Path, manifest: &mut Manifest) -> Result<Vec<serde_json::Value>> {
    let fits: Vec<Result<_>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..run.chains)
            .map(|k| {
                let mut cfg = run.vb.clone();
                cfg.seed = run.seed.wrapping_add(k as u64);
                let finite = run.method.is_finite();
                scope.spawn(move || if finite { run_finite_vb(train, &cfg) } else { run_vb(train, &cfg) })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("VB thread panicked")).collect()
    });
    let mut summaries = Vec::new();
    for (k, fit) in fits.into_iter().enumerate() {
        let fit = fit?;
        let dir = chain_dir(out, run.chains, k);
        let prefix = chain_prefix(run.chains, k);
        let file = VbFitFile {
            factors: fit.state.factors(),
            hypers: fit.hypers.clone(),
            sweeps: fit.elbo.len() - 1,
            converged_at: fit.converged_at,
        };
        write_json(dir.join("vb_fit.json"), &file)?;
        write_elbo_csv(dir.join("elbo.csv"), &fit.elbo)?;
        manifest.outputs.push(format!("{prefix}vb_fit.json"));
        manifest.outputs.push(format!("{prefix}elbo.csv"));
        let path = fit.state.most_likely_path()?;
        summaries.push(json!({
            "sweeps": file.sweeps,
            "converged_at": fit.converged_at,
            "final_elbo": fit.elbo.last(),
            "n_states": state_count(path.as_slice()),
            "n_states_95": states_covering(path.as_slice(), fit.state.n_states(), 0.95),
        }));
    }
    Ok(summaries)
}

/// Single-chain fit of `train`, matching chain 0 of `fit` for the same seed.
pub fn fit_model(train: &CountMatrix, method: FitMethod, gibbs: &GibbsConfig, vb: &VbConfig, n_keep: usize, seed: u64) -> Result<Fitted> {
    let run = resolve_fit(FitRun {
        counts: PathBuf::new(),
        method,
        t_train: None,
        seed,
        chains: 1,
        n_keep,
        gibbs: gibbs.clone(),
        vb: vb.clone(),
    })?;
    if method.is_vb() {
        let fit = if method.is_finite() { run_finite_vb(train, &run.vb)? } else { run_vb(train, &run.vb)? };
        return Ok(Fitted::Vb(VbFitFile {
            factors: fit.state.factors(),
            hypers: fit.hypers,
            sweeps: fit.elbo.len() - 1,
            converged_at: fit.converged_at,
        }));
    }
    run.gibbs.validate()?;
    if run.gibbs.thin == 0 {
        return Err(Error::Config("gibbs.thin must be positive to keep posterior samples".into()));
    }
    let mut r = RngHandle::new(seed).child(0);
    let trace = if method.is_finite() {
        run_finite_hmm_chain(&mut r, train, &run.gibbs)
    } else {
        run_chain(&mut r, train, &run.gibbs)
    }?;
    let start = trace.snapshots.len().saturating_sub(n_keep);
    let kept = trace.snapshots[start..].to_vec();
    if kept.is_empty() {
        return Err(Error::EmptyData("fit kept no posterior samples".into()));
    }
    Ok(Fitted::Samples(kept))
}

/// A fitted model loaded back from disk.
pub enum Fitted {
    Samples(Vec<GibbsState>),
    Vb(VbFitFile),
    Truth(HmmParams),
}

impl Fitted {
    /// Truncation level of the model.
    pub fn n_states(&self) -> usize {
        match self {
            Fitted::Samples(s) => s.last().map_or(0, GibbsState::n_states),
            Fitted::Vb(f) => f.factors.rate_a.cols(),
            Fitted::Truth(p) => p.n_states(),
        }
    }

    /// Load chain `chain` of the fit in `fit_dir` along with its resolved run.
    pub fn load(fit_dir: &Path, chain: usize) -> Result<(Self, FitRun)> {
        let manifest: Manifest = read_json(fit_dir.join("manifest.json"))?;
        if manifest.command != "fit" {
            return Err(Error::Config(format!("{} is not a fit directory", fit_dir.display())));
        }
        let run: FitRun = serde_json::from_value(manifest.config)?;
        if chain >= run.chains {
            return Err(Error::Config(format!("chain {chain} requested but the fit ran {}", run.chains)));
        }
        let dir = chain_dir(fit_dir, run.chains, chain);
        let fitted = if run.method.is_vb() {
            Fitted::Vb(read_json(dir.join("vb_fit.json"))?)
        } else {
            let s: Vec<GibbsState> = read_json(dir.join("snapshots.json"))?;
            if s.is_empty() {
                return Err(Error::EmptyData("fit kept no posterior samples".into()));
            }
            Fitted::Samples(s)
        };
        Ok((fitted, run))
    }

    /// Parameter sets for path-summing evaluations; `None` for variational fits.
    pub fn params(&self) -> Option<Vec<HmmParams>> {
        match self {
            Fitted::Samples(s) => Some(s.iter().map(|g| g.hmm.clone()).collect()),
            Fitted::Truth(p) => Some(vec![p.clone()]),
            Fitted::Vb(_) => None,
        }
    }

    fn variational(&self, counts: &CountMatrix) -> Result<VariationalState> {
        match self {
            Fitted::Vb(f) => VariationalState::from_factors(f.factors.clone(), counts),
            _ => Err(Error::Config("not a variational fit".into())),
        }
    }

    /// Posterior state weights (T×M) for `counts`.
    pub fn marginals(&self, counts: &CountMatrix) -> Result<Matrix> {
        match self.params() {
            Some(p) => averaged_marginals(&p, counts),
            None => Ok(self.variational(counts)?.marginals.gamma),
        }
    }

    /// A single state path on the data the model was fit to: the last sample
    /// for MCMC, the most probable path under `q(S)` for VB.
    pub fn training_path(&self, train: &CountMatrix) -> Result<(Vec<usize>, usize)> {
        match self {
            Fitted::Samples(s) => {
                let last = s.last().ok_or_else(|| Error::EmptyData("no posterior samples".into()))?;
                if last.seq.len() != train.n_bins() {
                    return Err(Error::LengthMismatch {
                        what: "sampled path vs training bins",
                        left: last.seq.len(),
                        right: train.n_bins(),
                    });
                }
                Ok((last.seq.0.clone(), last.n_states()))
            }
            Fitted::Vb(_) => {
                let vs = self.variational(train)?;
                Ok((vs.most_likely_path()?.0, vs.n_states()))
            }
            Fitted::Truth(p) => {
                let g = averaged_marginals(std::slice::from_ref(p), train)?;
                Ok((crate::hmm::marginal_argmax(&g).0, p.n_states()))
            }
        }
    }

    pub fn predictive_ll(&self, test: &CountMatrix, vb_draws: usize, rng: &mut RngHandle) -> Result<f64> {
        match self.params() {
            Some(p) => predictive_ll_mcmc(&p, test),
            None => {
                let vs = self.variational(test)?;
                predictive_ll_vb(&vs, vb_draws, rng, test)
            }
        }
    }
}

/// Train and test ranges over `n_bins`. Without a training length the whole
/// set serves as both.
fn ranges(n_bins: usize, t_train: Option<usize>, t_test: Option<usize>) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let Some(t_train) = t_train else {
        if t_test == Some(0) {
            return Err(Error::Config("test range is empty".into()));
        }
        return Ok((0..n_bins, 0..n_bins));
    };
    if t_train == 0 || t_train > n_bins {
        return Err(Error::Config(format!("t_train {t_train} outside 1..={n_bins}")));
    }
    let t_test = t_test.unwrap_or(n_bins - t_train);
    if t_test == 0 {
        return Err(Error::Config("test range is empty".into()));
    }
    if t_train + t_test > n_bins {
        return Err(Error::Config(format!("t_train + t_test = {} exceeds {n_bins} bins", t_train + t_test)));
    }
    Ok((0..t_train, t_train..t_train + t_test))
}

fn arena_radius(explicit: Option<f64>, truth: Option<&GroundTruth>, pos: &PositionTrace) -> f64 {
    explicit
        .or_else(|| truth.and_then(|t| t.config.spatial).map(|s| s.arena_radius))
        .unwrap_or_else(|| pos.max_radius())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub true_states: usize,
    pub matched_fraction: f64,
    /// `(true, inferred)` pairs.
    pub mapping: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: FitMethod,
    pub train: (usize, usize),
    pub test: (usize, usize),
    pub test_spikes: u64,
    #[serde(flatten)]
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovery: Option<Recovery>,
}

pub fn cmd_evaluate(args: &CommonArgs) -> Result<()> {
    let (mut run, base, out) = load_config::<EvaluateRun>(args)?;
    if let Some(s) = args.seed {
        run.seed = s;
    }
    run.fit_dir = resolve(&base, &run.fit_dir);
    let (fitted, fit_run) = Fitted::load(&run.fit_dir, run.chain)?;
    run.counts = Some(run.counts.map_or_else(|| fit_run.counts.clone(), |c| resolve(&base, &c)));
    run.t_train = run.t_train.or(fit_run.t_train);
    run.truth = run.truth.map(|p| resolve(&base, &p));
    run.positions = run.positions.map(|p| resolve(&base, &p));
    let report = evaluate(&run, &fitted, fit_run.method)?;
    let mut manifest = Manifest::new("evaluate", run.seed, &run)?;
    write_json(out.join("metrics.json"), &report)?;
    manifest.outputs.push("metrics.json".into());
    manifest.summary = serde_json::to_value(&report.metrics)?;
    write_json(out.join("manifest.json"), &manifest)?;
    Ok(())
}

/// Metrics for a loaded fit under a fully resolved `run`.
pub fn evaluate(run: &EvaluateRun, fitted: &Fitted, method: FitMethod) -> Result<EvaluationReport> {
    let counts_path = run.counts.as_ref().ok_or_else(|| Error::Config("no counts file".into()))?;
    let counts = load_counts(counts_path, CountFormat::Csv)?;
    let (tr, te) = ranges(counts.n_bins(), run.t_train, run.t_test)?;
    let train = counts.columns(tr.clone())?;
    let test = counts.columns(te.clone())?;
    let mut rng = RngHandle::new(run.seed);
    let baseline_ll = baseline_predictive_ll(&test, &baseline_rates(&train)?)?;
    let model_ll = fitted.predictive_ll(&test, run.vb_draws, &mut rng)?;
    let bps = bits_per_spike(model_ll, baseline_ll, &test)?;
    let (path, m) = fitted.training_path(&train)?;
    let mut metrics = Metrics {
        baseline_ll: Some(baseline_ll),
        model_ll: Some(model_ll),
        bits_per_spike: Some(bps),
        n_states: Some(state_count(&path)),
        n_states_95: Some(states_covering(&path, m, 0.95)),
        ..Metrics::default()
    };
    let truth: Option<GroundTruth> = run.truth.as_ref().map(read_json).transpose()?;
    if let Some(p) = &run.positions {
        let pos = load_positions(p)?.slice(tr.clone())?;
        let binning = SpatialBinning::information(arena_radius(run.arena_radius, truth.as_ref(), &pos))?;
        metrics.mi_bits = Some(mutual_information(&path, &pos, &binning)?);
    }
    let recovery = match &truth {
        Some(t) => {
            let true_path = t.states.as_slice().get(tr.clone()).ok_or_else(|| {
                Error::LengthMismatch {
                    what: "true states vs counts",
                    left: t.states.len(),
                    right: counts.n_bins(),
                }
            })?;
            let sm = greedy_state_match(true_path, &path)?;
            Some(Recovery {
                true_states: state_count(true_path),
                matched_fraction: sm.matched_fraction(),
                mapping: sm.mapping,
            })
        }
        None => None,
    };
    Ok(EvaluationReport {
        method,
        train: (tr.start, tr.end),
        test: (te.start, te.end),
        test_spikes: test.total_spikes(),
        metrics,
        recovery,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeSummary {
    pub mean_cm: f64,
    pub sd_cm: f64,
    pub n_bins: usize,
}

pub fn cmd_decode(args: &CommonArgs) -> Result<()> {
    let (mut run, base, out) = load_config::<DecodeRun>(args)?;
    if let Some(s) = args.seed {
        run.seed = s;
    }
    run.fit_dir = run.fit_dir.map(|p| resolve(&base, &p));
    run.truth = run.truth.map(|p| resolve(&base, &p));
    run.counts = run.counts.map(|p| resolve(&base, &p));
    run.positions = resolve(&base, &run.positions);
    let truth: Option<GroundTruth> = run.truth.as_ref().map(read_json).transpose()?;
    let fitted = match (&run.fit_dir, &truth) {
        (Some(dir), None) => {
            let (f, fit_run) = Fitted::load(dir, run.chain)?;
            run.counts = run.counts.or(Some(fit_run.counts));
            run.t_train = run.t_train.or(fit_run.t_train);
            f
        }
        (None, Some(t)) => Fitted::Truth(t.params()?),
        _ => return Err(Error::Config("decode needs exactly one of fit_dir and truth".into())),
    };
    let counts_path = run.counts.clone().ok_or_else(|| Error::Config("no counts file".into()))?;
    let counts = load_counts(&counts_path, CountFormat::Csv)?;
    let pos = load_positions(&run.positions)?;
    if pos.len() != counts.n_bins() {
        return Err(Error::LengthMismatch {
            what: "positions vs count bins",
            left: pos.len(),
            right: counts.n_bins(),
        });
    }
    let (tr, te) = ranges(counts.n_bins(), run.t_train, run.t_test)?;
    let radius = arena_radius(run.arena_radius, truth.as_ref(), &pos);
    let binning = SpatialBinning::occupancy(radius)?;
    let (train_pos, test_pos) = (pos.slice(tr.clone())?, pos.slice(te.clone())?);
    let map = StateLocationMap::from_marginals(
        &fitted.marginals(&counts.columns(tr)?)?,
        &train_pos,
        &binning,
        run.angle_mean,
    )?;
    let decoded = decode_positions(&fitted.marginals(&counts.columns(te)?)?, &map)?;
    let err = decode_error(&decoded, &test_pos)?;
    write_trajectory_csv(out.join("trajectory.csv"), &test_pos, &decoded, &err.per_bin)?;
    let summary = DecodeSummary {
        mean_cm: err.mean,
        sd_cm: err.sd,
        n_bins: decoded.len(),
    };
    write_json(out.join("decode_summary.json"), &summary)?;
    let mut manifest = Manifest::new("decode", run.seed, &run)?;
    manifest.outputs = vec!["trajectory.csv".into(), "decode_summary.json".into()];
    manifest.summary = serde_json::to_value(&summary)?;
    write_json(out.join("manifest.json"), &manifest)?;
    log::info!("decoded {} bins, error {:.2} ± {:.2} cm", summary.n_bins, summary.mean_cm, summary.sd_cm);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_strings() {
        for (s, m) in [
            ("\"mcmc-hmc\"", FitMethod::McmcHmc),
            ("\"mcmc-eb\"", FitMethod::McmcEb),
            ("\"vb\"", FitMethod::Vb),
            ("\"hmm-mcmc\"", FitMethod::HmmMcmc),
            ("\"hmm-vb\"", FitMethod::HmmVb),
        ] {
            assert_eq!(serde_json::from_str::<FitMethod>(s).unwrap(), m);
        }
        assert!(serde_json::from_str::<FitMethod>("\"gibbs\"").is_err());
    }

    #[test]
    fn fit_run_defaults_and_unknown_fields() {
        let run: FitRun = serde_json::from_str(r#"{"counts": "c.csv", "method": "vb"}"#).unwrap();
        assert_eq!((run.chains, run.n_keep, run.t_train), (1, 50, None));
        assert!(serde_json::from_str::<FitRun>(r#"{"counts": "c.csv", "method": "vb", "n_iter": 3}"#).is_err());
        assert!(serde_json::from_str::<FitRun>(r#"{"counts": "c.csv", "method": "vb", "gibbs": {"n_iter": 3}}"#).is_err());
    }

    #[test]
    fn method_sets_hyper_mode() {
        let run: FitRun = serde_json::from_str(r#"{"counts": "c.csv", "method": "mcmc-eb", "seed": 4}"#).unwrap();
        let r = resolve_fit(run).unwrap();
        assert_eq!(r.gibbs.hyper_mode, HyperMode::Eb);
        assert_eq!(r.vb.seed, 4);
    }

    #[test]
    fn range_rules() {
        assert_eq!(ranges(10, Some(8), None).unwrap(), (0..8, 8..10));
        assert_eq!(ranges(10, Some(5), Some(2)).unwrap(), (0..5, 5..7));
        assert_eq!(ranges(10, None, None).unwrap(), (0..10, 0..10));
        assert!(ranges(10, Some(10), None).is_err());
        assert!(ranges(10, Some(4), Some(0)).is_err());
        assert!(ranges(10, Some(4), Some(7)).is_err());
        assert!(ranges(10, Some(0), None).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config() {
        assert_eq!(resolve(Path::new("runs/a"), Path::new("c.csv")), PathBuf::from("runs/a/c.csv"));
        assert_eq!(resolve(Path::new("runs/a"), Path::new("/x/c.csv")), PathBuf::from("/x/c.csv"));
        assert_eq!(resolve(Path::new(""), Path::new("c.csv")), PathBuf::from("c.csv"));
    }
}

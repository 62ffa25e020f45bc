//! Plot-ready exports: JSON reports, trace and trajectory CSVs, run manifests.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::PositionTrace;
use crate::error::{Error, Result};
use crate::gibbs::TraceRecord;

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = create(path.as_ref())?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// `iter,loglik,n_states,n_states_95,alpha0,gamma`; `gamma` is empty for
/// finite models.
pub fn write_trace_csv(path: impl AsRef<Path>, records: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path.as_ref())?);
    w.write_record(["iter", "loglik", "n_states", "n_states_95", "alpha0", "gamma"])
        .map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.iter.to_string(),
            r.loglik.to_string(),
            r.n_states.to_string(),
            r.n_states_95.to_string(),
            r.alpha0.to_string(),
            r.gamma.map(|g| g.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `iter,elbo`, with iteration 0 the initialization.
pub fn write_elbo_csv(path: impl AsRef<Path>, elbo: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path.as_ref())?);
    w.write_record(["iter", "elbo"]).map_err(csv_err)?;
    for (i, v) in elbo.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `t,r_true,theta_true,r_hat,theta_hat,err_cm`.
pub fn write_trajectory_csv(path: impl AsRef<Path>, truth: &PositionTrace, decoded: &[(f64, f64)], errors: &[f64]) -> Result<()> {
    if decoded.len() != truth.len() || errors.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "trajectory columns",
            left: decoded.len(),
            right: truth.len(),
        });
    }
    let mut w = csv::Writer::from_writer(create(path.as_ref())?);
    w.write_record(["t", "r_true", "theta_true", "r_hat", "theta_hat", "err_cm"])
        .map_err(csv_err)?;
    for ((s, &(r, th)), e) in truth.samples().iter().zip(decoded).zip(errors) {
        w.write_record([
            s.t_index.to_string(),
            s.r.to_string(),
            s.theta.to_string(),
            r.to_string(),
            th.to_string(),
            e.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything needed to regenerate a run: the resolved configuration, the
/// seed, and the files it wrote. No timestamps, so reruns match byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: Value,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub summary: Value,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config)?,
            outputs: Vec::new(),
            summary: Value::Null,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_csv_leaves_gamma_empty_for_finite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let rec = TraceRecord {
            iter: 1,
            loglik: -10.5,
            log_joint: -20.0,
            n_states: 3,
            n_states_95: 2,
            alpha0: 1.0,
            gamma: None,
            hmc_accept: None,
        };
        write_trace_csv(&path, &[rec]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "iter,loglik,n_states,n_states_95,alpha0,gamma\n1,-10.5,3,2,1,\n");
    }

    #[test]
    fn elbo_csv_counts_from_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("elbo.csv");
        write_elbo_csv(&path, &[-3.0, -2.5]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "iter,elbo\n0,-3\n1,-2.5\n");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let mut m = Manifest::new("simulate", 7, &crate::synth::SimConfig::default()).unwrap();
        m.outputs.push("counts.csv".into());
        write_json(&path, &m).unwrap();
        let back: Manifest = read_json(&path).unwrap();
        assert_eq!(back, m);
        assert!(matches!(read_json::<Manifest>(dir.path().join("missing.json")), Err(Error::FileNotFound(_))));
    }
}

//! Spike-count matrices, position traces, binning and train/test splits.
//!
//! File formats (one header row each):
//!
//! * counts: `cell_id,t0,t1,...,t{T-1}`, one row per cell, integer cells;
//! * positions: `t,x_cm,y_cm,speed_cms`, one row per bin.
//!
//! Polar coordinates for positions are taken about the centroid of all
//! observed positions.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_BIN_WIDTH: f64 = 0.25;

/// C×T grid of spike counts, stored row-major by cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    counts: Vec<u64>,
    n_cells: usize,
    n_bins: usize,
    bin_width: f64,
    cell_ids: Vec<String>,
}

impl CountMatrix {
    /// Build from per-cell rows. All rows must have the same nonzero length.
    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let ids = (0..rows.len()).map(|c| format!("c{c}")).collect();
        Self::from_rows_with_ids(rows, ids)
    }

    pub fn from_rows_with_ids(rows: Vec<Vec<u64>>, cell_ids: Vec<String>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyData("no cells".into()));
        }
        let n_bins = rows[0].len();
        if n_bins == 0 {
            return Err(Error::EmptyData("no time bins".into()));
        }
        if cell_ids.len() != rows.len() {
            return Err(Error::LengthMismatch {
                what: "cell ids vs rows",
                left: cell_ids.len(),
                right: rows.len(),
            });
        }
        let n_cells = rows.len();
        let mut counts = Vec::with_capacity(n_cells * n_bins);
        for (c, row) in rows.into_iter().enumerate() {
            if row.len() != n_bins {
                return Err(Error::Parse {
                    row: c + 1,
                    col: row.len().min(n_bins) + 1,
                    msg: format!("ragged row: {} bins, expected {n_bins}", row.len()),
                });
            }
            counts.extend(row);
        }
        Ok(Self {
            counts,
            n_cells,
            n_bins,
            bin_width: DEFAULT_BIN_WIDTH,
            cell_ids,
        })
    }

    pub fn zeros(n_cells: usize, n_bins: usize) -> Result<Self> {
        Self::from_rows(vec![vec![0; n_bins]; n_cells])
    }

    pub fn with_bin_width(mut self, bin_width: f64) -> Self {
        self.bin_width = bin_width;
        self
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn cell_ids(&self) -> &[String] {
        &self.cell_ids
    }

    #[inline]
    pub fn get(&self, cell: usize, t: usize) -> u64 {
        self.counts[cell * self.n_bins + t]
    }

    pub(crate) fn set(&mut self, cell: usize, t: usize, v: u64) {
        self.counts[cell * self.n_bins + t] = v;
    }

    pub fn row(&self, cell: usize) -> &[u64] {
        &self.counts[cell * self.n_bins..(cell + 1) * self.n_bins]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.n_bins)
    }

    pub fn total_spikes(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn cell_totals(&self) -> Vec<u64> {
        self.rows().map(|r| r.iter().sum()).collect()
    }

    /// Columns `range`, as a new matrix.
    pub fn columns(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.n_bins || range.start >= range.end {
            return Err(Error::Range(format!(
                "column range {range:?} invalid for T={}",
                self.n_bins
            )));
        }
        let rows = self.rows().map(|r| r[range.clone()].to_vec()).collect();
        Ok(Self::from_rows_with_ids(rows, self.cell_ids.clone())?.with_bin_width(self.bin_width))
    }

    /// Keep the bins listed in `keep`, in the given order.
    pub fn select_bins(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() {
            return Err(Error::EmptyData("no bins selected".into()));
        }
        let rows = self.rows().map(|r| keep.iter().map(|&t| r[t]).collect()).collect();
        Ok(Self::from_rows_with_ids(rows, self.cell_ids.clone())?.with_bin_width(self.bin_width))
    }

    /// Column-wise concatenation.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.n_cells != other.n_cells {
            return Err(Error::LengthMismatch {
                what: "cells",
                left: self.n_cells,
                right: other.n_cells,
            });
        }
        let rows = self
            .rows()
            .zip(other.rows())
            .map(|(a, b)| a.iter().chain(b).copied().collect())
            .collect();
        Ok(Self::from_rows_with_ids(rows, self.cell_ids.clone())?.with_bin_width(self.bin_width))
    }

    pub fn to_rows(&self) -> Vec<Vec<u64>> {
        self.rows().map(<[u64]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountFormat {
    Csv,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn csv_error(e: csv::Error) -> Error {
    let (row, col) = e
        .position()
        .map(|p| (p.line() as usize, 0))
        .unwrap_or((0, 0));
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::Parse {
            row,
            col: (len.min(expected_len) + 1) as usize,
            msg: format!("ragged row: {len} fields, expected {expected_len}"),
        },
        other => Error::Parse {
            row,
            col,
            msg: format!("{other:?}"),
        },
    }
}

pub fn load_counts(path: impl AsRef<Path>, format: CountFormat) -> Result<CountMatrix> {
    match format {
        CountFormat::Csv => read_counts_csv(open(path.as_ref())?),
    }
}

/// Parse the counts CSV format from any reader. Rows are 1-based file lines
/// (the header is line 1); columns are 1-based fields.
pub fn read_counts_csv(reader: impl Read) -> Result<CountMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(csv_error)?.clone();
    if header.get(0) != Some("cell_id") {
        return Err(Error::Parse {
            row: 1,
            col: 1,
            msg: "header must start with `cell_id`".into(),
        });
    }
    let n_bins = header.len() - 1;
    if n_bins == 0 {
        return Err(Error::EmptyData("no time-bin columns".into()));
    }
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let line = r + 2;
        ids.push(rec.get(0).unwrap_or_default().to_string());
        let mut row = Vec::with_capacity(n_bins);
        for (j, field) in rec.iter().enumerate().skip(1) {
            let v = field.parse::<u64>().map_err(|_| Error::Parse {
                row: line,
                col: j + 1,
                msg: format!("`{field}` is not a nonnegative integer"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyData("no cells".into()));
    }
    CountMatrix::from_rows_with_ids(rows, ids)
}

pub fn write_counts_csv(counts: &CountMatrix, mut w: impl Write) -> Result<()> {
    write!(w, "cell_id")?;
    for t in 0..counts.n_bins() {
        write!(w, ",t{t}")?;
    }
    writeln!(w)?;
    for (id, row) in counts.cell_ids().iter().zip(counts.rows()) {
        write!(w, "{id}")?;
        for v in row {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn save_counts(counts: &CountMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    write_counts_csv(counts, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Count spikes per cell in half-open bins `[t_start + kΔ, t_start + (k+1)Δ)`.
/// Spikes outside `[t_start, t_end)` are ignored.
pub fn bin_spikes(spike_times: &[Vec<f64>], bin_width: f64, t_start: f64, t_end: f64) -> Result<CountMatrix> {
    if !(t_end > t_start) {
        return Err(Error::InvalidWindow { t_start, t_end });
    }
    if !(bin_width > 0.0) {
        return Err(Error::domain(format!("bin width must be positive, got {bin_width}")));
    }
    let n_bins = ((t_end - t_start) / bin_width - 1e-9).ceil().max(1.0) as usize;
    let rows = spike_times
        .iter()
        .map(|times| {
            let mut row = vec![0u64; n_bins];
            for &s in times {
                if s < t_start || s >= t_end {
                    continue;
                }
                let k = ((s - t_start) / bin_width).floor() as usize;
                row[k.min(n_bins - 1)] += 1;
            }
            row
        })
        .collect();
    Ok(CountMatrix::from_rows(rows)?.with_bin_width(bin_width))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionSample {
    pub t_index: usize,
    /// Radius about the arena center, cm.
    pub r: f64,
    /// Angle in `[-π, π)`.
    pub theta: f64,
    pub x: f64,
    pub y: f64,
    /// cm/s
    pub speed: f64,
}

/// Animal position per count bin.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTrace {
    samples: Vec<PositionSample>,
    center: (f64, f64),
}

pub(crate) fn wrap_angle(theta: f64) -> f64 {
    let mut a = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if a >= PI {
        a -= 2.0 * PI;
    }
    a
}

impl PositionTrace {
    /// Build from Cartesian positions; the polar center is their centroid.
    pub fn from_cartesian(xs: &[f64], ys: &[f64], speeds: &[f64]) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() != speeds.len() {
            return Err(Error::LengthMismatch {
                what: "position columns",
                left: xs.len(),
                right: ys.len().max(speeds.len()),
            });
        }
        if xs.is_empty() {
            return Err(Error::EmptyData("no positions".into()));
        }
        let n = xs.len() as f64;
        let center = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        Ok(Self::from_cartesian_with_center(xs, ys, speeds, center))
    }

    pub fn from_cartesian_with_center(xs: &[f64], ys: &[f64], speeds: &[f64], center: (f64, f64)) -> Self {
        let samples = xs
            .iter()
            .zip(ys)
            .zip(speeds)
            .enumerate()
            .map(|(t, ((&x, &y), &speed))| {
                let (dx, dy) = (x - center.0, y - center.1);
                PositionSample {
                    t_index: t,
                    r: dx.hypot(dy),
                    theta: wrap_angle(dy.atan2(dx)),
                    x,
                    y,
                    speed,
                }
            })
            .collect();
        Self { samples, center }
    }

    /// Build from polar coordinates about the origin.
    pub fn from_polar(rs: &[f64], thetas: &[f64], speeds: &[f64]) -> Result<Self> {
        if rs.len() != thetas.len() || rs.len() != speeds.len() {
            return Err(Error::LengthMismatch {
                what: "position columns",
                left: rs.len(),
                right: thetas.len().max(speeds.len()),
            });
        }
        let xs: Vec<f64> = rs.iter().zip(thetas).map(|(r, th)| r * th.cos()).collect();
        let ys: Vec<f64> = rs.iter().zip(thetas).map(|(r, th)| r * th.sin()).collect();
        Ok(Self::from_cartesian_with_center(&xs, &ys, speeds, (0.0, 0.0)))
    }

    /// Average raw tracker samples (`times` in seconds) within each count bin
    /// `[t_start + kΔ, t_start + (k+1)Δ)`. Bins without samples carry the
    /// nearest earlier bin forward (the first filled bin backward).
    pub fn from_tracker(
        times: &[f64],
        xs: &[f64],
        ys: &[f64],
        speeds: &[f64],
        bin_width: f64,
        t_start: f64,
        n_bins: usize,
    ) -> Result<Self> {
        if times.len() != xs.len() || xs.len() != ys.len() || ys.len() != speeds.len() {
            return Err(Error::LengthMismatch {
                what: "tracker columns",
                left: times.len(),
                right: xs.len(),
            });
        }
        let mut acc = vec![(0.0, 0.0, 0.0, 0usize); n_bins];
        for i in 0..times.len() {
            let k = ((times[i] - t_start) / bin_width).floor();
            if k < 0.0 || k >= n_bins as f64 {
                continue;
            }
            let a = &mut acc[k as usize];
            a.0 += xs[i];
            a.1 += ys[i];
            a.2 += speeds[i];
            a.3 += 1;
        }
        let first = acc
            .iter()
            .position(|a| a.3 > 0)
            .ok_or_else(|| Error::EmptyData("no tracker samples inside the window".into()))?;
        let mut last = acc[first];
        let (mut bx, mut by, mut bs) = (Vec::new(), Vec::new(), Vec::new());
        for a in &acc {
            if a.3 > 0 {
                last = *a;
            }
            let n = last.3 as f64;
            bx.push(last.0 / n);
            by.push(last.1 / n);
            bs.push(last.2 / n);
        }
        Self::from_cartesian(&bx, &by, &bs)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[PositionSample] {
        &self.samples
    }

    pub fn center(&self) -> (f64, f64) {
        self.center
    }

    /// Largest observed radius.
    pub fn max_radius(&self) -> f64 {
        self.samples.iter().map(|s| s.r).fold(0.0, f64::max)
    }

    pub fn select(&self, keep: &[usize]) -> Self {
        let samples = keep
            .iter()
            .enumerate()
            .map(|(k, &t)| PositionSample {
                t_index: k,
                ..self.samples[t]
            })
            .collect();
        Self {
            samples,
            center: self.center,
        }
    }

    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.start > range.end {
            return Err(Error::Range(format!("range {range:?} invalid for {} positions", self.len())));
        }
        let keep: Vec<usize> = range.collect();
        Ok(self.select(&keep))
    }
}

pub fn read_positions_csv(reader: impl Read) -> Result<PositionTrace> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let expected = ["t", "x_cm", "y_cm", "speed_cms"];
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse {
            row: 1,
            col: 1,
            msg: format!("header must be `{}`", expected.join(",")),
        });
    }
    let (mut xs, mut ys, mut ss) = (Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let line = r + 2;
        let field = |j: usize| -> Result<f64> {
            let s = rec.get(j).unwrap_or_default();
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                row: line,
                col: j + 1,
                msg: format!("`{s}` is not a finite number"),
            })
        };
        let t = field(0)?;
        if t != r as f64 {
            return Err(Error::Parse {
                row: line,
                col: 1,
                msg: format!("expected bin index {r}, found {t}"),
            });
        }
        xs.push(field(1)?);
        ys.push(field(2)?);
        ss.push(field(3)?);
    }
    PositionTrace::from_cartesian(&xs, &ys, &ss)
}

pub fn load_positions(path: impl AsRef<Path>) -> Result<PositionTrace> {
    read_positions_csv(open(path.as_ref())?)
}

pub fn write_positions_csv(pos: &PositionTrace, mut w: impl Write) -> Result<()> {
    writeln!(w, "t,x_cm,y_cm,speed_cms")?;
    for s in pos.samples() {
        writeln!(w, "{},{},{},{}", s.t_index, s.x, s.y, s.speed)?;
    }
    Ok(())
}

pub fn save_positions(pos: &PositionTrace, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    write_positions_csv(pos, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Keep only bins whose speed exceeds `speed_threshold`, concatenated in
/// temporal order. Gaps between retained epochs are treated as contiguous.
pub fn filter_run_epochs(
    counts: &CountMatrix,
    pos: &PositionTrace,
    speed_threshold: f64,
) -> Result<(CountMatrix, PositionTrace)> {
    if counts.n_bins() != pos.len() {
        return Err(Error::LengthMismatch {
            what: "count bins vs positions",
            left: counts.n_bins(),
            right: pos.len(),
        });
    }
    let keep: Vec<usize> = pos
        .samples()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.speed > speed_threshold)
        .map(|(t, _)| t)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyData(format!("no bins faster than {speed_threshold} cm/s")));
    }
    Ok((counts.select_bins(&keep)?, pos.select(&keep)))
}

/// Contiguous train/test ranges: `[0, T_train)` then `[T_train, T_train + T_test)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub test: Range<usize>,
}

impl SplitSpec {
    pub fn new(t_train: usize, t_test: usize) -> Self {
        Self {
            train: 0..t_train,
            test: t_train..t_train + t_test,
        }
    }

    /// Hold out the final `t_test` of `n_bins` bins.
    pub fn holdout_last(n_bins: usize, t_test: usize) -> Result<Self> {
        if t_test == 0 || t_test >= n_bins {
            return Err(Error::Range(format!("cannot hold out {t_test} of {n_bins} bins")));
        }
        Ok(Self::new(n_bins - t_test, t_test))
    }

    pub fn validate(&self, n_bins: usize) -> Result<()> {
        if self.train.start != 0
            || self.train.end != self.test.start
            || self.train.is_empty()
            || self.test.is_empty()
            || self.test.end > n_bins
        {
            return Err(Error::Range(format!(
                "split train {:?} / test {:?} invalid for T={n_bins}",
                self.train, self.test
            )));
        }
        Ok(())
    }
}

pub fn split(counts: &CountMatrix, spec: &SplitSpec) -> Result<(CountMatrix, CountMatrix)> {
    spec.validate(counts.n_bins())?;
    Ok((counts.columns(spec.train.clone())?, counts.columns(spec.test.clone())?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn load_zero_matrix() {
        let m = read_counts_csv("cell_id,t0,t1,t2\na,0,0,0\nb,0,0,0\n".as_bytes()).unwrap();
        assert_eq!((m.n_cells(), m.n_bins()), (2, 3));
        assert_eq!(m.total_spikes(), 0);
    }

    #[test]
    fn load_echoes_row_and_id() {
        let m = read_counts_csv("cell_id,t0,t1,t2\n\"n1\",1,2,3\n".as_bytes()).unwrap();
        assert_eq!(m.row(0), &[1, 2, 3]);
        assert_eq!(m.cell_ids()[0], "n1");
    }

    #[test]
    fn load_rejects_negative_and_ragged() {
        let err = read_counts_csv("cell_id,t0,t1\na,1,-1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, col: 3, .. }), "{err:?}");
        let err = read_counts_csv("cell_id,t0,t1\na,1,2\nb,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err:?}");
        let err = read_counts_csv("cell_id,t0,t1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::EmptyData(_)));
        let err = load_counts("/nonexistent/counts.csv", CountFormat::Csv).unwrap_err();
        assert!(matches!(err, Error::FileNotFound(_)));
    }

    #[test]
    fn csv_round_trip() {
        let m = CountMatrix::from_rows(vec![vec![1, 0, 7], vec![2, 3, 4]]).unwrap();
        let mut buf = Vec::new();
        write_counts_csv(&m, &mut buf).unwrap();
        assert_eq!(read_counts_csv(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn bin_spikes_examples() {
        let m = bin_spikes(&[vec![0.1, 0.2, 0.3]], 0.25, 0.0, 0.5).unwrap();
        assert_eq!(m.row(0), &[2, 1]);
        let m = bin_spikes(&[vec![], vec![]], 0.25, 0.0, 1.0).unwrap();
        assert_eq!(m.total_spikes(), 0);
        assert_eq!(m.n_bins(), 4);
        let m = bin_spikes(&[vec![0.25]], 0.25, 0.0, 0.5).unwrap();
        assert_eq!(m.row(0), &[0, 1]);
        let m = bin_spikes(&[vec![0.5]], 0.25, 0.0, 0.5).unwrap();
        assert_eq!(m.total_spikes(), 0, "spike at t_end is excluded");
        assert!(matches!(bin_spikes(&[vec![]], 0.25, 1.0, 1.0), Err(Error::InvalidWindow { .. })));
    }

    fn trace_with_speeds(speeds: &[f64]) -> PositionTrace {
        let xs: Vec<f64> = (0..speeds.len()).map(|i| i as f64).collect();
        PositionTrace::from_cartesian(&xs, &vec![0.0; speeds.len()], speeds).unwrap()
    }

    #[test]
    fn filter_run_epochs_examples() {
        let counts = CountMatrix::from_rows(vec![vec![1, 2, 3]]).unwrap();
        let (c, p) = filter_run_epochs(&counts, &trace_with_speeds(&[5.0, 15.0, 20.0]), 10.0).unwrap();
        assert_eq!(c.row(0), &[2, 3]);
        assert_eq!(p.samples()[0].x, 1.0);
        assert_eq!(p.samples()[1].t_index, 1);
        assert!(matches!(
            filter_run_epochs(&counts, &trace_with_speeds(&[0.0; 3]), 10.0),
            Err(Error::EmptyData(_))
        ));
        let (c, _) = filter_run_epochs(&counts, &trace_with_speeds(&[1.0, 2.0, 3.0]), 0.0).unwrap();
        assert_eq!(c, counts);
        assert!(matches!(
            filter_run_epochs(&counts, &trace_with_speeds(&[1.0, 2.0]), 0.0),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn split_examples() {
        let counts = CountMatrix::zeros(3, 10).unwrap();
        let (tr, te) = split(&counts, &SplitSpec::new(8, 2)).unwrap();
        assert_eq!((tr.n_bins(), te.n_bins()), (8, 2));
        let counts = CountMatrix::zeros(2, 1000).unwrap();
        let (tr, te) = split(&counts, &SplitSpec::holdout_last(1000, 200).unwrap()).unwrap();
        assert_eq!((tr.n_bins(), te.n_bins()), (800, 200));
        let counts = CountMatrix::zeros(2, 10).unwrap();
        let bad = SplitSpec {
            train: 0..10,
            test: 10..12,
        };
        assert!(matches!(split(&counts, &bad), Err(Error::Range(_))));
    }

    #[test]
    fn polar_conversion_and_angle_range() {
        let p = PositionTrace::from_polar(&[1.0, 2.0], &[PI, -PI / 2.0], &[0.0, 0.0]).unwrap();
        for s in p.samples() {
            assert!(s.theta >= -PI && s.theta < PI);
        }
        assert!((p.samples()[0].theta + PI).abs() < 1e-12);
        assert!((p.samples()[1].r - 2.0).abs() < 1e-12);
    }

    #[test]
    fn positions_csv_round_trip() {
        let p = PositionTrace::from_cartesian(&[1.0, 3.0], &[0.0, 2.0], &[5.0, 12.5]).unwrap();
        let mut buf = Vec::new();
        write_positions_csv(&p, &mut buf).unwrap();
        let q = read_positions_csv(buf.as_slice()).unwrap();
        assert_eq!(q.center(), (2.0, 1.0));
        assert_eq!(q.samples()[1].speed, 12.5);
        assert!((q.samples()[1].r - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn tracker_samples_averaged_per_bin() {
        let p = PositionTrace::from_tracker(
            &[0.0, 0.1, 0.3, 0.9],
            &[0.0, 2.0, 4.0, 8.0],
            &[0.0, 0.0, 0.0, 0.0],
            &[1.0, 3.0, 5.0, 7.0],
            0.25,
            0.0,
            4,
        )
        .unwrap();
        let xs: Vec<f64> = p.samples().iter().map(|s| s.x).collect();
        assert_eq!(xs, vec![1.0, 4.0, 4.0, 8.0]);
        assert_eq!(p.samples()[0].speed, 2.0);
    }

    proptest! {
        #[test]
        fn binning_preserves_totals(
            times in proptest::collection::vec(proptest::collection::vec(0.0f64..10.0, 0..40), 1..4),
            width in 0.05f64..2.0,
        ) {
            let m = bin_spikes(&times, width, 0.0, 10.0).unwrap();
            for (c, ts) in times.iter().enumerate() {
                prop_assert_eq!(m.row(c).iter().sum::<u64>(), ts.len() as u64);
            }
        }

        #[test]
        fn split_halves_concatenate(
            rows in proptest::collection::vec(proptest::collection::vec(0u64..20, 12), 1..4),
            t_train in 1usize..10,
            t_test in 1usize..3,
        ) {
            let m = CountMatrix::from_rows(rows).unwrap();
            let spec = SplitSpec::new(t_train, t_test);
            let (a, b) = split(&m, &spec).unwrap();
            prop_assert_eq!(a.concat(&b).unwrap(), m.columns(0..t_train + t_test).unwrap());
        }

        #[test]
        fn filter_keeps_exactly_fast_bins(speeds in proptest::collection::vec(0.0f64..30.0, 1..50)) {
            let counts = CountMatrix::zeros(1, speeds.len()).unwrap();
            let expected = speeds.iter().filter(|&&s| s > 10.0).count();
            match filter_run_epochs(&counts, &trace_with_speeds(&speeds), 10.0) {
                Ok((c, p)) => {
                    prop_assert_eq!(c.n_bins(), expected);
                    prop_assert_eq!(p.len(), expected);
                }
                Err(Error::EmptyData(_)) => prop_assert_eq!(expected, 0),
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}

//! On-disk formats.
//!
//! Binary files are little-endian: an 8-byte magic, a `u32` version, a
//! header, then 64-bit payload values. CSV and JSON-lines exports exist for
//! offline plotting.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::enkf::AnalysisSeries;
use crate::error::{Error, Result};
use crate::interp::InterpolatedField;
use crate::l96::Trajectory;
use crate::net::{Architecture, NetworkParameters, TrainReport};
use crate::obs::{ObservationRecord, ObservationSeries};

const VERSION: u32 = 1;
const TRAJ_MAGIC: &[u8; 8] = b"L96TRAJ\0";
const OBS_MAGIC: &[u8; 8] = b"L96OBSV\0";
const MASK_MAGIC: &[u8; 8] = b"L96MASK\0";
const WEIGHTS_MAGIC: &[u8; 8] = b"L96WGHT\0";
const ANALYSIS_MAGIC: &[u8; 8] = b"L96ANAL\0";

struct Writer(BufWriter<File>);

impl Writer {
    fn create(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut w = Self(BufWriter::new(File::create(path)?));
        w.0.write_all(magic)?;
        w.u32(VERSION)?;
        Ok(w)
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }

    fn f64s(&mut self, v: &[f64]) -> Result<()> {
        for x in v {
            self.f64(*x)?;
        }
        Ok(())
    }

    fn bytes(&mut self, v: &[u8]) -> Result<()> {
        self.u64(v.len() as u64)?;
        Ok(self.0.write_all(v)?)
    }

    fn finish(mut self) -> Result<()> {
        Ok(self.0.flush()?)
    }
}

struct Reader<'a> {
    inner: BufReader<File>,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path, magic: &[u8; 8]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut r = Self {
            inner: BufReader::new(File::open(path)?),
            path,
        };
        let mut m = [0u8; 8];
        r.fill(&mut m)?;
        if &m != magic {
            return Err(r.bad(format!(
                "expected magic {:?}",
                String::from_utf8_lossy(magic).trim_end_matches('\0')
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.bad(format!("unsupported version {version}")));
        }
        Ok(r)
    }

    fn bad(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| self.bad(format!("truncated file: {e}")))
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn usize(&mut self, limit: usize) -> Result<usize> {
        let v = self.u64()?;
        if v > limit as u64 {
            return Err(self.bad(format!("header value {v} exceeds {limit}")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut raw = vec![0u8; n * 8];
        self.fill(&mut raw)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.usize(1 << 20)?;
        let mut v = vec![0u8; n];
        self.fill(&mut v)?;
        Ok(v)
    }

    fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(self.bad("trailing bytes")),
        }
    }
}

const MAX_LEN: usize = 1 << 32;

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = Writer::create(path, TRAJ_MAGIC)?;
    w.u64(traj.m() as u64)?;
    w.u64(traj.len() as u64)?;
    w.f64(traj.h())?;
    w.f64s(traj.as_slice())?;
    w.finish()
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let mut r = Reader::open(path, TRAJ_MAGIC)?;
    let m = r.usize(MAX_LEN)?;
    let len = r.usize(MAX_LEN)?;
    let h = r.f64()?;
    let data = r.f64s(m * len)?;
    r.expect_end()?;
    Trajectory::new(m, h, data).map_err(|e| r.bad(e.to_string()))
}

pub fn write_observations(path: &Path, obs: &ObservationSeries) -> Result<()> {
    let mut w = Writer::create(path, OBS_MAGIC)?;
    w.u64(obs.m as u64)?;
    w.u64(obs.len() as u64)?;
    w.u64(obs.p() as u64)?;
    w.f64(obs.sigma_obs)?;
    w.u64(obs.seed)?;
    for r in &obs.records {
        for &i in &r.indices {
            w.u32(i as u32)?;
        }
        w.f64s(&r.values)?;
    }
    w.finish()
}

pub fn read_observations(path: &Path) -> Result<ObservationSeries> {
    let mut r = Reader::open(path, OBS_MAGIC)?;
    let m = r.usize(MAX_LEN)?;
    let k = r.usize(MAX_LEN)?;
    let p = r.usize(m)?;
    let sigma = r.f64()?;
    let seed = r.u64()?;
    let mut records = Vec::with_capacity(k);
    for step in 1..=k {
        let mut idx = Vec::with_capacity(p);
        for _ in 0..p {
            idx.push(r.u32()? as usize);
        }
        let values = r.f64s(p)?;
        records.push(ObservationRecord::new(step, idx, values, m).map_err(|e| r.bad(e.to_string()))?);
    }
    r.expect_end()?;
    ObservationSeries::new(m, sigma, seed, records).map_err(|e| r.bad(e.to_string()))
}

/// Interpolated states as a trajectory file plus a bit-packed mask file.
pub fn write_interpolated(traj_path: &Path, mask_path: &Path, field: &InterpolatedField, h: f64) -> Result<()> {
    write_trajectory(traj_path, &Trajectory::new(field.m, h, field.states.clone())?)?;
    let mut w = Writer::create(mask_path, MASK_MAGIC)?;
    w.u64(field.m as u64)?;
    w.u64(field.len() as u64)?;
    let mut packed = vec![0u8; field.mask.len().div_ceil(8)];
    for (i, &b) in field.mask.iter().enumerate() {
        if b {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    w.0.write_all(&packed)?;
    w.finish()
}

pub fn read_interpolated(traj_path: &Path, mask_path: &Path) -> Result<InterpolatedField> {
    let traj = read_trajectory(traj_path)?;
    let mut r = Reader::open(mask_path, MASK_MAGIC)?;
    let m = r.usize(MAX_LEN)?;
    let k = r.usize(MAX_LEN)?;
    if m != traj.m() || k != traj.len() {
        return Err(r.bad(format!(
            "mask is {k}x{m}, states are {}x{}",
            traj.len(),
            traj.m()
        )));
    }
    let mut packed = vec![0u8; (m * k).div_ceil(8)];
    r.fill(&mut packed)?;
    r.expect_end()?;
    let mask = (0..m * k).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
    Ok(InterpolatedField {
        m,
        states: traj.into_vec(),
        mask,
    })
}

/// Architecture descriptor and layout, then running statistics and values.
pub fn write_weights(path: &Path, params: &NetworkParameters) -> Result<()> {
    let mut w = Writer::create(path, WEIGHTS_MAGIC)?;
    let arch = params.architecture();
    w.bytes(arch.descriptor().as_bytes())?;
    w.bytes(serde_json::to_string(arch).expect("architecture serializes").as_bytes())?;
    w.f64(params.running_mean)?;
    w.f64(params.running_var)?;
    w.u64(params.weights.len() as u64)?;
    w.f64s(&params.weights)?;
    w.finish()
}

/// Loads weights, refusing files whose architecture differs from `expected`.
pub fn read_weights(path: &Path, expected: Option<&Architecture>) -> Result<NetworkParameters> {
    let mut r = Reader::open(path, WEIGHTS_MAGIC)?;
    let descriptor = String::from_utf8(r.bytes()?).map_err(|_| r.bad("descriptor is not UTF-8"))?;
    let arch: Architecture = serde_json::from_slice(&r.bytes()?)
        .map_err(|e| r.bad(format!("architecture record: {e}")))?;
    if arch.descriptor() != descriptor {
        return Err(r.bad("descriptor does not match architecture record"));
    }
    if let Some(want) = expected {
        if *want != arch {
            return Err(Error::ArchitectureMismatch {
                found: descriptor,
                expected: want.descriptor(),
            });
        }
    }
    let mean = r.f64()?;
    let var = r.f64()?;
    let n = r.usize(MAX_LEN)?;
    let weights = r.f64s(n)?;
    r.expect_end()?;
    NetworkParameters::from_parts(arch, weights, mean, var)
}

pub fn write_analysis(path: &Path, a: &AnalysisSeries) -> Result<()> {
    let mut w = Writer::create(path, ANALYSIS_MAGIC)?;
    w.u64(a.m as u64)?;
    w.u64(a.len() as u64)?;
    w.u64(a.n_members as u64)?;
    w.f64(a.sigma_m)?;
    w.u64(a.seed)?;
    for k in 1..=a.len() {
        w.f64s(a.mean(k))?;
        w.f64s(a.variance(k))?;
    }
    w.finish()
}

pub fn read_analysis(path: &Path) -> Result<AnalysisSeries> {
    let mut r = Reader::open(path, ANALYSIS_MAGIC)?;
    let m = r.usize(MAX_LEN)?;
    let k = r.usize(MAX_LEN)?;
    let n = r.usize(MAX_LEN)?;
    let sigma_m = r.f64()?;
    let seed = r.u64()?;
    let mut means = Vec::with_capacity(m * k);
    let mut vars = Vec::with_capacity(m * k);
    for _ in 0..k {
        means.extend(r.f64s(m)?);
        vars.extend(r.f64s(m)?);
    }
    r.expect_end()?;
    AnalysisSeries::new(m, n, sigma_m, seed, means, vars).map_err(|e| r.bad(e.to_string()))
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Numeric CSV with a header row; NaN is written as an empty cell.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.into_iter().map(fmt).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(w.flush()?)
}

/// Reads a numeric CSV written by [`write_csv`]; empty cells become NaN.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: "empty CSV".into(),
        })?
        .split(',')
        .map(str::to_string)
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|c| {
                if c.is_empty() {
                    Ok(f64::NAN)
                } else {
                    c.parse::<f64>().map_err(|_| Error::Format {
                        path: path.to_path_buf(),
                        reason: format!("row {}: bad number {c:?}", i + 1),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != header.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("row {} has {} cells, header has {}", i + 1, row.len(), header.len()),
            });
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Row-major `rows x cols` grid as a header-less CSV matrix.
pub fn write_matrix_csv(path: &Path, data: &[f64], cols: usize) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    for row in data.chunks(cols) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(w.flush()?)
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let header: Vec<String> = std::iter::once("k".to_string())
        .chain((0..traj.m()).map(|n| format!("x{n}")))
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        path,
        &header,
        traj.states()
            .enumerate()
            .map(|(k, s)| std::iter::once(k as f64).chain(s.iter().copied()).collect()),
    )
}

pub fn write_analysis_csv(path: &Path, a: &AnalysisSeries) -> Result<()> {
    let mut header = vec!["k".to_string()];
    header.extend((0..a.m).map(|n| format!("mean{n}")));
    header.extend((0..a.m).map(|n| format!("var{n}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        path,
        &header,
        (1..=a.len()).map(|k| {
            std::iter::once(k as f64)
                .chain(a.mean(k).iter().copied())
                .chain(a.variance(k).iter().copied())
                .collect()
        }),
    )
}

/// One line per epoch: epoch, mean training loss, holdout loss, wall time.
pub fn write_training_log(path: &Path, report: &TrainReport) -> Result<()> {
    write_csv(
        path,
        &["epoch", "train_loss", "holdout_loss", "seconds"],
        report.epochs.iter().map(|e| {
            vec![
                e.epoch as f64,
                e.train_loss,
                e.holdout_loss.unwrap_or(f64::NAN),
                e.seconds,
            ]
        }),
    )
}

/// One metric value with the parameters that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub params: serde_json::Value,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std: Option<f64>,
}

pub fn append_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).expect("metric serializes"))?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

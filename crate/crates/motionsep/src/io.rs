//! File formats: the DVT video container, PGM images, CSV tables and
//! JSON manifests.
//!
//! DVT layout: magic `DVT1`, then T, H, W as little-endian u32, then
//! T*H*W little-endian f32 values, frame-major then row-major. The
//! write/read round trip is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::separation::{SeedStudy, Stats};
use crate::tensor::Tensor;
use crate::video::{VideoError, VideoTensor};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic in {path}: expected {expected}")]
    BadMagic { path: String, expected: &'static str },
    #[error("truncated or oversized payload in {path}")]
    BadPayload { path: String },
    #[error("malformed CSV line {line} in {path}")]
    BadCsvLine { line: usize, path: String },
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

const DVT_MAGIC: &[u8; 4] = b"DVT1";
const WEIGHTS_MAGIC: &[u8; 4] = b"MSW1";

pub fn write_dvt(path: &Path, video: &VideoTensor) -> Result<(), IoError> {
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(DVT_MAGIC)?;
    for dim in [video.frames(), video.height(), video.width()] {
        file.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in video.data() {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_dvt(path: &Path) -> Result<VideoTensor, IoError> {
    let mut file = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != DVT_MAGIC {
        return Err(IoError::BadMagic {
            path: path.display().to_string(),
            expected: "DVT1",
        });
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut buf = [0u8; 4];
        file.read_exact(&mut buf)?;
        *d = u32::from_le_bytes(buf) as usize;
    }
    let n = dims[0] * dims[1] * dims[2];
    let mut payload = vec![0u8; n * 4];
    file.read_exact(&mut payload)?;
    if file.read(&mut [0u8; 1])? != 0 {
        return Err(IoError::BadPayload {
            path: path.display().to_string(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(VideoTensor::new(dims[0], dims[1], dims[2], data)?)
}

/// Maps [0, 1] linearly to 8-bit with clipping and writes binary PGM.
pub fn write_pgm(path: &Path, pixels: &[f32], height: usize, width: usize) -> Result<(), IoError> {
    debug_assert_eq!(pixels.len(), height * width);
    let mut file = BufWriter::new(File::create(path)?);
    write!(file, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    file.write_all(&bytes)?;
    file.flush()?;
    Ok(())
}

/// Reads a binary PGM written by [`write_pgm`]; values map back to
/// [0, 1].
pub fn read_pgm(path: &Path) -> Result<(Vec<f32>, usize, usize), IoError> {
    let raw = std::fs::read(path)?;
    let bad = || IoError::BadMagic {
        path: path.display().to_string(),
        expected: "P5",
    };
    if !raw.starts_with(b"P5\n") {
        return Err(bad());
    }
    let header_end = raw
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .nth(2)
        .map(|(i, _)| i + 1)
        .ok_or_else(bad)?;
    let header = std::str::from_utf8(&raw[..header_end]).map_err(|_| bad())?;
    let mut lines = header.lines();
    lines.next();
    let mut dims = lines.next().ok_or_else(bad)?.split_whitespace();
    let width: usize = dims.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let height: usize = dims.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    let pixels = &raw[header_end..];
    if pixels.len() != width * height {
        return Err(IoError::BadPayload {
            path: path.display().to_string(),
        });
    }
    Ok((
        pixels.iter().map(|&b| b as f32 / 255.0).collect(),
        height,
        width,
    ))
}

/// Two-column CSV with a header row.
pub fn write_series_csv(
    path: &Path,
    header: (&str, &str),
    rows: impl Iterator<Item = (usize, f64)>,
) -> Result<(), IoError> {
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "{},{}", header.0, header.1)?;
    for (k, v) in rows {
        writeln!(file, "{k},{v}")?;
    }
    file.flush()?;
    Ok(())
}

/// Reads the value column of a two-column CSV with a header row.
pub fn read_series_csv(path: &Path) -> Result<Vec<f64>, IoError> {
    let file = BufReader::new(File::open(path)?);
    let mut values = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let value = line
            .split(',')
            .nth(1)
            .and_then(|s| s.trim().parse::<f64>().ok())
            .ok_or_else(|| IoError::BadCsvLine {
                line: i + 1,
                path: path.display().to_string(),
            })?;
        values.push(value);
    }
    Ok(values)
}

/// Serialized generator weights: magic `MSW1`, u32 tensor count,
/// then per tensor a u32 rank, u32 extents and little-endian f32
/// data.
pub fn write_weights(path: &Path, tensors: &[Tensor<f32>]) -> Result<(), IoError> {
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(WEIGHTS_MAGIC)?;
    file.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        file.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            file.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in t.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<Vec<Tensor<f32>>, IoError> {
    let mut file = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(IoError::BadMagic {
            path: path.display().to_string(),
            expected: "MSW1",
        });
    }
    let read_u32 = |file: &mut BufReader<File>| -> Result<u32, IoError> {
        let mut buf = [0u8; 4];
        file.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    };
    let count = read_u32(&mut file)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = read_u32(&mut file)? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| read_u32(&mut file).map(|v| v as usize))
            .collect::<Result<_, _>>()?;
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        file.read_exact(&mut payload)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::from_parts(shape, data));
    }
    Ok(tensors)
}

/// Per-seed rows of a study as CSV (seed, E1, E2, best_loss,
/// flagged), empty cells where no ground truth exists.
pub fn write_study_csv(path: &Path, study: &SeedStudy, seeds: &[u64]) -> Result<(), IoError> {
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "seed,E1,E2,best_loss,flagged")?;
    for ((run, &seed), &flagged) in study.runs.iter().zip(seeds).zip(&study.flagged) {
        match run {
            Ok(run) => {
                let cell = |m: usize| {
                    run.errors
                        .get(m)
                        .and_then(|e| e.map(|(_, v)| v.to_string()))
                        .unwrap_or_default()
                };
                writeln!(file, "{seed},{},{},{},{}", cell(0), cell(1), run.best_loss, flagged)?;
            }
            Err(msg) => writeln!(file, "{seed},,,,{} # failed: {msg}", flagged)?,
        }
    }
    file.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct StudyAggregates<'a> {
    e1: &'a Option<Stats>,
    e2: &'a Option<Stats>,
    best_loss: &'a Option<Stats>,
    median_run_seed: Option<u64>,
    best_run_seed: Option<u64>,
}

/// Aggregate block mirroring the study table columns.
pub fn write_study_json(path: &Path, study: &SeedStudy) -> Result<(), IoError> {
    let none = None;
    let aggregates = StudyAggregates {
        e1: study.error_stats.first().unwrap_or(&none),
        e2: study.error_stats.get(1).unwrap_or(&none),
        best_loss: &study.loss_stats,
        median_run_seed: study.median_run_seed,
        best_run_seed: study.best_run_seed,
    };
    std::fs::write(path, serde_json::to_string_pretty(&aggregates)?)?;
    Ok(())
}

/// Record of one CLI run: inputs, seed and every artifact written.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub configs: Vec<String>,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    pub artifacts: Vec<String>,
    pub loss_summary: Option<LossSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossSummary {
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub final_loss: f64,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

//! On-disk formats: run results, dataset archives, parameter checkpoints,
//! generated-sample dumps, rollout traces, and a plain CSV series loader.
//!
//! Numeric payloads go into little-endian f64 binaries with a JSON manifest
//! beside them; tabular results go into CSV with a JSON roll-up. Everything
//! here is deterministic so re-exports of the same content are byte-identical.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, StptError};
use crate::synth::{ChannelInfo, PairInfo, SampleMeta, SeriesDataset, SynthTask};
use crate::tensor::tape::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// 64-bit FNV-1a, the project's content hash for manifests and run cells.
pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn tensor_bytes(t: &Tensor<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn write_f64_le(path: &Path, data: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_f64_le(path: &Path, expect: usize) -> Result<Vec<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != expect * 8 {
        return Err(StptError::CorruptFile {
            path: path.display().to_string(),
            details: format!("expected {} f64 values, file holds {} bytes", expect, bytes.len()),
        });
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

// ── Run results ──────────────────────────────────────────────────────────

/// One training run; `sigma` is the sweep noise level (0 when none) and
/// `wall_time` is in seconds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    pub variant: String,
    pub n: usize,
    pub sigma: f64,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub wall_time: f64,
}

/// Appends rows, creating the file with a header on first use.
pub fn append_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let fresh = !path.exists() || path.metadata()?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut out = Vec::new();
    let mut r = csv::Reader::from_path(path)?;
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Seed-aggregated statistics of one (task, variant, n, sigma) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub task: String,
    pub variant: String,
    pub n: usize,
    pub sigma: f64,
    pub seeds: Vec<u64>,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

/// Groups rows into cells in first-seen order. Cells containing an aborted
/// (NaN) run keep the NaN so failures stay visible in the summary.
pub fn summarize_results(rows: &[ResultRow]) -> Vec<CellSummary> {
    let mut cells: Vec<(String, String, usize, u64, Vec<&ResultRow>)> = Vec::new();
    for row in rows {
        let key = (row.task.clone(), row.variant.clone(), row.n, row.sigma.to_bits());
        match cells.iter_mut().find(|c| (c.0.as_str(), c.1.as_str(), c.2, c.3) == (key.0.as_str(), key.1.as_str(), key.2, key.3)) {
            Some(c) => c.4.push(row),
            None => cells.push((key.0, key.1, key.2, key.3, vec![row])),
        }
    }
    cells
        .into_iter()
        .map(|(task, variant, n, sigma_bits, group)| {
            let k = group.len() as f64;
            let mse_mean = group.iter().map(|r| r.mse).sum::<f64>() / k;
            let mae_mean = group.iter().map(|r| r.mae).sum::<f64>() / k;
            let mse_std =
                (group.iter().map(|r| (r.mse - mse_mean).powi(2)).sum::<f64>() / k).sqrt();
            let mae_std =
                (group.iter().map(|r| (r.mae - mae_mean).powi(2)).sum::<f64>() / k).sqrt();
            CellSummary {
                task,
                variant,
                n,
                sigma: f64::from_bits(sigma_bits),
                seeds: group.iter().map(|r| r.seed).collect(),
                mse_mean,
                mse_std,
                mae_mean,
                mae_std,
            }
        })
        .collect()
}

pub fn write_summary(path: &Path, cells: &[CellSummary]) -> Result<()> {
    let json = serde_json::to_string_pretty(cells)?;
    std::fs::write(path, json)?;
    Ok(())
}

// ── Dataset archives ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub task: SynthTask,
    pub seed: u64,
    pub base_noise: f64,
    pub sweep_sigma: f64,
    pub n_samples: usize,
    pub n_channels: usize,
    pub series_len: usize,
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
    pub channels: Vec<ChannelInfo>,
    pub pairs: Vec<PairInfo>,
    pub attr_cards: Vec<usize>,
    pub meta: Vec<SampleMeta>,
    pub data_file: String,
    /// FNV-1a of the binary payload, hex.
    pub checksum: String,
}

/// Writes `<dir>/data.bin` and `<dir>/manifest.json`; returns the manifest
/// path. Identical datasets produce identical bytes and checksums.
pub fn save_dataset(ds: &SeriesDataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let bin = dir.join("data.bin");
    write_f64_le(&bin, ds.data.data())?;
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        task: ds.task,
        seed: ds.seed,
        base_noise: ds.base_noise,
        sweep_sigma: ds.sweep_sigma,
        n_samples: ds.n_samples(),
        n_channels: ds.n_channels(),
        series_len: ds.series_len(),
        train: (ds.train.start, ds.train.end),
        val: (ds.val.start, ds.val.end),
        test: (ds.test.start, ds.test.end),
        channels: ds.channels.clone(),
        pairs: ds.pairs.clone(),
        attr_cards: ds.attr_cards.clone(),
        meta: ds.meta.clone(),
        data_file: "data.bin".into(),
        checksum: format!("{:016x}", fnv1a_64(&tensor_bytes(&ds.data))),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_dataset(dir: &Path) -> Result<SeriesDataset> {
    let manifest_path = dir.join("manifest.json");
    let m: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    if m.version != FORMAT_VERSION {
        return Err(StptError::CorruptFile {
            path: manifest_path.display().to_string(),
            details: format!("unsupported version {}", m.version),
        });
    }
    let numel = m.n_samples * m.n_channels * m.series_len;
    let bin = dir.join(&m.data_file);
    let data = read_f64_le(&bin, numel)?;
    let tensor = Tensor::from_f64(&[m.n_samples, m.n_channels, m.series_len], &data)?;
    let got = format!("{:016x}", fnv1a_64(&tensor_bytes(&tensor)));
    if got != m.checksum {
        return Err(StptError::CorruptFile {
            path: bin.display().to_string(),
            details: format!("checksum {} does not match manifest {}", got, m.checksum),
        });
    }
    Ok(SeriesDataset {
        task: m.task,
        seed: m.seed,
        base_noise: m.base_noise,
        sweep_sigma: m.sweep_sigma,
        data: tensor,
        train: m.train.0..m.train.1,
        val: m.val.0..m.val.1,
        test: m.test.0..m.test.1,
        channels: m.channels,
        pairs: m.pairs,
        attr_cards: m.attr_cards,
        meta: m.meta,
    })
}

// ── Parameter checkpoints ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreManifest {
    pub version: u32,
    pub tensors: Vec<TensorMeta>,
    pub payload_file: String,
    pub checksum: String,
}

/// Writes `<dir>/params.bin` plus `<dir>/params.json` preserving insertion
/// order, so a reload rebuilds identical parameter ids.
pub fn save_store(store: &ParamStore<f64>, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut payload: Vec<f64> = Vec::with_capacity(store.total_params());
    let mut tensors = Vec::with_capacity(store.len());
    for id in store.ids() {
        let value = store.value(id);
        tensors.push(TensorMeta {
            name: store.name(id).to_string(),
            shape: value.shape().to_vec(),
            offset: payload.len(),
        });
        payload.extend_from_slice(value.data());
    }
    let bin = dir.join("params.bin");
    write_f64_le(&bin, &payload)?;
    let mut bytes = Vec::with_capacity(payload.len() * 8);
    for v in &payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let manifest = StoreManifest {
        version: FORMAT_VERSION,
        tensors,
        payload_file: "params.bin".into(),
        checksum: format!("{:016x}", fnv1a_64(&bytes)),
    };
    let path = dir.join("params.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_store(dir: &Path) -> Result<ParamStore<f64>> {
    let manifest_path = dir.join("params.json");
    let m: StoreManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    if m.version != FORMAT_VERSION {
        return Err(StptError::CorruptFile {
            path: manifest_path.display().to_string(),
            details: format!("unsupported version {}", m.version),
        });
    }
    let total: usize = m.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let payload = read_f64_le(&dir.join(&m.payload_file), total)?;
    let mut store = ParamStore::new();
    for tm in &m.tensors {
        let numel: usize = tm.shape.iter().product();
        if tm.offset + numel > payload.len() {
            return Err(StptError::CorruptFile {
                path: manifest_path.display().to_string(),
                details: format!("tensor {} overruns payload", tm.name),
            });
        }
        let t = Tensor::from_f64(&tm.shape, &payload[tm.offset..tm.offset + numel])?;
        store.insert(&tm.name, t)?;
    }
    Ok(store)
}

// ── Generated samples ────────────────────────────────────────────────────

/// Provenance written next to each generated-sample CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub condition: Vec<usize>,
    pub seed: u64,
    pub guidance: f64,
}

/// `[N, L]` series as CSV: one row per timestep, one column per channel.
pub fn write_series_csv(path: &Path, series: &Tensor<f64>) -> Result<()> {
    let (n, l) = (series.shape()[0], series.shape()[1]);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..n).map(|c| format!("ch{}", c)))?;
    for t in 0..l {
        w.write_record((0..n).map(|c| format!("{}", series.at(&[c, t]))))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sidecar(path: &Path, sidecar: &SampleSidecar) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

/// Rollout diagnostics as JSON lines, one object per step.
pub fn write_trace_jsonl<S: Serialize>(path: &Path, steps: &[S]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in steps {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

// ── Plain CSV loader ─────────────────────────────────────────────────────

/// Reads a CSV of observations into channels: every fully numeric column
/// becomes one channel (column-major `[N, T]`), others (dates, labels) are
/// dropped. A non-numeric first row is treated as the header.
pub fn load_csv_series(path: &Path) -> Result<(Vec<String>, Tensor<f64>)> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).flexible(false).from_path(path)?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(|s| s.trim().to_string()).collect());
    }
    if rows.is_empty() {
        return Err(StptError::CorruptFile {
            path: path.display().to_string(),
            details: "empty csv".into(),
        });
    }
    let has_header = rows[0].iter().any(|s| s.parse::<f64>().is_err());
    let (names, data_rows) = if has_header {
        (rows[0].clone(), &rows[1..])
    } else {
        ((0..rows[0].len()).map(|i| format!("col{}", i)).collect(), &rows[..])
    };
    if data_rows.is_empty() {
        return Err(StptError::CorruptFile {
            path: path.display().to_string(),
            details: "header without data rows".into(),
        });
    }
    let n_cols = rows[0].len();
    let numeric: Vec<usize> = (0..n_cols)
        .filter(|&c| data_rows.iter().all(|row| row[c].parse::<f64>().is_ok()))
        .collect();
    if numeric.is_empty() {
        return Err(StptError::CorruptFile {
            path: path.display().to_string(),
            details: "no numeric columns".into(),
        });
    }
    let t_len = data_rows.len();
    let mut out = Tensor::zeros(&[numeric.len(), t_len]);
    for (ci, &c) in numeric.iter().enumerate() {
        for (t, row) in data_rows.iter().enumerate() {
            out.set(&[ci, t], row[c].parse::<f64>().unwrap());
        }
    }
    Ok((numeric.into_iter().map(|c| names[c].clone()).collect(), out))
}

// ── Tests ────────────────────────────────────────────────────────────────

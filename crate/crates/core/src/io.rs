//! On-disk formats: dataset manifests and CSVs, parameter checkpoints and
//! run records.
//!
//! Dataset CSVs live on the fine grid: the first column is the step index,
//! then one column per channel; an empty cell is an unobserved (or, for a
//! coarse channel, unsampled) point.
//!
//! A checkpoint is the 8-byte magic `CTFCKPT1`, a little-endian `u64` header
//! length, a JSON header listing tensor names and shapes in registry order,
//! and then every tensor's values as little-endian `f64`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{resample_practical, synth_coupled, AsyncDataset, SplitFractions, SynthConfig};
use crate::error::{CtfError, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::patching::PatchPlan;
use crate::tensor::Tensor;
use crate::train::{EpochRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestChannel {
    pub name: String,
    pub column: String,
    pub sampling_factor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    #[serde(default = "default_period")]
    pub base_period_seconds: f64,
    #[serde(default)]
    pub channels: Vec<ManifestChannel>,
    #[serde(default)]
    pub splits: SplitFractions,
    /// CSV path relative to the manifest; defaults to `<name>.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    /// Generate the data instead of reading a CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthConfig>,
}

fn default_period() -> f64 {
    1.0
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        CtfError::Config(format!(
            "{}: line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

/// Dense fine-grid columns (NaN = empty cell) for the requested headers.
pub fn read_csv_columns(path: &Path, columns: &[String]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| {
            headers.iter().position(|h| h.trim() == c).ok_or_else(|| {
                CtfError::Config(format!("{}: no column `{c}`", path.display()))
            })
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); columns.len()];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (j, &k) in idx.iter().enumerate() {
            let cell = rec.get(k).unwrap_or("").trim();
            let v = if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|_| {
                    CtfError::Config(format!(
                        "{}: line {}, column `{}`: not a number: `{cell}`",
                        path.display(),
                        line + 2,
                        columns[j]
                    ))
                })?
            };
            out[j].push(v);
        }
    }
    Ok(out)
}

/// Build the dataset a manifest describes.
pub fn load_manifest_dataset(path: &Path) -> Result<AsyncDataset> {
    let m = read_manifest(path)?;
    if let Some(cfg) = &m.synthetic {
        let cfg = SynthConfig {
            fractions: m.splits,
            ..cfg.clone()
        };
        let mut ds = synth_coupled(&cfg)?;
        if !m.channels.is_empty() {
            if m.channels.len() != ds.n_channels() {
                return Err(CtfError::Config(format!(
                    "{}: {} channels listed, generator makes {}",
                    path.display(),
                    m.channels.len(),
                    ds.n_channels()
                )));
            }
            for (c, mc) in ds.channels.iter_mut().zip(&m.channels) {
                if mc.sampling_factor != c.factor {
                    return Err(CtfError::Config(format!(
                        "channel `{}`: sampling_factor {} differs from generator factor {}",
                        mc.name, mc.sampling_factor, c.factor
                    )));
                }
                c.name = mc.name.clone();
            }
        }
        return Ok(ds);
    }
    if m.channels.is_empty() {
        return Err(CtfError::Config(format!("{}: `channels` is empty", path.display())));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let csv_path = dir.join(m.csv.clone().unwrap_or_else(|| format!("{}.csv", m.name)));
    let cols: Vec<String> = m.channels.iter().map(|c| c.column.clone()).collect();
    let data = read_csv_columns(&csv_path, &cols)?;
    let names: Vec<String> = m.channels.iter().map(|c| c.name.clone()).collect();
    let factors: Vec<usize> = m.channels.iter().map(|c| c.sampling_factor).collect();
    resample_practical(&data, &names, &factors, m.splits)
}

/// Write fine steps `range` (default: everything) in the dataset CSV format.
pub fn write_dataset_csv(ds: &AsyncDataset, path: &Path, range: Option<Range<usize>>) -> Result<()> {
    let range = range.unwrap_or(0..ds.base_len);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string()];
    header.extend(ds.channels.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for t in range {
        let mut row = vec![t.to_string()];
        for (i, c) in ds.channels.iter().enumerate() {
            let cell = if t % c.factor == 0 && t / c.factor < ds.values[i].len() && ds.observed[i][t / c.factor] {
                format!("{}", ds.values[i][t / c.factor])
            } else {
                String::new()
            };
            row.push(cell);
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Manifest describing a dataset written by [`write_dataset_csv`].
pub fn manifest_for(ds: &AsyncDataset, name: &str, base_period_seconds: f64, fractions: SplitFractions, csv: &str) -> Manifest {
    Manifest {
        name: name.to_string(),
        base_period_seconds,
        channels: ds
            .channels
            .iter()
            .map(|c| ManifestChannel {
                name: c.name.clone(),
                column: c.name.clone(),
                sampling_factor: c.factor,
            })
            .collect(),
        splits: fractions,
        csv: Some(csv.to_string()),
        synthetic: None,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        CtfError::Config(format!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column()))
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CTFCKPT1";

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    tensors: Vec<CheckpointEntry>,
}

pub fn write_checkpoint(path: &Path, params: &ParamStore<Tensor>) -> Result<()> {
    let header = CheckpointHeader {
        tensors: params
            .iter()
            .map(|(n, t)| CheckpointEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in params.items() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore<Tensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CtfError::Config(format!("{}: not a checkpoint file", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut store = ParamStore::new();
    let mut buf = [0u8; 8];
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        store.push(e.name, Tensor::new(e.shape, data)?)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CtfError::Config(format!("{}: trailing bytes after tensors", path.display())));
    }
    Ok(store)
}

/// Everything needed to rebuild and re-evaluate a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub factors: Vec<usize>,
    pub channel_names: Vec<String>,
    pub plan: PatchPlan,
    pub best_epoch: Option<usize>,
    pub best_val_cmse: Option<f64>,
    pub diverged: Option<String>,
}

pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const SEED_FILE: &str = "seed.json";

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_cmse", "val_cmse"])?;
    for h in history {
        w.write_record([h.epoch.to_string(), h.train_cmse.to_string(), h.val_cmse.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |k: usize| -> Result<&str> {
            rec.get(k).ok_or_else(|| CtfError::Config("short history row".into()))
        };
        let num = |k: usize| -> Result<f64> {
            field(k)?.parse().map_err(|_| CtfError::Config("bad history value".into()))
        };
        out.push(EpochRecord {
            epoch: field(0)?.parse().map_err(|_| CtfError::Config("bad epoch".into()))?,
            train_cmse: num(1)?,
            val_cmse: num(2)?,
        });
    }
    Ok(out)
}

/// Write a fresh run directory. Refuses to touch an existing checkpoint.
pub fn save_run(dir: &Path, record: &RunRecord, model: &Model, history: &[EpochRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    if dir.join(CHECKPOINT_FILE).exists() {
        return Err(CtfError::Config(format!(
            "{} already holds a run; choose a new run directory",
            dir.display()
        )));
    }
    write_json(&dir.join(RUN_FILE), record)?;
    write_json(&dir.join(SEED_FILE), &serde_json::json!({ "seed": record.train.seed }))?;
    write_history(&dir.join(HISTORY_FILE), history)?;
    write_checkpoint(&dir.join(CHECKPOINT_FILE), &model.params)
}

pub fn load_run(dir: &Path) -> Result<(RunRecord, Model)> {
    let record: RunRecord = read_json(&dir.join(RUN_FILE))?;
    let params = read_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    let model = Model::from_parts(&record.model, &record.factors, record.plan.clone(), params)?;
    Ok((record, model))
}

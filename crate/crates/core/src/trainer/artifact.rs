//! Run directories: `args.json`, `metrics.json`, ECHL v1 logits tables and
//! `history.csv`.
//!
//! ECHL v1 layout (little endian): magic `ECHL`, u32 version = 1, u32
//! n_rows, u32 K, then per row u64 node_id, u64 species_id, K × f32 logits,
//! K × u8 labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::graphstore::Split;
use crate::metrics::{EvalTable, ScoreKind};

pub const ECHL_MAGIC: &[u8; 4] = b"ECHL";
pub const ECHL_VERSION: u32 = 1;

pub const ARGS_FILE: &str = "args.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const HISTORY_FILE: &str = "history.csv";

pub fn logits_file(split: Split) -> String {
    format!("logits_{}.echl", split.as_str())
}

/// Per-split logits table, stored exactly as written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsTable {
    k: usize,
    pub node_ids: Vec<u64>,
    pub species_ids: Vec<u64>,
    pub logits: Vec<f32>,
    pub labels: Vec<u8>,
}

fn artifact_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Artifact {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl LogitsTable {
    pub fn new(k: usize, node_ids: Vec<u64>, species_ids: Vec<u64>, logits: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        let n = node_ids.len();
        if species_ids.len() != n || logits.len() != n * k || labels.len() != n * k {
            return Err(Error::shape(
                "logits table",
                format!("{n} rows, K = {k}: {} species, {} logits, {} labels", species_ids.len(), logits.len(), labels.len()),
            ));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::Validation("labels must be 0/1".into()));
        }
        if u32::try_from(n).is_err() || u32::try_from(k).is_err() {
            return Err(Error::Validation("logits table too large for ECHL v1".into()));
        }
        Ok(LogitsTable {
            k,
            node_ids,
            species_ids,
            logits,
            labels,
        })
    }

    pub fn rows(&self) -> usize {
        self.node_ids.len()
    }

    pub fn num_labels(&self) -> usize {
        self.k
    }

    pub fn to_eval_table(&self) -> EvalTable {
        EvalTable::new(
            self.rows(),
            self.k,
            self.logits.iter().map(|&v| v as f64).collect(),
            self.labels.clone(),
            ScoreKind::Logits,
        )
        .expect("validated on construction")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.rows() * (16 + 5 * self.k));
        out.extend_from_slice(ECHL_MAGIC);
        out.extend_from_slice(&ECHL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        for i in 0..self.rows() {
            out.extend_from_slice(&self.node_ids[i].to_le_bytes());
            out.extend_from_slice(&self.species_ids[i].to_le_bytes());
            for v in &self.logits[i * self.k..(i + 1) * self.k] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&self.labels[i * self.k..(i + 1) * self.k]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let err = |m: &str| artifact_err(path, m);
        if bytes.len() < 16 || &bytes[..4] != ECHL_MAGIC {
            return Err(err("missing ECHL magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != ECHL_VERSION {
            return Err(err(&format!("unsupported version {version}")));
        }
        let n = u32_at(8) as usize;
        let k = u32_at(12) as usize;
        let row = 16 + 5 * k;
        if bytes.len() != 16 + n * row {
            return Err(err(&format!("expected {} bytes for {n} rows of K = {k}, found {}", 16 + n * row, bytes.len())));
        }
        let mut node_ids = Vec::with_capacity(n);
        let mut species_ids = Vec::with_capacity(n);
        let mut logits = Vec::with_capacity(n * k);
        let mut labels = Vec::with_capacity(n * k);
        for r in 0..n {
            let base = 16 + r * row;
            node_ids.push(u64::from_le_bytes(bytes[base..base + 8].try_into().unwrap()));
            species_ids.push(u64::from_le_bytes(bytes[base + 8..base + 16].try_into().unwrap()));
            for j in 0..k {
                let o = base + 16 + 4 * j;
                logits.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()));
            }
            labels.extend_from_slice(&bytes[base + 16 + 4 * k..base + row]);
        }
        LogitsTable::new(k, node_ids, species_ids, logits, labels).map_err(|e| artifact_err(path, e.to_string()))
    }

    pub fn write_echl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_echl(path: &Path) -> Result<Self> {
        LogitsTable::from_bytes(&fs::read(path)?, path)
    }

    /// CSV mirror; `{:.8e}` gives 9 significant digits, enough to
    /// round-trip any f32.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("node_id,species_id");
        for j in 0..self.k {
            write!(s, ",logit_{j}").unwrap();
        }
        for j in 0..self.k {
            write!(s, ",label_{j}").unwrap();
        }
        s.push('\n');
        for i in 0..self.rows() {
            write!(s, "{},{}", self.node_ids[i], self.species_ids[i]).unwrap();
            for v in &self.logits[i * self.k..(i + 1) * self.k] {
                write!(s, ",{v:.8e}").unwrap();
            }
            for y in &self.labels[i * self.k..(i + 1) * self.k] {
                write!(s, ",{y}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
        let cols = header.split(',').count();
        if cols < 2 || (cols - 2) % 2 != 0 {
            return Err(parse_err(1, format!("bad header with {cols} columns")));
        }
        let k = (cols - 2) / 2;
        let (mut node_ids, mut species_ids, mut logits, mut labels) = (vec![], vec![], vec![], vec![]);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols {
                return Err(parse_err(lineno, format!("expected {cols} fields, found {}", f.len())));
            }
            let bad = |what: &str, v: &str| parse_err(lineno, format!("bad {what} {v:?}"));
            node_ids.push(f[0].parse().map_err(|_| bad("node_id", f[0]))?);
            species_ids.push(f[1].parse().map_err(|_| bad("species_id", f[1]))?);
            for v in &f[2..2 + k] {
                logits.push(v.parse::<f32>().map_err(|_| bad("logit", v))?);
            }
            for v in &f[2 + k..] {
                labels.push(v.parse::<u8>().map_err(|_| bad("label", v))?);
            }
        }
        LogitsTable::new(k, node_ids, species_ids, logits, labels).map_err(|e| artifact_err(path, e.to_string()))
    }
}

/// One training epoch in `history.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifact {
    pub args: Map<String, Value>,
    pub metrics: Map<String, Value>,
    pub tables: BTreeMap<Split, LogitsTable>,
    pub history: Vec<EpochRecord>,
}

fn write_json(path: &Path, doc: &Map<String, Value>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, doc)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path)?;
    match serde_json::from_str(&text).map_err(|e| artifact_err(path, e.to_string()))? {
        Value::Object(m) => Ok(m),
        _ => Err(artifact_err(path, "expected a JSON object")),
    }
}

impl RunArtifact {
    pub fn table(&self, split: Split) -> Result<&LogitsTable> {
        self.tables
            .get(&split)
            .ok_or_else(|| Error::Config(format!("run has no {split} logits")))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join(ARGS_FILE), &self.args)?;
        write_json(&dir.join(METRICS_FILE), &self.metrics)?;
        for (split, t) in &self.tables {
            t.write_echl(&dir.join(logits_file(*split)))?;
        }
        let mut h = String::from("epoch,train_loss,val_auc\n");
        for r in &self.history {
            let auc = r.val_auc.map(|v| v.to_string()).unwrap_or_default();
            writeln!(h, "{},{},{}", r.epoch, r.train_loss, auc).unwrap();
        }
        fs::write(dir.join(HISTORY_FILE), h)?;
        Ok(())
    }

    /// Loads a run directory; `history.csv` is optional.
    pub fn load(dir: &Path) -> Result<Self> {
        let args = read_json(&dir.join(ARGS_FILE))?;
        let metrics = read_json(&dir.join(METRICS_FILE))?;
        let mut tables = BTreeMap::new();
        for split in Split::ALL {
            let p = dir.join(logits_file(split));
            if p.exists() {
                tables.insert(split, LogitsTable::read_echl(&p)?);
            }
        }
        let mut history = Vec::new();
        let hp = dir.join(HISTORY_FILE);
        if hp.exists() {
            for (i, line) in fs::read_to_string(&hp)?.lines().enumerate().skip(1) {
                let f: Vec<&str> = line.split(',').collect();
                let bad = || Error::Parse {
                    path: hp.clone(),
                    line: i + 1,
                    msg: format!("bad history row {line:?}"),
                };
                if f.len() != 3 {
                    return Err(bad());
                }
                history.push(EpochRecord {
                    epoch: f[0].parse().map_err(|_| bad())?,
                    train_loss: f[1].parse().map_err(|_| bad())?,
                    val_auc: if f[2].is_empty() { None } else { Some(f[2].parse().map_err(|_| bad())?) },
                });
            }
        }
        Ok(RunArtifact {
            args,
            metrics,
            tables,
            history,
        })
    }
}

/// Paths of everything a run directory may contain.
pub fn run_files(dir: &Path) -> Vec<PathBuf> {
    let mut v = vec![dir.join(ARGS_FILE), dir.join(METRICS_FILE)];
    v.extend(Split::ALL.iter().map(|s| dir.join(logits_file(*s))));
    v
}

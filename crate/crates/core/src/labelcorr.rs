//! Label co-occurrence from training labels and logit-space smoothing.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graphstore::Split;

/// Entries above this count as co-occurring in [`correlation_stats`].
pub const SPARSITY_CUTOFF: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CoocVariant {
    #[value(name = "conditional")]
    Conditional,
    #[value(name = "conditional_centered")]
    ConditionalCentered,
}

/// Row-major `K × K` label matrix built from training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CoocMatrix {
    k: usize,
    p: Vec<f64>,
    variant: CoocVariant,
    train_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    variant: CoocVariant,
    cutoff: f64,
    train_fingerprint: String,
    k: usize,
}

impl CoocMatrix {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn variant(&self) -> CoocVariant {
        self.variant
    }

    pub fn train_fingerprint(&self) -> &str {
        &self.train_fingerprint
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.p[j * self.k + k]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.p[j * self.k..(j + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    /// Builds a matrix directly from entries, e.g. for hand-made fixtures.
    pub fn from_entries(k: usize, p: Vec<f64>, variant: CoocVariant) -> Result<Self> {
        if p.len() != k * k {
            return Err(Error::shape("cooc", format!("{} entries for K = {k}", p.len())));
        }
        Ok(CoocMatrix {
            k,
            p,
            variant,
            train_fingerprint: String::new(),
        })
    }

    /// Writes `K` CSV rows and a JSON sidecar next to them.
    pub fn save(&self, csv_path: &Path, sidecar_path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for j in 0..self.k {
            let line: Vec<String> = self.row(j).iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        fs::write(csv_path, out)?;
        let side = Sidecar {
            variant: self.variant,
            cutoff: SPARSITY_CUTOFF,
            train_fingerprint: self.train_fingerprint.clone(),
            k: self.k,
        };
        fs::write(sidecar_path, serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(csv_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path)?)?;
        let text = fs::read_to_string(csv_path)?;
        let mut p = Vec::with_capacity(side.k * side.k);
        for (i, line) in text.lines().enumerate() {
            for v in line.split(',') {
                p.push(v.trim().parse::<f64>().map_err(|e| Error::Parse {
                    path: csv_path.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })?);
            }
        }
        let mut m = CoocMatrix::from_entries(side.k, p, side.variant)?;
        m.train_fingerprint = side.train_fingerprint;
        Ok(m)
    }
}

/// SHA-256 over `K` and the label bytes of the training rows.
pub fn fingerprint(labels: &[u8], k: usize) -> String {
    let mut h = Sha256::new();
    h.update((k as u64).to_le_bytes());
    h.update(labels);
    hex::encode(h.finalize())
}

/// Builds `P` from `labels` (`N × K`, row-major) whose rows all belong to
/// the training split; any other split is rejected.
///
/// `C_jk` counts rows with both labels; `P_jk = C_jk / C_jj`, then each
/// row is normalized to sum to 1 (rows with `C_jj = 0` stay zero). The
/// centered variant subtracts each row's mean afterwards.
pub fn build_cooc(labels: &[u8], splits: &[Split], k: usize, variant: CoocVariant) -> Result<CoocMatrix> {
    if k == 0 || labels.len() != splits.len() * k {
        return Err(Error::shape("build_cooc", format!("{} labels for {} rows, K = {k}", labels.len(), splits.len())));
    }
    if let Some(pos) = splits.iter().position(|&s| s != Split::Train) {
        return Err(Error::Leakage(format!("row {pos} belongs to the {} split", splits[pos])));
    }
    if splits.is_empty() {
        return Err(Error::Config("co-occurrence needs at least one training row".into()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Config("labels must be 0 or 1".into()));
    }
    let mut c = vec![0u64; k * k];
    let mut active = Vec::with_capacity(k);
    for row in labels.chunks(k) {
        active.clear();
        active.extend(row.iter().enumerate().filter(|(_, &y)| y == 1).map(|(i, _)| i));
        for &a in &active {
            for &b in &active {
                c[a * k + b] += 1;
            }
        }
    }
    let mut p = vec![0.0; k * k];
    for j in 0..k {
        let diag = c[j * k + j];
        if diag == 0 {
            continue;
        }
        let row = &mut p[j * k..(j + 1) * k];
        for (o, &cnt) in row.iter_mut().zip(&c[j * k..(j + 1) * k]) {
            *o = cnt as f64 / diag as f64;
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
        if variant == CoocVariant::ConditionalCentered {
            let mean = row.iter().sum::<f64>() / k as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
    }
    Ok(CoocMatrix {
        k,
        p,
        variant,
        train_fingerprint: fingerprint(labels, k),
    })
}

/// `z' = z + λ·z·P`, i.e. `z'_{nj} = z_{nj} + λ Σ_i z_{ni} P_{ij}`:
/// label `j` receives evidence from every label `i` in proportion to how
/// often `j` accompanies `i`. `λ = 0` returns `z` unchanged.
pub fn smooth_logits(z: &[f64], p: &CoocMatrix, lambda: f64) -> Result<Vec<f64>> {
    let k = p.k;
    if z.len() % k != 0 {
        return Err(Error::shape("smooth_logits", format!("{} logits for K = {k}", z.len())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("smoothing lambda must be nonnegative, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(z.to_vec());
    }
    let mut out = Vec::with_capacity(z.len());
    let mut mixed = vec![0.0; k];
    for row in z.chunks(k) {
        mixed.iter_mut().for_each(|m| *m = 0.0);
        for (i, &zi) in row.iter().enumerate() {
            if zi == 0.0 {
                continue;
            }
            for (m, &pij) in mixed.iter_mut().zip(p.row(i)) {
                *m += zi * pij;
            }
        }
        out.extend(row.iter().zip(&mixed).map(|(zj, m)| zj + lambda * m));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrStats {
    pub num_labels: usize,
    /// Fraction of off-diagonal entries above `cutoff`.
    pub sparsity: f64,
    pub cutoff: f64,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    /// Mean row sum.
    pub mean_outgoing: f64,
    /// Mean column sum.
    pub mean_incoming: f64,
}

pub fn correlation_stats(p: &CoocMatrix) -> CorrStats {
    let k = p.k;
    let off: Vec<f64> = (0..k)
        .flat_map(|j| (0..k).filter(move |&i| i != j).map(move |i| (j, i)))
        .map(|(j, i)| p.get(j, i))
        .collect();
    let n_off = off.len().max(1) as f64;
    let (mean, max, min) = if off.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        (
            off.iter().sum::<f64>() / n_off,
            off.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            off.iter().copied().fold(f64::INFINITY, f64::min),
        )
    };
    let sparsity = off.iter().filter(|&&v| v > SPARSITY_CUTOFF).count() as f64 / n_off;
    let row_sums: f64 = (0..k).map(|j| p.row(j).iter().sum::<f64>()).sum();
    let col_sums: f64 = (0..k).map(|i| (0..k).map(|j| p.get(j, i)).sum::<f64>()).sum();
    CorrStats {
        num_labels: k,
        sparsity,
        cutoff: SPARSITY_CUTOFF,
        mean,
        max,
        min,
        mean_outgoing: row_sums / k.max(1) as f64,
        mean_incoming: col_sums / k.max(1) as f64,
    }
}

//! Multi-label metrics over `N × K` score tables.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_ad::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Logits,
    Probabilities,
}

/// Row-major scores and binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    n: usize,
    k: usize,
    scores: Vec<f64>,
    labels: Vec<u8>,
    kind: ScoreKind,
}

impl EvalTable {
    pub fn new(n: usize, k: usize, scores: Vec<f64>, labels: Vec<u8>, kind: ScoreKind) -> Result<Self> {
        if scores.len() != n * k || labels.len() != n * k {
            return Err(Error::shape(
                "eval_table",
                format!("{} scores / {} labels for {n}x{k}", scores.len(), labels.len()),
            ));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::Config("labels must be 0 or 1".into()));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::NonFinite("eval_table"));
        }
        if kind == ScoreKind::Probabilities && scores.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        Ok(EvalTable {
            n,
            k,
            scores,
            labels,
            kind,
        })
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn labels_per_row(&self) -> usize {
        self.k
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn score(&self, row: usize, label: usize) -> f64 {
        self.scores[row * self.k + label]
    }

    pub fn label(&self, row: usize, label: usize) -> u8 {
        self.labels[row * self.k + label]
    }

    pub fn column(&self, label: usize) -> (Vec<f64>, Vec<u8>) {
        let s = (0..self.n).map(|r| self.score(r, label)).collect();
        let y = (0..self.n).map(|r| self.label(r, label)).collect();
        (s, y)
    }

    /// Sigmoid of logits; probabilities pass through unchanged.
    pub fn to_probabilities(&self) -> EvalTable {
        match self.kind {
            ScoreKind::Probabilities => self.clone(),
            ScoreKind::Logits => EvalTable {
                scores: self.scores.iter().map(|&z| sigmoid(z)).collect(),
                kind: ScoreKind::Probabilities,
                ..self.clone()
            },
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> EvalTable {
        let mut scores = Vec::with_capacity(rows.len() * self.k);
        let mut labels = Vec::with_capacity(rows.len() * self.k);
        for &r in rows {
            scores.extend_from_slice(&self.scores[r * self.k..(r + 1) * self.k]);
            labels.extend_from_slice(&self.labels[r * self.k..(r + 1) * self.k]);
        }
        EvalTable {
            n: rows.len(),
            k: self.k,
            scores,
            labels,
            kind: self.kind,
        }
    }
}

/// Exact ROC-AUC with half credit for ties, from rank sums.
/// `None` if the column lacks positives or negatives.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives: a tie group occupying 1-based ranks
    // start..=end gives each member average rank (start + end) / 2.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let positives = order[i..j].iter().filter(|&&o| labels[o] == 1).count() as u64;
        twice_rank_sum += positives * ((i as u64 + 1) + j as u64);
        i = j;
    }
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Some(twice_u as f64 / (2 * pos * neg) as f64)
}

pub fn roc_auc_per_label(t: &EvalTable) -> Vec<Option<f64>> {
    (0..t.k)
        .into_par_iter()
        .map(|k| {
            let (s, y) = t.column(k);
            roc_auc(&s, &y)
        })
        .collect()
}

/// Mean over defined entries; `None` if every label is degenerate.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

pub fn mean_auc(t: &EvalTable) -> Option<f64> {
    mean_defined(&roc_auc_per_label(t))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Thresholds {
    Fixed(f64),
    PerLabel(Vec<f64>),
}

impl Thresholds {
    pub fn get(&self, label: usize) -> f64 {
        match self {
            Thresholds::Fixed(t) => *t,
            Thresholds::PerLabel(ts) => ts[label],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn add(&mut self, pred: bool, label: u8) {
        match (pred, label == 1) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    /// `F_β = (1+β²)TP / ((1+β²)TP + β²FN + FP)`, with 1 when nothing is
    /// positive in either predictions or labels.
    pub fn f_beta(&self, beta: f64) -> f64 {
        let b2 = beta * beta;
        let num = (1.0 + b2) * self.tp as f64;
        let den = num + b2 * self.fn_ as f64 + self.fp as f64;
        if den == 0.0 {
            1.0
        } else {
            num / den
        }
    }

    pub fn f1(&self) -> f64 {
        self.f_beta(1.0)
    }
}

/// Pooled TP/FP/FN for predictions `score ≥ τ_k`.
pub fn micro_counts(t: &EvalTable, thresholds: &Thresholds) -> Result<Counts> {
    if let Thresholds::PerLabel(ts) = thresholds {
        if ts.len() != t.k {
            return Err(Error::shape("micro_f1", format!("{} thresholds for K = {}", ts.len(), t.k)));
        }
    }
    if t.kind == ScoreKind::Probabilities {
        let bad = match thresholds {
            Thresholds::Fixed(v) => !(0.0..=1.0).contains(v),
            Thresholds::PerLabel(ts) => ts.iter().any(|v| !(0.0..=1.0).contains(v)),
        };
        if bad {
            return Err(Error::Config("probability thresholds must lie in [0, 1]".into()));
        }
    }
    let mut c = Counts::default();
    for r in 0..t.n {
        for k in 0..t.k {
            c.add(t.score(r, k) >= thresholds.get(k), t.label(r, k));
        }
    }
    Ok(c)
}

pub fn micro_f1(t: &EvalTable, thresholds: &Thresholds) -> Result<f64> {
    Ok(micro_counts(t, thresholds)?.f1())
}

/// Expected calibration error over all pooled `(p, y)` pairs with
/// `bins` equal-width bins on `[0, 1]`.
pub fn ece(t: &EvalTable, bins: usize) -> Result<f64> {
    if bins < 1 {
        return Err(Error::Config("ece needs at least one bin".into()));
    }
    if t.kind != ScoreKind::Probabilities {
        return Err(Error::Config("ece expects probabilities".into()));
    }
    let mut count = vec![0u64; bins];
    let mut conf = vec![0.0; bins];
    let mut pos = vec![0.0; bins];
    for (&p, &y) in t.scores.iter().zip(&t.labels) {
        let b = ((p * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += p;
        pos[b] += y as f64;
    }
    let total = t.scores.len() as f64;
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let n = count[b] as f64;
            (n / total) * (pos[b] / n - conf[b] / n).abs()
        })
        .sum())
}

/// One reliability-diagram bin.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    pub mean_prob: f64,
    pub pos_rate: f64,
}

pub fn reliability(t: &EvalTable, bins: usize) -> Vec<ReliabilityBin> {
    let bins = bins.max(1);
    let mut out: Vec<ReliabilityBin> = (0..bins)
        .map(|b| ReliabilityBin {
            lo: b as f64 / bins as f64,
            hi: (b + 1) as f64 / bins as f64,
            count: 0,
            mean_prob: 0.0,
            pos_rate: 0.0,
        })
        .collect();
    for (&p, &y) in t.scores.iter().zip(&t.labels) {
        let b = ((p * bins as f64) as usize).min(bins - 1);
        out[b].count += 1;
        out[b].mean_prob += p;
        out[b].pos_rate += y as f64;
    }
    for b in &mut out {
        if b.count > 0 {
            b.mean_prob /= b.count as f64;
            b.pos_rate /= b.count as f64;
        }
    }
    out
}

pub fn brier(t: &EvalTable) -> Result<f64> {
    if t.kind != ScoreKind::Probabilities {
        return Err(Error::Config("brier expects probabilities".into()));
    }
    if t.scores.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = t
        .scores
        .iter()
        .zip(&t.labels)
        .map(|(&p, &y)| (p - y as f64).powi(2))
        .sum();
    Ok(sum / t.scores.len() as f64)
}

/// Mean binary NLL of probabilities, clamped away from 0 and 1.
pub fn nll(t: &EvalTable) -> f64 {
    let p = t.to_probabilities();
    let eps = 1e-15;
    let s: f64 = p
        .scores
        .iter()
        .zip(&p.labels)
        .map(|(&q, &y)| {
            let q = q.clamp(eps, 1.0 - eps);
            if y == 1 {
                -q.ln()
            } else {
                -(1.0 - q).ln()
            }
        })
        .sum();
    s / p.scores.len().max(1) as f64
}

/// Mean AUC per species id, for rows of `t` labelled by `species`.
pub fn per_species_auc(t: &EvalTable, species: &[u64]) -> BTreeMap<u64, Option<f64>> {
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (r, &s) in species.iter().enumerate() {
        groups.entry(s).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(s, rows)| (s, mean_auc(&t.select_rows(&rows))))
        .collect()
}

/// Summary used in `metrics.json` for one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub auc: Option<f64>,
    pub f1_05: f64,
    pub ece: f64,
    pub brier: f64,
    pub per_species_auc: BTreeMap<u64, Option<f64>>,
}

/// AUC, micro-F1@0.5, ECE and Brier for a logits table.
pub fn evaluate_logits(t: &EvalTable, species: &[u64], bins: usize) -> Result<SplitMetrics> {
    let probs = t.to_probabilities();
    Ok(SplitMetrics {
        auc: mean_auc(t),
        f1_05: micro_f1(&probs, &Thresholds::Fixed(0.5))?,
        ece: ece(&probs, bins)?,
        brier: brier(&probs)?,
        per_species_auc: per_species_auc(t, species),
    })
}

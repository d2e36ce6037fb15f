//! Post-hoc temperature scaling and per-label decision thresholds.
//!
//! Both are fitted on validation logits and then applied unchanged to any
//! other split.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Counts, EvalTable, ScoreKind};
use crate::tensor_ad::{sigmoid, softplus};

const LOG_T_RANGE: (f64, f64) = (-4.0, 4.0);
/// Bracket width on `log T`; ≤ 1e-6 absolute on `T` across the range.
const LOG_T_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TempMode {
    Global,
    #[value(name = "per-label")]
    PerLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub mode: TempMode,
    pub t_global: f64,
    pub temps: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub beta: f64,
    pub l2: f64,
    pub bins: usize,
}

impl CalibrationModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Minimizes a unimodal `f` on `[lo, hi]` by golden-section search.
pub fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Mean binary NLL of `sigmoid(z / t)` against `y`.
fn nll_at(z: &[f64], y: &[u8], t: f64) -> f64 {
    if z.is_empty() {
        return 0.0;
    }
    let s: f64 = z
        .iter()
        .zip(y)
        .map(|(&zv, &yv)| {
            let u = zv / t;
            softplus(u) - yv as f64 * u
        })
        .sum();
    s / z.len() as f64
}

/// Mean validation NLL of the whole table after dividing label `k`'s
/// logits by `temps[k]`.
pub fn table_nll(t: &EvalTable, temps: &[f64]) -> f64 {
    let k = t.labels_per_row();
    let mut s = 0.0;
    for (i, (&z, &y)) in t.scores().iter().zip(t.labels()).enumerate() {
        let u = z / temps[i % k];
        s += softplus(u) - y as f64 * u;
    }
    s / t.scores().len().max(1) as f64
}

fn require_logits(t: &EvalTable) -> Result<()> {
    if t.kind() != ScoreKind::Logits {
        return Err(Error::Config("temperature scaling expects logits".into()));
    }
    Ok(())
}

/// Fits the single temperature minimizing pooled validation NLL.
pub fn fit_global_temperature(val: &EvalTable) -> Result<f64> {
    require_logits(val)?;
    let (z, y) = (val.scores(), val.labels());
    let t = golden_section(|lt| nll_at(z, y, lt.exp()), LOG_T_RANGE.0, LOG_T_RANGE.1, LOG_T_TOL);
    Ok(t.exp())
}

/// Fits temperatures. In per-label mode each `T_k` minimizes
/// `NLL_k(z_k / T_k) + l2·(T_k − T_global)²`, with `NLL_k` the mean over
/// validation rows; constant label columns keep `T_global`.
/// Thresholds are initialised to 0.5.
pub fn fit_temperature(val: &EvalTable, mode: TempMode, l2: f64) -> Result<CalibrationModel> {
    if l2.is_nan() || l2 < 0.0 {
        return Err(Error::Config(format!("l2 must be nonnegative, got {l2}")));
    }
    let t_global = fit_global_temperature(val)?;
    let k = val.labels_per_row();
    let temps = match mode {
        TempMode::Global => vec![t_global; k],
        TempMode::PerLabel => (0..k)
            .map(|label| {
                let (z, y) = val.column(label);
                let pos = y.iter().filter(|&&v| v == 1).count();
                if l2.is_infinite() || pos == 0 || pos == y.len() {
                    return t_global;
                }
                let obj = |lt: f64| {
                    let t = lt.exp();
                    nll_at(&z, &y, t) + l2 * (t - t_global).powi(2)
                };
                golden_section(obj, LOG_T_RANGE.0, LOG_T_RANGE.1, LOG_T_TOL).exp()
            })
            .collect(),
    };
    Ok(CalibrationModel {
        mode,
        t_global,
        temps,
        thresholds: vec![0.5; k],
        beta: 1.0,
        l2,
        bins: 15,
    })
}

/// `p_{nk} = sigmoid(z_{nk} / T_k)`.
pub fn apply_temperature(z: &EvalTable, temps: &[f64]) -> Result<EvalTable> {
    require_logits(z)?;
    let k = z.labels_per_row();
    if temps.len() != k {
        return Err(Error::shape("apply_temperature", format!("{} temps for K = {k}", temps.len())));
    }
    let probs = z
        .scores()
        .iter()
        .enumerate()
        .map(|(i, &v)| sigmoid(v / temps[i % k]))
        .collect();
    EvalTable::new(z.rows(), k, probs, z.labels().to_vec(), ScoreKind::Probabilities)
}

/// Candidate thresholds for one label: its distinct probabilities, ascending.
pub fn threshold_candidates(probs: &[f64]) -> Vec<f64> {
    let mut c: Vec<f64> = probs.to_vec();
    c.sort_by(f64::total_cmp);
    c.dedup();
    c
}

/// Threshold maximizing `TPR − FPR` over the candidates (lowest on ties);
/// `None` unless both classes are present.
pub fn youden_threshold(probs: &[f64], labels: &[u8]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut best = (f64::NEG_INFINITY, 0.5);
    for tau in threshold_candidates(probs) {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (&p, &y) in probs.iter().zip(labels) {
            if p >= tau {
                if y == 1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let j = tp as f64 / pos as f64 - fp as f64 / neg as f64;
        if j > best.0 {
            best = (j, tau);
        }
    }
    Some(best.1)
}

/// Best F_β threshold for one label and the F_β it attains. Distinct
/// probabilities are scanned ascending with ties kept at the lowest; the 0.5
/// sentinel replaces the winner only if it is strictly better.
pub fn best_threshold(probs: &[f64], labels: &[u8], beta: f64) -> (f64, f64) {
    let pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    if pos == 0 {
        let tau = youden_threshold(probs, labels).unwrap_or(0.5);
        let mut c = Counts::default();
        for (&p, &y) in probs.iter().zip(labels) {
            c.add(p >= tau, y);
        }
        return (tau, c.f_beta(beta));
    }
    // Sort descending so a prefix is exactly the set predicted positive.
    let mut order: Vec<(f64, u8)> = probs.iter().copied().zip(labels.iter().copied()).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp_prefix = Vec::with_capacity(order.len() + 1);
    tp_prefix.push(0u64);
    for &(_, y) in &order {
        tp_prefix.push(tp_prefix.last().unwrap() + y as u64);
    }
    let score = |tau: f64| {
        let predicted = order.partition_point(|&(p, _)| p >= tau);
        let tp = tp_prefix[predicted];
        Counts {
            tp,
            fp: predicted as u64 - tp,
            fn_: pos - tp,
        }
        .f_beta(beta)
    };
    let mut best = (0.5, f64::NEG_INFINITY);
    for tau in threshold_candidates(probs) {
        let f = score(tau);
        if f > best.1 {
            best = (tau, f);
        }
    }
    let sentinel = score(0.5);
    if sentinel > best.1 {
        best = (0.5, sentinel);
    }
    best
}

/// Per-label thresholds maximizing F_β on validation probabilities.
/// Labels without validation positives fall back to Youden's J when both
/// classes exist and to 0.5 otherwise.
pub fn fit_thresholds(val_probs: &EvalTable, beta: f64) -> Result<Vec<f64>> {
    if val_probs.kind() != ScoreKind::Probabilities {
        return Err(Error::Config("thresholds are fitted on probabilities".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    Ok((0..val_probs.labels_per_row())
        .map(|k| {
            let (p, y) = val_probs.column(k);
            best_threshold(&p, &y, beta).0
        })
        .collect())
}

/// `ŷ_{nk} = [p_{nk} ≥ τ_k]`.
pub fn decide(probs: &EvalTable, thresholds: &[f64]) -> Result<Vec<u8>> {
    let k = probs.labels_per_row();
    if thresholds.len() != k {
        return Err(Error::shape("decide", format!("{} thresholds for K = {k}", thresholds.len())));
    }
    Ok(probs
        .scores()
        .iter()
        .enumerate()
        .map(|(i, &p)| (p >= thresholds[i % k]) as u8)
        .collect())
}

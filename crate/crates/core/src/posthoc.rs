//! Post-hoc decision stack: smooth raw logits, fit temperatures on the
//! smoothed validation logits, fit per-label thresholds, decide.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::calibrate::{apply_temperature, fit_temperature, fit_thresholds, table_nll, CalibrationModel, TempMode};
use crate::error::{Error, Result};
use crate::graphstore::Split;
use crate::labelcorr::{build_cooc, smooth_logits, CoocMatrix, CoocVariant};
use crate::metrics::{brier, ece, mean_auc, micro_f1, EvalTable, ScoreKind, Thresholds};

pub const LAMBDA_GRID: [f64; 4] = [0.0, 0.05, 0.1, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaChoice {
    Fixed(f64),
    /// Best validation micro-F1 over [`LAMBDA_GRID`]; ties go to the smaller λ.
    Tune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosthocConfig {
    pub mode: TempMode,
    pub l2: f64,
    pub beta: f64,
    pub bins: usize,
    /// `None` disables smoothing entirely.
    pub smoothing: Option<LambdaChoice>,
    pub variant: CoocVariant,
}

impl Default for PosthocConfig {
    fn default() -> Self {
        PosthocConfig {
            mode: TempMode::PerLabel,
            l2: 1.0,
            beta: 1.0,
            bins: 15,
            smoothing: None,
            variant: CoocVariant::ConditionalCentered,
        }
    }
}

pub struct PosthocOutcome {
    pub calibration: CalibrationModel,
    pub lambda: f64,
    pub cooc: Option<CoocMatrix>,
    pub metrics: Map<String, Value>,
    /// Binary decisions on the test split, row-major.
    pub test_decisions: Vec<u8>,
}

fn smoothed(t: &EvalTable, p: Option<&CoocMatrix>, lambda: f64) -> Result<EvalTable> {
    match p {
        Some(p) if lambda != 0.0 => EvalTable::new(
            t.rows(),
            t.labels_per_row(),
            smooth_logits(t.scores(), p, lambda)?,
            t.labels().to_vec(),
            ScoreKind::Logits,
        ),
        _ => Ok(t.clone()),
    }
}

fn fit(val: &EvalTable, cfg: &PosthocConfig) -> Result<(CalibrationModel, f64)> {
    let mut cal = fit_temperature(val, cfg.mode, cfg.l2)?;
    let probs = apply_temperature(val, &cal.temps)?;
    cal.thresholds = fit_thresholds(&probs, cfg.beta)?;
    cal.beta = cfg.beta;
    cal.bins = cfg.bins;
    let f = micro_f1(&probs, &Thresholds::PerLabel(cal.thresholds.clone()))?;
    Ok((cal, f))
}

fn opt(v: Option<f64>) -> Value {
    v.map_or(Value::Null, Value::from)
}

fn split_metrics(
    m: &mut Map<String, Value>,
    prefix: &str,
    raw: &EvalTable,
    z: &EvalTable,
    cal: &CalibrationModel,
    bins: usize,
) -> Result<()> {
    let raw_p = raw.to_probabilities();
    let p = apply_temperature(z, &cal.temps)?;
    let auc_z = mean_auc(z);
    let auc_p = mean_auc(&p);
    m.insert(format!("{prefix}_auc_raw"), opt(mean_auc(raw)));
    m.insert(format!("{prefix}_auc"), opt(auc_z));
    m.insert(format!("{prefix}_auc_calibrated"), opt(auc_p));
    m.insert(format!("{prefix}_f1_05_raw"), json!(micro_f1(&raw_p, &Thresholds::Fixed(0.5))?));
    m.insert(format!("{prefix}_f1_05"), json!(micro_f1(&p, &Thresholds::Fixed(0.5))?));
    m.insert(
        format!("{prefix}_f1_tuned"),
        json!(micro_f1(&p, &Thresholds::PerLabel(cal.thresholds.clone()))?),
    );
    m.insert(format!("{prefix}_ece_raw"), json!(ece(&raw_p, bins)?));
    m.insert(format!("{prefix}_ece"), json!(ece(&p, bins)?));
    m.insert(format!("{prefix}_brier_raw"), json!(brier(&raw_p)?));
    m.insert(format!("{prefix}_brier"), json!(brier(&p)?));
    m.insert(format!("{prefix}_nll_raw"), json!(table_nll(raw, &vec![1.0; raw.labels_per_row()])));
    m.insert(format!("{prefix}_nll"), json!(table_nll(z, &cal.temps)));
    Ok(())
}

/// Runs the full stack. `train_labels` must come from training rows only;
/// `train_splits` is checked by the co-occurrence leakage guard.
pub fn run_posthoc(
    train_labels: &[u8],
    train_splits: &[Split],
    val: &EvalTable,
    test: &EvalTable,
    cfg: &PosthocConfig,
) -> Result<PosthocOutcome> {
    for t in [val, test] {
        if t.kind() != ScoreKind::Logits {
            return Err(Error::Config("post-hoc stack expects raw logits".into()));
        }
    }
    let k = val.labels_per_row();
    if test.labels_per_row() != k {
        return Err(Error::shape("run_posthoc", "validation and test disagree on K"));
    }
    if !(cfg.beta > 0.0) || cfg.bins == 0 {
        return Err(Error::Config("beta must be positive and bins at least 1".into()));
    }
    let cooc = match cfg.smoothing {
        None => None,
        Some(choice) => {
            if let LambdaChoice::Fixed(l) = choice {
                if !(l >= 0.0 && l.is_finite()) {
                    return Err(Error::Config(format!("smoothing lambda must be finite and nonnegative, got {l}")));
                }
            }
            Some(build_cooc(train_labels, train_splits, k, cfg.variant)?)
        }
    };

    let lambda = match cfg.smoothing {
        None => 0.0,
        Some(LambdaChoice::Fixed(l)) => l,
        Some(LambdaChoice::Tune) => {
            let mut best = (f64::NEG_INFINITY, 0.0);
            for &l in &LAMBDA_GRID {
                let (_, f) = fit(&smoothed(val, cooc.as_ref(), l)?, cfg)?;
                if f > best.0 {
                    best = (f, l);
                }
            }
            best.1
        }
    };

    let val_z = smoothed(val, cooc.as_ref(), lambda)?;
    let test_z = smoothed(test, cooc.as_ref(), lambda)?;
    let (cal, _) = fit(&val_z, cfg)?;

    let mut metrics = Map::new();
    metrics.insert("mode".into(), serde_json::to_value(cfg.mode)?);
    metrics.insert("l2".into(), json!(cfg.l2));
    metrics.insert("beta".into(), json!(cfg.beta));
    metrics.insert("bins".into(), json!(cfg.bins));
    metrics.insert("smooth_lambda".into(), json!(lambda));
    metrics.insert("smoothing".into(), json!(cfg.smoothing.is_some()));
    metrics.insert("cooc_variant".into(), serde_json::to_value(cfg.variant)?);
    metrics.insert("t_global".into(), json!(cal.t_global));
    split_metrics(&mut metrics, "val", val, &val_z, &cal, cfg.bins)?;
    split_metrics(&mut metrics, "test", test, &test_z, &cal, cfg.bins)?;

    let test_p = apply_temperature(&test_z, &cal.temps)?;
    let test_decisions = crate::calibrate::decide(&test_p, &cal.thresholds)?;
    Ok(PosthocOutcome {
        calibration: cal,
        lambda,
        cooc,
        metrics,
        test_decisions,
    })
}

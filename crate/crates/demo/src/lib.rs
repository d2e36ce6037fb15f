//! Browser bindings for the post-hoc decision stack. Every export takes
//! plain numbers and returns a JSON string for the page to draw.

use echl_core::calibrate::{apply_temperature, best_threshold, fit_temperature, table_nll, threshold_candidates, TempMode};
use echl_core::graphstore::Split;
use echl_core::labelcorr::{build_cooc, CoocVariant};
use echl_core::metrics::{ece, mean_auc, micro_f1, reliability, Counts, EvalTable, ScoreKind, Thresholds};
use echl_core::posthoc::{run_posthoc, LambdaChoice, PosthocConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Labels per row; labels `0..3` and `3..6` form two correlated modules.
pub const K: usize = 6;
const MODULE: usize = 3;

/// Train labels plus validation and test logits from a deliberately
/// overconfident, noisy scorer.
struct Scenario {
    train_labels: Vec<u8>,
    val: EvalTable,
    test: EvalTable,
}

fn split_rows(rng: &mut ChaCha8Rng, n: usize, scale: f64, noise: f64) -> (Vec<f64>, Vec<u8>) {
    let mut z = Vec::with_capacity(n * K);
    let mut y = Vec::with_capacity(n * K);
    for _ in 0..n {
        let latent: Vec<f64> = (0..K / MODULE).map(|_| rng.gen_range(-2.5..2.5)).collect();
        for j in 0..K {
            let t = latent[j / MODULE] + rng.gen_range(-1.0..1.0);
            let q = 1.0 / (1.0 + (-t).exp());
            y.push((rng.gen::<f64>() < q) as u8);
            z.push(scale * (t + noise * rng.gen_range(-1.5..1.5)));
        }
    }
    (z, y)
}

impl Scenario {
    fn new(seed: u64, n: usize, scale: f64, noise: f64) -> Result<Self, String> {
        let n = n.clamp(20, 20_000);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, train_labels) = split_rows(&mut rng, n, scale, noise);
        let (vz, vy) = split_rows(&mut rng, n, scale, noise);
        let (tz, ty) = split_rows(&mut rng, n, scale, noise);
        Ok(Scenario {
            train_labels,
            val: EvalTable::new(n, K, vz, vy, ScoreKind::Logits).map_err(err)?,
            test: EvalTable::new(n, K, tz, ty, ScoreKind::Logits).map_err(err)?,
        })
    }
}

fn err(e: echl_core::Error) -> String {
    e.to_string()
}

fn export(v: Result<Value, String>) -> Result<String, JsValue> {
    v.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

fn bins_json(t: &EvalTable, bins: usize) -> Result<Value, String> {
    Ok(json!({
        "ece": ece(t, bins).map_err(err)?,
        "bins": reliability(t, bins),
    }))
}

/// Reliability before and after temperature scaling on the test split.
#[wasm_bindgen]
pub fn calibration_demo(seed: u32, n: u32, scale: f64, per_label: bool, bins: u32) -> Result<String, JsValue> {
    export(calibration(seed, n, scale, per_label, bins))
}

fn calibration(seed: u32, n: u32, scale: f64, per_label: bool, bins: u32) -> Result<Value, String> {
    let s = Scenario::new(seed as u64, n as usize, scale, 0.6)?;
    let bins = bins.clamp(1, 50) as usize;
    let mode = if per_label { TempMode::PerLabel } else { TempMode::Global };
    let cal = fit_temperature(&s.val, mode, 1.0).map_err(err)?;
    let before = s.test.to_probabilities();
    let after = apply_temperature(&s.test, &cal.temps).map_err(err)?;
    Ok(json!({
        "t_global": cal.t_global,
        "temps": cal.temps,
        "before": bins_json(&before, bins)?,
        "after": bins_json(&after, bins)?,
        "nll_before": table_nll(&s.test, &[1.0; K]),
        "nll_after": table_nll(&s.test, &cal.temps),
        "auc_before": mean_auc(&before),
        "auc_after": mean_auc(&after),
    }))
}

/// F_β of one label at every candidate threshold on calibrated validation
/// probabilities, with the fitted choice and the micro-F1 it buys on test.
#[wasm_bindgen]
pub fn threshold_demo(seed: u32, n: u32, scale: f64, label: u32, beta: f64) -> Result<String, JsValue> {
    export(threshold(seed, n, scale, label, beta))
}

fn threshold(seed: u32, n: u32, scale: f64, label: u32, beta: f64) -> Result<Value, String> {
    if !(beta > 0.0) {
        return Err("beta must be positive".into());
    }
    let s = Scenario::new(seed as u64, n as usize, scale, 0.6)?;
    let label = (label as usize).min(K - 1);
    let cfg = PosthocConfig {
        beta,
        ..PosthocConfig::default()
    };
    let out = run_posthoc(&s.train_labels, &vec![Split::Train; s.train_labels.len() / K], &s.val, &s.test, &cfg)
        .map_err(err)?;
    let val_p = apply_temperature(&s.val, &out.calibration.temps).map_err(err)?;
    let (p, y) = val_p.column(label);
    let curve: Vec<Value> = threshold_candidates(&p)
        .into_iter()
        .map(|tau| {
            let mut c = Counts::default();
            for (&q, &t) in p.iter().zip(&y) {
                c.add(q >= tau, t);
            }
            json!([tau, c.f_beta(beta)])
        })
        .collect();
    let (tau, f) = best_threshold(&p, &y, beta);
    let m = &out.metrics;
    Ok(json!({
        "label": label,
        "curve": curve,
        "tau": tau,
        "f_at_tau": f,
        "thresholds": out.calibration.thresholds,
        "val_f1_05": m["val_f1_05"],
        "val_f1_tuned": m["val_f1_tuned"],
        "test_f1_05": m["test_f1_05"],
        "test_f1_tuned": m["test_f1_tuned"],
    }))
}

/// Post-hoc metrics with co-occurrence smoothing at `lambda`, plus a sweep
/// of test micro-F1 and AUC over a λ range for context.
#[wasm_bindgen]
pub fn smoothing_demo(seed: u32, n: u32, noise: f64, lambda: f64, centered: bool) -> Result<String, JsValue> {
    export(smoothing(seed, n, noise, lambda, centered))
}

fn smoothing(seed: u32, n: u32, noise: f64, lambda: f64, centered: bool) -> Result<Value, String> {
    let s = Scenario::new(seed as u64, n as usize, 2.0, noise)?;
    let variant = if centered { CoocVariant::ConditionalCentered } else { CoocVariant::Conditional };
    let splits = vec![Split::Train; s.train_labels.len() / K];
    let run = |l: f64| {
        let cfg = PosthocConfig {
            smoothing: Some(LambdaChoice::Fixed(l)),
            variant,
            ..PosthocConfig::default()
        };
        run_posthoc(&s.train_labels, &splits, &s.val, &s.test, &cfg).map_err(err)
    };
    let at = run(lambda)?;
    let sweep: Vec<Value> = (0..=20)
        .map(|i| {
            let l = i as f64 * 0.05;
            run(l).map(|o| json!([l, o.metrics["test_f1_tuned"], o.metrics["test_auc"]]))
        })
        .collect::<Result<_, _>>()?;
    let p = build_cooc(&s.train_labels, &splits, K, variant).map_err(err)?;
    let m = &at.metrics;
    Ok(json!({
        "k": K,
        "cooc": p.as_slice(),
        "test_auc_raw": m["test_auc_raw"],
        "test_auc": m["test_auc"],
        "test_f1_tuned": m["test_f1_tuned"],
        "test_ece": m["test_ece"],
        "unsmoothed_f1_05": micro_f1(&s.test.to_probabilities(), &Thresholds::Fixed(0.5)).map_err(err)?,
        "sweep": sweep,
    }))
}

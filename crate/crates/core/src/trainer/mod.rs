//! Full-batch training with early stopping on validation mean-AUC.

pub mod artifact;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

pub use artifact::{EpochRecord, LogitsTable, RunArtifact};

use crate::error::{Error, Result};
use crate::graphstore::{build_node_features, GraphDataset, Split};
use crate::metrics::{evaluate_logits, mean_auc, EvalTable, SplitMetrics};
use crate::models::{GraphInputs, Model, ModelConfig};
use crate::tensor_ad::{AdamConfig, RunningStats, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub ece_bins: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            epochs: 120,
            patience: 12,
            seed: 1,
            eval_every: 1,
            ece_bins: 15,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if self.eval_every < 1 {
            return bad("eval_every must be at least 1");
        }
        if self.ece_bins < 1 {
            return bad("ece_bins must be at least 1");
        }
        Ok(())
    }
}

/// Trained model plus everything written to its run directory.
pub struct TrainOutcome {
    pub model: Model,
    pub artifact: RunArtifact,
}

fn args_doc(cfg: &ModelConfig, tcfg: &TrainConfig) -> Map<String, Value> {
    let mut args = Map::new();
    for v in [serde_json::to_value(cfg), serde_json::to_value(tcfg)] {
        if let Ok(Value::Object(m)) = v {
            args.extend(m);
        }
    }
    args
}

fn opt(v: Option<f64>) -> Value {
    v.map_or(Value::Null, Value::from)
}

/// The metrics of one split as computed from its stored logits.
pub fn evaluate_split(t: &LogitsTable, bins: usize) -> Result<SplitMetrics> {
    evaluate_logits(&t.to_eval_table(), &t.species_ids, bins)
}

/// Metrics derived from the stored logits tables only, so that reloading a
/// run directory reproduces them exactly.
pub fn table_metrics(tables: &BTreeMap<Split, LogitsTable>, bins: usize) -> Result<Map<String, Value>> {
    let mut m = Map::new();
    m.insert("ece_bins".into(), json!(bins));
    for (split, t) in tables {
        let s = evaluate_split(t, bins)?;
        let p = match split {
            Split::Train => "train",
            Split::Valid => "val",
            Split::Test => "test",
        };
        m.insert(format!("{p}_auc"), opt(s.auc));
        m.insert(format!("{p}_f1_05"), json!(s.f1_05));
        m.insert(format!("{p}_ece"), json!(s.ece));
        m.insert(format!("{p}_brier"), json!(s.brier));
        for (sp, auc) in &s.per_species_auc {
            m.insert(format!("species_auc.{split}.{sp}"), opt(*auc));
        }
        if *split == Split::Test {
            m.insert("ece".into(), json!(s.ece));
            m.insert("brier".into(), json!(s.brier));
        }
    }
    Ok(m)
}

fn split_table(g: &GraphDataset, rows: &[usize], logits: &Tensor) -> Result<LogitsTable> {
    let k = g.num_labels();
    let mut z = Vec::with_capacity(rows.len() * k);
    let mut y = Vec::with_capacity(rows.len() * k);
    for &r in rows {
        z.extend(logits.row(r).iter().map(|&v| v as f32));
        y.extend_from_slice(g.labels(r));
    }
    LogitsTable::new(
        k,
        rows.iter().map(|&r| r as u64).collect(),
        rows.iter().map(|&r| g.species_ids()[r]).collect(),
        z,
        y,
    )
}

fn val_auc(g: &GraphDataset, rows: &[usize], logits: &Tensor) -> Option<f64> {
    let k = g.num_labels();
    let mut s = Vec::with_capacity(rows.len() * k);
    let mut y = Vec::with_capacity(rows.len() * k);
    for &r in rows {
        s.extend_from_slice(logits.row(r));
        y.extend_from_slice(g.labels(r));
    }
    let t = EvalTable::new(rows.len(), k, s, y, crate::metrics::ScoreKind::Logits).ok()?;
    mean_auc(&t)
}

struct Snapshot {
    epoch: usize,
    auc: Option<f64>,
    values: Vec<Tensor>,
    running: Vec<RunningStats>,
}

fn better(new: Option<f64>, old: Option<f64>) -> bool {
    match (new, old) {
        (Some(a), Some(b)) => a > b,
        (Some(_), None) => true,
        _ => false,
    }
}

/// Trains on the training split, early-stops on validation mean-AUC
/// (strict improvement; ties keep the earlier epoch) and exports logits of
/// the best snapshot for every split.
pub fn train(g: &GraphDataset, cfg: &ModelConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    if cfg.k != g.num_labels() {
        return Err(Error::Config(format!("model has {} labels, dataset has {}", cfg.k, g.num_labels())));
    }
    let train_rows = g.split_rows(Split::Train);
    let val_rows = g.split_rows(Split::Valid);
    if train_rows.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val_rows.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let start = Instant::now();
    let feats = build_node_features(g, cfg.x_aggr);
    let inputs = GraphInputs::new(g, &feats, &train_rows);
    let targets = Arc::new(g.label_matrix());
    let mut model = Model::new(cfg, tcfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x5eed_d20f_0u64);
    let adam = AdamConfig {
        lr: tcfg.lr,
        ..AdamConfig::default()
    };

    let mut history = Vec::new();
    let mut best: Option<Snapshot> = None;
    let mut stale = 0;
    let mut epochs_run = 0;
    let mut evaluations = 0;
    for epoch in 1..=tcfg.epochs {
        let loss = match model.accumulate_loss_grad(&inputs, &targets, &mut rng) {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        model.params_mut().adam_step(&adam)?;
        epochs_run = epoch;
        let mut rec = EpochRecord {
            epoch,
            train_loss: loss,
            val_auc: None,
        };
        if epoch % tcfg.eval_every == 0 || epoch == tcfg.epochs {
            evaluations += 1;
            let logits = model.predict(&inputs)?;
            let auc = val_auc(g, &val_rows, &logits);
            rec.val_auc = auc;
            if best.is_none() || better(auc, best.as_ref().unwrap().auc) {
                best = Some(Snapshot {
                    epoch,
                    auc,
                    values: model.params().values(),
                    running: model.running_stats().to_vec(),
                });
                stale = 0;
            } else {
                stale += 1;
            }
            history.push(rec);
            if stale >= tcfg.patience {
                break;
            }
        } else {
            history.push(rec);
        }
    }

    let best = best.expect("at least one evaluation");
    model.params_mut().restore_values(&best.values)?;
    model.set_running_stats(best.running);
    let logits = model.predict(&inputs)?;
    let mut tables = BTreeMap::new();
    for split in Split::ALL {
        let rows = g.split_rows(split);
        tables.insert(split, split_table(g, &rows, &logits)?);
    }

    let mut metrics = table_metrics(&tables, tcfg.ece_bins)?;
    metrics.insert("best_epoch".into(), json!(best.epoch));
    metrics.insert("best_val_auc_f64".into(), opt(best.auc));
    metrics.insert("epochs_run".into(), json!(epochs_run));
    metrics.insert("evaluations".into(), json!(evaluations));
    metrics.insert("final_train_loss".into(), json!(history.last().map(|r: &EpochRecord| r.train_loss)));
    metrics.insert("params".into(), json!(model.num_params()));
    metrics.insert("wall_clock_s".into(), json!(start.elapsed().as_secs_f64()));

    Ok(TrainOutcome {
        model,
        artifact: RunArtifact {
            args: args_doc(cfg, tcfg),
            metrics,
            tables,
            history,
        },
    })
}

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::sync::Arc;

use echl_core::graphstore::{build_node_features, Aggr, EdgeRecord, GraphDataset, Split, EDGE_DIM};
use echl_core::metrics::{EvalTable, ScoreKind};
use echl_core::models::{EdgeScalarKind, GraphInputs, Mode, Model, ModelConfig, ModelKind, NormKind};
use echl_core::tensor_ad::{Tape, Tensor, Var};
use echl_core::Result;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(lo..hi))
}

/// `|a − n| / max(|a|, |n|, 1e-5)`: relative, with a floor so that
/// gradients indistinguishable from zero are compared absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Checks the tape gradients of `f` against central differences for every
/// element of every input. The scalar checked is `Σ out ⊙ R` with a fixed
/// random `R`, so all output entries contribute with distinct weights.
/// Returns the largest relative error.
pub fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let project = |tape: &mut Tape, out: Var| -> Result<Var> {
        let (r, c) = tape.shape(out);
        let mut g = rng(0xface);
        let w = tape.constant(random_tensor(&mut g, r, c, -1.0, 1.0));
        let p = tape.mul(out, w)?;
        tape.sum(p)
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward");
        let l = project(&mut tape, out).expect("projection");
        tape.value(l).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let loss = project(&mut tape, out).expect("projection");
    let grads = tape.backward(loss).expect("backward");

    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Small connected-ish graph with random features, one species per split.
pub fn tiny_graph(seed: u64, n: usize, k: usize, extra_edges: usize) -> GraphDataset {
    let mut g = rng(seed);
    let mut edges = Vec::new();
    let feat = |g: &mut ChaCha8Rng| {
        let mut f = [0.0; EDGE_DIM];
        f.iter_mut().for_each(|v| *v = g.gen_range(0.05..1.0));
        f
    };
    for i in 1..n {
        let j = g.gen_range(0..i);
        let f = feat(&mut g);
        edges.push(EdgeRecord { src: i, dst: j, feat: f });
        edges.push(EdgeRecord { src: j, dst: i, feat: f });
    }
    for _ in 0..extra_edges {
        let (a, b) = (g.gen_range(0..n), g.gen_range(0..n));
        if a != b {
            edges.push(EdgeRecord { src: a, dst: b, feat: feat(&mut g) });
        }
    }
    let labels: Vec<u8> = (0..n * k).map(|_| g.gen_range(0..2)).collect();
    let species: Vec<u64> = (0..n).map(|i| (i % 3) as u64 + 1).collect();
    let split: Vec<Split> = (0..n)
        .map(|i| match i % 3 {
            0 => Split::Train,
            1 => Split::Valid,
            _ => Split::Test,
        })
        .collect();
    GraphDataset::from_parts(k, edges, labels, species, split).unwrap()
}

pub fn random_logit_table(rng: &mut ChaCha8Rng, n: usize, k: usize, scale: f64) -> EvalTable {
    let z: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-scale..scale)).collect();
    let y: Vec<u8> = (0..n * k).map(|_| rng.gen_range(0..2)).collect();
    EvalTable::new(n, k, z, y, ScoreKind::Logits).unwrap()
}

/// Pairwise `P(s⁺ > s⁻) + ½ P(tie)` with exact rational arithmetic.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 0).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut twice: u64 = 0;
    for p in &pos {
        for q in &neg {
            twice += if p > q { 2 } else if p == q { 1 } else { 0 };
        }
    }
    Some(twice as f64 / (2 * pos.len() * neg.len()) as f64)
}

/// F_β from raw counts, 1 when nothing was predicted and nothing was positive.
pub fn f_beta_counts(tp: u64, fp: u64, fn_: u64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = (1.0 + b2) * tp as f64 + b2 * fn_ as f64 + fp as f64;
    if den == 0.0 {
        1.0
    } else {
        (1.0 + b2) * tp as f64 / den
    }
}

/// ECE by explicit interval membership: bin `b` is `[b/B, (b+1)/B)`, the last
/// bin closed on the right.
pub fn brute_ece(p: &[f64], y: &[u8], bins: usize) -> f64 {
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let members: Vec<usize> = (0..p.len())
            .filter(|&i| p[i] >= lo && (p[i] < hi || (b == bins - 1 && p[i] <= 1.0)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let acc = members.iter().map(|&i| y[i] as f64).sum::<f64>() / n;
        let conf = members.iter().map(|&i| p[i]).sum::<f64>() / n;
        total += n / p.len() as f64 * (acc - conf).abs();
    }
    total
}

pub fn brute_brier(p: &[f64], y: &[u8]) -> f64 {
    p.iter().zip(y).map(|(&q, &t)| (q - t as f64) * (q - t as f64)).sum::<f64>() / p.len() as f64
}

/// Micro F_β with per-label thresholds on a row-major `n × k` table.
pub fn brute_micro_f(p: &[f64], y: &[u8], k: usize, tau: &[f64], beta: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for i in 0..p.len() {
        let pred = p[i] >= tau[i % k];
        match (pred, y[i]) {
            (true, 1) => tp += 1,
            (true, _) => fp += 1,
            (false, 1) => fn_ += 1,
            _ => {}
        }
    }
    f_beta_counts(tp, fp, fn_, beta)
}

pub fn f_at(p: &[f64], y: &[u8], tau: f64, beta: f64) -> f64 {
    brute_micro_f(p, y, 1, &[tau], beta)
}

/// Every predicted-positive set reachable by some threshold, represented by
/// one threshold each: every distinct value, midpoints, and the extremes.
pub fn all_threshold_probes(p: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = p.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    let mut out = vec![0.0, 0.5, 1.0 + 1e-9, f64::INFINITY];
    for w in v.windows(2) {
        out.push(0.5 * (w[0] + w[1]));
    }
    out.extend(v);
    out
}

/// `z + λ z P` with explicit index loops.
pub fn naive_smooth(z: &[f64], p: &[f64], k: usize, lambda: f64) -> Vec<f64> {
    let n = z.len() / k;
    let mut out = z.to_vec();
    for r in 0..n {
        for j in 0..k {
            let mut acc = 0.0;
            for i in 0..k {
                acc += z[r * k + i] * p[i * k + j];
            }
            out[r * k + j] += lambda * acc;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn model_cfg(kind: ModelKind, norm: NormKind, edge: EdgeScalarKind, k: usize) -> ModelConfig {
    ModelConfig {
        kind,
        norm,
        layers: 2,
        hidden: 3,
        dropout: 0.2,
        edge_scalar: edge,
        x_aggr: Aggr::Mean,
        k,
        ..ModelConfig::default()
    }
}

/// Full-model check: analytic gradients from `accumulate_loss_grad` against
/// central differences of the same training-mode loss, dropout mask fixed.
pub fn check_model(cfg: &ModelConfig, seed: u64) -> f64 {
    let g = tiny_graph(seed, 9, cfg.k, 6);
    let feats = build_node_features(&g, cfg.x_aggr);
    let train = g.split_rows(Split::Train);
    let inputs = GraphInputs::new(&g, &feats, &train);
    let targets = Arc::new(g.label_matrix());

    let mut model = Model::new(cfg, seed).unwrap();
    assert!(model.num_params() <= 200, "{} params", model.num_params());
    let mut r = rng(seed ^ 0xabc);
    let ids: Vec<_> = model.params().ids().collect();
    for &id in &ids {
        let (rows, cols) = model.params().value(id).shape();
        let v = Tensor::from_fn(rows, cols, |_, _| r.gen_range(-0.8..0.8));
        model.params_mut().set_value(id, v).unwrap();
    }

    let loss_at = |m: &Model| -> f64 {
        let mut drop = ChaCha8Rng::seed_from_u64(7);
        let mut f = m.forward(&inputs, Mode::Train, &mut drop).unwrap();
        let l = f
            .tape
            .bce_with_logits(f.logits, Arc::clone(&targets), Arc::clone(&inputs.train_rows))
            .unwrap();
        f.tape.value(l).data()[0]
    };

    let mut analytic_model = model.clone();
    analytic_model.params_mut().zero_grad();
    let mut drop = ChaCha8Rng::seed_from_u64(7);
    analytic_model.accumulate_loss_grad(&inputs, &targets, &mut drop).unwrap();

    let mut worst: f64 = 0.0;
    for &id in &ids {
        let base = model.params().value(id).clone();
        let grad = analytic_model.params().grad(id).clone();
        for j in 0..base.len() {
            let mut probe = model.clone();
            let mut plus = base.clone();
            plus.data_mut()[j] += FD_STEP;
            probe.params_mut().set_value(id, plus).unwrap();
            let lp = loss_at(&probe);
            let mut minus = base.clone();
            minus.data_mut()[j] -= FD_STEP;
            probe.params_mut().set_value(id, minus).unwrap();
            let lm = loss_at(&probe);
            let num = (lp - lm) / (2.0 * FD_STEP);
            let e = rel_err(grad.data()[j], num);
            if e >= GRAD_TOL {
                eprintln!("{} [{j}]: analytic {} numeric {num}", model.params().name(id), grad.data()[j]);
            }
            worst = worst.max(e);
        }
    }
    worst
}

//! MLP, GraphSAGE and GIN over scalarized edge weights.
//!
//! `layers` counts weight layers including the output layer. MLP and GIN
//! use `layers − 1` hidden blocks followed by a dense head to `K` logits;
//! SAGE uses `layers` convolutions, the last of which emits the logits.
//! Every hidden block is followed by norm → LeakyReLU → dropout; the
//! output layer has none of these.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphstore::{Aggr, GraphDataset, NodeFeatures, EDGE_DIM};
use crate::tensor_ad::{
    batch_norm, conditional_layer_norm, dropout, layer_norm, linear, BatchStats, BnMode, ClnParams, Csr,
    ParamId, ParamStore, RunningStats, Tape, Tensor, Var,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Sage,
    Gin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Bn,
    Ln,
    Cln,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EdgeScalarKind {
    Sum,
    Learned1d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(rename = "model")]
    pub kind: ModelKind,
    pub norm: NormKind,
    pub layers: usize,
    #[serde(rename = "hid")]
    pub hidden: usize,
    pub dropout: f64,
    pub edge_scalar: EdgeScalarKind,
    pub x_aggr: Aggr,
    #[serde(rename = "num_labels")]
    pub k: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Sage,
            norm: NormKind::Ln,
            layers: 3,
            hidden: 512,
            dropout: 0.1,
            edge_scalar: EdgeScalarKind::Sum,
            x_aggr: Aggr::Sum,
            k: 112,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers < 1 {
            return bad("layers must be at least 1".into());
        }
        if self.hidden < 1 {
            return bad("hidden width must be at least 1".into());
        }
        if self.k < 1 {
            return bad("need at least one label".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky slope {} outside (0, 1)", self.leaky_slope));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("bn momentum {} outside [0, 1]", self.bn_momentum));
        }
        Ok(())
    }
}

/// Edge weight `α ≥ 0` from an 8-channel edge feature.
#[derive(Clone, Debug, PartialEq)]
pub enum EdgeScalarizer {
    Sum,
    Learned1d { u: [f64; EDGE_DIM], b: f64 },
}

impl EdgeScalarizer {
    /// `Σ_c e_c`, or `softplus(u·e + b)`.
    pub fn scalarize(&self, e: &[f64]) -> f64 {
        match self {
            EdgeScalarizer::Sum => e.iter().sum(),
            EdgeScalarizer::Learned1d { u, b } => {
                crate::tensor_ad::softplus(u.iter().zip(e).map(|(a, x)| a * x).sum::<f64>() + b)
            }
        }
    }
}

/// Everything a forward pass reads from the dataset.
#[derive(Clone, Debug)]
pub struct GraphInputs {
    pub x: Tensor,
    pub csr: Arc<Csr>,
    pub edge_feat: Tensor,
    /// Channel-sum edge weights, `E × 1`.
    pub alpha_sum: Tensor,
    /// Per-node species descriptor (mean input features of the species).
    pub desc: Tensor,
    /// Rows contributing batch-norm statistics and the training loss.
    pub train_rows: Arc<[usize]>,
}

impl GraphInputs {
    pub fn new(g: &GraphDataset, feats: &NodeFeatures, train_rows: &[usize]) -> Self {
        let edge_feat = g.edge_feat_matrix();
        let alpha_sum = Tensor::new(
            g.num_edges(),
            1,
            (0..g.num_edges()).map(|e| EdgeScalarizer::Sum.scalarize(g.edge_feat(e))).collect(),
        )
        .expect("alpha shape");
        GraphInputs {
            x: feats.x.clone(),
            csr: Arc::clone(g.csr()),
            edge_feat,
            alpha_sum,
            desc: species_descriptors(&feats.x, g.species_ids()),
            train_rows: train_rows.into(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.x.rows()
    }
}

/// Row `i` is the mean of `x` over all nodes sharing node `i`'s species.
pub fn species_descriptors(x: &Tensor, species: &[u64]) -> Tensor {
    let d = x.cols();
    let mut sums: HashMap<u64, (Vec<f64>, usize)> = HashMap::new();
    for (i, &s) in species.iter().enumerate() {
        let e = sums.entry(s).or_insert_with(|| (vec![0.0; d], 0));
        for (a, v) in e.0.iter_mut().zip(x.row(i)) {
            *a += v;
        }
        e.1 += 1;
    }
    Tensor::from_fn(species.len(), d, |i, c| {
        let (s, n) = &sums[&species[i]];
        s[c] / *n as f64
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Block {
    Dense { w: ParamId, b: ParamId },
    Sage { w_self: ParamId, w_neigh: ParamId, b: ParamId },
    Gin { eps: ParamId, w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
}

#[derive(Clone, Debug)]
enum Norm {
    None,
    Affine { gamma: ParamId, beta: ParamId, batch: bool },
    Cln {
        enc_w: ParamId,
        enc_b: ParamId,
        gamma_w: ParamId,
        gamma_b: ParamId,
        beta_w: ParamId,
        beta_b: ParamId,
    },
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    hidden: Vec<(Block, Norm)>,
    output: Block,
    edge: Option<(ParamId, ParamId)>,
    running: Vec<RunningStats>,
}

/// Output of one recorded forward pass.
pub struct Forward {
    pub tape: Tape,
    pub logits: Var,
    pub batch_stats: Vec<BatchStats>,
}

impl Model {
    /// Fan-in uniform init for weights with bound `1/√fan_in`; zero biases;
    /// `γ = 1, β = 0`; CLN heads start at zero so CLN starts as plain LN.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = cfg.hidden;
        let weight = |params: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let t = Tensor::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..=bound));
            params.add(name, t)
        };
        let zeros = |params: &mut ParamStore, name: String, r: usize, c: usize| params.add(name, Tensor::zeros(r, c));

        let mut hidden = Vec::new();
        let mut running = Vec::new();
        let n_hidden = cfg.layers - 1;
        let mut f_in = EDGE_DIM;
        for l in 0..n_hidden {
            let block = match cfg.kind {
                ModelKind::Mlp => Block::Dense {
                    w: weight(&mut params, &mut rng, format!("layer{l}.w"), f_in, h)?,
                    b: zeros(&mut params, format!("layer{l}.b"), 1, h)?,
                },
                ModelKind::Sage => Block::Sage {
                    w_self: weight(&mut params, &mut rng, format!("layer{l}.w_self"), f_in, h)?,
                    w_neigh: weight(&mut params, &mut rng, format!("layer{l}.w_neigh"), f_in, h)?,
                    b: zeros(&mut params, format!("layer{l}.b"), 1, h)?,
                },
                ModelKind::Gin => Block::Gin {
                    eps: zeros(&mut params, format!("layer{l}.eps"), 1, 1)?,
                    w1: weight(&mut params, &mut rng, format!("layer{l}.mlp.w1"), f_in, h)?,
                    b1: zeros(&mut params, format!("layer{l}.mlp.b1"), 1, h)?,
                    w2: weight(&mut params, &mut rng, format!("layer{l}.mlp.w2"), h, h)?,
                    b2: zeros(&mut params, format!("layer{l}.mlp.b2"), 1, h)?,
                },
            };
            let norm = match cfg.norm {
                NormKind::None => Norm::None,
                NormKind::Bn | NormKind::Ln => {
                    let gamma = params.add(format!("norm{l}.gamma"), Tensor::filled(1, h, 1.0))?;
                    let beta = zeros(&mut params, format!("norm{l}.beta"), 1, h)?;
                    if cfg.norm == NormKind::Bn {
                        running.push(RunningStats::new(h));
                    }
                    Norm::Affine {
                        gamma,
                        beta,
                        batch: cfg.norm == NormKind::Bn,
                    }
                }
                NormKind::Cln => Norm::Cln {
                    enc_w: weight(&mut params, &mut rng, format!("norm{l}.enc_w"), EDGE_DIM, h)?,
                    enc_b: zeros(&mut params, format!("norm{l}.enc_b"), 1, h)?,
                    gamma_w: zeros(&mut params, format!("norm{l}.gamma_w"), h, h)?,
                    gamma_b: zeros(&mut params, format!("norm{l}.gamma_b"), 1, h)?,
                    beta_w: zeros(&mut params, format!("norm{l}.beta_w"), h, h)?,
                    beta_b: zeros(&mut params, format!("norm{l}.beta_b"), 1, h)?,
                },
            };
            hidden.push((block, norm));
            f_in = h;
        }
        let output = match cfg.kind {
            ModelKind::Sage => Block::Sage {
                w_self: weight(&mut params, &mut rng, "out.w_self".into(), f_in, cfg.k)?,
                w_neigh: weight(&mut params, &mut rng, "out.w_neigh".into(), f_in, cfg.k)?,
                b: zeros(&mut params, "out.b".into(), 1, cfg.k)?,
            },
            ModelKind::Mlp | ModelKind::Gin => Block::Dense {
                w: weight(&mut params, &mut rng, "out.w".into(), f_in, cfg.k)?,
                b: zeros(&mut params, "out.b".into(), 1, cfg.k)?,
            },
        };
        let uses_graph = match cfg.kind {
            ModelKind::Mlp => false,
            ModelKind::Sage => true,
            ModelKind::Gin => n_hidden > 0,
        };
        let edge = if uses_graph && cfg.edge_scalar == EdgeScalarKind::Learned1d {
            Some((
                weight(&mut params, &mut rng, "edge.u".into(), EDGE_DIM, 1)?,
                zeros(&mut params, "edge.b".into(), 1, 1)?,
            ))
        } else {
            None
        };
        Ok(Model {
            cfg: cfg.clone(),
            params,
            hidden,
            output,
            edge,
            running,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn set_running_stats(&mut self, stats: Vec<RunningStats>) {
        self.running = stats;
    }

    /// Current edge scalarizer (learned parameters read from the store).
    pub fn edge_scalarizer(&self) -> EdgeScalarizer {
        match self.edge {
            None => EdgeScalarizer::Sum,
            Some((u, b)) => {
                let mut w = [0.0; EDGE_DIM];
                w.copy_from_slice(self.params.value(u).data());
                EdgeScalarizer::Learned1d {
                    u: w,
                    b: self.params.value(b).data()[0],
                }
            }
        }
    }

    /// Folds batch statistics from a training pass into running averages.
    pub fn update_running_stats(&mut self, batch: &[BatchStats]) {
        let m = self.cfg.bn_momentum;
        for (r, b) in self.running.iter_mut().zip(batch) {
            r.update(b, m);
        }
    }

    fn p(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(&self.params, id)
    }

    fn alpha(&self, tape: &mut Tape, inputs: &GraphInputs) -> Result<Var> {
        match self.edge {
            None => Ok(tape.constant(inputs.alpha_sum.clone())),
            Some((u, b)) => {
                let e = tape.constant(inputs.edge_feat.clone());
                let u = self.p(tape, u);
                let b = self.p(tape, b);
                let s = linear(tape, e, u, b)?;
                tape.softplus(s)
            }
        }
    }

    fn apply_block(&self, tape: &mut Tape, block: &Block, h: Var, alpha: Option<Var>, csr: &Arc<Csr>) -> Result<Var> {
        match *block {
            Block::Dense { w, b } => {
                let (w, b) = (self.p(tape, w), self.p(tape, b));
                linear(tape, h, w, b)
            }
            Block::Sage { w_self, w_neigh, b } => {
                let alpha = alpha.expect("sage needs edge weights");
                let agg = tape.aggregate(h, alpha, Arc::clone(csr), true)?;
                let (ws, wn, b) = (self.p(tape, w_self), self.p(tape, w_neigh), self.p(tape, b));
                let own = tape.matmul(h, ws)?;
                let neigh = tape.matmul(agg, wn)?;
                let sum = tape.add(own, neigh)?;
                tape.add_row(sum, b)
            }
            Block::Gin { eps, w1, b1, w2, b2 } => {
                let alpha = alpha.expect("gin needs edge weights");
                let agg = tape.aggregate(h, alpha, Arc::clone(csr), false)?;
                let eps = self.p(tape, eps);
                let scaled = tape.scale_by(h, eps)?;
                let own = tape.add(h, scaled)?;
                let z = tape.add(own, agg)?;
                let (w1, b1, w2, b2) = (self.p(tape, w1), self.p(tape, b1), self.p(tape, w2), self.p(tape, b2));
                let z = linear(tape, z, w1, b1)?;
                let z = tape.leaky_relu(z, self.cfg.leaky_slope)?;
                linear(tape, z, w2, b2)
            }
        }
    }

    /// Records a full-graph forward pass. In training mode dropout is drawn
    /// from `rng` and batch norm uses the training rows' statistics.
    pub fn forward<R: Rng + ?Sized>(&self, inputs: &GraphInputs, mode: Mode, rng: &mut R) -> Result<Forward> {
        if inputs.x.cols() != EDGE_DIM {
            return Err(Error::shape("forward", format!("input width {}", inputs.x.cols())));
        }
        let mut tape = Tape::new();
        let mut batch_stats = Vec::new();
        let needs_alpha = self.cfg.kind != ModelKind::Mlp;
        let alpha = if needs_alpha {
            Some(self.alpha(&mut tape, inputs)?)
        } else {
            None
        };
        let desc = match self.cfg.norm {
            NormKind::Cln if !self.hidden.is_empty() => Some(tape.constant(inputs.desc.clone())),
            _ => None,
        };
        let train = mode == Mode::Train;
        let mut h = tape.constant(inputs.x.clone());
        let mut bn_idx = 0;
        for (block, norm) in &self.hidden {
            h = self.apply_block(&mut tape, block, h, alpha, &inputs.csr)?;
            h = match *norm {
                Norm::None => h,
                Norm::Affine { gamma, beta, batch } => {
                    let (g, b) = (self.p(&mut tape, gamma), self.p(&mut tape, beta));
                    if batch {
                        let bn_mode = if train {
                            BnMode::Train(&inputs.train_rows)
                        } else {
                            BnMode::Eval(&self.running[bn_idx])
                        };
                        let (y, stats) = batch_norm(&mut tape, h, g, b, bn_mode, self.cfg.norm_eps)?;
                        batch_stats.extend(stats);
                        bn_idx += 1;
                        y
                    } else {
                        layer_norm(&mut tape, h, g, b, self.cfg.norm_eps)?
                    }
                }
                Norm::Cln {
                    enc_w,
                    enc_b,
                    gamma_w,
                    gamma_b,
                    beta_w,
                    beta_b,
                } => {
                    let p = ClnParams {
                        enc_w: self.p(&mut tape, enc_w),
                        enc_b: self.p(&mut tape, enc_b),
                        gamma_w: self.p(&mut tape, gamma_w),
                        gamma_b: self.p(&mut tape, gamma_b),
                        beta_w: self.p(&mut tape, beta_w),
                        beta_b: self.p(&mut tape, beta_b),
                        slope: self.cfg.leaky_slope,
                    };
                    conditional_layer_norm(&mut tape, h, desc.expect("descriptor"), &p, self.cfg.norm_eps)?
                }
            };
            h = tape.leaky_relu(h, self.cfg.leaky_slope)?;
            h = dropout(&mut tape, h, self.cfg.dropout, train, rng)?;
        }
        let logits = self.apply_block(&mut tape, &self.output, h, alpha, &inputs.csr)?;
        Ok(Forward {
            tape,
            logits,
            batch_stats,
        })
    }

    /// Eval-mode logits for every node.
    pub fn predict(&self, inputs: &GraphInputs) -> Result<Tensor> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let f = self.forward(inputs, Mode::Eval, &mut unused)?;
        Ok(f.tape.value(f.logits).clone())
    }

    /// Training-mode forward, masked BCE over the training rows, backward
    /// into the parameter store and running-stat update. Returns the loss.
    pub fn accumulate_loss_grad<R: Rng + ?Sized>(
        &mut self,
        inputs: &GraphInputs,
        targets: &Arc<Tensor>,
        rng: &mut R,
    ) -> Result<f64> {
        let Forward {
            mut tape,
            logits,
            batch_stats,
        } = self.forward(inputs, Mode::Train, rng)?;
        let loss = tape.bce_with_logits(logits, Arc::clone(targets), Arc::clone(&inputs.train_rows))?;
        let value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        self.params.accumulate(&grads);
        self.update_running_stats(&batch_stats);
        Ok(value)
    }
}

//! Synthetic species-split graphs with tunable edge-evidence signal.
//!
//! Labels come from label modules: label `k` belongs to module `k mod M`
//! with `M = min(K, 8)`, an active module switches on each of its labels
//! with high probability, and each species has its own mixture over
//! modules (its label prototype). Edges are sampled within species,
//! preferring endpoints that share labels and endpoints with many labels.
//! Edge channel `c` carries the Jaccard overlap of the endpoints' labels in
//! module `c`, scaled by the signal strength, but only with probability
//! `evidence_rate`: like real association evidence, most channels of most
//! edges are silent, so a node's own edges are an incomplete record.
//! With `signal = 0` topology and edge features are label-independent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EdgeRecord, GraphDataset, Split, EDGE_DIM};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_species: usize,
    pub nodes_per_species: usize,
    pub num_labels: usize,
    /// Expected mean in-degree.
    pub avg_degree: f64,
    /// Strength of label dependence in `[0, 1]`.
    pub signal: f64,
    /// Upper bound of the uniform noise added to each edge channel.
    pub noise: f64,
    /// Probability that a channel reports its label overlap at all.
    pub evidence_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_species: 3,
            nodes_per_species: 500,
            num_labels: 16,
            avg_degree: 10.0,
            signal: 0.8,
            noise: 0.2,
            evidence_rate: 0.3,
        }
    }
}

const PROTOTYPE_FLOOR: f64 = 0.5;
const ON_PROB: f64 = 0.85;
const SECOND_MODULE_PROB: f64 = 0.3;
const AFFINITY_FLOOR: f64 = 0.05;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_species < 3 {
            return bad(format!("need at least 3 species for a train/valid/test split, got {}", self.num_species));
        }
        if self.nodes_per_species < 2 {
            return bad("nodes_per_species must be at least 2".into());
        }
        if self.num_labels == 0 {
            return bad("num_labels must be at least 1".into());
        }
        if !(self.avg_degree >= 0.0 && self.avg_degree < self.nodes_per_species as f64) {
            return bad(format!("avg_degree {} outside [0, nodes_per_species)", self.avg_degree));
        }
        if !(0.0..=1.0).contains(&self.signal) {
            return bad(format!("signal {} outside [0, 1]", self.signal));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1]", self.noise));
        }
        if !(0.0..=1.0).contains(&self.evidence_rate) {
            return bad(format!("evidence_rate {} outside [0, 1]", self.evidence_rate));
        }
        Ok(())
    }

    /// Species at index `num_species − 2` is validation, the last is test.
    pub fn split_of_species(&self, idx: usize) -> Split {
        if idx + 1 == self.num_species {
            Split::Test
        } else if idx + 2 == self.num_species {
            Split::Valid
        } else {
            Split::Train
        }
    }
}

fn jaccard(a: &[u8], b: &[u8], group: Option<usize>) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for (k, (&x, &y)) in a.iter().zip(b).enumerate() {
        if let Some(c) = group {
            if k % EDGE_DIM != c {
                continue;
            }
        }
        inter += (x & y) as u32;
        union += (x | y) as u32;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<GraphDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.num_labels;
    let s = spec.signal;

    // Label k belongs to module k mod M, and module m is carried by edge
    // channel m, so every label is covered and channels are not shared
    // across modules.
    let num_modules = k.min(EDGE_DIM);
    let modules: Vec<Vec<usize>> = (0..num_modules).map(|m| (m..k).step_by(num_modules).collect()).collect();

    let n = spec.num_species * spec.nodes_per_species;
    let mut labels = vec![0u8; n * k];
    let mut species_id = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    let mut edges = Vec::new();

    for sp in 0..spec.num_species {
        let weights: Vec<f64> = (0..num_modules).map(|_| rng.gen::<f64>() + PROTOTYPE_FLOOR).collect();
        let total: f64 = weights.iter().sum();
        let pick = |rng: &mut ChaCha8Rng| {
            let mut u = rng.gen::<f64>() * total;
            for (m, w) in weights.iter().enumerate() {
                if u < *w {
                    return m;
                }
                u -= w;
            }
            num_modules - 1
        };
        let base = sp * spec.nodes_per_species;
        for i in base..base + spec.nodes_per_species {
            let row = &mut labels[i * k..(i + 1) * k];
            let mut active = vec![pick(&mut rng)];
            if rng.gen::<f64>() < SECOND_MODULE_PROB {
                active.push(pick(&mut rng));
            }
            for m in active {
                for &lab in &modules[m] {
                    if rng.gen::<f64>() < ON_PROB {
                        row[lab] = 1;
                    }
                }
            }
            species_id.push(sp as u64 + 1);
            split.push(spec.split_of_species(sp));
        }

        let members = base..base + spec.nodes_per_species;
        let card: Vec<f64> = members
            .clone()
            .map(|i| labels[i * k..(i + 1) * k].iter().map(|&y| y as f64).sum())
            .collect();
        let mean_card = card.iter().sum::<f64>() / card.len() as f64;
        let activity: Vec<f64> = card.iter().map(|c| (1.0 + c) / (1.0 + mean_card)).collect();
        let row = |i: usize| &labels[i * k..(i + 1) * k];
        let weight = |u: usize, v: usize| {
            let affinity = activity[u - base] * activity[v - base] * (jaccard(row(u), row(v), None) + AFFINITY_FLOOR);
            (1.0 - s) + s * affinity
        };
        let mut total_w = 0.0;
        for u in members.clone() {
            for v in u + 1..members.end {
                total_w += weight(u, v);
            }
        }
        let target = spec.nodes_per_species as f64 * spec.avg_degree / 2.0;
        let scale = if total_w > 0.0 { target / total_w } else { 0.0 };
        for u in members.clone() {
            for v in u + 1..members.end {
                let p = (scale * weight(u, v)).min(1.0);
                if rng.gen::<f64>() >= p {
                    continue;
                }
                let mut feat = [0.0; EDGE_DIM];
                for (c, f) in feat.iter_mut().enumerate() {
                    let j = jaccard(row(u), row(v), Some(c));
                    let shown = rng.gen::<f64>() < spec.evidence_rate;
                    let evidence = if shown { s * j } else { 0.0 };
                    *f = (evidence + spec.noise * rng.gen::<f64>()).clamp(0.0, 1.0);
                }
                edges.push(EdgeRecord { src: u, dst: v, feat });
                edges.push(EdgeRecord { src: v, dst: u, feat });
            }
        }
    }

    GraphDataset::from_parts(k, edges, labels, species_id, split)
}

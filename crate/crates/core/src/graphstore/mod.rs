//! Graph storage: incoming-edge CSR, 8-channel edge evidence, multi-label
//! targets, species ids and split assignment.

mod synth;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_ad::{Csr, Tensor};

pub use synth::{generate_synthetic, SynthSpec};

/// Number of edge feature channels.
pub const EDGE_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// How incident edge features are pooled into a node input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Aggr {
    Mean,
    Sum,
    Max,
}

impl Aggr {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggr::Mean => "mean",
            Aggr::Sum => "sum",
            Aggr::Max => "max",
        }
    }
}

/// One directed edge as it appears in an edge list.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeRecord {
    pub src: usize,
    pub dst: usize,
    pub feat: [f64; EDGE_DIM],
}

/// Immutable graph with incoming-edge CSR ordered by `(dst, src, features)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    num_labels: usize,
    csr: Arc<Csr>,
    edge_feat: Vec<f64>,
    labels: Vec<u8>,
    species_id: Vec<u64>,
    split: Vec<Split>,
}

impl GraphDataset {
    /// Builds the CSR and validates every invariant.
    pub fn from_parts(
        num_labels: usize,
        mut edges: Vec<EdgeRecord>,
        labels: Vec<u8>,
        species_id: Vec<u64>,
        split: Vec<Split>,
    ) -> Result<Self> {
        let n = species_id.len();
        if split.len() != n || labels.len() != n * num_labels {
            return Err(Error::Validation(format!(
                "{n} species ids, {} splits, {} label cells for K = {num_labels}",
                split.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::Validation(format!("non-binary label value {bad}")));
        }
        for (i, e) in edges.iter().enumerate() {
            if e.src >= n || e.dst >= n {
                return Err(Error::Validation(format!(
                    "edge {i} ({} -> {}) references a node outside 0..{n}",
                    e.src, e.dst
                )));
            }
            if let Some(v) = e.feat.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Validation(format!(
                    "edge {i} ({} -> {}) has feature {v} outside [0, 1]",
                    e.src, e.dst
                )));
            }
        }
        edges.sort_by(|a, b| {
            (a.dst, a.src)
                .cmp(&(b.dst, b.src))
                .then_with(|| {
                    let ka = a.feat.map(f64::to_bits);
                    let kb = b.feat.map(f64::to_bits);
                    ka.cmp(&kb)
                })
        });
        let mut offsets = vec![0usize; n + 1];
        for e in &edges {
            offsets[e.dst + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let sources = edges.iter().map(|e| e.src).collect();
        let edge_feat = edges.iter().flat_map(|e| e.feat).collect();
        Ok(GraphDataset {
            num_labels,
            csr: Arc::new(Csr { offsets, sources }),
            edge_feat,
            labels,
            species_id,
            split,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.species_id.len()
    }

    pub fn num_edges(&self) -> usize {
        self.csr.num_edges()
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn csr(&self) -> &Arc<Csr> {
        &self.csr
    }

    pub fn csr_in_offsets(&self) -> &[usize] {
        &self.csr.offsets
    }

    pub fn csr_in_sources(&self) -> &[usize] {
        &self.csr.sources
    }

    /// Features of the `e`-th edge in CSR order.
    pub fn edge_feat(&self, e: usize) -> &[f64] {
        &self.edge_feat[e * EDGE_DIM..(e + 1) * EDGE_DIM]
    }

    pub fn edge_feat_matrix(&self) -> Tensor {
        Tensor::new(self.num_edges(), EDGE_DIM, self.edge_feat.clone()).expect("edge feature shape")
    }

    pub fn labels(&self, node: usize) -> &[u8] {
        &self.labels[node * self.num_labels..(node + 1) * self.num_labels]
    }

    pub fn label_matrix(&self) -> Tensor {
        let data = self.labels.iter().map(|&y| y as f64).collect();
        Tensor::new(self.num_nodes(), self.num_labels, data).expect("label shape")
    }

    pub fn species_ids(&self) -> &[u64] {
        &self.species_id
    }

    pub fn splits(&self) -> &[Split] {
        &self.split
    }

    pub fn split_rows(&self, split: Split) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&i| self.split[i] == split).collect()
    }

    /// Reconstructs the edge list from the CSR.
    pub fn edges(&self) -> impl Iterator<Item = EdgeRecord> + '_ {
        (0..self.num_nodes()).flat_map(move |dst| {
            self.csr.in_edges(dst).map(move |e| {
                let mut feat = [0.0; EDGE_DIM];
                feat.copy_from_slice(self.edge_feat(e));
                EdgeRecord {
                    src: self.csr.sources[e],
                    dst,
                    feat,
                }
            })
        })
    }

    /// Fails if any species id occurs in more than one split.
    pub fn check_species_split(&self) -> Result<()> {
        let mut seen: HashMap<u64, Split> = HashMap::new();
        for (&s, &sp) in self.species_id.iter().zip(&self.split) {
            match seen.insert(s, sp) {
                Some(prev) if prev != sp => {
                    return Err(Error::Validation(format!(
                        "species {s} appears in both {prev} and {sp}"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn species_in(&self, split: Split) -> BTreeSet<u64> {
        self.species_id
            .iter()
            .zip(&self.split)
            .filter(|(_, &sp)| sp == split)
            .map(|(&s, _)| s)
            .collect()
    }

    /// Writes `nodes.tsv` and `edges.tsv` in the ingestion format.
    pub fn write_tsv(&self, nodes_path: &Path, edges_path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(nodes_path)?);
        writeln!(w, "node_id\tspecies_id\tsplit\tlabels")?;
        for i in 0..self.num_nodes() {
            let labels: String = self.labels(i).iter().map(|&y| if y == 1 { '1' } else { '0' }).collect();
            writeln!(w, "{i}\t{}\t{}\t{labels}", self.species_id[i], self.split[i])?;
        }
        w.flush()?;

        let mut w = BufWriter::new(fs::File::create(edges_path)?);
        write!(w, "src\tdst")?;
        for c in 0..EDGE_DIM {
            write!(w, "\tf{c}")?;
        }
        writeln!(w)?;
        for e in self.edges() {
            write!(w, "{}\t{}", e.src, e.dst)?;
            for v in e.feat {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Loads `nodes.tsv` / `edges.tsv`. Node ids must cover `0..N` exactly once
/// (any row order); edges are directed and no self-loops are added.
pub fn load_dataset(nodes_path: &Path, edges_path: &Path) -> Result<GraphDataset> {
    let text = fs::read_to_string(nodes_path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == "node_id\tspecies_id\tsplit\tlabels" => {}
        _ => return Err(parse_err(nodes_path, 1, "expected header node_id<TAB>species_id<TAB>split<TAB>labels")),
    }
    let mut rows: Vec<(usize, u64, Split, Vec<u8>)> = Vec::new();
    let mut num_labels = None;
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(nodes_path, lineno, format!("expected 4 fields, found {}", fields.len())));
        }
        let id = fields[0]
            .parse::<usize>()
            .map_err(|e| parse_err(nodes_path, lineno, format!("node_id: {e}")))?;
        let species = fields[1]
            .parse::<u64>()
            .map_err(|e| parse_err(nodes_path, lineno, format!("species_id: {e}")))?;
        let split = fields[2]
            .parse::<Split>()
            .map_err(|e| parse_err(nodes_path, lineno, e))?;
        let labels = fields[3]
            .bytes()
            .map(|b| match b {
                b'0' => Ok(0u8),
                b'1' => Ok(1u8),
                other => Err(parse_err(nodes_path, lineno, format!("label character {:?}", other as char))),
            })
            .collect::<Result<Vec<u8>>>()?;
        match num_labels {
            None => num_labels = Some(labels.len()),
            Some(k) if k != labels.len() => {
                return Err(parse_err(nodes_path, lineno, format!("{} labels, expected {k}", labels.len())))
            }
            _ => {}
        }
        rows.push((id, species, split, labels));
    }
    let n = rows.len();
    let k = num_labels.unwrap_or(0);
    let mut species_id = vec![0u64; n];
    let mut split = vec![Split::Train; n];
    let mut labels = vec![0u8; n * k];
    let mut seen = vec![false; n];
    for (id, s, sp, y) in rows {
        if id >= n || seen[id] {
            return Err(Error::Validation(format!(
                "node ids must be a permutation of 0..{n}; got {id} (duplicate or out of range)"
            )));
        }
        seen[id] = true;
        species_id[id] = s;
        split[id] = sp;
        labels[id * k..(id + 1) * k].copy_from_slice(&y);
    }

    let text = fs::read_to_string(edges_path)?;
    let mut lines = text.lines().enumerate();
    let expected_header = {
        let mut h = String::from("src\tdst");
        for c in 0..EDGE_DIM {
            h.push_str(&format!("\tf{c}"));
        }
        h
    };
    match lines.next() {
        Some((_, h)) if h.trim_end() == expected_header => {}
        None => {}
        _ => return Err(parse_err(edges_path, 1, "expected header src<TAB>dst<TAB>f0..f7")),
    }
    let mut edges = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        if fields.len() != 2 + EDGE_DIM {
            return Err(parse_err(edges_path, lineno, format!("expected {} fields, found {}", 2 + EDGE_DIM, fields.len())));
        }
        let src = fields[0]
            .parse::<usize>()
            .map_err(|e| parse_err(edges_path, lineno, format!("src: {e}")))?;
        let dst = fields[1]
            .parse::<usize>()
            .map_err(|e| parse_err(edges_path, lineno, format!("dst: {e}")))?;
        let mut feat = [0.0; EDGE_DIM];
        for (c, f) in fields[2..].iter().enumerate() {
            feat[c] = f
                .parse::<f64>()
                .map_err(|e| parse_err(edges_path, lineno, format!("f{c}: {e}")))?;
        }
        edges.push(EdgeRecord { src, dst, feat });
    }
    GraphDataset::from_parts(k, edges, labels, species_id, split)
}

/// Edge→node input features.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatures {
    pub x: Tensor,
    pub aggr: Aggr,
}

/// Pools the features of each node's incoming edges channelwise.
/// Isolated nodes get the all-zeros row for every aggregator.
pub fn build_node_features(g: &GraphDataset, aggr: Aggr) -> NodeFeatures {
    let n = g.num_nodes();
    let mut x = vec![0.0; n * EDGE_DIM];
    x.par_chunks_mut(EDGE_DIM).enumerate().for_each(|(i, row)| {
        let range = g.csr.in_edges(i);
        if range.is_empty() {
            return;
        }
        let deg = range.len() as f64;
        if aggr == Aggr::Max {
            row.fill(f64::NEG_INFINITY);
        }
        for e in range {
            for (o, v) in row.iter_mut().zip(g.edge_feat(e)) {
                match aggr {
                    Aggr::Sum | Aggr::Mean => *o += v,
                    Aggr::Max => *o = o.max(*v),
                }
            }
        }
        if aggr == Aggr::Mean {
            row.iter_mut().for_each(|o| *o /= deg);
        }
    });
    NodeFeatures {
        x: Tensor::new(n, EDGE_DIM, x).expect("feature shape"),
        aggr,
    }
}

//! Dense row-major matrices with a reverse-mode differentiation tape.
//!
//! Every value in a forward pass lives on a [`Tape`] as a node. Operations
//! append nodes in execution order, so the node list is already a
//! topological order and [`Tape::backward`] simply walks it in reverse.
//!
//! All tensors are two-dimensional (`rows × cols`); scalars are `1 × 1`,
//! bias and affine vectors are `1 × cols` and broadcast over rows.

mod layers;
mod params;

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};

pub use layers::{
    batch_norm, bce_with_logits, conditional_layer_norm, dropout, layer_norm, leaky_relu, linear,
    BatchStats, BnMode, ClnParams, RunningStats,
};
pub use params::{AdamConfig, Param, ParamId, ParamStore};

const PAR_MIN_WORK: usize = 1 << 15;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "tensor",
                format!("{} values for shape {rows}x{cols}", data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Tensor::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Plain matrix product, without recording anything.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} @ {}x{}",
                    self.rows, self.cols, rhs.rows, rhs.cols
                ),
            ));
        }
        let mut out = Tensor::zeros(self.rows, rhs.cols);
        matmul_into(&self.data, &rhs.data, &mut out.data, self.cols, rhs.cols);
        Ok(out)
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn col_sums(&self) -> Tensor {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Tensor::row_vector(out)
    }
}

/// `out[n×m] += a[n×k] · b[k×m]`, parallel over output rows.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize) {
    let kernel = |(row_out, row_a): (&mut [f64], &[f64])| {
        for (p, &av) in row_a.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row_b = &b[p * m..(p + 1) * m];
            for (o, &bv) in row_out.iter_mut().zip(row_b) {
                *o += av * bv;
            }
        }
    };
    if m == 0 || k == 0 {
        return;
    }
    if out.len() * k >= PAR_MIN_WORK {
        out.par_chunks_mut(m).zip(a.par_chunks(k)).for_each(kernel);
    } else {
        out.chunks_mut(m).zip(a.chunks(k)).for_each(kernel);
    }
}

/// Incoming-edge adjacency used by [`Tape::aggregate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Csr {
    /// `offsets[i]..offsets[i + 1]` indexes the in-edges of node `i`.
    pub offsets: Vec<usize>,
    /// Source node of each edge.
    pub sources: Vec<usize>,
}

impl Csr {
    pub fn num_nodes(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }

    pub fn in_edges(&self, node: usize) -> std::ops::Range<usize> {
        self.offsets[node]..self.offsets[node + 1]
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Sigmoid(Var),
    Sum(Var),
    RowNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    ColNorm {
        x: Var,
        rows: Arc<[usize]>,
        inv_std: Vec<f64>,
    },
    Aggregate {
        h: Var,
        alpha: Var,
        csr: Arc<Csr>,
        normalize: bool,
        denom: Vec<f64>,
    },
    Bce {
        z: Var,
        targets: Arc<Tensor>,
        rows: Arc<[usize]>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass. Consumed by exactly one [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free variable whose gradient is reported in [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a parameter onto the tape; its gradient is routed back by id.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.rows, ta.cols, data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", value, Op::Add(a, b), rg)
    }

    /// `x + b` with `b` a `1 × cols` row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.rows != 1 || tb.cols != tx.cols {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let mut value = tx.clone();
        for row in value.data.chunks_mut(tx.cols.max(1)) {
            for (v, bv) in row.iter_mut().zip(&tb.data) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push("add_row", value, Op::AddRow(x, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.rows, ta.cols, data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", value, Op::Mul(a, b), rg)
    }

    /// `x ⊙ g` with `g` a `1 × cols` row broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        if tg.rows != 1 || tg.cols != tx.cols {
            return Err(Error::shape("mul_row", format!("{:?} * {:?}", tx.shape(), tg.shape())));
        }
        let mut value = tx.clone();
        for row in value.data.chunks_mut(tx.cols.max(1)) {
            for (v, gv) in row.iter_mut().zip(&tg.data) {
                *v *= gv;
            }
        }
        let rg = self.rg(x) || self.rg(g);
        self.push("mul_row", value, Op::MulRow(x, g), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.data.iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(x);
        self.push("scale", value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.data.iter_mut().for_each(|v| *v += c);
        let rg = self.rg(x);
        self.push("add_scalar", value, Op::AddScalar(x), rg)
    }

    /// `x · s` with `s` a `1 × 1` tensor on the tape.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.shape() != (1, 1) {
            return Err(Error::shape("scale_by", format!("scalar has shape {:?}", ts.shape())));
        }
        let c = ts.data[0];
        let mut value = self.value(x).clone();
        value.data.iter_mut().for_each(|v| *v *= c);
        let rg = self.rg(x) || self.rg(s);
        self.push("scale_by", value, Op::ScaleBy(x, s), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let mut value = self.value(x).clone();
        value
            .data
            .iter_mut()
            .for_each(|v| *v = if *v > 0.0 { *v } else { slope * *v });
        let rg = self.rg(x);
        self.push("leaky_relu", value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.data.iter_mut().for_each(|v| *v = softplus(*v));
        let rg = self.rg(x);
        self.push("softplus", value, Op::Softplus(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let rg = self.rg(x);
        self.push("sigmoid", value, Op::Sigmoid(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push("sum", value, Op::Sum(x), rg)
    }

    /// Standardizes each row to zero mean and unit (biased) variance.
    pub fn row_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols;
        let mut value = tx.clone();
        let mut inv_std = Vec::with_capacity(tx.rows);
        for row in value.data.chunks_mut(cols.max(1)) {
            let n = cols as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            inv_std.push(r);
        }
        let rg = self.rg(x);
        self.push("row_norm", value, Op::RowNorm { x, inv_std }, rg)
    }

    /// Standardizes each column using the mean and biased variance over
    /// `rows` only; every row of `x` is normalized with those statistics.
    /// Returns the per-column mean and variance alongside the output.
    pub fn col_norm(
        &mut self,
        x: Var,
        rows: Arc<[usize]>,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let tx = self.value(x);
        let cols = tx.cols;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; cols];
        for &r in rows.iter() {
            for (m, v) in mean.iter_mut().zip(tx.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; cols];
        for &r in rows.iter() {
            for ((s, v), m) in var.iter_mut().zip(tx.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut value = tx.clone();
        for row in value.data.chunks_mut(cols.max(1)) {
            for ((v, m), r) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * r;
            }
        }
        let rg = self.rg(x);
        let out = self.push("col_norm", value, Op::ColNorm { x, rows, inv_std }, rg)?;
        Ok((out, mean, var))
    }

    /// Neighbor aggregation over incoming edges:
    /// `out_i = Σ_e α_e h_src(e) / D_i`, with `D_i = Σ_e α_e` when
    /// `normalize` (zero when `D_i == 0`) and `D_i = 1` otherwise.
    /// `alpha` has shape `num_edges × 1`.
    pub fn aggregate(&mut self, h: Var, alpha: Var, csr: Arc<Csr>, normalize: bool) -> Result<Var> {
        let th = self.value(h);
        let ta = self.value(alpha);
        let n = csr.num_nodes();
        if th.rows != n || ta.rows != csr.num_edges() || ta.cols != 1 {
            return Err(Error::shape(
                "aggregate",
                format!(
                    "h {:?}, alpha {:?}, graph {} nodes / {} edges",
                    th.shape(),
                    ta.shape(),
                    n,
                    csr.num_edges()
                ),
            ));
        }
        let f = th.cols;
        let mut out = Tensor::zeros(n, f);
        let denom: Vec<f64> = (0..n)
            .map(|i| {
                if normalize {
                    csr.in_edges(i).map(|e| ta.data[e]).sum()
                } else {
                    1.0
                }
            })
            .collect();
        let kernel = |(i, row): (usize, &mut [f64])| {
            let d = denom[i];
            if d == 0.0 {
                return;
            }
            for e in csr.in_edges(i) {
                let w = ta.data[e] / d;
                if w == 0.0 {
                    continue;
                }
                for (o, hv) in row.iter_mut().zip(th.row(csr.sources[e])) {
                    *o += w * hv;
                }
            }
        };
        if f > 0 {
            if n * f >= PAR_MIN_WORK {
                out.data.par_chunks_mut(f).enumerate().for_each(kernel);
            } else {
                out.data.chunks_mut(f).enumerate().for_each(kernel);
            }
        }
        let rg = self.rg(h) || self.rg(alpha);
        self.push(
            "aggregate",
            out,
            Op::Aggregate {
                h,
                alpha,
                csr,
                normalize,
                denom,
            },
            rg,
        )
    }

    /// Mean binary cross-entropy with logits over the given `rows` and all
    /// columns, in the stable form `max(z,0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, z: Var, targets: Arc<Tensor>, rows: Arc<[usize]>) -> Result<Var> {
        let tz = self.value(z);
        if tz.shape() != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} vs {:?}", tz.shape(), targets.shape()),
            ));
        }
        if targets.data.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Config("bce targets must be 0 or 1".into()));
        }
        if rows.is_empty() || tz.cols == 0 {
            return Err(Error::Config("bce over an empty selection".into()));
        }
        let mut total = 0.0;
        for &r in rows.iter() {
            for (zv, yv) in tz.row(r).iter().zip(targets.row(r)) {
                total += zv.max(0.0) - zv * yv + (-zv.abs()).exp().ln_1p();
            }
        }
        let value = Tensor::scalar(total / (rows.len() * tz.cols) as f64);
        let rg = self.rg(z);
        self.push("bce_with_logits", value, Op::Bce { z, targets, rows }, rg)
    }

    /// Reverse pass from a scalar `loss`. The tape may be walked only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut params = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.push_back(&node.op, &node.value, &g, &mut grads);
            match node.op {
                Op::Param(id) => params.push((id, g)),
                Op::Leaf => grads[idx] = Some(g),
                _ => {}
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        params.reverse();
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn push_back(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let bt = tb.transpose();
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    matmul_into(&g.data, &bt.data, &mut ga.data, g.cols, bt.cols);
                    acc(*a, ga);
                }
                if self.rg(*b) {
                    let at = ta.transpose();
                    let mut gb = Tensor::zeros(tb.rows, tb.cols);
                    matmul_into(&at.data, &g.data, &mut gb.data, at.cols, g.cols);
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                acc(*b, g.col_sums());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = zip_map(g, tb, |gv, bv| gv * bv);
                let gb = zip_map(g, ta, |gv, av| gv * av);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::MulRow(x, gr) => {
                let (tx, tg) = (self.value(*x), self.value(*gr));
                let mut gx = g.clone();
                for row in gx.data.chunks_mut(tx.cols.max(1)) {
                    for (v, s) in row.iter_mut().zip(&tg.data) {
                        *v *= s;
                    }
                }
                acc(*x, gx);
                acc(*gr, zip_map(g, tx, |a, b| a * b).col_sums());
            }
            Op::Scale(x, c) => acc(*x, g.data.iter().map(|v| v * c).collect_tensor(g)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).data[0];
                acc(*x, g.data.iter().map(|v| v * c).collect_tensor(g));
                let dot: f64 = g.data.iter().zip(&self.value(*x).data).map(|(a, b)| a * b).sum();
                acc(*s, Tensor::scalar(dot));
            }
            Op::LeakyRelu(x, slope) => {
                let tx = self.value(*x);
                acc(*x, zip_map(g, tx, |gv, xv| if xv > 0.0 { gv } else { gv * slope }));
            }
            Op::Softplus(x) => {
                let tx = self.value(*x);
                acc(*x, zip_map(g, tx, |gv, xv| gv * sigmoid(xv)));
            }
            Op::Sigmoid(x) => acc(*x, zip_map(g, out, |gv, y| gv * y * (1.0 - y))),
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                acc(*x, Tensor::filled(r, c, g.data[0]));
            }
            Op::RowNorm { x, inv_std } => {
                let cols = out.cols;
                let n = cols as f64;
                let mut gx = Tensor::zeros(out.rows, cols);
                for (row, r) in gx.data.chunks_mut(cols.max(1)).enumerate() {
                    let gr = g.row(row);
                    let xr = out.row(row);
                    let sg: f64 = gr.iter().sum();
                    let sgx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                    let k = inv_std[row] / n;
                    for ((o, gv), xv) in r.iter_mut().zip(gr).zip(xr) {
                        *o = k * (n * gv - sg - xv * sgx);
                    }
                }
                acc(*x, gx);
            }
            Op::ColNorm { x, rows, inv_std } => {
                let cols = out.cols;
                let n_sel = rows.len() as f64;
                let mut sg = vec![0.0; cols];
                let mut sgx = vec![0.0; cols];
                for r in 0..out.rows {
                    for c in 0..cols {
                        let gv = g.data[r * cols + c];
                        sg[c] += gv;
                        sgx[c] += gv * out.data[r * cols + c];
                    }
                }
                let mut gx = Tensor::zeros(out.rows, cols);
                for r in 0..out.rows {
                    for c in 0..cols {
                        gx.data[r * cols + c] = g.data[r * cols + c] * inv_std[c];
                    }
                }
                // Statistics depend only on the selected rows.
                for &r in rows.iter() {
                    for c in 0..cols {
                        let xhat = out.data[r * cols + c];
                        gx.data[r * cols + c] -= inv_std[c] * (sg[c] + xhat * sgx[c]) / n_sel;
                    }
                }
                acc(*x, gx);
            }
            Op::Aggregate {
                h,
                alpha,
                csr,
                normalize,
                denom,
            } => {
                let th = self.value(*h);
                let ta = self.value(*alpha);
                let f = th.cols;
                if self.rg(*h) {
                    let mut gh = Tensor::zeros(th.rows, f);
                    for i in 0..csr.num_nodes() {
                        let d = denom[i];
                        if d == 0.0 {
                            continue;
                        }
                        let gi = g.row(i);
                        for e in csr.in_edges(i) {
                            let w = ta.data[e] / d;
                            let s = csr.sources[e];
                            for (o, gv) in gh.data[s * f..(s + 1) * f].iter_mut().zip(gi) {
                                *o += w * gv;
                            }
                        }
                    }
                    acc(*h, gh);
                }
                if self.rg(*alpha) {
                    let mut ga = Tensor::zeros(ta.rows, 1);
                    for i in 0..csr.num_nodes() {
                        let d = denom[i];
                        if d == 0.0 {
                            continue;
                        }
                        let gi = g.row(i);
                        let go: f64 = if *normalize {
                            gi.iter().zip(out.row(i)).map(|(a, b)| a * b).sum()
                        } else {
                            0.0
                        };
                        for e in csr.in_edges(i) {
                            let gh: f64 = gi.iter().zip(th.row(csr.sources[e])).map(|(a, b)| a * b).sum();
                            ga.data[e] = (gh - go) / d;
                        }
                    }
                    acc(*alpha, ga);
                }
            }
            Op::Bce { z, targets, rows } => {
                let tz = self.value(*z);
                let k = g.data[0] / (rows.len() * tz.cols) as f64;
                let mut gz = Tensor::zeros(tz.rows, tz.cols);
                for &r in rows.iter() {
                    let base = r * tz.cols;
                    for c in 0..tz.cols {
                        gz.data[base + c] = k * (sigmoid(tz.data[base + c]) - targets.data[base + c]);
                    }
                }
                acc(*z, gz);
            }
        }
    }
}

trait CollectTensor {
    fn collect_tensor(self, like: &Tensor) -> Tensor;
}

impl<I: Iterator<Item = f64>> CollectTensor for I {
    fn collect_tensor(self, like: &Tensor) -> Tensor {
        Tensor {
            rows: like.rows,
            cols: like.cols,
            data: self.collect(),
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect_tensor(a)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

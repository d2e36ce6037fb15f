//! Layer zoo built from tape primitives.

use std::sync::Arc;

use rand::Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `y = x·w + b`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// Elementwise `max(x, slope·x)` for `slope ∈ (0, 1)`.
pub fn leaky_relu(tape: &mut Tape, x: Var, slope: f64) -> Result<Var> {
    if !(slope > 0.0 && slope < 1.0) {
        return Err(Error::Config(format!("leaky_relu slope {slope} outside (0, 1)")));
    }
    tape.leaky_relu(x, slope)
}

/// Inverted dropout. In training mode each element is zeroed with
/// probability `p` and survivors are scaled by `1 / (1 − p)`.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
    }
    if !train || p == 0.0 {
        return Ok(x);
    }
    let (rows, cols) = tape.shape(x);
    let keep = 1.0 / (1.0 - p);
    let mask = Tensor::from_fn(rows, cols, |_, _| if rng.gen::<f64>() < p { 0.0 } else { keep });
    let m = tape.constant(mask);
    tape.mul(x, m)
}

/// Per-column running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        RunningStats {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Biased mean and variance observed on one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub enum BnMode<'a> {
    /// Normalize with statistics over these rows (the training nodes).
    Train(&'a Arc<[usize]>),
    Eval(&'a RunningStats),
}

/// Batch normalization followed by the affine `γ ⊙ x̂ + β`.
///
/// In training mode the statistics come from the selected rows and every
/// row is normalized with them; the observed statistics are returned so the
/// caller can fold them into its running averages.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    mode: BnMode<'_>,
    eps: f64,
) -> Result<(Var, Option<BatchStats>)> {
    let (_, cols) = tape.shape(x);
    let (xhat, stats) = match mode {
        BnMode::Train(rows) => {
            if rows.len() < 2 {
                return Err(Error::Config(format!(
                    "batch norm needs at least 2 rows in training mode, got {}",
                    rows.len()
                )));
            }
            let (xhat, mean, var) = tape.col_norm(x, Arc::clone(rows), eps)?;
            (xhat, Some(BatchStats { mean, var }))
        }
        BnMode::Eval(running) => {
            if running.mean.len() != cols {
                return Err(Error::shape("batch_norm", "running stats width"));
            }
            let shift = tape.constant(Tensor::row_vector(running.mean.iter().map(|m| -m).collect()));
            let inv = tape.constant(Tensor::row_vector(
                running.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
            ));
            let centered = tape.add_row(x, shift)?;
            (tape.mul_row(centered, inv)?, None)
        }
    };
    let scaled = tape.mul_row(xhat, gamma)?;
    Ok((tape.add_row(scaled, beta)?, stats))
}

/// Row-wise layer normalization followed by the affine `γ ⊙ x̂ + β`.
pub fn layer_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let xhat = tape.row_norm(x, eps)?;
    let scaled = tape.mul_row(xhat, gamma)?;
    tape.add_row(scaled, beta)
}

/// Learned map from a species descriptor to per-node affine parameters.
///
/// `c = LeakyReLU(d·W_enc + b_enc)`, `γ(d) = 1 + c·U_γ + c_γ`,
/// `β(d) = c·U_β + c_β`. With `U_γ = U_β = 0` and zero offsets this is a
/// plain layer norm with `γ = 1, β = 0`.
#[derive(Clone, Copy, Debug)]
pub struct ClnParams {
    pub enc_w: Var,
    pub enc_b: Var,
    pub gamma_w: Var,
    pub gamma_b: Var,
    pub beta_w: Var,
    pub beta_b: Var,
    pub slope: f64,
}

/// Conditional layer norm: `y_i = γ(d_i) ⊙ norm(x_i) + β(d_i)`.
pub fn conditional_layer_norm(tape: &mut Tape, x: Var, desc: Var, p: &ClnParams, eps: f64) -> Result<Var> {
    if tape.shape(x).0 != tape.shape(desc).0 {
        return Err(Error::shape(
            "conditional_layer_norm",
            format!("x {:?} vs descriptor {:?}", tape.shape(x), tape.shape(desc)),
        ));
    }
    let xhat = tape.row_norm(x, eps)?;
    let enc = linear(tape, desc, p.enc_w, p.enc_b)?;
    let enc = tape.leaky_relu(enc, p.slope)?;
    let gain = linear(tape, enc, p.gamma_w, p.gamma_b)?;
    let gain = tape.add_scalar(gain, 1.0)?;
    let shift = linear(tape, enc, p.beta_w, p.beta_b)?;
    let scaled = tape.mul(xhat, gain)?;
    tape.add(scaled, shift)
}

/// Mean BCE-with-logits over every element of `z`.
pub fn bce_with_logits(tape: &mut Tape, z: Var, y: &Tensor) -> Result<Var> {
    let rows: Arc<[usize]> = (0..y.rows()).collect();
    tape.bce_with_logits(z, Arc::new(y.clone()), rows)
}

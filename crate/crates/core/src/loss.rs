//! Reconstruction, conjugacy and latent one-step losses.
//!
//! Each loss comes twice: recorded on a [`Tape`] in `f32` for training, and as
//! a plain `f64` evaluation over the [`maps`](crate::maps) traits for oracle
//! checks and reports. Reductions are a sum over coordinates and a mean over
//! the batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dynamics::{ambient_field, rk4_step, rk4_step_on_tape};
use crate::error::{Error, Result};
use crate::maps::{Decoder, Encoder, LatentField};
use crate::nn::{decoder_jacobian, LatentModel, MlpVars};

/// Tape handles of the three networks.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: MlpVars,
    pub decoder: MlpVars,
    pub latent: MlpVars,
}

impl ModelVars {
    pub fn register(model: &LatentModel, tape: &mut Tape) -> Self {
        ModelVars {
            encoder: model.encoder.register(tape),
            decoder: model.decoder.register(tape),
            latent: model.latent.register(tape),
        }
    }

    /// Handles in the order of [`LatentModel::tensors`].
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.encoder
            .vars()
            .chain(self.decoder.vars())
            .chain(self.latent.vars())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f32,
    pub conj: f32,
    pub lat1: f32,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_rec", self.rec), ("w_conj", self.conj), ("w_lat1", self.lat1)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::validation(format!("{name} must be a finite value >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

fn rows(tape: &Tape, x: Var) -> Result<usize> {
    match tape.value(x).shape() {
        [b, _] if *b > 0 => Ok(*b),
        other => Err(Error::validation(format!("expected a non-empty [B, d] batch, got {other:?}"))),
    }
}

fn constant_matrix(tape: &mut Tape, rows: usize, cols: usize, data: Vec<f32>) -> Var {
    tape.constant(Tensor::matrix(rows, cols, data).expect("static shape"))
}

fn squared_norm_sum(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d2 = tape.square(d)?;
    tape.sum(d2)
}

/// `Σ_rows |D(E(x)) - x|²` for `x: [B, 2]`.
pub fn rec_sum(tape: &mut Tape, m: &ModelVars, x: Var) -> Result<Var> {
    let phi = m.encoder.forward(tape, x)?;
    let xhat = m.decoder.forward(tape, phi)?;
    squared_norm_sum(tape, xhat, x)
}

/// `f(x̂)` for a `[B, 2]` batch, built from the tape primitives.
pub fn ambient_field_on_tape(tape: &mut Tape, xhat: Var) -> Result<Var> {
    let pick1 = constant_matrix(tape, 1, 2, vec![1.0, 0.0]);
    let pick2 = constant_matrix(tape, 1, 2, vec![0.0, 1.0]);
    let to_first = constant_matrix(tape, 2, 1, vec![-2.0, 0.0]);
    let to_second = constant_matrix(tape, 2, 1, vec![0.0, 2.0]);
    let x1 = tape.affine(pick1, xhat, None)?;
    let x2 = tape.affine(pick2, xhat, None)?;
    let x1sq = tape.square(x1)?;
    let x2sq = tape.square(x2)?;
    let p = tape.mul(x1, x2sq)?;
    let q = tape.mul(x1sq, x2)?;
    let a = tape.affine(to_first, p, None)?;
    let b = tape.affine(to_second, q, None)?;
    tape.add(a, b)
}

/// `Σ_rows |J_D(φ) h(φ) - f(D(φ))|²` with `φ = E(x)`.
pub fn conj_sum(tape: &mut Tape, m: &ModelVars, x: Var) -> Result<Var> {
    let phi = m.encoder.forward(tape, x)?;
    let (xhat, jac) = decoder_jacobian(tape, &m.decoder, phi)?;
    let rate = m.latent.forward(tape, phi)?;
    let widen = constant_matrix(tape, 2, 1, vec![1.0, 1.0]);
    let rate2 = tape.affine(widen, rate, None)?;
    let push = tape.mul(jac, rate2)?;
    let target = ambient_field_on_tape(tape, xhat)?;
    squared_norm_sum(tape, push, target)
}

/// `Σ_pairs (RK4_h(E(x_t)) - E(x_{t+1}))²`.
pub fn lat1_sum(tape: &mut Tape, m: &ModelVars, x_now: Var, x_next: Var, dt: f32) -> Result<Var> {
    let phi = m.encoder.forward(tape, x_now)?;
    let phi_enc = m.encoder.forward(tape, x_next)?;
    let latent = &m.latent;
    let phi_pred = rk4_step_on_tape(tape, |t, p| latent.forward(t, p), phi, dt)?;
    squared_norm_sum(tape, phi_pred, phi_enc)
}

pub fn loss_rec(tape: &mut Tape, m: &ModelVars, x: Var) -> Result<Var> {
    let b = rows(tape, x)?;
    let s = rec_sum(tape, m, x)?;
    tape.scale(s, 1.0 / b as f32)
}

pub fn loss_conj(tape: &mut Tape, m: &ModelVars, x: Var) -> Result<Var> {
    let b = rows(tape, x)?;
    let s = conj_sum(tape, m, x)?;
    tape.scale(s, 1.0 / b as f32)
}

pub fn loss_lat1(tape: &mut Tape, m: &ModelVars, x_now: Var, x_next: Var, dt: f32) -> Result<Var> {
    let b = rows(tape, x_now)?;
    if rows(tape, x_next)? != b {
        return Err(Error::validation("pair batch halves differ in length"));
    }
    let s = lat1_sum(tape, m, x_now, x_next, dt)?;
    tape.scale(s, 1.0 / b as f32)
}

/// `w_rec L_rec + w_conj L_conj + w_lat1 L_lat1`; absent parts count as zero.
pub fn total_loss(
    tape: &mut Tape,
    weights: &LossWeights,
    rec: Option<Var>,
    conj: Option<Var>,
    lat1: Option<Var>,
) -> Result<Var> {
    weights.validate()?;
    let mut acc: Option<Var> = None;
    for (w, part) in [(weights.rec, rec), (weights.conj, conj), (weights.lat1, lat1)] {
        let Some(part) = part else { continue };
        let term = tape.scale(part, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    match acc {
        Some(v) => Ok(v),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

fn non_empty<T>(batch: &[T]) -> Result<()> {
    if batch.is_empty() {
        Err(Error::validation("loss over an empty batch"))
    } else {
        Ok(())
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::non_finite(what))
    }
}

pub fn rec_loss_f64(enc: &impl Encoder, dec: &impl Decoder, points: &[[f64; 2]]) -> Result<f64> {
    non_empty(points)?;
    let total: f64 = points
        .iter()
        .map(|&x| {
            let y = dec.decode(enc.encode(x));
            (y[0] - x[0]).powi(2) + (y[1] - x[1]).powi(2)
        })
        .sum();
    finite(total / points.len() as f64, "reconstruction loss")
}

pub fn conj_loss_f64(
    enc: &impl Encoder,
    dec: &impl Decoder,
    field: &impl LatentField,
    points: &[[f64; 2]],
) -> Result<f64> {
    non_empty(points)?;
    let total: f64 = points
        .iter()
        .map(|&x| {
            let phi = enc.encode(x);
            let xhat = dec.decode(phi);
            let j = dec.jacobian(phi);
            let r = field.rate(phi);
            let f = ambient_field(xhat);
            (j[0] * r - f[0]).powi(2) + (j[1] * r - f[1]).powi(2)
        })
        .sum();
    finite(total / points.len() as f64, "conjugacy loss")
}

pub fn lat1_loss_f64(
    enc: &impl Encoder,
    field: &impl LatentField,
    pairs: &[([f64; 2], [f64; 2])],
    dt: f64,
) -> Result<f64> {
    non_empty(pairs)?;
    let mut total = 0.0;
    for &(now, next) in pairs {
        let pred = rk4_step(|p: f64| field.rate(p), enc.encode(now), dt)?;
        total += (pred - enc.encode(next)).powi(2);
    }
    finite(total / pairs.len() as f64, "latent one-step loss")
}

pub fn weighted_total(weights: &LossWeights, parts: [f64; 3]) -> f64 {
    weights.rec as f64 * parts[0] + weights.conj as f64 * parts[1] + weights.lat1 as f64 * parts[2]
}

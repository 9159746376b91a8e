//! Spherical-Gaussian prior, diagonal-Gaussian posterior and Bernoulli
//! likelihood.
//!
//! Functions taking [`Var`]s record on the tape and are differentiable; the
//! slice-level helpers are plain evaluations used by the metrics.

use std::f64::consts::PI;

use crate::autodiff::{softplus, Tape, Tensor, Var};
use crate::{Error, Result};

/// Lower and upper bound applied to encoder log-variances.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mean and log-variance of a batch of diagonal Gaussians (`batch x D`).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl GaussianParams {
    pub fn new(mean: Tensor, logvar: Tensor) -> Result<Self> {
        if mean.shape() != logvar.shape() || mean.shape().len() != 2 {
            return Err(Error::InvalidInput(format!(
                "mean {:?} and logvar {:?} must be matrices of equal shape",
                mean.shape(),
                logvar.shape()
            )));
        }
        Ok(Self { mean, logvar })
    }

    /// `batch` copies of the standard-normal prior.
    pub fn prior(batch: usize, dim: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[batch, dim]),
            logvar: Tensor::zeros(&[batch, dim]),
        }
    }

    pub fn batch(&self) -> usize {
        self.mean.rows()
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    /// Row `i` as its own single-example parameter set.
    pub fn row(&self, i: usize) -> GaussianParams {
        GaussianParams {
            mean: self.mean.select_rows(&[i]).expect("row in range"),
            logvar: self.logvar.select_rows(&[i]).expect("row in range"),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            mean: self.mean.select_rows(rows)?,
            logvar: self.logvar.select_rows(rows)?,
        })
    }

    pub fn on_tape<'t>(&self, tape: &'t Tape) -> GaussianVars<'t> {
        GaussianVars {
            mean: tape.constant(self.mean.clone()),
            logvar: tape.constant(self.logvar.clone()),
        }
    }
}

/// Tape-tracked counterpart of [`GaussianParams`].
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars<'t> {
    pub mean: Var<'t>,
    pub logvar: Var<'t>,
}

impl GaussianVars<'_> {
    pub fn value(&self) -> GaussianParams {
        GaussianParams {
            mean: self.mean.value(),
            logvar: self.logvar.value(),
        }
    }
}

/// Per-example `KL(q || N(0, I)) = 0.5 * sum_d (mu^2 + sigma^2 - log sigma^2 - 1)`.
pub fn kl_to_prior<'t>(q: &GaussianVars<'t>) -> Result<Var<'t>> {
    let d = q.mean.shape()[1] as f64;
    let sq = q.mean.mul(&q.mean)?;
    let terms = sq.add(&q.logvar.exp()?)?.sub(&q.logvar)?;
    Ok(terms.sum_axis(1)?.shift(-d)?.scale(0.5)?)
}

/// Reparameterized draw `z = mean + exp(logvar / 2) * noise`.
pub fn reparam_sample<'t>(q: &GaussianVars<'t>, noise: &Tensor) -> Result<Var<'t>> {
    let shape = q.mean.shape();
    if noise.shape() != shape.as_slice() {
        return Err(crate::autodiff::AutodiffError::ShapeMismatch {
            op: "reparam_sample",
            left: shape,
            right: noise.shape().to_vec(),
        }
        .into());
    }
    let tape = q.mean.tape();
    let sigma = q.logvar.scale(0.5)?.exp()?;
    let eps = tape.constant(noise.clone());
    Ok(q.mean.add(&sigma.mul(&eps)?)?)
}

fn check_binary(x: &Tensor) -> Result<()> {
    match x.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        None => Ok(()),
        Some(i) => Err(Error::InvalidInput(format!(
            "observation entry {i} is {} but must be 0 or 1",
            x.data()[i]
        ))),
    }
}

/// Per-example `sum_p [x * logit - log(1 + exp(logit))]`.
pub fn bernoulli_log_prob<'t>(logits: &Var<'t>, x: &Tensor) -> Result<Var<'t>> {
    check_binary(x)?;
    let shape = logits.shape();
    if shape.len() != 2 || x.shape() != shape.as_slice() {
        return Err(crate::autodiff::AutodiffError::ShapeMismatch {
            op: "bernoulli_log_prob",
            left: shape,
            right: x.shape().to_vec(),
        }
        .into());
    }
    let xs = logits.tape().constant(x.clone());
    let fit = xs.mul(logits)?.sub(&logits.softplus()?)?;
    Ok(fit.sum_axis(1)?)
}

/// Per-row diagonal-Gaussian log density of `z` under `q`.
pub fn gaussian_log_density<'t>(z: &Var<'t>, q: &GaussianVars<'t>) -> Result<Var<'t>> {
    let d = z.shape().last().copied().unwrap_or(1) as f64;
    let diff = z.sub(&q.mean)?;
    let maha = diff.mul(&diff)?.mul(&q.logvar.neg()?.exp()?)?;
    let inner = maha.add(&q.logvar)?.sum_axis(1)?;
    Ok(inner.shift(d * LN_2PI)?.scale(-0.5)?)
}

/// Analytic KL to the prior for each row of `q`.
pub fn gaussian_kl_to_prior(q: &GaussianParams) -> Vec<f64> {
    let d = q.dim();
    (0..q.batch())
        .map(|i| {
            let (m, lv) = (q.mean.row(i), q.logvar.row(i));
            0.5 * (0..d)
                .map(|j| m[j] * m[j] + lv[j].exp() - lv[j] - 1.0)
                .sum::<f64>()
        })
        .collect()
}

/// `log N(z; mean, diag(exp(logvar)))`.
pub fn log_density_diag(z: &[f64], mean: &[f64], logvar: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..z.len() {
        let d = z[j] - mean[j];
        acc += LN_2PI + logvar[j] + d * d * (-logvar[j]).exp();
    }
    -0.5 * acc
}

pub fn log_standard_normal(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| LN_2PI + v * v).sum::<f64>()
}

/// Bernoulli log-likelihood of one binary row given its logits.
pub fn bernoulli_log_prob_row(logits: &[f64], x: &[f64]) -> f64 {
    logits.iter().zip(x).map(|(&l, &v)| v * l - softplus(l)).sum()
}

/// `-0.5 * ln(2 pi)`: the log density of a standard normal at its mode.
pub fn log_normal_mode() -> f64 {
    -0.5 * (2.0 * PI).ln()
}

//! ELBO estimation, Adam, KL annealing and per-example variational refinement.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::data::{Checkpoint, Dataset};
use crate::distributions::{
    bernoulli_log_prob, kl_to_prior, reparam_sample, GaussianParams, GaussianVars, LOGVAR_MAX, LOGVAR_MIN,
};
use crate::models::{BoundVae, ModelConfig, Track, Vae};
use crate::rng;
use crate::{Error, NumericAbort, Result};

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    100
}
fn default_epochs() -> usize {
    10
}
fn default_one() -> usize {
    1
}
fn default_step() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epochs over which the KL weight ramps from 0 to 1; 0 disables annealing.
    #[serde(default)]
    pub kl_anneal_epochs: usize,
    #[serde(default = "default_one")]
    pub elbo_samples: usize,
    /// Refinement steps per example during training; 0 trains a plain VAE.
    #[serde(default)]
    pub refine_steps: usize,
    #[serde(default = "default_step")]
    pub refine_step_size: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            kl_anneal_epochs: 0,
            elbo_samples: 1,
            refine_steps: 0,
            refine_step_size: default_step(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.elbo_samples == 0 {
            return Err(Error::Config("batch_size and elbo_samples must be positive".into()));
        }
        if !(self.refine_step_size > 0.0 && self.refine_step_size.is_finite()) {
            return Err(Error::Config(format!(
                "refine_step_size must be positive, got {}",
                self.refine_step_size
            )));
        }
        Ok(())
    }
}

/// KL weight at optimizer step `step` (0-based).
pub fn kl_weight(step: usize, anneal_epochs: usize, steps_per_epoch: usize) -> f64 {
    if anneal_epochs == 0 {
        return 1.0;
    }
    let ramp = (anneal_epochs * steps_per_epoch.max(1)) as f64;
    (step as f64 / ramp).min(1.0)
}

pub fn draw_noise(rng: &mut impl Rng, rows: usize, dim: usize) -> Tensor {
    Tensor::new(vec![rows, dim], rng::standard_normals(rng, rows * dim)).expect("positive extents")
}

/// Batch means on the tape; `objective = recon - kl_weight * kl`.
pub struct ElboVars<'t> {
    pub objective: Var<'t>,
    pub recon: Var<'t>,
    pub kl: Var<'t>,
    pub posterior: GaussianVars<'t>,
}

/// ELBO terms for batch `x` with one reparameterized draw per noise tensor.
pub fn elbo_on_tape<'t>(model: &BoundVae<'t>, x: &Tensor, noise: &[Tensor], kl_weight: f64) -> Result<ElboVars<'t>> {
    if !(0.0..=1.0).contains(&kl_weight) {
        return Err(Error::InvalidInput(format!("kl_weight {kl_weight} outside [0, 1]")));
    }
    if noise.is_empty() {
        return Err(Error::InvalidInput("at least one noise draw is required".into()));
    }
    let tape = model.vars()[0].tape();
    let xv = tape.constant(x.clone());
    let q = model.encode(&xv)?;
    let recon = reconstruction(model, &q, x, noise)?;
    let kl = kl_to_prior(&q)?.mean()?;
    let objective = if kl_weight == 0.0 {
        recon
    } else {
        recon.sub(&kl.scale(kl_weight)?)?
    };
    Ok(ElboVars {
        objective,
        recon,
        kl,
        posterior: q,
    })
}

/// Mean over examples and draws of `log p(x | z)`, `z = mean + sigma * noise`.
fn reconstruction<'t>(model: &BoundVae<'t>, q: &GaussianVars<'t>, x: &Tensor, noise: &[Tensor]) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for eps in noise {
        let z = reparam_sample(q, eps)?;
        let ll = bernoulli_log_prob(&model.decode(&z)?, x)?.mean()?;
        total = Some(match total {
            None => ll,
            Some(t) => t.add(&ll)?,
        });
    }
    let total = total.expect("non-empty noise");
    if noise.len() == 1 {
        Ok(total)
    } else {
        Ok(total.scale(1.0 / noise.len() as f64)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboEstimate {
    pub objective: f64,
    /// Always computed with KL weight 1.
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Batch-mean ELBO of `x` with `n_samples` draws from `rng`.
pub fn elbo_batch(x: &Tensor, vae: &Vae, kl_weight: f64, n_samples: usize, rng: &mut impl Rng) -> Result<ElboEstimate> {
    let d = vae.config().latent_dim;
    let noise: Vec<Tensor> = (0..n_samples.max(1)).map(|_| draw_noise(rng, x.rows(), d)).collect();
    let tape = Tape::new();
    let bound = vae.bind(&tape, Track::Nothing);
    let e = elbo_on_tape(&bound, x, &noise, kl_weight)?;
    let (recon, kl) = (e.recon.value().item(), e.kl.value().item());
    Ok(ElboEstimate {
        objective: e.objective.value().item(),
        elbo: recon - kl,
        recon,
        kl,
    })
}

/// First and second moment estimates for Adam.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam step that decreases the loss whose gradient is `grads`.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidInput(format!(
            "adam: {} parameters, {} gradients, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            }
            .into());
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// `log p(x | z)` for one fixed observation, as a function of latent rows.
pub trait LatentLikelihood {
    fn latent_dim(&self) -> usize;
    /// Per-row log-likelihood (shape `[rows]`) of the `rows x D` latents `z`.
    fn log_likelihood<'t>(&self, z: &Var<'t>) -> Result<Var<'t>>;
}

/// Bernoulli likelihood of one binary image under a frozen decoder.
pub struct DecoderLikelihood<'a> {
    vae: &'a Vae,
    x: Tensor,
}

impl<'a> DecoderLikelihood<'a> {
    pub fn new(vae: &'a Vae, x: &[f64]) -> Result<Self> {
        Ok(Self {
            vae,
            x: Tensor::matrix(1, x.len(), x.to_vec())?,
        })
    }
}

impl LatentLikelihood for DecoderLikelihood<'_> {
    fn latent_dim(&self) -> usize {
        self.vae.config().latent_dim
    }

    fn log_likelihood<'t>(&self, z: &Var<'t>) -> Result<Var<'t>> {
        let tape = z.tape();
        let rows = z.shape()[0];
        let logits = self.vae.bind(tape, Track::Nothing).decode(z)?;
        let tiled = self.x.select_rows(&vec![0; rows])?;
        bernoulli_log_prob(&logits, &tiled)
    }
}

/// Noise design for [`refine_variational`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RefineNoise {
    /// `m` standard-normal draws, fixed for the whole refinement.
    Sampled(usize),
    /// The `2D` points `+-sqrt(D) e_d`; exact for quadratic log-likelihoods.
    SigmaPoints,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefineConfig {
    pub steps: usize,
    pub step_size: f64,
    pub noise: RefineNoise,
}

pub const MAX_HALVINGS: usize = 30;

#[derive(Clone, Debug)]
pub struct Refinement {
    /// `1 x D`.
    pub params: GaussianParams,
    /// ELBO before the first step and after each step.
    pub trace: Vec<f64>,
}

fn noise_rows(noise: RefineNoise, d: usize, rng: &mut impl Rng) -> Tensor {
    match noise {
        RefineNoise::Sampled(m) => draw_noise(rng, m.max(1), d),
        RefineNoise::SigmaPoints => {
            let r = (d as f64).sqrt();
            let mut t = Tensor::zeros(&[2 * d, d]);
            for j in 0..d {
                t.data_mut()[2 * j * d + j] = r;
                t.data_mut()[(2 * j + 1) * d + j] = -r;
            }
            t
        }
    }
}

/// Per-example ELBO at `(mean, logvar)` under fixed noise rows; the gradient
/// is returned when `grad` is set.
fn refine_objective(
    lik: &impl LatentLikelihood,
    mean: &[f64],
    logvar: &[f64],
    noise: &Tensor,
    grad: bool,
) -> Result<(f64, Option<(Vec<f64>, Vec<f64>)>)> {
    let tape = Tape::new();
    let leaf = |v: &[f64]| {
        let t = Tensor::vector(v.to_vec()).expect("non-empty");
        if grad {
            tape.param(t)
        } else {
            tape.constant(t)
        }
    };
    let (m, lv) = (leaf(mean), leaf(logvar));
    let eps = tape.constant(noise.clone());
    let z = eps.mul(&lv.scale(0.5)?.exp()?)?.add(&m)?;
    let recon = lik.log_likelihood(&z)?.mean()?;
    let d = mean.len() as f64;
    let kl = m.mul(&m)?.add(&lv.exp()?)?.sub(&lv)?.sum()?.shift(-d)?.scale(0.5)?;
    let elbo = recon.sub(&kl)?;
    let value = elbo.value().item();
    if !grad {
        return Ok((value, None));
    }
    let g = tape.backward(elbo)?;
    Ok((value, Some((g.wrt(m).into_data(), g.wrt(lv).into_data()))))
}

fn finite_or_none<T>(r: Result<(f64, T)>) -> Result<Option<(f64, T)>> {
    match r {
        Ok((v, t)) if v.is_finite() => Ok(Some((v, t))),
        Ok(_) | Err(Error::Autodiff(AutodiffError::NonFinite { .. })) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Gradient ascent on one example's ELBO over `(mean, logvar)` with the
/// likelihood frozen. Every step restarts at `step_size` and halves it until
/// the ELBO under the fixed noise set strictly increases; a step that never
/// succeeds leaves the parameters in place. Returns early with the last
/// finite iterate if the ELBO becomes non-finite.
pub fn refine_variational(
    lik: &impl LatentLikelihood,
    init: &GaussianParams,
    cfg: &RefineConfig,
    rng: &mut impl Rng,
) -> Result<Refinement> {
    if init.batch() != 1 || init.dim() != lik.latent_dim() {
        return Err(Error::InvalidInput(format!(
            "refinement needs one example of dimension {}, got {} x {}",
            lik.latent_dim(),
            init.batch(),
            init.dim()
        )));
    }
    if cfg.steps == 0 {
        return Err(Error::InvalidInput("refinement needs at least one step".into()));
    }
    let d = init.dim();
    let noise = noise_rows(cfg.noise, d, rng);
    let mut mean = init.mean.data().to_vec();
    let mut logvar = init.logvar.data().to_vec();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let Some((mut current, mut grad)) = finite_or_none(refine_objective(lik, &mean, &logvar, &noise, true))? else {
        return Ok(Refinement { params: init.clone(), trace });
    };
    trace.push(current);
    for _ in 0..cfg.steps {
        let (gm, gl) = grad.clone().expect("gradient requested");
        let mut eta = cfg.step_size;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cm: Vec<f64> = mean.iter().zip(&gm).map(|(a, g)| a + eta * g).collect();
            let cl: Vec<f64> = logvar
                .iter()
                .zip(&gl)
                .map(|(a, g)| (a + eta * g).clamp(LOGVAR_MIN, LOGVAR_MAX))
                .collect();
            if let Some((v, g)) = finite_or_none(refine_objective(lik, &cm, &cl, &noise, true))? {
                if v > current {
                    accepted = Some((cm, cl, v, g));
                    break;
                }
            }
            eta *= 0.5;
        }
        if let Some((cm, cl, v, g)) = accepted {
            mean = cm;
            logvar = cl;
            current = v;
            grad = g;
        }
        trace.push(current);
    }
    Ok(Refinement {
        params: GaussianParams::new(Tensor::matrix(1, d, mean)?, Tensor::matrix(1, d, logvar)?)?,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub kl_weight: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Seconds per epoch; kept apart from the records so they stay reproducible.
    pub wall_clock: Vec<f64>,
}

fn abort(vae: &Vae, last_good: &Checkpoint, epoch: usize, batch: usize, cause: String) -> Error {
    Error::NumericAbort(Box::new(NumericAbort {
        epoch,
        batch,
        cause,
        param_norms: vae.params().norms(),
        last_good: last_good.clone(),
    }))
}

/// Trains from the seeded initialization.
pub fn train(data: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<(Checkpoint, TrainHistory)> {
    train_with(data, model, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    data: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainHistory)> {
    cfg.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if data.dim() != model.data_dim {
        return Err(Error::Config(format!(
            "model expects {} pixels but the data has {}",
            model.data_dim,
            data.dim()
        )));
    }
    if !data.is_binary() {
        return Err(Error::InvalidInput("training data must be binarized".into()));
    }
    let mut vae = Vae::new(model.clone(), cfg.seed)?;
    let mut adam = AdamState::new(vae.params().tensors());
    let mut shuffle_rng = rng::substream(cfg.seed, rng::SHUFFLE);
    let mut noise_rng = rng::substream(cfg.seed, rng::ELBO_NOISE);
    let snapshot = |vae: &Vae, epochs| Checkpoint {
        model: model.clone(),
        train: cfg.clone(),
        params: vae.params().clone(),
        seed: cfg.seed,
        epochs,
    };
    let mut last_good = snapshot(&vae, 0);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut elbo_sum, mut recon_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        let mut weight = 1.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            weight = kl_weight(step, cfg.kl_anneal_epochs, steps_per_epoch);
            let x = data.batch(idx)?;
            let result = if cfg.refine_steps == 0 {
                plain_step(&vae, &x, cfg, weight, &mut noise_rng)
            } else {
                refined_step(&vae, &x, cfg, weight, &mut noise_rng)
            };
            let (est, grads) = match result {
                Ok(v) => v,
                Err(Error::Autodiff(e @ AutodiffError::NonFinite { .. })) => {
                    return Err(abort(&vae, &last_good, epoch, batch, e.to_string()))
                }
                Err(e) => return Err(e),
            };
            if !est.objective.is_finite() {
                return Err(abort(&vae, &last_good, epoch, batch, "non-finite objective".into()));
            }
            adam_step(vae.params_mut().tensors_mut(), &grads, &mut adam, cfg.learning_rate)?;
            if !vae.params().is_finite() {
                return Err(abort(&vae, &last_good, epoch, batch, "non-finite parameter after update".into()));
            }
            let b = idx.len() as f64;
            elbo_sum += est.elbo * b;
            recon_sum += est.recon * b;
            kl_sum += est.kl * b;
            step += 1;
        }
        let n = data.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            elbo: elbo_sum / n,
            recon: recon_sum / n,
            kl: kl_sum / n,
            kl_weight: weight,
        };
        on_epoch(&record);
        history.records.push(record);
        history.wall_clock.push(started.elapsed().as_secs_f64());
        last_good = snapshot(&vae, epoch + 1);
    }
    Ok((last_good, history))
}

fn estimate(e: &ElboVars) -> ElboEstimate {
    let (recon, kl) = (e.recon.value().item(), e.kl.value().item());
    ElboEstimate {
        objective: e.objective.value().item(),
        elbo: recon - kl,
        recon,
        kl,
    }
}

/// Gradients of `-objective` for every parameter.
fn plain_step(
    vae: &Vae,
    x: &Tensor,
    cfg: &TrainConfig,
    weight: f64,
    rng: &mut impl Rng,
) -> Result<(ElboEstimate, Vec<Tensor>)> {
    let d = vae.config().latent_dim;
    let noise: Vec<Tensor> = (0..cfg.elbo_samples).map(|_| draw_noise(rng, x.rows(), d)).collect();
    let tape = Tape::new();
    let bound = vae.bind(&tape, Track::All);
    let e = elbo_on_tape(&bound, x, &noise, weight)?;
    let g = tape.backward(e.objective.neg()?)?;
    Ok((estimate(&e), bound.vars().iter().map(|&v| g.wrt(v)).collect()))
}

/// Encoder gradient from the ordinary objective with the decoder held fixed;
/// decoder gradient from the reconstruction at the refined posteriors.
fn refined_step(
    vae: &Vae,
    x: &Tensor,
    cfg: &TrainConfig,
    weight: f64,
    rng: &mut impl Rng,
) -> Result<(ElboEstimate, Vec<Tensor>)> {
    let d = vae.config().latent_dim;
    let noise: Vec<Tensor> = (0..cfg.elbo_samples).map(|_| draw_noise(rng, x.rows(), d)).collect();
    let tape = Tape::new();
    let enc = vae.bind(&tape, Track::Encoder);
    let e = elbo_on_tape(&enc, x, &noise, weight)?;

    let q0 = e.posterior.value();
    let refine = RefineConfig {
        steps: cfg.refine_steps,
        step_size: cfg.refine_step_size,
        noise: RefineNoise::Sampled(cfg.elbo_samples),
    };
    let mut means = Vec::with_capacity(x.numel() / x.cols() * d);
    let mut logvars = Vec::with_capacity(means.capacity());
    for i in 0..x.rows() {
        let lik = DecoderLikelihood::new(vae, x.row(i))?;
        let r = refine_variational(&lik, &q0.row(i), &refine, rng)?;
        means.extend_from_slice(r.params.mean.data());
        logvars.extend_from_slice(r.params.logvar.data());
    }
    let refined = GaussianParams::new(Tensor::matrix(x.rows(), d, means)?, Tensor::matrix(x.rows(), d, logvars)?)?;

    let dec = vae.bind(&tape, Track::Decoder);
    let recon = reconstruction(&dec, &refined.on_tape(&tape), x, &noise)?;
    let g = tape.backward(e.objective.add(&recon)?.neg()?)?;
    let grads = vae
        .params()
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| {
            if name.starts_with("encoder.") {
                g.wrt(enc.vars()[i])
            } else {
                g.wrt(dec.vars()[i])
            }
        })
        .collect();
    Ok((estimate(&e), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_grid;
    use crate::distributions::GaussianParams;
    use crate::models::{Activation, ParamSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(skip: bool) -> ModelConfig {
        ModelConfig {
            latent_dim: 2,
            data_dim: 6,
            encoder_widths: vec![4],
            decoder_widths: vec![4, 4],
            skip_enabled: skip,
            activation: Activation::Tanh,
        }
    }

    fn binary(rng: &mut ChaCha8Rng, b: usize, p: usize) -> Tensor {
        Tensor::matrix(b, p, (0..b * p).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect()).unwrap()
    }

    #[test]
    fn zero_kl_weight_objective_is_recon() {
        let vae = Vae::new(tiny(true), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = binary(&mut rng, 5, 6);
        let e = elbo_batch(&x, &vae, 0.0, 1, &mut rng).unwrap();
        assert_eq!(e.objective, e.recon);
        assert!(e.elbo <= 0.0);
        assert!(elbo_batch(&x, &vae, 1.5, 1, &mut rng).is_err());
    }

    #[test]
    fn prior_posterior_and_zero_logits() {
        let cfg = ModelConfig {
            latent_dim: 3,
            data_dim: 784,
            encoder_widths: vec![8],
            decoder_widths: vec![8],
            skip_enabled: false,
            activation: Activation::Relu,
        };
        let mut vae = Vae::new(cfg, 0).unwrap();
        for t in vae.params_mut().tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = binary(&mut rng, 4, 784);
        let e = elbo_batch(&x, &vae, 1.0, 1, &mut rng).unwrap();
        assert!((e.elbo + 784.0 * 2f64.ln()).abs() < 1e-9);
        assert!((e.elbo + 543.427).abs() < 1e-3);
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap()];
        let mut s = AdamState::new(&p);
        let before = p.clone();
        adam_step(&mut p, &[Tensor::zeros(&[3])], &mut s, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);

        let mut p = vec![Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap()];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::vector(vec![3.0, -0.2, 1e-3]).unwrap()], &mut s, 0.01).unwrap();
        let expected = [-0.01, 0.01, -0.01];
        for (a, b) in p[0].data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], &mut s, 0.01).is_err());
    }

    #[test]
    fn kl_schedule() {
        assert_eq!(kl_weight(0, 0, 10), 1.0);
        assert_eq!(kl_weight(0, 2, 10), 0.0);
        assert_eq!(kl_weight(10, 2, 10), 0.5);
        assert_eq!(kl_weight(20, 2, 10), 1.0);
        assert_eq!(kl_weight(500, 2, 10), 1.0);
    }

    fn objective_and_grads(vae: &Vae, x: &Tensor, noise: &[Tensor]) -> (f64, Vec<Tensor>) {
        let tape = Tape::new();
        let bound = vae.bind(&tape, Track::All);
        let e = elbo_on_tape(&bound, x, noise, 1.0).unwrap();
        let g = tape.backward(e.objective).unwrap();
        (e.objective.value().item(), bound.vars().iter().map(|&v| g.wrt(v)).collect())
    }

    fn objective(vae: &Vae, x: &Tensor, noise: &[Tensor]) -> f64 {
        let tape = Tape::new();
        let bound = vae.bind(&tape, Track::Nothing);
        elbo_on_tape(&bound, x, noise, 1.0).unwrap().objective.value().item()
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        for skip in [false, true] {
            let mut vae = Vae::new(tiny(skip), 11).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            for t in vae.params_mut().tensors_mut() {
                for v in t.data_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
            let x = binary(&mut rng, 5, 6);
            let noise = vec![draw_noise(&mut rng, 5, 2)];
            let (_, grads) = objective_and_grads(&vae, &x, &noise);
            let h = 1e-5;
            for (pi, g) in grads.iter().enumerate() {
                for k in 0..g.numel() {
                    let mut plus = vae.clone();
                    plus.params_mut().tensors_mut()[pi].data_mut()[k] += h;
                    let mut minus = vae.clone();
                    minus.params_mut().tensors_mut()[pi].data_mut()[k] -= h;
                    let fd = (objective(&plus, &x, &noise) - objective(&minus, &x, &noise)) / (2.0 * h);
                    let an = g.data()[k];
                    let err = (fd - an).abs();
                    assert!(err <= 1e-8 || err <= 1e-5 * an.abs().max(fd.abs()), "param {pi}[{k}]: {an} vs {fd}");
                }
            }
        }
    }

    struct QuadraticLikelihood {
        target: Vec<f64>,
    }

    impl LatentLikelihood for QuadraticLikelihood {
        fn latent_dim(&self) -> usize {
            self.target.len()
        }
        fn log_likelihood<'t>(&self, z: &Var<'t>) -> Result<Var<'t>> {
            let t = z.tape().constant(Tensor::vector(self.target.clone()).unwrap());
            let r = z.sub(&t)?;
            Ok(r.mul(&r)?.sum_axis(1)?.scale(-0.5)?)
        }
    }

    #[test]
    fn refinement_zero_gradient_is_identity() {
        // log p(x|z) = -|z - t|^2 / 2 with t = 0: the optimum is mean 0,
        // variance 1/2 under sigma points.
        let lik = QuadraticLikelihood { target: vec![0.0, 0.0] };
        let init = GaussianParams::new(
            Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(),
            Tensor::matrix(1, 2, vec![0.5f64.ln(), 0.5f64.ln()]).unwrap(),
        )
        .unwrap();
        let cfg = RefineConfig { steps: 1, step_size: 1.0, noise: RefineNoise::SigmaPoints };
        let r = refine_variational(&lik, &init, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (a, b) in r.params.mean.data().iter().zip(init.mean.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in r.params.logvar.data().iter().zip(init.logvar.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn refinement_trace_is_monotone_and_improves() {
        let vae = Vae::new(tiny(true), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for e in 0..10 {
            let x = binary(&mut rng, 1, 6);
            let lik = DecoderLikelihood::new(&vae, x.row(0)).unwrap();
            let init = GaussianParams::new(draw_noise(&mut rng, 1, 2), draw_noise(&mut rng, 1, 2)).unwrap();
            let cfg = RefineConfig { steps: 10, step_size: 1.0, noise: RefineNoise::Sampled(4) };
            let r = refine_variational(&lik, &init, &cfg, &mut rng).unwrap();
            assert_eq!(r.trace.len(), 11);
            assert!(r.trace.windows(2).all(|w| w[1] >= w[0]), "example {e}: {:?}", r.trace);
            assert!(r.trace[10] >= r.trace[0] - 1e-9);
        }
    }

    fn small_run(epochs: usize, refine_steps: usize) -> (Checkpoint, TrainHistory) {
        let data = synthetic_grid(200, 16, 1).unwrap();
        let model = ModelConfig {
            latent_dim: 2,
            data_dim: 16,
            encoder_widths: vec![16],
            decoder_widths: vec![16],
            skip_enabled: true,
            activation: Activation::Relu,
        };
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 20,
            epochs,
            refine_steps,
            seed: 3,
            ..TrainConfig::default()
        };
        train(&data, &model, &cfg).unwrap()
    }

    #[test]
    fn training_improves_and_is_deterministic() {
        let (_, h) = small_run(50, 0);
        assert_eq!(h.records.len(), 50);
        assert!(h.records[49].elbo >= h.records[0].elbo);
        let (_, again) = small_run(50, 0);
        assert_eq!(h.records, again.records);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (c, h) = small_run(0, 0);
        assert!(h.records.is_empty());
        let init: ParamSet = crate::models::init_params(&c.model, 3).unwrap();
        assert_eq!(c.params, init);
        assert_eq!(c.epochs, 0);
    }

    #[test]
    fn refined_training_runs() {
        let (c, h) = small_run(3, 2);
        assert_eq!(h.records.len(), 3);
        assert!(c.params.is_finite());
    }

    #[test]
    fn numeric_abort_carries_last_good_checkpoint() {
        let data = synthetic_grid(40, 8, 1).unwrap();
        let model = ModelConfig {
            latent_dim: 2,
            data_dim: 8,
            encoder_widths: vec![4],
            decoder_widths: vec![4],
            skip_enabled: false,
            activation: Activation::Relu,
        };
        let cfg = TrainConfig { learning_rate: 1e300, batch_size: 10, epochs: 3, ..TrainConfig::default() };
        match train(&data, &model, &cfg) {
            Err(Error::NumericAbort(a)) => {
                assert_eq!(a.last_good.params.len(), a.param_norms.len());
                assert!(a.to_string().contains("epoch"));
            }
            other => panic!("expected abort, got {:?}", other.map(|_| ())),
        }
    }
}

//! Latent-collapse diagnostics: KL term, mutual information, active units,
//! importance-sampled log-likelihood and a linear probe on posterior means.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::Dataset;
use crate::distributions::{bernoulli_log_prob_row, gaussian_kl_to_prior, log_density_diag, log_standard_normal, GaussianParams};
use crate::models::{Track, Vae};
use crate::rng;
use crate::training::{adam_step, draw_noise, elbo_on_tape, AdamState};
use crate::{Error, Result};

/// Rows encoded per tape when sweeping a dataset.
const EVAL_BATCH: usize = 500;

/// Posterior parameters for every example.
pub fn encode_dataset(vae: &Vae, data: &Dataset) -> Result<GaussianParams> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let d = vae.config().latent_dim;
    let mut mean = Vec::with_capacity(data.len() * d);
    let mut logvar = Vec::with_capacity(data.len() * d);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let tape = Tape::new();
        let x = tape.constant(data.batch(chunk)?);
        let q = vae.bind(&tape, Track::Nothing).encode(&x)?;
        mean.extend_from_slice(q.mean.value().data());
        logvar.extend_from_slice(q.logvar.value().data());
    }
    GaussianParams::new(Tensor::matrix(data.len(), d, mean)?, Tensor::matrix(data.len(), d, logvar)?)
}

/// Mean analytic KL to the prior.
pub fn kl_term(posteriors: &GaussianParams) -> f64 {
    let kl = gaussian_kl_to_prior(posteriors);
    kl.iter().sum::<f64>() / kl.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub mi: f64,
    pub stderr: f64,
    pub n_points: usize,
    pub samples_per_point: usize,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Mutual information between `x` and `z` under the encoder, estimated on a
/// random subset of `n_points` posteriors.
///
/// For each of the `S * N` draws `z ~ q(z | x_i)` the aggregated posterior is
/// approximated by the average of `q(z | x_j)` over the same `N` points, so
/// that
///
/// ```text
/// I = ln N + mean_s [ log q(z_s | x_own) - logsumexp_j log q(z_s | x_j) ]
/// ```
///
/// Each bracket is at most zero, which caps the estimate at `ln N`.
pub fn mutual_information(
    posteriors: &GaussianParams,
    n_points: usize,
    samples_per_point: usize,
    rng: &mut impl Rng,
) -> Result<MiEstimate> {
    if n_points < 2 || samples_per_point == 0 {
        return Err(Error::InvalidInput(format!(
            "mutual information needs N >= 2 and S >= 1 (got N = {n_points}, S = {samples_per_point})"
        )));
    }
    if n_points > posteriors.batch() {
        return Err(Error::InvalidInput(format!(
            "N = {n_points} exceeds the {} available examples",
            posteriors.batch()
        )));
    }
    let d = posteriors.dim();
    let mut chosen = index::sample(rng, posteriors.batch(), n_points).into_vec();
    chosen.sort_unstable();
    let q = posteriors.select_rows(&chosen)?;
    let inv_var: Vec<f64> = q.logvar.data().iter().map(|lv| (-lv).exp()).collect();
    let log_norm: Vec<f64> = (0..n_points)
        .map(|j| -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + q.logvar.row(j).iter().sum::<f64>()))
        .collect();

    let ln_n = (n_points as f64).ln();
    let mut diffs = Vec::with_capacity(n_points * samples_per_point);
    let mut dens = vec![0.0; n_points];
    let mut z = vec![0.0; d];
    for i in 0..n_points {
        let (mi, li) = (q.mean.row(i), q.logvar.row(i));
        for _ in 0..samples_per_point {
            let eps = rng::standard_normals(rng, d);
            for k in 0..d {
                z[k] = mi[k] + (0.5 * li[k]).exp() * eps[k];
            }
            for (j, out) in dens.iter_mut().enumerate() {
                let (mj, vj) = (q.mean.row(j), &inv_var[j * d..(j + 1) * d]);
                let mut acc = 0.0;
                for k in 0..d {
                    let r = z[k] - mj[k];
                    acc += r * r * vj[k];
                }
                *out = log_norm[j] - 0.5 * acc;
            }
            // Both parts are >= 0 in floating point as well, so the
            // bracket never exceeds zero.
            let m = dens.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let spread = dens.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            diffs.push(ln_n - ((m - dens[i]) + spread));
        }
    }
    let (mean, sd) = mean_sd(&diffs);
    Ok(MiEstimate {
        mi: mean.min(ln_n),
        stderr: sd / (diffs.len() as f64).sqrt(),
        n_points,
        samples_per_point,
    })
}

/// Mean and unbiased standard deviation (zero for a single value).
fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const AU_THRESHOLD: f64 = 0.01;

/// Dimensions whose posterior mean has across-data variance at least
/// `threshold`, plus the per-dimension variances (unbiased).
pub fn active_units(posteriors: &GaussianParams, threshold: f64) -> Result<(usize, Vec<f64>)> {
    let n = posteriors.batch();
    if n < 2 {
        return Err(Error::InvalidInput(format!("active units need at least 2 examples, got {n}")));
    }
    let d = posteriors.dim();
    let m = &posteriors.mean;
    let variances: Vec<f64> = (0..d)
        .map(|k| {
            let col: Vec<f64> = (0..n).map(|i| m.row(i)[k]).collect();
            let (_, sd) = mean_sd(&col);
            sd * sd
        })
        .collect();
    let count = variances.iter().filter(|&&v| v >= threshold).count();
    Ok((count, variances))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IsEstimate {
    /// Mean over examples of the log marginal-likelihood estimate.
    pub mean: f64,
    pub stderr: f64,
    pub per_example: Vec<f64>,
}

/// Noise for example `i`: its own stream, so the first draws do not depend
/// on how many are requested.
pub fn example_stream(seed: u64, i: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(i as u64);
    r
}

/// `log (1/S) sum_s p(x, z_s) / q(z_s | x)` with `z_s ~ q(z | x)`, per example.
pub fn importance_log_likelihood(vae: &Vae, data: &Dataset, samples: usize, seed: u64) -> Result<IsEstimate> {
    if samples == 0 {
        return Err(Error::InvalidInput("importance sampling needs S >= 1".into()));
    }
    let q = encode_dataset(vae, data)?;
    let d = vae.config().latent_dim;
    let chunk = (4 * EVAL_BATCH / samples).max(1);
    let mut per_example = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for rows in idx.chunks(chunk) {
        let mut z = Vec::with_capacity(rows.len() * samples * d);
        let mut log_prior_minus_q = Vec::with_capacity(rows.len() * samples);
        for &i in rows {
            let mut r = example_stream(seed, i);
            let (m, lv) = (q.mean.row(i), q.logvar.row(i));
            for _ in 0..samples {
                let eps = rng::standard_normals(&mut r, d);
                let zs: Vec<f64> = (0..d).map(|k| m[k] + (0.5 * lv[k]).exp() * eps[k]).collect();
                log_prior_minus_q.push(log_standard_normal(&zs) - log_density_diag(&zs, m, lv));
                z.extend(zs);
            }
        }
        let tape = Tape::new();
        let zt = tape.constant(Tensor::matrix(rows.len() * samples, d, z)?);
        let logits = vae.bind(&tape, Track::Nothing).decode(&zt)?.value();
        for (a, &i) in rows.iter().enumerate() {
            let x = data.images().row(i);
            let terms: Vec<f64> = (0..samples)
                .map(|s| {
                    let r = a * samples + s;
                    bernoulli_log_prob_row(logits.row(r), x) + log_prior_minus_q[r]
                })
                .collect();
            per_example.push(log_sum_exp(&terms) - (samples as f64).ln());
        }
    }
    let (mean, sd) = mean_sd(&per_example);
    Ok(IsEstimate {
        mean,
        stderr: sd / (per_example.len() as f64).sqrt(),
        per_example,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeldOutElbo {
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub stderr: f64,
    pub per_example: Vec<f64>,
}

/// Per-example ELBO (analytic KL, `samples` reconstruction draws).
pub fn heldout_elbo(vae: &Vae, data: &Dataset, samples: usize, rng: &mut impl Rng) -> Result<HeldOutElbo> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let d = vae.config().latent_dim;
    let mut per_example = Vec::with_capacity(data.len());
    let (mut recon_sum, mut kl_sum) = (0.0, 0.0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for rows in idx.chunks(EVAL_BATCH) {
        let x = data.batch(rows)?;
        let noise: Vec<Tensor> = (0..samples.max(1)).map(|_| draw_noise(rng, rows.len(), d)).collect();
        let tape = Tape::new();
        let bound = vae.bind(&tape, Track::Nothing);
        let e = elbo_on_tape(&bound, &x, &noise, 1.0)?;
        let q = e.posterior.value();
        let kl = gaussian_kl_to_prior(&q);
        let mut recon = vec![0.0; rows.len()];
        for eps in &noise {
            let z = crate::distributions::reparam_sample(&e.posterior, eps)?;
            let logits = bound.decode(&z)?.value();
            for (a, r) in recon.iter_mut().enumerate() {
                *r += bernoulli_log_prob_row(logits.row(a), x.row(a)) / noise.len() as f64;
            }
        }
        for a in 0..rows.len() {
            per_example.push(recon[a] - kl[a]);
            recon_sum += recon[a];
            kl_sum += kl[a];
        }
    }
    let n = data.len() as f64;
    let (elbo, sd) = mean_sd(&per_example);
    Ok(HeldOutElbo {
        elbo,
        recon: recon_sum / n,
        kl: kl_sum / n,
        stderr: sd / n.sqrt(),
        per_example,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "ProbeConfig::default_epochs")]
    pub epochs: usize,
    #[serde(default = "ProbeConfig::default_lr")]
    pub learning_rate: f64,
    #[serde(default = "ProbeConfig::default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ProbeConfig {
    fn default_epochs() -> usize {
        30
    }
    fn default_lr() -> f64 {
        1e-2
    }
    fn default_batch() -> usize {
        100
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: Self::default_epochs(),
            learning_rate: Self::default_lr(),
            batch_size: Self::default_batch(),
            seed: 0,
        }
    }
}

pub const PROBE_CLASSES: usize = 10;

/// Test accuracy of multinomial logistic regression fit on standardized
/// training latents.
pub fn latent_probe(
    train_x: &Tensor,
    train_y: &[u8],
    test_x: &Tensor,
    test_y: &[u8],
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() || train_x.cols() != test_x.cols() {
        return Err(Error::InvalidInput("probe latents and labels disagree in shape".into()));
    }
    if let Some(&bad) = train_y.iter().chain(test_y).find(|&&y| y as usize >= PROBE_CLASSES) {
        return Err(Error::InvalidInput(format!("label {bad} outside 0..{PROBE_CLASSES}")));
    }
    if !train_x.is_finite() || !test_x.is_finite() {
        return Err(Error::InvalidInput("probe latents must be finite".into()));
    }
    let (n, d, k) = (train_x.rows(), train_x.cols(), PROBE_CLASSES);
    let (mut mu, mut sd) = (vec![0.0; d], vec![1.0; d]);
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| train_x.row(i)[j]).collect();
        let (m, s) = mean_sd(&col);
        mu[j] = m;
        sd[j] = if s > 1e-12 { s } else { 1.0 };
    }
    let standardize = |x: &Tensor| -> Vec<f64> {
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - mu[j]) / sd[j];
            }
        }
        out
    };
    let xs = standardize(train_x);
    let mut params = vec![Tensor::zeros(&[d, k]), Tensor::zeros(&[k])];
    let mut adam = AdamState::new(&params);
    let mut rng = rng::substream(cfg.seed, rng::SHUFFLE);
    let mut order: Vec<usize> = (0..n).collect();
    let mut probs = vec![0.0; k];
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut gw = vec![0.0; d * k];
            let mut gb = vec![0.0; k];
            for &i in batch {
                let row = &xs[i * d..(i + 1) * d];
                softmax_into(row, &params, &mut probs);
                probs[train_y[i] as usize] -= 1.0;
                for c in 0..k {
                    gb[c] += probs[c];
                    for j in 0..d {
                        gw[j * k + c] += row[j] * probs[c];
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let grads = [
                Tensor::matrix(d, k, gw.iter().map(|g| g * scale).collect())?,
                Tensor::vector(gb.iter().map(|g| g * scale).collect())?,
            ];
            adam_step(&mut params, &grads, &mut adam, cfg.learning_rate)?;
        }
    }
    let xt = standardize(test_x);
    let correct = (0..test_x.rows())
        .filter(|&i| {
            softmax_into(&xt[i * d..(i + 1) * d], &params, &mut probs);
            let best = (0..k).fold(0, |b, c| if probs[c] > probs[b] { c } else { b });
            best == test_y[i] as usize
        })
        .count();
    Ok(correct as f64 / test_x.rows().max(1) as f64)
}

fn softmax_into(row: &[f64], params: &[Tensor], out: &mut [f64]) {
    let (w, b) = (params[0].data(), params[1].data());
    let k = out.len();
    for c in 0..k {
        out[c] = b[c] + row.iter().enumerate().map(|(j, x)| x * w[j * k + c]).sum::<f64>();
    }
    let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in out.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in out.iter_mut() {
        *v /= total;
    }
}

/// One model evaluated on one dataset. Serialized field order is the
/// metrics-file column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub model_id: String,
    pub dim: usize,
    pub layers: usize,
    pub elbo: f64,
    pub recon: f64,
    #[serde(rename = "kl")]
    pub kl_term: f64,
    #[serde(rename = "mi")]
    pub mi_estimate: Option<f64>,
    #[serde(rename = "mi_se")]
    pub mi_standard_error: Option<f64>,
    #[serde(rename = "au")]
    pub au_count: Option<usize>,
    /// Importance-sampled estimate of `log p(x)` (higher is better).
    pub is_nll: Option<f64>,
    pub n_eval: usize,
    pub n_mi_points: usize,
    #[serde(rename = "S")]
    pub mi_samples_per_point: usize,
    pub seed: u64,
    #[serde(skip, default = "default_au_threshold")]
    pub au_threshold: f64,
}

fn default_au_threshold() -> f64 {
    AU_THRESHOLD
}

fn default_true() -> bool {
    true
}
fn default_mi_points() -> usize {
    2000
}
fn default_mi_samples() -> usize {
    4
}
fn default_is_samples() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_mi_points")]
    pub n_mi_points: usize,
    #[serde(default = "default_mi_samples")]
    pub mi_samples: usize,
    #[serde(default = "default_au_threshold")]
    pub au_threshold: f64,
    #[serde(default = "default_is_samples")]
    pub is_samples: usize,
    #[serde(default = "default_true")]
    pub mi: bool,
    #[serde(default = "default_true")]
    pub au: bool,
    #[serde(default = "default_true")]
    pub is: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_mi_points: default_mi_points(),
            mi_samples: default_mi_samples(),
            au_threshold: AU_THRESHOLD,
            is_samples: default_is_samples(),
            mi: true,
            au: true,
            is: true,
            seed: 0,
        }
    }
}

/// Everything [`evaluate`] measured, including what does not fit the report row.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: CollapseReport,
    pub heldout: HeldOutElbo,
    pub mi: Option<MiEstimate>,
    pub au_variances: Option<Vec<f64>>,
    pub importance: Option<IsEstimate>,
}

/// All diagnostics for one model on one dataset. `n_mi_points` is capped at
/// the dataset size.
pub fn evaluate(vae: &Vae, data: &Dataset, cfg: &EvalConfig, model_id: &str) -> Result<Evaluation> {
    let q = encode_dataset(vae, data)?;
    let mut metrics_rng = rng::substream(cfg.seed, rng::METRICS);
    let heldout = heldout_elbo(vae, data, 1, &mut rng::substream(cfg.seed, rng::ELBO_NOISE))?;
    let n_points = cfg.n_mi_points.min(data.len());
    let mi = if cfg.mi {
        Some(mutual_information(&q, n_points, cfg.mi_samples, &mut metrics_rng)?)
    } else {
        None
    };
    let au = if cfg.au {
        Some(active_units(&q, cfg.au_threshold)?)
    } else {
        None
    };
    let importance = if cfg.is {
        Some(importance_log_likelihood(vae, data, cfg.is_samples, cfg.seed)?)
    } else {
        None
    };
    let report = CollapseReport {
        model_id: model_id.to_string(),
        dim: vae.config().latent_dim,
        layers: vae.config().depth(),
        elbo: heldout.elbo,
        recon: heldout.recon,
        kl_term: kl_term(&q),
        mi_estimate: mi.map(|m| m.mi),
        mi_standard_error: mi.map(|m| m.stderr),
        au_count: au.as_ref().map(|a| a.0),
        is_nll: importance.as_ref().map(|i| i.mean),
        n_eval: data.len(),
        n_mi_points: n_points,
        mi_samples_per_point: cfg.mi_samples,
        seed: cfg.seed,
        au_threshold: cfg.au_threshold,
    };
    Ok(Evaluation {
        report,
        heldout,
        mi,
        au_variances: au.map(|a| a.1),
        importance,
    })
}

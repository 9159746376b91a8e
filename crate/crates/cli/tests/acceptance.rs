//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- 1 4 8`. The desk-scale
//! MNIST criteria (6, 7, 10) expect the IDX files under `data/mnist/` at the
//! workspace root and take the better part of an hour on one core.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use skipvae::data;
use skipvae::metrics::{self, mutual_information};
use skipvae::models::{Activation, ModelConfig, ParamSet, Track, Vae};
use skipvae::oracle::{self, LinearGaussianLikelihood, LinearGaussianModel, Pair};
use skipvae::training::{
    self, draw_noise, elbo_on_tape, refine_variational, DecoderLikelihood, RefineConfig, RefineNoise,
};
use skipvae::{rng, Tape, Tensor};
use skipvae_cli::{cmd_compare, cmd_probe, CompareOutcome, Config};

const GRAD_REL_TOL: f64 = 1e-5;
const GRAD_ABS_FLOOR: f64 = 1e-8;
const FD_STEP: f64 = 1e-5;
const SWEEP_SIZE: usize = 100;
const MI_POINTS: usize = 2000;
const MI_SAMPLES: usize = 4;
const MI_ABS_TOL: f64 = 0.05;
const MI_MODELS: usize = 10;
/// Saturation slack when the estimator's standard error is itself ~0.
const CAP_FLOOR: f64 = 1e-9;
const DESK_DEPTHS: [usize; 3] = [2, 3, 4];
const ASSERTED_DEPTHS: [usize; 2] = [3, 4];
const DESK_EPOCHS: usize = 30;
const ELBO_GAP: f64 = 2.0;
const PROBE_SLACK: f64 = 0.002;
const REFINE_STEPS: usize = 10;
const REFINE_EXAMPLES: usize = 50;
const FIXED_POINT_TOL: f64 = 1e-8;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scratch_dir(name: &str) -> PathBuf {
    let dir = workspace_root().join("target/acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn perturbed(config: ModelConfig, rng: &mut impl Rng) -> Vae {
    let mut vae = Vae::new(config, rng.random()).unwrap();
    for t in vae.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    vae
}

fn tiny_config(rng: &mut impl Rng, skip: bool) -> ModelConfig {
    let widths = |rng: &mut dyn rand::RngCore, max_layers: usize| -> Vec<usize> {
        (0..rng.random_range(1..=max_layers)).map(|_| rng.random_range(1..=8)).collect()
    };
    ModelConfig {
        latent_dim: 2,
        data_dim: rng.random_range(2..=8),
        encoder_widths: widths(rng, 2),
        decoder_widths: widths(rng, 3),
        skip_enabled: skip,
        activation: Activation::Tanh,
    }
}

fn binary(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect())
        .unwrap()
}

fn objective(vae: &Vae, x: &Tensor, noise: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let bound = vae.bind(&tape, Track::Nothing);
    elbo_on_tape(&bound, x, noise, 1.0).unwrap().objective.value().item()
}

fn criterion_1() -> Outcome {
    let mut rng = rng::substream(1, "acceptance-gradients");
    let (mut checked, mut bad, mut worst) = (0usize, 0usize, 0.0f64);
    for m in 0..25 {
        let cfg = tiny_config(&mut rng, m % 2 == 1);
        let vae = perturbed(cfg.clone(), &mut rng);
        let batch = rng.random_range(1..=5);
        let x = binary(&mut rng, batch, cfg.data_dim);
        let noise = vec![draw_noise(&mut rng, batch, cfg.latent_dim)];
        let tape = Tape::new();
        let bound = vae.bind(&tape, Track::All);
        let e = elbo_on_tape(&bound, &x, &noise, 1.0).unwrap();
        let grads = tape.backward(e.objective).unwrap();
        let analytic: Vec<Tensor> = bound.vars().iter().map(|&v| grads.wrt(v)).collect();
        for (pi, g) in analytic.iter().enumerate() {
            for k in 0..g.numel() {
                let mut plus = vae.clone();
                plus.params_mut().tensors_mut()[pi].data_mut()[k] += FD_STEP;
                let mut minus = vae.clone();
                minus.params_mut().tensors_mut()[pi].data_mut()[k] -= FD_STEP;
                let fd = (objective(&plus, &x, &noise) - objective(&minus, &x, &noise)) / (2.0 * FD_STEP);
                let an = g.data()[k];
                let err = (fd - an).abs();
                let scale = an.abs().max(fd.abs());
                checked += 1;
                if scale > 0.0 {
                    worst = worst.max(err / scale);
                }
                if err > GRAD_ABS_FLOOR && err > GRAD_REL_TOL * scale {
                    bad += 1;
                }
            }
        }
    }
    outcome(
        bad == 0,
        format!("{checked} partial derivatives over 25 models, {bad} outside tolerance, worst relative error {worst:.2e}"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = rng::substream(2, "acceptance-reduction");
    let mut mismatches = 0usize;
    for i in 0..100 {
        let depth = rng.random_range(1..=5);
        let activation = if i % 2 == 0 { Activation::Relu } else { Activation::Tanh };
        let cfg = ModelConfig {
            latent_dim: rng.random_range(1..=6),
            data_dim: rng.random_range(1..=10),
            encoder_widths: vec![4],
            decoder_widths: (0..depth).map(|_| rng.random_range(1..=10)).collect(),
            skip_enabled: true,
            activation,
        };
        let mut skip = perturbed(cfg.clone(), &mut rng);
        for l in 1..=depth {
            let p = skip.params_mut();
            let wh = p.get_mut(&format!("decoder.skip.{l}.wh")).unwrap();
            *wh = Tensor::identity(wh.shape()[0]);
            let wz = p.get_mut(&format!("decoder.skip.{l}.wz")).unwrap();
            *wz = Tensor::zeros(wz.shape());
            let b = p.get_mut(&format!("decoder.skip.{l}.bias")).unwrap();
            *b = Tensor::zeros(b.shape());
        }
        let mut plain_params = ParamSet::new();
        for (n, t) in skip.params().iter() {
            if !n.starts_with("decoder.skip.") {
                plain_params.push(n, t.clone());
            }
        }
        let plain = Vae::from_params(ModelConfig { skip_enabled: false, ..cfg.clone() }, plain_params).unwrap();
        let rows = rng.random_range(1..=4);
        let z: Vec<f64> = rng::standard_normals(&mut rng, rows * cfg.latent_dim).iter().map(|v| 3.0 * v).collect();
        let z = Tensor::matrix(rows, cfg.latent_dim, z).unwrap();
        let tape = Tape::new();
        let a = skip.bind(&tape, Track::Nothing).decode(&tape.constant(z.clone())).unwrap().value();
        let b = plain.bind(&tape, Track::Nothing).decode(&tape.constant(z)).unwrap().value();
        if !a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} of 100 random inputs differ in any bit"))
}

fn criterion_3() -> Outcome {
    let rows = oracle::theorem1_sweep(SWEEP_SIZE, 0).unwrap();
    let violations: Vec<_> = rows.iter().filter(|r| !r.holds()).collect();
    let worst = violations.iter().map(|r| r.margin).fold(0.0, f64::min);
    outcome(
        violations.is_empty(),
        format!(
            "I_skip >= I_plain in {}/{} configurations (most negative margin {worst:.4} nats)",
            rows.len() - violations.len(),
            rows.len()
        ),
    )
}

fn criterion_4(all_estimates: &mut Vec<(f64, usize)>) -> Outcome {
    let cap = 0.9 * (MI_POINTS as f64).ln();
    let rows = oracle::mi_validation(MI_MODELS, MI_POINTS, MI_SAMPLES, cap, MI_ABS_TOL, 0).unwrap();
    all_estimates.extend(rows.iter().map(|r| (r.estimate, MI_POINTS)));
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.holds())
        .map(|r| format!("#{} exact {:.3} err {:+.3} tol {:.3}", r.model_id, r.exact, r.error, r.tolerance))
        .collect();
    let worst = rows.iter().map(|r| r.error.abs()).fold(0.0, f64::max);
    let mut detail = format!(
        "{}/{} models within max(3 se, {MI_ABS_TOL}); largest |error| {worst:.3} nats",
        rows.len() - failed.len(),
        rows.len()
    );
    if !failed.is_empty() {
        detail.push_str(&format!("; failing: {}", failed.join(", ")));
    }
    outcome(failed.is_empty(), detail)
}

fn criterion_5(all_estimates: &[(f64, usize)]) -> Outcome {
    let mut rng = rng::substream(5, "acceptance-cap");
    let n = MI_POINTS;
    let ln_n = (n as f64).ln();
    let model = loop {
        let (base, d) = oracle::random_pair(&mut rng);
        let m = LinearGaussianModel::new(&base.b * 30.0, base.c.clone(), &d * 30.0, 1e-3, 1e-3).unwrap();
        if m.exact_mi(Pair::XZ).unwrap() > ln_n + 20.0 {
            break m.diagonalized().unwrap().0;
        }
    };
    let exact = model.exact_mi(Pair::XZ).unwrap();
    let q = model.diagonal_posteriors(&model.sample_x(&mut rng, n)).unwrap();
    let est = mutual_information(&q, n, MI_SAMPLES, &mut rng).unwrap();
    let saturated = ln_n - est.mi <= est.stderr.max(CAP_FLOOR);
    let mut estimates = all_estimates.to_vec();
    estimates.push((est.mi, n));
    let over = estimates.iter().filter(|(mi, n)| *mi > (*n as f64).ln()).count();
    outcome(
        saturated && over == 0,
        format!(
            "{} estimates checked, {over} above ln N; high-information oracle (exact {exact:.1} nats) gives {:.10} vs ln N = {ln_n:.10} (se {:.1e})",
            estimates.len(),
            est.mi,
            est.stderr
        ),
    )
}

struct DeskRun {
    depth: usize,
    cfg: Config,
    result: CompareOutcome,
}

fn desk_config(depth: usize) -> Config {
    let mnist = workspace_root().join("data/mnist");
    let sets = vec![
        format!("data.train_images={:?}", mnist.join("train-images-idx3-ubyte").to_str().unwrap()),
        format!("data.train_labels={:?}", mnist.join("train-labels-idx1-ubyte").to_str().unwrap()),
        "data.train_start=0".into(),
        "data.train_count=10000".into(),
        "data.heldout=\"train\"".into(),
        "data.heldout_start=50000".into(),
        "data.heldout_count=2000".into(),
        "model.latent_dim=50".into(),
        "model.encoder_widths=[512, 512]".into(),
        format!("model.decoder_widths={:?}", vec![512; depth]),
        format!("train.epochs={DESK_EPOCHS}"),
        format!("eval.n_mi_points={MI_POINTS}"),
        format!("eval.mi_samples={MI_SAMPLES}"),
        "eval.is_samples=200".into(),
    ];
    Config::load(None, &sets, Some(0)).unwrap()
}

fn desk_runs() -> Result<Vec<DeskRun>, String> {
    let images = workspace_root().join("data/mnist/train-images-idx3-ubyte");
    if !images.exists() {
        return Err(format!("MNIST not found at {}", images.display()));
    }
    DESK_DEPTHS
        .iter()
        .map(|&depth| {
            let cfg = desk_config(depth);
            let out = scratch_dir(&format!("desk-L{depth}"));
            let started = Instant::now();
            let result = cmd_compare(&cfg, &out).map_err(|e| e.to_string())?;
            eprintln!("desk run at depth {depth}: {:.0} s", started.elapsed().as_secs_f64());
            Ok(DeskRun { depth, cfg, result })
        })
        .collect()
}

fn criterion_6(runs: &Result<Vec<DeskRun>, String>) -> Outcome {
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return outcome(false, e.clone()),
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for run in runs {
        let [vae, skip] = &run.result.arms;
        let (a, b) = (&vae.eval.report, &skip.eval.report);
        let budget: Vec<f64> = run
            .result
            .arms
            .iter()
            .map(|arm| arm.train.history.wall_clock.iter().sum::<f64>() / 60.0)
            .collect();
        let kl_ok = b.kl_term > a.kl_term;
        let au_ok = b.au_count > a.au_count;
        // The skip arm may not pay more than ELBO_GAP for its extra usage
        // of the latent code; being better is not penalized.
        let elbo_ok = b.elbo - a.elbo >= -ELBO_GAP;
        if ASSERTED_DEPTHS.contains(&run.depth) {
            pass &= kl_ok && au_ok && elbo_ok;
        }
        parts.push(format!(
            "L={}{}: KL {:.2} vs {:.2}, AU {} vs {}, ELBO {:.2} vs {:.2} (gap {:+.2}), train {:.1}/{:.1} min",
            run.depth,
            if ASSERTED_DEPTHS.contains(&run.depth) { "" } else { " (reported)" },
            a.kl_term,
            b.kl_term,
            a.au_count.unwrap_or(0),
            b.au_count.unwrap_or(0),
            a.elbo,
            b.elbo,
            b.elbo - a.elbo,
            budget[0],
            budget[1],
        ));
    }
    outcome(pass, format!("VAE vs Skip-VAE; {}", parts.join("; ")))
}

fn criterion_7(runs: &Result<Vec<DeskRun>, String>) -> Outcome {
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return outcome(false, e.clone()),
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for run in runs {
        for arm in &run.result.arms {
            let is = arm.eval.importance.as_ref().expect("importance sampling enabled");
            let diffs: Vec<f64> = is.per_example.iter().zip(&arm.eval.heldout.per_example).map(|(a, b)| a - b).collect();
            let n = diffs.len() as f64;
            let mean = diffs.iter().sum::<f64>() / n;
            let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            let ok = mean >= -3.0 * se;
            pass &= ok;
            parts.push(format!("{} {:+.3} (se {:.3})", arm.eval.report.model_id, mean, se));
        }
    }
    outcome(pass, format!("log p(x) estimate minus ELBO: {}", parts.join(", ")))
}

fn criterion_8() -> Outcome {
    let data = data::synthetic_grid(500, 16, 8).unwrap();
    let model = ModelConfig {
        latent_dim: 3,
        data_dim: 16,
        encoder_widths: vec![16],
        decoder_widths: vec![16, 16],
        skip_enabled: true,
        activation: Activation::Relu,
    };
    let cfg = training::TrainConfig {
        epochs: 5,
        batch_size: 50,
        learning_rate: 1e-2,
        seed: 8,
        ..Default::default()
    };
    let (ck, _) = training::train(&data, &model, &cfg).unwrap();
    let vae = Vae::from_params(ck.model, ck.params).unwrap();
    let q = metrics::encode_dataset(&vae, &data).unwrap();
    let refine = RefineConfig {
        steps: REFINE_STEPS,
        step_size: 1.0,
        noise: RefineNoise::Sampled(8),
    };
    let mut decreasing = 0usize;
    let mut gained = 0.0;
    for i in 0..REFINE_EXAMPLES {
        let lik = DecoderLikelihood::new(&vae, data.images().row(i)).unwrap();
        let r = refine_variational(&lik, &q.row(i), &refine, &mut metrics::example_stream(8, i)).unwrap();
        if r.trace.windows(2).any(|w| w[1] < w[0]) {
            decreasing += 1;
        }
        gained += r.trace.last().unwrap() - r.trace[0];
    }
    let mut rng = rng::substream(8, "acceptance-fixed-point");
    let mut moved = 0.0f64;
    for _ in 0..10 {
        let (base, d) = oracle::random_pair(&mut rng);
        let (m, _) = base.with_skip(d).unwrap().diagonalized().unwrap();
        let x = m.sample_x(&mut rng, 1).remove(0);
        let q = m.diagonal_posteriors(std::slice::from_ref(&x)).unwrap();
        let lik = LinearGaussianLikelihood::new(&m, &x).unwrap();
        let fixed = RefineConfig {
            steps: REFINE_STEPS,
            noise: RefineNoise::SigmaPoints,
            ..refine
        };
        let r = refine_variational(&lik, &q, &fixed, &mut rng).unwrap();
        let delta = r
            .params
            .mean
            .data()
            .iter()
            .zip(q.mean.data())
            .chain(r.params.logvar.data().iter().zip(q.logvar.data()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        moved = moved.max(delta);
    }
    outcome(
        decreasing == 0 && moved < FIXED_POINT_TOL,
        format!(
            "{REFINE_EXAMPLES} examples x {REFINE_STEPS} steps: {decreasing} traces decrease, mean gain {:.4} nats; exact posterior moves at most {moved:.1e} over 10 chains",
            gained / REFINE_EXAMPLES as f64
        ),
    )
}

fn criterion_9() -> Outcome {
    let data = data::synthetic_grid(400, 16, 9).unwrap();
    let model = ModelConfig {
        latent_dim: 4,
        data_dim: 16,
        encoder_widths: vec![16, 16],
        decoder_widths: vec![16, 16],
        skip_enabled: true,
        activation: Activation::Relu,
    };
    let mut vae = Vae::new(model, 9).unwrap();
    let names: Vec<String> = vae.params().names().iter().filter(|n| n.starts_with("encoder.")).cloned().collect();
    for n in names {
        vae.params_mut().get_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let cfg = metrics::EvalConfig {
        n_mi_points: 400,
        is_samples: 10,
        seed: 9,
        ..Default::default()
    };
    let e = metrics::evaluate(&vae, &data, &cfg, "prior").unwrap();
    let r = &e.report;
    let (mi, se) = (r.mi_estimate.unwrap(), r.mi_standard_error.unwrap());
    outcome(
        r.kl_term == 0.0 && mi.abs() <= se && r.au_count == Some(0),
        format!("kl {} mi {mi} (se {se}) au {}", r.kl_term, r.au_count.unwrap()),
    )
}

fn criterion_10(runs: &Result<Vec<DeskRun>, String>) -> Outcome {
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return outcome(false, e.clone()),
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for run in runs {
        let mut acc = Vec::new();
        for arm in &run.result.arms {
            let mut cfg = run.cfg.clone();
            cfg.model.skip_enabled = arm.train.checkpoint.model.skip_enabled;
            match cmd_probe(&cfg, &arm.train.checkpoint_path, &arm.dir.join("probe")) {
                Ok(p) => acc.push(p.accuracy),
                Err(e) => return outcome(false, format!("probe failed: {e}")),
            }
        }
        pass &= acc[1] >= acc[0] - PROBE_SLACK;
        parts.push(format!("L={}: {:.2}% vs {:.2}%", run.depth, 100.0 * acc[0], 100.0 * acc[1]));
    }
    outcome(
        pass,
        format!("VAE vs Skip-VAE probe accuracy; {} (full-scale reference 97.19% vs 98.10%)", parts.join("; ")),
    )
}

const NAMES: [&str; 10] = [
    "gradient correctness",
    "skip-reduction identity",
    "ordering of exact mutual information",
    "MI estimator against the exact oracle",
    "MI estimator cap",
    "desk-scale MNIST directionality",
    "importance-sampled bound ordering",
    "refinement contract",
    "prior-collapse fixture",
    "probe directionality",
];

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |k: usize| selected.is_empty() || selected.contains(&k);
    let mut estimates = Vec::new();
    let mut desk: Option<Result<Vec<DeskRun>, String>> = None;
    let mut results = Vec::new();
    for k in 1..=10 {
        if !wanted(k) {
            continue;
        }
        let started = Instant::now();
        let o = match k {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(&mut estimates),
            5 => {
                if [6, 7, 10].into_iter().any(wanted) {
                    desk.get_or_insert_with(desk_runs);
                }
                if let Some(Ok(runs)) = &desk {
                    estimates.extend(runs.iter().flat_map(|r| r.result.arms.iter()).filter_map(|a| {
                        a.eval.report.mi_estimate.map(|mi| (mi, a.eval.report.n_mi_points))
                    }));
                }
                criterion_5(&estimates)
            }
            6 | 7 | 10 => {
                let runs = desk.get_or_insert_with(desk_runs);
                match k {
                    6 => criterion_6(runs),
                    7 => criterion_7(runs),
                    _ => criterion_10(runs),
                }
            }
            8 => criterion_8(),
            9 => criterion_9(),
            _ => unreachable!(),
        };
        println!(
            "criterion {k:>2} [{}] {}: {} ({:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            NAMES[k - 1],
            o.detail,
            started.elapsed().as_secs_f64()
        );
        results.push(o.pass);
    }
    println!(
        "acceptance: {}/{} criteria passed",
        results.iter().filter(|&&p| p).count(),
        results.len()
    );
}

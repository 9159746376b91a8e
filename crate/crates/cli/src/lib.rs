//! Subcommands of the `skipvae` binary as library functions, so they can be
//! driven from tests without spawning processes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use skipvae::data::{self, Checkpoint, Dataset, ReportFormat, REPORT_COLUMNS};
use skipvae::metrics::{self, CollapseReport, Evaluation};
use skipvae::models::Vae;
use skipvae::oracle::{self, MiValidationRow, TheoremRow};
use skipvae::training::{self, TrainHistory};

pub mod config;

pub use config::Config;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Check(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<skipvae::Error> for CliError {
    fn from(e: skipvae::Error) -> Self {
        use skipvae::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) => CliError::Config(msg),
            E::NumericAbort(_) | E::Singular(_) => CliError::Numeric(msg),
            E::Autodiff(skipvae::autodiff::AutodiffError::NonFinite { .. }) => CliError::Numeric(msg),
            _ => CliError::Data(msg),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

/// Writes the effective configuration next to the outputs.
pub fn write_snapshot(cfg: &Config, out: &Path) -> Result<()> {
    create_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())
}

/// A label file path that is empty means "no labels".
fn labels_path(p: &Option<PathBuf>) -> Option<&Path> {
    p.as_deref().filter(|p| !p.as_os_str().is_empty())
}

fn idx_rows(images: &Path, labels: Option<&Path>, start: usize, count: usize) -> Result<Dataset> {
    let all = data::load_idx(images, labels)?;
    Ok(all.slice(start, count)?)
}

fn synthetic_all(cfg: &Config) -> Result<Dataset> {
    let d = &cfg.data;
    Ok(data::synthetic_grid(d.train_count + d.heldout_count, d.synthetic_p, cfg.train.seed)?)
}

/// The binarized training split.
pub fn load_train(cfg: &Config) -> Result<Dataset> {
    let d = &cfg.data;
    let raw = match d.source {
        config::DataSource::Synthetic => synthetic_all(cfg)?.slice(0, d.train_count)?,
        config::DataSource::Idx => idx_rows(&d.train_images, labels_path(&d.train_labels), d.train_start, d.train_count)?,
    };
    Ok(data::binarize(&raw, d.binarize, cfg.train.seed))
}

/// The binarized held-out split.
pub fn load_heldout(cfg: &Config) -> Result<Dataset> {
    let d = &cfg.data;
    let raw = match (d.source, d.heldout) {
        (config::DataSource::Synthetic, _) => synthetic_all(cfg)?.slice(d.train_count, d.heldout_count)?,
        (config::DataSource::Idx, config::HeldOutSplit::Train) => {
            idx_rows(&d.train_images, labels_path(&d.train_labels), d.heldout_start, d.heldout_count)?
        }
        (config::DataSource::Idx, config::HeldOutSplit::Test) => {
            let images = d
                .test_images
                .as_deref()
                .ok_or_else(|| CliError::Config("data.heldout = \"test\" needs data.test_images".into()))?;
            idx_rows(images, labels_path(&d.test_labels), d.heldout_start, d.heldout_count)?
        }
    };
    Ok(data::binarize(&raw, d.binarize, cfg.train.seed))
}

/// `vae-L3`, `skip-vae-L3`.
pub fn model_id(vae: &Vae) -> String {
    let c = vae.config();
    let kind = if c.skip_enabled { "skip-vae" } else { "vae" };
    format!("{kind}-L{}", c.depth())
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub checkpoint_path: PathBuf,
}

/// Trains one model on the training split. Writes `config.toml`,
/// `checkpoint.skvz`, `history.csv` and `timing.csv` into `out`; on a numeric
/// abort writes `last_good.skvz` instead of the checkpoint.
pub fn cmd_train(cfg: &Config, out: &Path) -> Result<TrainOutcome> {
    write_snapshot(cfg, out)?;
    let train = load_train(cfg)?;
    let model = cfg.model.with_data_dim(train.dim());
    let result = training::train_with(&train, &model, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  elbo {:>10.4}  recon {:>10.4}  kl {:>8.4}  kl_weight {:.3}",
            r.epoch, r.elbo, r.recon, r.kl, r.kl_weight
        );
    });
    let (checkpoint, history) = match result {
        Ok(v) => v,
        Err(skipvae::Error::NumericAbort(abort)) => {
            let path = out.join("last_good.skvz");
            data::save_checkpoint(&abort.last_good, &path)?;
            return Err(CliError::Numeric(format!("{abort}; last good parameters in {}", path.display())));
        }
        Err(e) => return Err(e.into()),
    };
    let checkpoint_path = out.join("checkpoint.skvz");
    data::save_checkpoint(&checkpoint, &checkpoint_path)?;
    data::export_history(&history, &out.join("history.csv"))?;
    let mut timing = String::from("epoch,seconds\n");
    for (i, s) in history.wall_clock.iter().enumerate() {
        timing.push_str(&format!("{},{s}\n", i + 1));
    }
    write_text(&out.join("timing.csv"), &timing)?;
    Ok(TrainOutcome {
        checkpoint,
        history,
        checkpoint_path,
    })
}

pub fn load_vae(path: &Path) -> Result<Vae> {
    let ck = data::load_checkpoint(path)?;
    Ok(Vae::from_params(ck.model, ck.params)?)
}

fn check_width(vae: &Vae, data: &Dataset) -> Result<()> {
    if vae.config().data_dim != data.dim() {
        return Err(CliError::Data(format!(
            "checkpoint expects {} pixels but {} has {}",
            vae.config().data_dim,
            data.source,
            data.dim()
        )));
    }
    Ok(())
}

/// Evaluates `vae` on the held-out split without touching the filesystem.
pub fn evaluate_model(cfg: &Config, vae: &Vae, heldout: &Dataset, id: &str) -> Result<Evaluation> {
    check_width(vae, heldout)?;
    Ok(metrics::evaluate(vae, heldout, &cfg.eval, id)?)
}

fn write_au_variances(eval: &Evaluation, path: &Path) -> Result<()> {
    let mut text = String::from("unit,variance,active\n");
    if let Some(v) = &eval.au_variances {
        for (j, var) in v.iter().enumerate() {
            text.push_str(&format!("{},{var},{}\n", j + 1, *var > eval.report.au_threshold));
        }
    }
    write_text(path, &text)
}

/// Diagnostics of a checkpoint on the held-out split: `metrics.csv`,
/// `metrics.json` and `au_variances.csv`.
pub fn cmd_eval(cfg: &Config, checkpoint: &Path, out: &Path) -> Result<Evaluation> {
    let vae = load_vae(checkpoint)?;
    write_snapshot(cfg, out)?;
    let heldout = load_heldout(cfg)?;
    let eval = evaluate_model(cfg, &vae, &heldout, &model_id(&vae))?;
    data::export_metrics(std::slice::from_ref(&eval.report), &out.join("metrics.csv"), ReportFormat::Csv)?;
    data::export_metrics(std::slice::from_ref(&eval.report), &out.join("metrics.json"), ReportFormat::Json)?;
    write_au_variances(&eval, &out.join("au_variances.csv"))?;
    Ok(eval)
}

/// Second arm minus first arm.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Deltas {
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub mi: Option<f64>,
    pub au: Option<i64>,
    pub is_nll: Option<f64>,
}

impl Deltas {
    pub fn between(a: &CollapseReport, b: &CollapseReport) -> Self {
        let diff = |x: Option<f64>, y: Option<f64>| x.zip(y).map(|(x, y)| y - x);
        Deltas {
            elbo: b.elbo - a.elbo,
            recon: b.recon - a.recon,
            kl: b.kl_term - a.kl_term,
            mi: diff(a.mi_estimate, b.mi_estimate),
            au: a.au_count.zip(b.au_count).map(|(x, y)| y as i64 - x as i64),
            is_nll: diff(a.is_nll, b.is_nll),
        }
    }
}

pub struct Arm {
    pub train: TrainOutcome,
    pub eval: Evaluation,
    pub dir: PathBuf,
}

pub struct CompareOutcome {
    pub arms: [Arm; 2],
    pub deltas: Deltas,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn write_compare_csv(a: &CollapseReport, b: &CollapseReport, d: &Deltas, path: &Path) -> Result<()> {
    let mut text = REPORT_COLUMNS.join(",");
    text.push('\n');
    for r in [a, b] {
        let row = [
            r.model_id.clone(),
            r.dim.to_string(),
            r.layers.to_string(),
            r.elbo.to_string(),
            r.recon.to_string(),
            r.kl_term.to_string(),
            opt(r.mi_estimate),
            opt(r.mi_standard_error),
            opt(r.au_count),
            opt(r.is_nll),
            r.n_eval.to_string(),
            r.n_mi_points.to_string(),
            r.mi_samples_per_point.to_string(),
            r.seed.to_string(),
        ];
        text.push_str(&row.join(","));
        text.push('\n');
    }
    let se = a.mi_standard_error.zip(b.mi_standard_error).map(|(x, y)| x.hypot(y));
    let row = [
        "delta".to_string(),
        b.dim.to_string(),
        b.layers.to_string(),
        d.elbo.to_string(),
        d.recon.to_string(),
        d.kl.to_string(),
        opt(d.mi),
        opt(se),
        opt(d.au),
        opt(d.is_nll),
        b.n_eval.to_string(),
        b.n_mi_points.to_string(),
        b.mi_samples_per_point.to_string(),
        b.seed.to_string(),
    ];
    text.push_str(&row.join(","));
    text.push('\n');
    write_text(path, &text)
}

#[derive(Serialize)]
struct CompareJson<'a> {
    arms: [&'a CollapseReport; 2],
    delta: &'a Deltas,
}

/// Trains and evaluates two models that differ only in `skip_enabled`, with
/// the same seeds and budget. Each arm gets its own subdirectory; the paired
/// report goes to `compare.csv` (two model rows and a delta row) and
/// `compare.json`.
pub fn cmd_compare(cfg: &Config, out: &Path) -> Result<CompareOutcome> {
    write_snapshot(cfg, out)?;
    let heldout = load_heldout(cfg)?;
    let [s0, s1] = cfg.compare.skip_arms;
    let mut arms = Vec::with_capacity(2);
    for (i, skip) in [s0, s1].into_iter().enumerate() {
        let mut arm_cfg = cfg.clone();
        arm_cfg.model.skip_enabled = skip;
        let base = if skip { "skip-vae" } else { "vae" };
        let name = if s0 == s1 { format!("{base}-{}", ["a", "b"][i]) } else { base.to_string() };
        let dir = out.join(&name);
        eprintln!("training {name}");
        let train = cmd_train(&arm_cfg, &dir)?;
        let vae = Vae::from_params(train.checkpoint.model.clone(), train.checkpoint.params.clone())?;
        let id = format!("{name}-L{}", vae.config().depth());
        let eval = evaluate_model(&arm_cfg, &vae, &heldout, &id)?;
        data::export_metrics(std::slice::from_ref(&eval.report), &dir.join("metrics.csv"), ReportFormat::Csv)?;
        write_au_variances(&eval, &dir.join("au_variances.csv"))?;
        arms.push(Arm { train, eval, dir });
    }
    let arms: [Arm; 2] = arms.try_into().ok().expect("two arms");
    let (a, b) = (&arms[0].eval.report, &arms[1].eval.report);
    let deltas = Deltas::between(a, b);
    write_compare_csv(a, b, &deltas, &out.join("compare.csv"))?;
    write_json(&out.join("compare.json"), &CompareJson { arms: [a, b], delta: &deltas })?;
    Ok(CompareOutcome { arms, deltas })
}

pub struct OracleOutcome {
    pub theorem: Vec<TheoremRow>,
    pub mi: Vec<MiValidationRow>,
}

impl OracleOutcome {
    pub fn violations(&self) -> usize {
        self.theorem.iter().filter(|r| !r.holds()).count()
    }

    pub fn mi_failures(&self) -> usize {
        self.mi.iter().filter(|r| !r.holds()).count()
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0 && self.mi_failures() == 0
    }

    /// `Ok` if every row held, otherwise a [`CliError::Check`].
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(CliError::Check(format!(
                "{} of {} orderings violated, {} of {} estimator checks out of tolerance",
                self.violations(),
                self.theorem.len(),
                self.mi_failures(),
                self.mi.len()
            )))
        }
    }
}

/// Runs the closed-form ordering sweep and the estimator validation, writing
/// `theorem1.csv` and `mi_validation.csv`. The caller decides whether
/// failures are fatal.
pub fn cmd_oracle_check(cfg: &Config, out: &Path) -> Result<OracleOutcome> {
    write_snapshot(cfg, out)?;
    let o = &cfg.oracle;
    let theorem = oracle::theorem1_sweep(o.sweep_size, o.seed)?;
    oracle::write_theorem_csv(&theorem, &out.join("theorem1.csv"))?;
    let cap = 0.9 * (o.mi_points as f64).ln();
    let mi = oracle::mi_validation(o.mi_models, o.mi_points, o.mi_samples, cap, o.tolerance, o.seed)?;
    oracle::write_mi_validation_csv(&mi, &out.join("mi_validation.csv"))?;
    Ok(OracleOutcome { theorem, mi })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub model_id: String,
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// Fits a linear classifier on posterior means of the training split and
/// scores it on the held-out split. Writes `latents.csv` (held-out means)
/// and `probe.json`.
pub fn cmd_probe(cfg: &Config, checkpoint: &Path, out: &Path) -> Result<ProbeReport> {
    let vae = load_vae(checkpoint)?;
    write_snapshot(cfg, out)?;
    let train = load_train(cfg)?;
    let test = load_heldout(cfg)?;
    check_width(&vae, &train)?;
    let (Some(train_y), Some(test_y)) = (train.labels(), test.labels()) else {
        return Err(CliError::Data("the probe needs labels for both splits".into()));
    };
    let train_q = metrics::encode_dataset(&vae, &train)?;
    let test_q = metrics::encode_dataset(&vae, &test)?;
    data::export_latents(&test_q.mean, Some(test_y), &out.join("latents.csv"))?;
    let accuracy = metrics::latent_probe(&train_q.mean, train_y, &test_q.mean, test_y, &cfg.probe)?;
    let report = ProbeReport {
        model_id: model_id(&vae),
        accuracy,
        n_train: train.len(),
        n_test: test.len(),
        seed: cfg.probe.seed,
    };
    write_json(&out.join("probe.json"), &report)?;
    Ok(report)
}

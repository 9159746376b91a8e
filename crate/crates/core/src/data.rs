//! Datasets, checkpoints and report files.
//!
//! Images are read from big-endian IDX files (the MNIST distribution format)
//! or generated synthetically; checkpoints use a small versioned binary
//! container; metric reports are written as CSV or JSON.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::metrics::CollapseReport;
use crate::models::{ModelConfig, ParamSet};
use crate::rng;
use crate::training::{TrainConfig, TrainHistory};
use crate::{Error, Result};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// How pixel intensities were turned into `{0, 1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Binarization {
    /// Raw intensities in `0..=255`.
    Raw,
    Threshold,
    Stochastic { seed: u64 },
    /// Generated binary.
    Native,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinarizeMode {
    Threshold,
    Stochastic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Option<Vec<u8>>,
    pub source: String,
    pub binarization: Binarization,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<u8>>, source: impl Into<String>, binarization: Binarization) -> Result<Self> {
        if images.shape().len() != 2 {
            return Err(Error::InvalidInput(format!(
                "images must be an N x P matrix, got shape {:?}",
                images.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != images.rows() {
                return Err(Error::InvalidInput(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.rows()
                )));
            }
        }
        Ok(Self {
            images,
            labels,
            source: source.into(),
            binarization,
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn is_binary(&self) -> bool {
        self.images.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Rows `indices` as a `len x P` matrix.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        Ok(self.images.select_rows(indices)?)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        let source = if indices.len() == self.len() && indices.iter().enumerate().all(|(a, &b)| a == b) {
            self.source.clone()
        } else {
            format!("{}[{} rows]", self.source, indices.len())
        };
        Dataset::new(self.images.select_rows(indices)?, labels, source, self.binarization)
    }

    /// Contiguous rows `start .. start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Dataset> {
        if len == 0 || start + len > self.len() {
            return Err(Error::InvalidInput(format!(
                "rows {start}..{} out of range for {} examples",
                start + len,
                self.len()
            )));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        let mut out = self.subset(&idx)?;
        out.source = format!("{}[{start}..{}]", self.source, start + len);
        Ok(out)
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header at offset {offset}")))
}

/// Parses an IDX image file: `(n, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "image file")?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!(
            "image file: bad magic {magic:#010x} at offset 0 (expected {IDX_IMAGES:#010x})"
        )));
    }
    let n = read_u32(bytes, 4, "image file")? as usize;
    let rows = read_u32(bytes, 8, "image file")? as usize;
    let cols = read_u32(bytes, 12, "image file")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format(format!(
            "image file: truncated at offset {}; header promises {need} pixel bytes after offset 16",
            bytes.len()
        )));
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "label file")?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!(
            "label file: bad magic {magic:#010x} at offset 0 (expected {IDX_LABELS:#010x})"
        )));
    }
    let n = read_u32(bytes, 4, "label file")? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::Format(format!(
            "label file: truncated at offset {}; header promises {n} labels after offset 8",
            bytes.len()
        )));
    }
    Ok(&bytes[8..8 + n])
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads raw intensities (`0..=255`) and optional labels.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let bytes = read_file(images_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&bytes)?;
    if n == 0 || rows * cols == 0 {
        return Err(Error::Format(format!("{}: empty image file", images_path.display())));
    }
    let labels = match labels_path {
        Some(p) => {
            let lb = read_file(p)?;
            let labels = parse_idx_labels(&lb)?;
            if labels.len() != n {
                return Err(Error::Format(format!(
                    "{} has {} labels but {} has {n} images",
                    p.display(),
                    labels.len(),
                    images_path.display()
                )));
            }
            Some(labels.to_vec())
        }
        None => None,
    };
    let images = Tensor::new(vec![n, rows * cols], pixels.iter().map(|&b| b as f64).collect())?;
    Dataset::new(images, labels, images_path.display().to_string(), Binarization::Raw)
}

pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Maps intensities to `{0, 1}`. Already-binary datasets are returned as is.
pub fn binarize(data: &Dataset, mode: BinarizeMode, seed: u64) -> Dataset {
    if data.binarization != Binarization::Raw {
        return data.clone();
    }
    let mut out = data.clone();
    match mode {
        BinarizeMode::Threshold => {
            for v in out.images.data_mut() {
                *v = if *v > 127.0 { 1.0 } else { 0.0 };
            }
            out.binarization = Binarization::Threshold;
        }
        BinarizeMode::Stochastic => {
            let mut rng = rng::substream(seed, "binarize");
            for v in out.images.data_mut() {
                let p = (*v / 255.0).clamp(0.0, 1.0);
                *v = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            }
            out.binarization = Binarization::Stochastic { seed };
        }
    }
    out
}

/// Number of prototypes in [`synthetic_grid`].
pub const SYNTHETIC_CLASSES: usize = 10;
/// Per-pixel flip probability in [`synthetic_grid`].
pub const SYNTHETIC_FLIP: f64 = 0.05;

/// `n` noisy copies of ten random binary prototypes; labels are the prototype ids.
pub fn synthetic_grid(n: usize, p: usize, seed: u64) -> Result<Dataset> {
    if n < SYNTHETIC_CLASSES || p == 0 {
        return Err(Error::InvalidInput(format!(
            "synthetic_grid needs n >= {SYNTHETIC_CLASSES} and p >= 1 (got n = {n}, p = {p})"
        )));
    }
    let mut rng = rng::substream(seed, "synthetic");
    let prototypes: Vec<Vec<bool>> = (0..SYNTHETIC_CLASSES)
        .map(|_| (0..p).map(|_| rng.random_bool(0.5)).collect())
        .collect();
    let mut labels: Vec<u8> = (0..n).map(|i| (i % SYNTHETIC_CLASSES) as u8).collect();
    labels.shuffle(&mut rng);
    let mut pixels = Vec::with_capacity(n * p);
    for &label in &labels {
        for &bit in &prototypes[label as usize] {
            let flip = rng.random_bool(SYNTHETIC_FLIP);
            pixels.push(if bit ^ flip { 1.0 } else { 0.0 });
        }
    }
    Dataset::new(
        Tensor::new(vec![n, p], pixels)?,
        Some(labels),
        format!("synthetic_grid(n={n},p={p},seed={seed})"),
        Binarization::Native,
    )
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SKVZ";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model plus everything needed to reproduce it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamSet,
    pub seed: u64,
    pub epochs: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    train: TrainConfig,
    seed: u64,
    epochs: usize,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Checkpoint(format!(
                "truncated record at offset {} (wanted {n} bytes)",
                self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    /// Layout: magic, u32 version, u64 body length, body, u32 CRC32 of all
    /// preceding bytes. Integers are little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&CheckpointMeta {
            model: self.model.clone(),
            train: self.train.clone(),
            seed: self.seed,
            epochs: self.epochs,
        })?;
        let mut body = Vec::new();
        put_u32(&mut body, meta.len() as u32);
        body.extend_from_slice(&meta);
        put_u32(&mut body, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_u32(&mut body, name.len() as u32);
            body.extend_from_slice(name.as_bytes());
            put_u32(&mut body, t.shape().len() as u32);
            for &d in t.shape() {
                put_u64(&mut body, d as u64);
            }
            for v in t.data() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(body.len() + 20);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u64(&mut out, body.len() as u64);
        out.extend_from_slice(&body);
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic at offset 0)".into()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads version {CHECKPOINT_VERSION})"
            )));
        }
        let body_len = r.u64()? as usize;
        let expected = 16usize.saturating_add(body_len).saturating_add(4);
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!(
                "file is {} bytes but header promises {expected} (truncated or padded)",
                bytes.len()
            )));
        }
        let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&bytes[..expected - 4]);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "CRC mismatch (stored {stored:#010x}, computed {actual:#010x})"
            )));
        }
        let mut r = Reader {
            bytes: &bytes[..expected - 4],
            pos: 16,
        };
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = if rank == 0 {
                Tensor::scalar(data_first(&data)?)
            } else {
                Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?
            };
            params.push(name, tensor);
        }
        if r.pos != r.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                r.bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model: meta.model,
            train: meta.train,
            params,
            seed: meta.seed,
            epochs: meta.epochs,
        })
    }
}

fn data_first(data: &[f64]) -> Result<f64> {
    data.first()
        .copied()
        .ok_or_else(|| Error::Checkpoint("scalar tensor without payload".into()))
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Column names of the metrics CSV, in order.
pub const REPORT_COLUMNS: [&str; 14] = [
    "model_id", "dim", "layers", "elbo", "recon", "kl", "mi", "mi_se", "au", "is_nll", "n_eval", "n_mi_points", "S",
    "seed",
];

/// CSV rows or a JSON array of objects; JSON keys equal the CSV columns.
pub fn export_metrics(reports: &[CollapseReport], path: &Path, format: ReportFormat) -> Result<()> {
    let mut w = create(path)?;
    match format {
        ReportFormat::Csv => {
            let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
            csv.write_record(REPORT_COLUMNS)?;
            for r in reports {
                csv.serialize(r)?;
            }
            csv.flush().map_err(|e| Error::io(path, e))?;
        }
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut w, reports)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            w.flush().map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

/// `example_id, label, mean_1 .. mean_D`; the label column is empty for
/// unlabeled data.
pub fn export_latents(means: &Tensor, labels: Option<&[u8]>, path: &Path) -> Result<()> {
    let mut csv = csv::Writer::from_writer(create(path)?);
    let d = means.cols();
    let mut header = vec!["example_id".to_string(), "label".to_string()];
    header.extend((1..=d).map(|j| format!("mean_{j}")));
    csv.write_record(&header)?;
    for i in 0..means.rows() {
        let mut row = vec![i.to_string(), labels.map(|l| l[i].to_string()).unwrap_or_default()];
        row.extend(means.row(i).iter().map(|v| v.to_string()));
        csv.write_record(&row)?;
    }
    csv.flush().map_err(|e| Error::io(path, e))
}

/// One row per completed epoch.
pub fn export_history(history: &TrainHistory, path: &Path) -> Result<()> {
    let mut csv = csv::Writer::from_writer(create(path)?);
    for r in &history.records {
        csv.serialize(r)?;
    }
    if history.records.is_empty() {
        csv.write_record(["epoch", "elbo", "recon", "kl", "kl_weight"])?;
    }
    csv.flush().map_err(|e| Error::io(path, e))
}

//! Datasets: seeded synthetic generators and readers for IDX and CIFAR-style binaries.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Batch;
use crate::error::{Error, Result};
use crate::model::InputShape;

const CENTER_STREAM: u64 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    shape: InputShape,
    n_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, shape: InputShape, n_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() * shape.size() {
            return Err(Error::Length { expected: labels.len() * shape.size(), got: inputs.len() });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange { label, n_classes });
        }
        Ok(Dataset { inputs, labels, shape, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.shape.size();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.shape.size());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        Batch::new(inputs, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Consecutive batches in storage order; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs[..n * self.shape.size()].to_vec(),
            labels: self.labels[..n].to_vec(),
            shape: self.shape,
            n_classes: self.n_classes,
        }
    }

    /// SHA-256 over shape, class count, inputs and labels, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}/{}", self.shape, self.n_classes).as_bytes());
        for x in &self.inputs {
            h.update(x.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn default_classes() -> usize {
    10
}
fn default_dim() -> usize {
    64
}
fn default_train() -> usize {
    5000
}
fn default_test() -> usize {
    1000
}
fn default_one() -> f64 {
    1.0
}
fn default_cluster_std() -> f64 {
    0.6
}
fn default_clusters_per_class() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsSpec {
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_train")]
    pub n_train: usize,
    #[serde(default = "default_test")]
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of the cluster centres around the origin.
    #[serde(default = "default_one")]
    pub center_scale: f64,
    /// Per-coordinate noise around each centre.
    #[serde(default = "default_cluster_std")]
    pub cluster_std: f64,
    /// Several well separated centres per class, so a heavily pruned network
    /// runs short of capacity before the full one does.
    #[serde(default = "default_clusters_per_class")]
    pub clusters_per_class: usize,
}

impl Default for BlobsSpec {
    fn default() -> Self {
        BlobsSpec {
            n_classes: default_classes(),
            dim: default_dim(),
            n_train: default_train(),
            n_test: default_test(),
            seed: 0,
            center_scale: 1.0,
            cluster_std: default_cluster_std(),
            clusters_per_class: default_clusters_per_class(),
        }
    }
}

fn default_spiral_classes() -> usize {
    3
}
fn default_noise() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpiralsSpec {
    #[serde(default = "default_spiral_classes")]
    pub n_classes: usize,
    #[serde(default = "default_train")]
    pub n_train: usize,
    #[serde(default = "default_test")]
    pub n_test: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_one")]
    pub turns: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    /// Applied after scaling pixels to [0, 1]: `(x - mean) / std`.
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "default_one")]
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CifarSpec {
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    /// Per-channel normalisation after scaling to [0, 1].
    #[serde(default = "zero3")]
    pub mean: [f64; 3],
    #[serde(default = "one3")]
    pub std: [f64; 3],
}

fn zero3() -> [f64; 3] {
    [0.0; 3]
}
fn one3() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    SyntheticBlobs(BlobsSpec),
    SyntheticSpirals(SpiralsSpec),
    IdxImages(IdxSpec),
    CifarBinary(CifarSpec),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::SyntheticBlobs(BlobsSpec::default())
    }
}

impl DatasetSpec {
    pub fn n_classes(&self) -> usize {
        match self {
            DatasetSpec::SyntheticBlobs(s) => s.n_classes,
            DatasetSpec::SyntheticSpirals(s) => s.n_classes,
            DatasetSpec::IdxImages(s) => s.n_classes,
            DatasetSpec::CifarBinary(s) => s.n_classes,
        }
    }

    /// Resolves relative file paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSpec::IdxImages(s) => {
                for p in [&mut s.train_images, &mut s.train_labels, &mut s.test_images, &mut s.test_labels] {
                    fix(p);
                }
            }
            DatasetSpec::CifarBinary(s) => s.train_files.iter_mut().chain(s.test_files.iter_mut()).for_each(fix),
            _ => {}
        }
    }
}

/// Returns `(train, test)`.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::SyntheticBlobs(s) => blobs(s),
        DatasetSpec::SyntheticSpirals(s) => spirals(s),
        DatasetSpec::IdxImages(s) => {
            let train = load_idx_pair(&s.train_images, &s.train_labels, s)?;
            let test = load_idx_pair(&s.test_images, &s.test_labels, s)?;
            Ok((train, test))
        }
        DatasetSpec::CifarBinary(s) => Ok((load_cifar_files(&s.train_files, s)?, load_cifar_files(&s.test_files, s)?)),
    }
}

fn blobs(s: &BlobsSpec) -> Result<(Dataset, Dataset)> {
    if s.n_classes < 2 || s.dim == 0 || s.clusters_per_class == 0 {
        return Err(Error::Invalid(format!("blobs need >= 2 classes, dim > 0 and >= 1 cluster per class: {s:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(CENTER_STREAM);
    let n_centers = s.n_classes * s.clusters_per_class;
    let centers: Vec<f64> = (0..n_centers * s.dim)
        .map(|_| s.center_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let draw = |n: usize, stream: u64| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        rng.set_stream(stream);
        let mut inputs = Vec::with_capacity(n * s.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % s.n_classes;
            let cluster = rng.gen_range(0..s.clusters_per_class);
            let c = &centers[(label * s.clusters_per_class + cluster) * s.dim..][..s.dim];
            inputs.extend(c.iter().map(|&m| m + s.cluster_std * rng.sample::<f64, _>(StandardNormal)));
            labels.push(label);
        }
        Dataset::new(inputs, labels, InputShape::Flat(s.dim), s.n_classes)
    };
    Ok((draw(s.n_train, crate::DATASET_TRAIN_STREAM)?, draw(s.n_test, crate::DATASET_TEST_STREAM)?))
}

fn spirals(s: &SpiralsSpec) -> Result<(Dataset, Dataset)> {
    if s.n_classes < 2 {
        return Err(Error::Invalid("spirals need at least 2 classes".into()));
    }
    let draw = |n: usize, stream: u64| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        rng.set_stream(stream);
        let mut inputs = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % s.n_classes;
            let t: f64 = rng.gen_range(0.05..1.0);
            let theta = 2.0 * std::f64::consts::PI * (s.turns * t + label as f64 / s.n_classes as f64);
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            inputs.push(t * theta.cos() + s.noise * nx);
            inputs.push(t * theta.sin() + s.noise * ny);
            labels.push(label);
        }
        Dataset::new(inputs, labels, InputShape::Flat(2), s.n_classes)
    };
    Ok((draw(s.n_train, crate::DATASET_TRAIN_STREAM)?, draw(s.n_test, crate::DATASET_TEST_STREAM)?))
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn idx_bad(detail: String) -> Error {
    Error::Format { what: "IDX file", detail }
}

/// Parses an unsigned-byte IDX payload, returning `(dims, values)`.
pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| idx_bad(format!("truncated header ({} bytes)", bytes.len())))
    };
    let found = word(0)?;
    if found != magic {
        return Err(idx_bad(format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let ndims = (magic & 0xff) as usize;
    let dims: Vec<usize> = (1..=ndims).map(|i| word(i).map(|d| d as usize)).collect::<Result<_>>()?;
    let header = 4 * (ndims + 1);
    let n: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() < n {
        return Err(idx_bad(format!("truncated: dims {dims:?} need {n} bytes, found {}", body.len())));
    }
    if body.len() > n {
        return Err(idx_bad(format!("{} trailing bytes after {n} values", body.len() - n)));
    }
    Ok((dims, body))
}

/// Images as `[n, 1, rows, cols]`, pixels scaled to [0, 1] then normalised.
pub fn read_idx_images(bytes: &[u8], mean: f64, std: f64) -> Result<(InputShape, Vec<f64>)> {
    let (dims, body) = parse_idx(bytes, IDX_IMAGES_MAGIC)?;
    let shape = InputShape::Image { channels: 1, height: dims[1], width: dims[2] };
    Ok((shape, body.iter().map(|&p| (p as f64 / 255.0 - mean) / std).collect()))
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, body) = parse_idx(bytes, IDX_LABELS_MAGIC)?;
    Ok(body.iter().map(|&l| l as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::path(path, e))
}

fn load_idx_pair(images: &Path, labels: &Path, s: &IdxSpec) -> Result<Dataset> {
    let (shape, inputs) = read_idx_images(&read(images)?, s.mean, s.std)?;
    let labels = read_idx_labels(&read(labels)?)?;
    if labels.len() * shape.size() != inputs.len() {
        return Err(idx_bad(format!(
            "{} labels for {} images",
            labels.len(),
            inputs.len() / shape.size().max(1)
        )));
    }
    Dataset::new(inputs, labels, shape, s.n_classes)
}

pub const CIFAR_RECORD: usize = 3073;

/// Parses 3073-byte records (label, then 3x32x32 channel-major pixels).
pub fn read_cifar(bytes: &[u8], n_classes: usize, mean: [f64; 3], std: [f64; 3]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            what: "CIFAR binary",
            detail: format!("{} bytes is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let mut inputs = Vec::with_capacity(bytes.len() / CIFAR_RECORD * 3072);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for rec in bytes.chunks(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        for (i, &p) in rec[1..].iter().enumerate() {
            let c = i / 1024;
            inputs.push((p as f64 / 255.0 - mean[c]) / std[c]);
        }
    }
    Dataset::new(inputs, labels, InputShape::Image { channels: 3, height: 32, width: 32 }, n_classes)
}

fn load_cifar_files(files: &[PathBuf], s: &CifarSpec) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for f in files {
        let part = read(f)?;
        if part.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format {
                what: "CIFAR binary",
                detail: format!("{}: {} bytes is not a multiple of {CIFAR_RECORD}", f.display(), part.len()),
            });
        }
        bytes.extend(part);
    }
    read_cifar(&bytes, s.n_classes, s.mean, s.std)
}

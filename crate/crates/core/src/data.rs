//! Datasets: seeded synthetic generators and loaders for the IDX and
//! CIFAR-10 binary formats.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::rng::rng_for;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn format_err(format: &'static str, reason: impl Into<String>) -> DataError {
    DataError::Format {
        format,
        reason: reason.into(),
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Per-channel (or per-feature) standardization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, features]` or `[N, C, H, W]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: &str) -> Result<Self, DataError> {
        let n = inputs.shape()[0];
        if n == 0 || labels.len() != n {
            return Err(DataError::Invalid(format!("{} labels for {n} samples", labels.len())));
        }
        if inputs.rank() < 2 {
            return Err(DataError::Invalid(format!("inputs need a batch axis, got {:?}", inputs.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!("label {bad} >= {num_classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            split: split.to_string(),
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let x = Tensor::new(shape, data).expect("batch shape matches data");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Mini-batches of a random permutation. A trailing batch with fewer than
    /// two samples is dropped (BatchNorm needs two).
    pub fn shuffled_batches(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order
            .chunks(batch_size.max(1))
            .filter(|c| c.len() >= 2 || batch_size == 1)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Sequential batches covering every sample once.
    pub fn ordered_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Per-channel mean/std (per-feature for rank-2 inputs).
    pub fn compute_stats(&self) -> NormStats {
        let (n, c, s) = self.inputs.channel_layout().expect("rank >= 2");
        let (mean, var) = crate::tensor::channel_moments(self.inputs.data(), n, c, s);
        NormStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var.iter().map(|&v| (v.sqrt() as f32).max(1e-6)).collect(),
        }
    }

    /// Applies `(x - mean) / std` per channel and records the statistics.
    pub fn standardize(&mut self, stats: &NormStats) -> Result<(), DataError> {
        let (_, c, s) = self.inputs.channel_layout()?;
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(DataError::Invalid(format!(
                "statistics for {} channels applied to {c}",
                stats.mean.len()
            )));
        }
        for (i, v) in self.inputs.data_mut().iter_mut().enumerate() {
            let ch = (i / s) % c;
            *v = (*v - stats.mean[ch]) / stats.std[ch];
        }
        self.norm = Some(stats.clone());
        Ok(())
    }

    /// Flattens every sample to a feature vector.
    pub fn flattened(&self) -> Self {
        let mut out = self.clone();
        out.inputs = self
            .inputs
            .reshape(&[self.len(), self.sample_len()])
            .expect("same element count");
        out
    }

    /// Mirrors every image left-right.
    pub fn hflip_batch(x: &mut Tensor) {
        if let &[_, _, _, w] = x.shape() {
            for row in x.data_mut().chunks_mut(w) {
                row.reverse();
            }
        }
    }

    /// Keeps the first `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len()).max(1);
        let idx: Vec<usize> = (0..n).collect();
        let (x, y) = self.batch(&idx);
        Self {
            inputs: x,
            labels: y,
            num_classes: self.num_classes,
            split: self.split.clone(),
            norm: self.norm.clone(),
        }
    }
}

/// Train and test splits of the same task.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Standardizes both splits with statistics of the training split.
    pub fn standardized(mut self) -> Result<Self, DataError> {
        let stats = self.train.compute_stats();
        self.train.standardize(&stats)?;
        self.test.standardize(&stats)?;
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSpec {
    pub classes: usize,
    pub dims: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the cluster centres; samples have unit noise.
    pub separation: f64,
    pub clusters_per_class: usize,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dims: 32,
            train_per_class: 1000,
            test_per_class: 200,
            separation: 0.6,
            clusters_per_class: 3,
        }
    }
}

/// Gaussian class clusters. Every class owns `clusters_per_class` centres
/// drawn from `N(0, separation²)`; samples add unit Gaussian noise to a
/// uniformly chosen centre of their class.
pub fn gen_clusters(spec: &ClusterSpec, seed: u64) -> Result<Splits, DataError> {
    if spec.classes < 2 || spec.dims == 0 || spec.clusters_per_class == 0 {
        return Err(DataError::Invalid(format!("bad cluster spec {spec:?}")));
    }
    if spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(DataError::Invalid("need samples in both splits".into()));
    }
    let centre_dist = Normal::new(0.0, spec.separation).map_err(|e| DataError::Invalid(e.to_string()))?;
    let mut rng = rng_for(seed, "data/centres");
    let centres: Vec<Vec<Vec<f64>>> = (0..spec.classes)
        .map(|_| {
            (0..spec.clusters_per_class)
                .map(|_| (0..spec.dims).map(|_| centre_dist.sample(&mut rng)).collect())
                .collect()
        })
        .collect();
    let make = |per_class: usize, tag: &str| -> Result<Dataset, DataError> {
        let mut rng = rng_for(seed, tag);
        let n = per_class * spec.classes;
        let mut data = Vec::with_capacity(n * spec.dims);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.classes;
            let centre = &centres[class][rng.random_range(0..spec.clusters_per_class)];
            for &c in centre {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push((c + noise) as f32);
            }
            labels.push(class);
        }
        let x = Tensor::new(vec![n, spec.dims], data)?;
        Dataset::new(x, labels, spec.classes, tag.trim_start_matches("data/"))
    };
    Ok(Splits {
        train: make(spec.train_per_class, "data/train")?,
        test: make(spec.test_per_class, "data/test")?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StripeSpec {
    pub classes: usize,
    /// `[channels, height, width]`.
    pub shape: [usize; 3],
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
}

impl Default for StripeSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            shape: [3, 32, 32],
            train_per_class: 500,
            test_per_class: 100,
            noise: 0.8,
        }
    }
}

const ORIENTATIONS: usize = 4;

/// Stripe images. Class `k` fixes an orientation (`k mod 4` of 0°, 45°, 90°,
/// 135°) and a spatial frequency (`k div 4` + 2 cycles per image); the phase,
/// per-channel contrast, and additive Gaussian noise are random per sample.
pub fn gen_stripes(spec: &StripeSpec, seed: u64) -> Result<Splits, DataError> {
    let [c, h, w] = spec.shape;
    if spec.classes < 2 || c == 0 || h == 0 || w == 0 {
        return Err(DataError::Invalid(format!("bad stripe spec {spec:?}")));
    }
    if spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(DataError::Invalid("need samples in both splits".into()));
    }
    let make = |per_class: usize, tag: &str| -> Result<Dataset, DataError> {
        let mut rng = rng_for(seed, tag);
        let n = per_class * spec.classes;
        let mut data = Vec::with_capacity(n * c * h * w);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.classes;
            let theta = (class % ORIENTATIONS) as f64 * PI / ORIENTATIONS as f64;
            let freq = (class / ORIENTATIONS + 2) as f64;
            let (ct, st) = (theta.cos(), theta.sin());
            let phase = rng.random_range(0.0..2.0 * PI);
            for _ in 0..c {
                let contrast = rng.random_range(0.5..1.5);
                for y in 0..h {
                    for x in 0..w {
                        let u = (x as f64 / w as f64) * ct + (y as f64 / h as f64) * st;
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        let v = contrast * (2.0 * PI * freq * u + phase).sin() + spec.noise * noise;
                        data.push(v as f32);
                    }
                }
            }
            labels.push(class);
        }
        let x = Tensor::new(vec![n, c, h, w], data)?;
        Dataset::new(x, labels, spec.classes, tag.trim_start_matches("data/"))
    };
    Ok(Splits {
        train: make(spec.train_per_class, "data/train")?,
        test: make(spec.test_per_class, "data/test")?,
    })
}

/// A decoded IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

const IDX_U8: u8 = 0x08;

/// Decodes the big-endian IDX container (`0, 0, type, rank`, then one u32 per
/// dimension, then the payload). Only the unsigned-byte element type is
/// accepted.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, DataError> {
    let f = "IDX";
    if bytes.len() < 4 {
        return Err(format_err(f, "file shorter than the 4-byte magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(f, format!("bad magic {:02x?}", &bytes[..4])));
    }
    if bytes[2] != IDX_U8 {
        return Err(format_err(f, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let rank = usize::from(bytes[3]);
    if rank == 0 {
        return Err(format_err(f, "rank 0"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(format_err(f, "truncated dimension list"));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut total = 1usize;
    for d in bytes[4..header].chunks_exact(4) {
        let d = u32::from_be_bytes([d[0], d[1], d[2], d[3]]) as usize;
        total = total
            .checked_mul(d)
            .ok_or_else(|| format_err(f, "dimension product overflows"))?;
        dims.push(d);
    }
    let payload = &bytes[header..];
    if payload.len() != total {
        return Err(format_err(
            f,
            format!("payload has {} bytes, dimensions {dims:?} need {total}", payload.len()),
        ));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

/// Builds a dataset from decoded IDX images (`[N, H, W]`) and labels (`[N]`).
/// Pixels are scaled to `[0, 1]`; standardization is left to the caller
/// (see [`Splits::standardized`]).
pub fn idx_dataset(images: &IdxArray, labels: &IdxArray, split: &str) -> Result<Dataset, DataError> {
    let f = "IDX";
    let &[n, h, w] = images.dims.as_slice() else {
        return Err(format_err(f, format!("images must be rank 3, got {:?}", images.dims)));
    };
    if labels.dims != [n] {
        return Err(format_err(f, format!("labels {:?} do not match {n} images", labels.dims)));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(format_err(f, "empty image array"));
    }
    let x = Tensor::new(
        vec![n, 1, h, w],
        images.data.iter().map(|&b| f32::from(b) / 255.0).collect(),
    )?;
    let labels: Vec<usize> = labels.data.iter().map(|&l| usize::from(l)).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    Dataset::new(x, labels, classes, split)
}

/// Reads an IDX image file and its label file.
pub fn load_idx(images: &Path, labels: &Path, split: &str) -> Result<Dataset, DataError> {
    let im = parse_idx(&read_file(images)?)?;
    let lb = parse_idx(&read_file(labels)?)?;
    idx_dataset(&im, &lb, split)
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Decodes CIFAR-10 binary records (one label byte, then 3072 channel-major
/// pixels). Pixels are scaled to `[0, 1]`.
pub fn parse_cifar(bytes: &[u8], split: &str) -> Result<Dataset, DataError> {
    let f = "CIFAR";
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(format_err(
            f,
            format!("{} bytes is not a multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] >= 10 {
            return Err(format_err(f, format!("label {} outside 0..10", rec[0])));
        }
        labels.push(usize::from(rec[0]));
        data.extend(rec[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10, split)
}

/// Concatenates one or more CIFAR-10 binary batch files.
pub fn load_cifar_binary(paths: &[&Path], split: &str) -> Result<Dataset, DataError> {
    let mut bytes = Vec::new();
    for p in paths {
        bytes.extend(read_file(p)?);
    }
    parse_cifar(&bytes, split)
}

//! Run configuration: a flat `key = value` text format with dotted section
//! keys, `#` comments and blank lines. Unknown and repeated keys are errors.
//!
//! ```text
//! # LCS+L TopK on the MLP
//! model.arch = mlp
//! subspace.kind = linear
//! compression.kind = unstructured
//! train.epochs = 20
//! ```

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::compression::{CompressionKind, CompressionSpec};
use crate::data::{gen_clusters, gen_stripes, load_cifar_binary, load_idx, ClusterSpec, DataError, Splits, StripeSpec};
use crate::nn::{GroupsRule, ModelConfig, NormKind, NormSpec};
use crate::subspace::{uniform_set, SamplerMode, SamplerSpec, SubspaceKind};
use crate::train::{
    point_warmup_sampler, with_sparsity_warmup, BaselineKind, BaselineSpec, RunSpec, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { key: String, line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: `{value}` ({reason})")]
    Value { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Splits `text` into `(key, value, line)` triples. Comments start at `#`.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>, ConfigError> {
    let mut out: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let Some((k, v)) = body.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("expected `key = value`, got `{body}`"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        let valid_key = !k.is_empty()
            && k.split('.').all(|part| {
                !part.is_empty() && part.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
            });
        if !valid_key {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("malformed key `{k}`"),
            });
        }
        if out.iter().any(|(seen, _, _)| seen == k) {
            return Err(ConfigError::Duplicate { key: k.into(), line });
        }
        out.push((k.into(), v.into(), line));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Mlp,
    SmallCnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerChoice {
    /// Picked from the compression and subspace kinds.
    Auto,
    Sandwich,
    Biased,
    Discrete,
    PointWarmup,
    Fixed,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Clusters,
    Stripes,
    Idx,
    Cifar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineChoice {
    None,
    FixedTopk,
    FixedBits,
    Ns,
    Us,
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,

    pub arch: Arch,
    pub widths: Vec<usize>,
    pub channels: Vec<usize>,
    pub num_classes: usize,
    /// `None` picks per run: BatchNorm for compression baselines,
    /// GroupNorm otherwise.
    pub norm_kind: Option<NormKind>,
    /// Group rule, momentum and eps; the kind comes from [`Self::norm_spec`].
    pub norm: NormSpec,

    pub subspace: SubspaceKind,
    pub beta: f64,

    pub compression: CompressionKind,
    pub width_min: f64,
    pub bits_min: u32,
    pub bits_max: u32,
    pub quantize_first_last: bool,

    pub sampler: SamplerChoice,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub p_end: f64,
    pub alpha: f64,
    pub alpha_set: Vec<f64>,
    pub as_width: bool,

    pub train: TrainConfig,

    pub baseline: BaselineChoice,
    pub baseline_sparsity: f64,
    pub baseline_bits: u32,
    pub baseline_widths: Vec<f64>,
    pub baseline_width_min: f64,

    pub data: DataSource,
    /// Synthetic data: class count, samples per class (`None` picks the
    /// generator's default) and generator shape parameters.
    pub data_classes: usize,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub dims: usize,
    pub separation: f64,
    pub clusters_per_class: usize,
    pub image_shape: [usize; 3],
    pub noise: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub cifar_train: Vec<PathBuf>,
    pub cifar_test: Vec<PathBuf>,
    /// Keep only the first `n` samples of a split (0 keeps all).
    pub limit_train: usize,
    pub limit_test: usize,

    pub eval_batch_size: usize,
    pub grid_points: usize,
    pub quantize_activations: bool,

    pub output_dir: PathBuf,
    /// Also write a checkpoint every `n` epochs (0 writes only the final one).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            arch: Arch::Mlp,
            widths: vec![256, 256],
            channels: vec![16, 32, 64],
            num_classes: 10,
            norm_kind: None,
            norm: NormSpec::default(),
            subspace: SubspaceKind::Linear,
            beta: 1.0,
            compression: CompressionKind::Unstructured,
            width_min: 0.25,
            bits_min: 2,
            bits_max: 8,
            quantize_first_last: true,
            sampler: SamplerChoice::Auto,
            alpha_min: 0.025,
            alpha_max: 1.0,
            p_end: 0.25,
            alpha: 1.0,
            alpha_set: uniform_set(6),
            as_width: true,
            train: TrainConfig::default(),
            baseline: BaselineChoice::None,
            baseline_sparsity: 0.5,
            baseline_bits: 8,
            baseline_widths: vec![0.25, 0.5, 0.75, 1.0],
            baseline_width_min: 0.25,
            data: DataSource::Clusters,
            data_classes: 10,
            train_per_class: None,
            test_per_class: None,
            dims: ClusterSpec::default().dims,
            separation: ClusterSpec::default().separation,
            clusters_per_class: ClusterSpec::default().clusters_per_class,
            image_shape: StripeSpec::default().shape,
            noise: StripeSpec::default().noise,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            cifar_train: Vec::new(),
            cifar_test: Vec::new(),
            limit_train: 0,
            limit_test: 0,
            eval_batch_size: 256,
            grid_points: 33,
            quantize_activations: true,
            output_dir: PathBuf::from("out"),
            checkpoint_every: 0,
        }
    }
}

fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| bad(key, v, e.to_string()))
}

fn opt_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if v.is_empty() {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, v, "expected true or false")),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn paths(v: &str) -> Vec<PathBuf> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn choice<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T, ConfigError> {
    options.iter().find(|(n, _)| *n == v).map(|&(_, t)| t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        bad(key, v, format!("expected one of {}", names.join(", ")))
    })
}

const ARCHS: &[(&str, Arch)] = &[("mlp", Arch::Mlp), ("small_cnn", Arch::SmallCnn)];
const NORMS: &[(&str, NormKind)] = &[("batch", NormKind::Batch), ("group", NormKind::Group)];
const SUBSPACES: &[(&str, SubspaceKind)] = &[
    ("point", SubspaceKind::Point),
    ("linear", SubspaceKind::Linear),
    ("hybrid", SubspaceKind::Hybrid),
];
const COMPRESSIONS: &[(&str, CompressionKind)] = &[
    ("none", CompressionKind::None),
    ("structured", CompressionKind::Structured),
    ("unstructured", CompressionKind::Unstructured),
    ("quantization", CompressionKind::Quantization),
];
const SAMPLERS: &[(&str, SamplerChoice)] = &[
    ("auto", SamplerChoice::Auto),
    ("sandwich", SamplerChoice::Sandwich),
    ("biased", SamplerChoice::Biased),
    ("discrete", SamplerChoice::Discrete),
    ("point_warmup", SamplerChoice::PointWarmup),
    ("fixed", SamplerChoice::Fixed),
    ("all", SamplerChoice::All),
];
const BASELINES: &[(&str, BaselineChoice)] = &[
    ("none", BaselineChoice::None),
    ("fixed_topk", BaselineChoice::FixedTopk),
    ("fixed_bits", BaselineChoice::FixedBits),
    ("ns", BaselineChoice::Ns),
    ("us", BaselineChoice::Us),
    ("dense", BaselineChoice::Dense),
];
const SOURCES: &[(&str, DataSource)] = &[
    ("clusters", DataSource::Clusters),
    ("stripes", DataSource::Stripes),
    ("idx", DataSource::Idx),
    ("cifar", DataSource::Cifar),
];

fn name_of<T: PartialEq>(options: &[(&'static str, T)], v: &T) -> &'static str {
    options.iter().find(|(_, t)| t == v).map(|(n, _)| *n).expect("every variant is listed")
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn join_paths(xs: &[PathBuf]) -> String {
    xs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, v, line) in parse_pairs(text)? {
            cfg.set(&k, &v).map_err(|e| match e {
                ConfigError::UnknownKey(k) => ConfigError::Syntax {
                    line,
                    msg: format!("unknown config key `{k}`"),
                },
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// Sets one field by its dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let k = key;
        match k {
            "run.name" => self.name = v.into(),
            "run.seed" => {
                self.seed = num(k, v)?;
                self.train.seed = self.seed;
            }
            "model.arch" => self.arch = choice(k, v, ARCHS)?,
            "model.widths" => self.widths = list(k, v)?,
            "model.channels" => self.channels = list(k, v)?,
            "model.num_classes" => self.num_classes = num(k, v)?,
            "norm.kind" => {
                self.norm_kind = if v == "auto" { None } else { Some(choice(k, v, NORMS)?) };
            }
            "norm.groups" => {
                self.norm.groups = if v == "per_channel" {
                    GroupsRule::PerChannel
                } else {
                    GroupsRule::Fixed(num(k, v)?)
                }
            }
            "norm.bn_momentum" => self.norm.bn_momentum = num(k, v)?,
            "norm.eps" => self.norm.eps = num(k, v)?,
            "subspace.kind" => self.subspace = choice(k, v, SUBSPACES)?,
            "subspace.beta" => self.beta = num(k, v)?,
            "compression.kind" => self.compression = choice(k, v, COMPRESSIONS)?,
            "compression.width_min" => self.width_min = num(k, v)?,
            "compression.bits_min" => self.bits_min = num(k, v)?,
            "compression.bits_max" => self.bits_max = num(k, v)?,
            "compression.quantize_first_last" => self.quantize_first_last = boolean(k, v)?,
            "sampler.mode" => self.sampler = choice(k, v, SAMPLERS)?,
            "sampler.alpha_min" => self.alpha_min = num(k, v)?,
            "sampler.alpha_max" => self.alpha_max = num(k, v)?,
            "sampler.p_end" => self.p_end = num(k, v)?,
            "sampler.alpha" => self.alpha = num(k, v)?,
            "sampler.set" => self.alpha_set = list(k, v)?,
            "sampler.as_width" => self.as_width = boolean(k, v)?,
            "train.epochs" => self.train.epochs = num(k, v)?,
            "train.batch_size" => self.train.batch_size = num(k, v)?,
            "train.lr" => self.train.base_lr = num(k, v)?,
            "train.quant_lr" => self.train.quant_lr = num(k, v)?,
            "train.warmup_epochs" => self.train.warmup_epochs = num(k, v)?,
            "train.weight_decay" => self.train.weight_decay = num(k, v)?,
            "train.momentum" => self.train.momentum = num(k, v)?,
            "train.act_quant_start" => self.train.act_quant_start = num(k, v)?,
            "train.sparsity_warmup" => self.train.sparsity_warmup = num(k, v)?,
            "train.hflip" => self.train.hflip = boolean(k, v)?,
            "baseline.kind" => self.baseline = choice(k, v, BASELINES)?,
            "baseline.sparsity" => self.baseline_sparsity = num(k, v)?,
            "baseline.bits" => self.baseline_bits = num(k, v)?,
            "baseline.widths" => self.baseline_widths = list(k, v)?,
            "baseline.width_min" => self.baseline_width_min = num(k, v)?,
            "data.source" => self.data = choice(k, v, SOURCES)?,
            "data.classes" => self.data_classes = num(k, v)?,
            "data.dims" => self.dims = num(k, v)?,
            "data.shape" => {
                let s: Vec<usize> = list(k, v)?;
                self.image_shape = s.try_into().map_err(|_| bad(k, v, "expected channels,height,width"))?;
            }
            "data.train_per_class" => self.train_per_class = opt_num(k, v)?,
            "data.test_per_class" => self.test_per_class = opt_num(k, v)?,
            "data.separation" => self.separation = num(k, v)?,
            "data.clusters_per_class" => self.clusters_per_class = num(k, v)?,
            "data.noise" => self.noise = num(k, v)?,
            "data.train_images" => self.train_images = opt_path(v),
            "data.train_labels" => self.train_labels = opt_path(v),
            "data.test_images" => self.test_images = opt_path(v),
            "data.test_labels" => self.test_labels = opt_path(v),
            "data.cifar_train" => self.cifar_train = paths(v),
            "data.cifar_test" => self.cifar_test = paths(v),
            "data.limit_train" => self.limit_train = num(k, v)?,
            "data.limit_test" => self.limit_test = num(k, v)?,
            "eval.batch_size" => self.eval_batch_size = num(k, v)?,
            "eval.grid_points" => self.grid_points = num(k, v)?,
            "eval.quantize_activations" => self.quantize_activations = boolean(k, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            "output.checkpoint_every" => self.checkpoint_every = num(k, v)?,
            _ => return Err(ConfigError::UnknownKey(k.into())),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let groups = match self.norm.groups {
            GroupsRule::PerChannel => "per_channel".to_string(),
            GroupsRule::Fixed(g) => g.to_string(),
        };
        vec![
            ("run.name", self.name.clone()),
            ("run.seed", self.seed.to_string()),
            ("model.arch", name_of(ARCHS, &self.arch).into()),
            ("model.widths", join(&self.widths)),
            ("model.channels", join(&self.channels)),
            ("model.num_classes", self.num_classes.to_string()),
            ("norm.kind", self.norm_kind.map_or("auto", |n| name_of(NORMS, &n)).into()),
            ("norm.groups", groups),
            ("norm.bn_momentum", self.norm.bn_momentum.to_string()),
            ("norm.eps", self.norm.eps.to_string()),
            ("subspace.kind", name_of(SUBSPACES, &self.subspace).into()),
            ("subspace.beta", self.beta.to_string()),
            ("compression.kind", name_of(COMPRESSIONS, &self.compression).into()),
            ("compression.width_min", self.width_min.to_string()),
            ("compression.bits_min", self.bits_min.to_string()),
            ("compression.bits_max", self.bits_max.to_string()),
            ("compression.quantize_first_last", self.quantize_first_last.to_string()),
            ("sampler.mode", name_of(SAMPLERS, &self.sampler).into()),
            ("sampler.alpha_min", self.alpha_min.to_string()),
            ("sampler.alpha_max", self.alpha_max.to_string()),
            ("sampler.p_end", self.p_end.to_string()),
            ("sampler.alpha", self.alpha.to_string()),
            ("sampler.set", join(&self.alpha_set)),
            ("sampler.as_width", self.as_width.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.lr", self.train.base_lr.to_string()),
            ("train.quant_lr", self.train.quant_lr.to_string()),
            ("train.warmup_epochs", self.train.warmup_epochs.to_string()),
            ("train.weight_decay", self.train.weight_decay.to_string()),
            ("train.momentum", self.train.momentum.to_string()),
            ("train.act_quant_start", self.train.act_quant_start.to_string()),
            ("train.sparsity_warmup", self.train.sparsity_warmup.to_string()),
            ("train.hflip", self.train.hflip.to_string()),
            ("baseline.kind", name_of(BASELINES, &self.baseline).into()),
            ("baseline.sparsity", self.baseline_sparsity.to_string()),
            ("baseline.bits", self.baseline_bits.to_string()),
            ("baseline.widths", join(&self.baseline_widths)),
            ("baseline.width_min", self.baseline_width_min.to_string()),
            ("data.source", name_of(SOURCES, &self.data).into()),
            ("data.classes", self.data_classes.to_string()),
            ("data.dims", self.dims.to_string()),
            ("data.shape", join(&self.image_shape)),
            ("data.train_per_class", self.train_per_class.map(|n| n.to_string()).unwrap_or_default()),
            ("data.test_per_class", self.test_per_class.map(|n| n.to_string()).unwrap_or_default()),
            ("data.separation", self.separation.to_string()),
            ("data.clusters_per_class", self.clusters_per_class.to_string()),
            ("data.noise", self.noise.to_string()),
            ("data.train_images", show_path(&self.train_images)),
            ("data.train_labels", show_path(&self.train_labels)),
            ("data.test_images", show_path(&self.test_images)),
            ("data.test_labels", show_path(&self.test_labels)),
            ("data.cifar_train", join_paths(&self.cifar_train)),
            ("data.cifar_test", join_paths(&self.cifar_test)),
            ("data.limit_train", self.limit_train.to_string()),
            ("data.limit_test", self.limit_test.to_string()),
            ("eval.batch_size", self.eval_batch_size.to_string()),
            ("eval.grid_points", self.grid_points.to_string()),
            ("eval.quantize_activations", self.quantize_activations.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
            ("output.checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    /// Canonical text form; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Whether this config trains one of the fixed-target baselines.
    pub fn is_baseline(&self) -> bool {
        self.baseline != BaselineChoice::None
    }

    /// Normalization for this run. Compression baselines default to
    /// BatchNorm, as the methods they stand for use it; subspaces and the
    /// dense baseline default to GroupNorm.
    pub fn norm_spec(&self) -> NormSpec {
        let auto = match self.baseline {
            BaselineChoice::FixedTopk | BaselineChoice::FixedBits | BaselineChoice::Ns | BaselineChoice::Us => {
                NormKind::Batch
            }
            BaselineChoice::None | BaselineChoice::Dense => NormKind::Group,
        };
        NormSpec {
            kind: self.norm_kind.unwrap_or(auto),
            ..self.norm
        }
    }

    /// Compression kind actually trained (baselines imply their own).
    pub fn effective_compression(&self) -> CompressionKind {
        match self.baseline {
            BaselineChoice::None => self.compression,
            BaselineChoice::FixedTopk => CompressionKind::Unstructured,
            BaselineChoice::FixedBits => CompressionKind::Quantization,
            BaselineChoice::Ns | BaselineChoice::Us => CompressionKind::Structured,
            BaselineChoice::Dense => CompressionKind::None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.train.validate()?;
        if self.widths.is_empty() && self.arch == Arch::Mlp {
            return invalid("model.widths must list at least one hidden width".into());
        }
        if self.channels.is_empty() && self.arch == Arch::SmallCnn {
            return invalid("model.channels must list at least one block".into());
        }
        if self.widths.contains(&0) || self.channels.contains(&0) {
            return invalid("model widths and channels must be positive".into());
        }
        if self.eval_batch_size == 0 || self.grid_points == 0 {
            return invalid("eval.batch_size and eval.grid_points must be positive".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return invalid(format!("subspace.beta must be >= 0, got {}", self.beta));
        }
        let kind = self.effective_compression();
        if kind == CompressionKind::Structured && self.arch != Arch::SmallCnn {
            return invalid("structured compression needs model.arch = small_cnn (MLP hidden widths are not pruned)".into());
        }
        if self.is_baseline() {
            if self.subspace != SubspaceKind::Point {
                return invalid("baselines train a single network; set subspace.kind = point".into());
            }
        } else if kind == CompressionKind::Structured
            && (self.norm_spec().kind != NormKind::Group || self.norm.groups != GroupsRule::PerChannel)
        {
            return invalid(
                "structured subspaces need InstanceNorm: set norm.kind = group and norm.groups = per_channel".into(),
            );
        }
        if self.arch == Arch::SmallCnn && self.data == DataSource::Clusters {
            return invalid("small_cnn needs image data (data.source = stripes, idx or cifar)".into());
        }
        if matches!(self.data, DataSource::Clusters | DataSource::Stripes) && self.data_classes != self.num_classes
        {
            return invalid(format!(
                "data.classes ({}) must equal model.num_classes ({})",
                self.data_classes, self.num_classes
            ));
        }
        match self.data {
            DataSource::Idx => {
                let all = [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels];
                if all.iter().any(|p| p.is_none()) {
                    return invalid("idx data needs data.train_images, train_labels, test_images and test_labels".into());
                }
            }
            DataSource::Cifar => {
                if self.cifar_train.is_empty() || self.cifar_test.is_empty() {
                    return invalid("cifar data needs data.cifar_train and data.cifar_test".into());
                }
            }
            _ => {}
        }
        self.compression_spec(1)?.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    fn compression_spec(&self, total_steps: u64) -> Result<CompressionSpec, ConfigError> {
        let mut spec = CompressionSpec {
            width_min: self.width_min,
            bits_min: self.bits_min,
            bits_max: self.bits_max,
            quantize_first_last: self.quantize_first_last,
            ..CompressionSpec::new(self.compression)
        };
        if self.subspace != SubspaceKind::Point {
            spec = with_sparsity_warmup(spec, &self.train, total_steps);
        }
        Ok(spec)
    }

    pub fn baseline_spec(&self) -> Option<BaselineSpec> {
        let kind = match self.baseline {
            BaselineChoice::None => return None,
            BaselineChoice::FixedTopk => BaselineKind::FixedTopk {
                sparsity: self.baseline_sparsity,
            },
            BaselineChoice::FixedBits => BaselineKind::FixedBits {
                bits: self.baseline_bits,
            },
            BaselineChoice::Ns => BaselineKind::NsStyle {
                widths: self.baseline_widths.clone(),
            },
            BaselineChoice::Us => BaselineKind::UsStyle {
                width_min: self.baseline_width_min,
            },
            BaselineChoice::Dense => BaselineKind::Dense,
        };
        Some(BaselineSpec {
            kind,
            norm: self.norm_spec().kind,
        })
    }

    /// Compression spec, sampler and training settings for a run of
    /// `total_steps` optimizer steps.
    pub fn run_spec(&self, total_steps: u64) -> Result<RunSpec, ConfigError> {
        self.validate()?;
        if let Some(b) = self.baseline_spec() {
            let (mut run, _) = b.setup(&self.train, total_steps)?;
            run.compression.quantize_first_last = self.quantize_first_last;
            return Ok(run);
        }
        let compression = self.compression_spec(total_steps)?;
        let mode = match self.sampler {
            SamplerChoice::Auto => match (self.compression, self.subspace) {
                (CompressionKind::None, _) => SamplerMode::Fixed { alpha: 1.0 },
                (CompressionKind::Structured, _) => SamplerMode::StructuredSandwich {
                    width_min: self.width_min,
                    as_width: self.as_width,
                },
                (CompressionKind::Unstructured, SubspaceKind::Point) => {
                    return Ok(RunSpec {
                        compression,
                        sampler: point_warmup_sampler(self.alpha_min, self.alpha_max, &self.train, total_steps)?,
                        train: self.train.clone(),
                    })
                }
                (CompressionKind::Unstructured, _) => SamplerMode::UnstructuredBiased {
                    alpha_min: self.alpha_min,
                    alpha_max: self.alpha_max,
                    p_end: self.p_end,
                },
                (CompressionKind::Quantization, _) => SamplerMode::QuantDiscrete {
                    set: uniform_set((self.bits_max - self.bits_min) as usize),
                },
            },
            SamplerChoice::Sandwich => SamplerMode::StructuredSandwich {
                width_min: self.width_min,
                as_width: self.as_width,
            },
            SamplerChoice::Biased => SamplerMode::UnstructuredBiased {
                alpha_min: self.alpha_min,
                alpha_max: self.alpha_max,
                p_end: self.p_end,
            },
            SamplerChoice::Discrete => SamplerMode::QuantDiscrete {
                set: self.alpha_set.clone(),
            },
            SamplerChoice::PointWarmup => {
                return Ok(RunSpec {
                    compression,
                    sampler: point_warmup_sampler(self.alpha_min, self.alpha_max, &self.train, total_steps)?,
                    train: self.train.clone(),
                })
            }
            SamplerChoice::Fixed => SamplerMode::Fixed { alpha: self.alpha },
            SamplerChoice::All => SamplerMode::All {
                set: self.alpha_set.clone(),
            },
        };
        let sampler = SamplerSpec::new(mode).map_err(TrainError::from)?;
        Ok(RunSpec {
            compression,
            sampler,
            train: self.train.clone(),
        })
    }

    /// Lowest α the evaluation grid starts from.
    pub fn grid_alpha_min(&self) -> f64 {
        match self.effective_compression() {
            CompressionKind::Unstructured => self.alpha_min,
            _ => 0.0,
        }
    }

    pub fn cluster_spec(&self) -> ClusterSpec {
        let d = ClusterSpec::default();
        ClusterSpec {
            classes: self.data_classes,
            dims: self.dims,
            train_per_class: self.train_per_class.unwrap_or(d.train_per_class),
            test_per_class: self.test_per_class.unwrap_or(d.test_per_class),
            separation: self.separation,
            clusters_per_class: self.clusters_per_class,
        }
    }

    pub fn stripe_spec(&self) -> StripeSpec {
        let d = StripeSpec::default();
        StripeSpec {
            classes: self.data_classes,
            shape: self.image_shape,
            train_per_class: self.train_per_class.unwrap_or(d.train_per_class),
            test_per_class: self.test_per_class.unwrap_or(d.test_per_class),
            noise: self.noise,
        }
    }

    /// Generates or loads both splits, standardized with training statistics
    /// and flattened for the MLP.
    pub fn load_data(&self) -> Result<Splits, ConfigError> {
        let data_seed = crate::rng::derive_seed(self.seed, "data");
        let mut splits = match self.data {
            DataSource::Clusters => gen_clusters(&self.cluster_spec(), data_seed)?,
            DataSource::Stripes => gen_stripes(&self.stripe_spec(), data_seed)?,
            DataSource::Idx => {
                let need = |p: &Option<PathBuf>| {
                    p.clone()
                        .ok_or_else(|| ConfigError::Invalid("idx data paths are incomplete".into()))
                };
                Splits {
                    train: load_idx(&need(&self.train_images)?, &need(&self.train_labels)?, "train")?,
                    test: load_idx(&need(&self.test_images)?, &need(&self.test_labels)?, "test")?,
                }
            }
            DataSource::Cifar => {
                let tr: Vec<&Path> = self.cifar_train.iter().map(PathBuf::as_path).collect();
                let te: Vec<&Path> = self.cifar_test.iter().map(PathBuf::as_path).collect();
                Splits {
                    train: load_cifar_binary(&tr, "train")?,
                    test: load_cifar_binary(&te, "test")?,
                }
            }
        };
        if self.limit_train > 0 {
            splits.train = splits.train.truncated(self.limit_train);
        }
        if self.limit_test > 0 {
            splits.test = splits.test.truncated(self.limit_test);
        }
        for d in [&mut splits.train, &mut splits.test] {
            if let Some(&bad) = d.labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(ConfigError::Invalid(format!(
                    "{} split has label {bad} but model.num_classes = {}",
                    d.split, self.num_classes
                )));
            }
            d.num_classes = self.num_classes;
        }
        let mut splits = splits.standardized()?;
        if self.arch == Arch::Mlp && splits.train.sample_shape().len() > 1 {
            splits.train = splits.train.flattened();
            splits.test = splits.test.flattened();
        }
        Ok(splits)
    }

    /// Model configuration for samples of shape `sample_shape`.
    pub fn model_config(&self, sample_shape: &[usize]) -> Result<ModelConfig, ConfigError> {
        let cfg = match (self.arch, sample_shape) {
            (Arch::Mlp, &[d]) => ModelConfig::mlp(d, &self.widths, self.num_classes, self.norm_spec()),
            (Arch::SmallCnn, &[c, h, w]) => ModelConfig::small_cnn([c, h, w], &self.channels, self.num_classes, self.norm_spec()),
            (arch, shape) => {
                return Err(ConfigError::Invalid(format!("{arch:?} cannot take samples of shape {shape:?}")));
            }
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

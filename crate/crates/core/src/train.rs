//! Training loop for compressible subspaces and the fixed-target baselines.
//!
//! Each batch draws a list of α values, runs one forward/backward pass per α
//! on the compressed network `f(ω*(α), γ(α))`, sums the losses (plus the
//! cosine regularizer for lines) and takes a single optimizer step.

use std::f64::consts::PI;
use std::fmt::Write as _;

use indexmap::IndexMap;
use thiserror::Error;

use crate::compression::{
    alpha_from_width, compress_on_tape, CompressionError, CompressionKind, CompressionSpec, Level,
    WarmupSchedule,
};
use crate::data::Dataset;
use crate::nn::{ForwardOptions, Model, ModelError, NormKind, ParamSet};
use crate::rng::rng_for;
use crate::subspace::{uniform_set, SamplerMode, SamplerSpec, Subspace, SubspaceError, SubspaceKind};
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(
        "training diverged at epoch {epoch} step {step} (alpha {alpha}, lr {lr}): {detail}; \
         the learning rate is probably too high"
    )]
    Diverged {
        epoch: usize,
        step: u64,
        alpha: f64,
        lr: f64,
        detail: String,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error(transparent)]
    Subspace(#[from] SubspaceError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Used instead of `base_lr` when training under quantization.
    pub quant_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Fraction of training after which activations are quantized too.
    pub act_quant_start: f64,
    /// Fraction of training covered by the sparsity warmup.
    pub sparsity_warmup: f64,
    /// Random horizontal flips of image batches.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            base_lr: 0.1,
            quant_lr: 0.025,
            warmup_epochs: 5,
            weight_decay: 5e-4,
            momentum: 0.9,
            seed: 0,
            act_quant_start: 0.8,
            sparsity_warmup: 0.8,
            hflip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size < 2 {
            return bad(format!(
                "need epochs >= 1 and batch size >= 2, got {} and {}",
                self.epochs, self.batch_size
            ));
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup epochs ({}) must be fewer than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.base_lr > 0.0 && self.quant_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight decay >= 0".into());
        }
        for (name, v) in [("act_quant_start", self.act_quant_start), ("sparsity_warmup", self.sparsity_warmup)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        Ok(())
    }

    pub fn lr_for(&self, kind: CompressionKind) -> f64 {
        if kind == CompressionKind::Quantization {
            self.quant_lr
        } else {
            self.base_lr
        }
    }
}

/// Linear warmup from 0 to `base` over `warmup_steps`, then cosine decay to
/// 0 at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, base: f64) -> f64 {
    if step < warmup_steps {
        return base * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let progress = ((step - warmup_steps) as f64 / span).min(1.0);
    0.5 * base * (1.0 + (PI * progress).cos())
}

/// SGD with momentum and decoupled-from-affine weight decay:
/// `g += wd·w; buf = μ·buf + g; w -= lr·buf`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: IndexMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: IndexMap::new(),
        }
    }

    /// Updates every parameter that received a gradient. Weight decay
    /// applies to conv/linear weights only.
    pub fn step(&mut self, params: &mut ParamSet, grads: &IndexMap<String, Vec<f32>>, lr: f64) {
        let (mu, lr) = (self.momentum as f32, lr as f32);
        for p in params.iter_mut() {
            let Some(g) = grads.get(&p.name) else { continue };
            let wd = if p.kind.decays() { self.weight_decay as f32 } else { 0.0 };
            let buf = self
                .buffers
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((w, &gi), b) in p.value.data_mut().iter_mut().zip(g).zip(buf.iter_mut()) {
                let g = gi + wd * *w;
                *b = mu * *b + g;
                *w -= lr * *b;
            }
        }
    }

    pub fn buffer(&self, name: &str) -> Option<&[f32]> {
        self.buffers.get(name).map(Vec::as_slice)
    }
}

/// One logged forward/backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub alpha: f64,
    pub gamma: f64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<LogRow>,
    pub steps: u64,
}

impl History {
    pub const HEADER: &'static str = "epoch,step,alpha,gamma,loss,lr";

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(32 * (self.rows.len() + 1));
        s.push_str(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, r.step, r.alpha, r.gamma, r.loss, r.lr);
        }
        s
    }

    /// Mean loss over the passes of the final epoch.
    pub fn final_epoch_loss(&self) -> Option<f64> {
        let last = self.rows.last()?.epoch;
        let rows: Vec<_> = self.rows.iter().filter(|r| r.epoch == last).collect();
        Some(rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64)
    }
}

pub fn steps_per_epoch(data: &Dataset, batch_size: usize) -> u64 {
    let full = data.len() / batch_size;
    let rem = data.len() % batch_size;
    (full + usize::from(rem >= 2)) as u64
}

/// Called after every epoch with the 1-based epoch number.
pub type EpochHook<'a> = dyn FnMut(usize, &Model, &Subspace) -> Result<(), TrainError> + 'a;

/// Everything that defines one training run besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub compression: CompressionSpec,
    pub sampler: SamplerSpec,
    pub train: TrainConfig,
}

/// Trains `subspace` in place. `model` carries the layer graph and, for
/// BatchNorm models, the running statistics that are updated as a side
/// effect.
pub fn train_subspace(
    model: &mut Model,
    subspace: &mut Subspace,
    run: &RunSpec,
    data: &Dataset,
    mut on_epoch: Option<&mut EpochHook<'_>>,
) -> Result<History, TrainError> {
    let cfg = &run.train;
    cfg.validate()?;
    run.compression.validate()?;
    if data.len() < 2 {
        return Err(TrainError::Config("need at least two training samples".into()));
    }
    let per_epoch = steps_per_epoch(data, cfg.batch_size);
    let total = per_epoch * cfg.epochs as u64;
    let warmup_steps = per_epoch * cfg.warmup_epochs as u64;
    let act_start = (cfg.act_quant_start * total as f64).round() as u64;
    let base_lr = cfg.lr_for(run.compression.kind);
    let spec = run.compression;

    let mut shuffle_rng = rng_for(cfg.seed, "train/shuffle");
    let mut alpha_rng = rng_for(cfg.seed, "train/alpha");
    let mut flip_rng = rng_for(cfg.seed, "train/flip");
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut history = History::default();
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        for batch in data.shuffled_batches(cfg.batch_size, &mut shuffle_rng) {
            let (mut x, y) = data.batch(&batch);
            if cfg.hflip && x.rank() == 4 && rand::Rng::random_bool(&mut flip_rng, 0.5) {
                Dataset::hflip_batch(&mut x);
            }
            let lr = lr_at(step, total, warmup_steps, base_lr);
            let alphas = run.sampler.sample_alphas(step, &mut alpha_rng);
            let diverged = |alpha: f64, detail: String| TrainError::Diverged {
                epoch,
                step,
                alpha,
                lr,
                detail,
            };

            let mut tape = Tape::<f32>::new();
            let xv = tape.constant(x);
            let leaves: IndexMap<String, Var> = subspace
                .params()
                .iter()
                .map(|p| (p.name.clone(), tape.leaf(p.value.clone())))
                .collect();
            let mut total_loss: Option<Var> = None;
            let mut bn_updates = Vec::new();
            for &alpha in &alphas {
                let level = spec.level_at(alpha, step)?;
                let act_bits = match level {
                    Level::Bits(b) if step >= act_start => Some(b),
                    _ => None,
                };
                let weights = subspace.materialize_vars(&mut tape, &leaves, alpha)?;
                let (weights, plan) =
                    compress_on_tape(&mut tape, model, &weights, level, spec.quantize_first_last)?;
                let opts = ForwardOptions {
                    train: true,
                    plan: plan.as_ref(),
                    act_bits,
                    observe_bn: false,
                };
                let out = model
                    .forward(&mut tape, &weights, xv, &opts)
                    .map_err(|e| diverged(alpha, e.to_string()))?;
                let loss = tape
                    .softmax_cross_entropy(out.logits, &y)
                    .map_err(|e| diverged(alpha, e.to_string()))?;
                let value = f64::from(tape.value(loss).item());
                if !value.is_finite() {
                    return Err(diverged(alpha, format!("loss is {value}")));
                }
                history.rows.push(LogRow {
                    epoch,
                    step,
                    alpha,
                    gamma: level.value(),
                    loss: value,
                    lr,
                });
                bn_updates.push(out.bn_stats);
                total_loss = Some(match total_loss {
                    Some(t) => tape.add(t, loss)?,
                    None => loss,
                });
            }
            let mut objective = total_loss.ok_or_else(|| TrainError::Config("sampler returned no alpha".into()))?;
            if let Some(r) = subspace.regularizer_on_tape(&mut tape, &leaves)? {
                objective = tape.add(objective, r)?;
            }
            let mut grads = tape.backward(objective)?;
            let grads: IndexMap<String, Vec<f32>> = leaves
                .iter()
                .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g.into_data())))
                .collect();
            if grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(diverged(alphas[0], "non-finite gradient".into()));
            }
            opt.step(subspace.params_mut(), &grads, lr);
            for stats in &bn_updates {
                model.update_bn(stats);
            }
            step += 1;
        }
        if let Some(hook) = on_epoch.as_deref_mut() {
            hook(epoch, model, subspace)?;
        }
    }
    history.steps = step;
    Ok(history)
}

/// Adds the sparsity warmup schedule for a run of `total_steps` steps.
pub fn with_sparsity_warmup(mut spec: CompressionSpec, cfg: &TrainConfig, total_steps: u64) -> CompressionSpec {
    if spec.kind == CompressionKind::Unstructured && cfg.sparsity_warmup > 0.0 {
        spec.warmup = Some(WarmupSchedule {
            total_steps: ((cfg.sparsity_warmup * total_steps as f64).round() as u64).max(1),
        });
    }
    spec
}

#[derive(Clone, Debug, PartialEq)]
pub enum BaselineKind {
    /// One network trained at a single TopK sparsity, ramped up linearly over
    /// the warmup fraction of training.
    FixedTopk { sparsity: f64 },
    /// Quantization-aware training at one bit width.
    FixedBits { bits: u32 },
    /// Every width of a fixed set on every batch.
    NsStyle { widths: Vec<f64> },
    /// Sandwich sampling over a width range.
    UsStyle { width_min: f64 },
    /// Plain training, no compression.
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    pub norm: NormKind,
}

impl BaselineSpec {
    /// Compression spec, sampler, and subspace shape implementing this
    /// baseline. Baselines are single networks, i.e. point subspaces.
    pub fn setup(&self, cfg: &TrainConfig, total_steps: u64) -> Result<(RunSpec, SubspaceKind), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        let (compression, mode) = match &self.kind {
            BaselineKind::FixedTopk { sparsity } => {
                if !(0.0..1.0).contains(sparsity) {
                    return bad(format!("TopK target {sparsity} outside [0, 1)"));
                }
                let spec = with_sparsity_warmup(CompressionSpec::new(CompressionKind::Unstructured), cfg, total_steps);
                (spec, SamplerMode::Fixed { alpha: 1.0 - sparsity })
            }
            BaselineKind::FixedBits { bits } => {
                let spec = CompressionSpec::new(CompressionKind::Quantization);
                if !(spec.bits_min..=spec.bits_max).contains(bits) {
                    return bad(format!("bit width {bits} outside [{}, {}]", spec.bits_min, spec.bits_max));
                }
                let alpha = f64::from(bits - spec.bits_min) / f64::from(spec.bits_max - spec.bits_min);
                (spec, SamplerMode::Fixed { alpha })
            }
            BaselineKind::NsStyle { widths } => {
                let spec = CompressionSpec::new(CompressionKind::Structured);
                if widths.is_empty() || widths.iter().any(|&w| !(w >= spec.width_min && w <= 1.0)) {
                    return bad(format!("NS widths {widths:?} outside [{}, 1]", spec.width_min));
                }
                let set = widths.iter().map(|&w| alpha_from_width(w, spec.width_min)).collect();
                (spec, SamplerMode::All { set })
            }
            BaselineKind::UsStyle { width_min } => {
                let spec = CompressionSpec {
                    width_min: *width_min,
                    ..CompressionSpec::new(CompressionKind::Structured)
                };
                (
                    spec,
                    SamplerMode::StructuredSandwich {
                        width_min: *width_min,
                        as_width: true,
                    },
                )
            }
            BaselineKind::Dense => (CompressionSpec::new(CompressionKind::None), SamplerMode::Fixed { alpha: 1.0 }),
        };
        Ok((
            RunSpec {
                compression,
                sampler: SamplerSpec::new(mode)?,
                train: cfg.clone(),
            },
            SubspaceKind::Point,
        ))
    }
}

/// Sampler for the point-subspace variant of a compression kind: the first
/// warmup fraction of steps trains at `alpha_max`, the rest uniformly.
pub fn point_warmup_sampler(alpha_min: f64, alpha_max: f64, cfg: &TrainConfig, total_steps: u64) -> Result<SamplerSpec, TrainError> {
    Ok(SamplerSpec::new(SamplerMode::PointWarmup {
        alpha_min,
        alpha_max,
        warmup_steps: (cfg.sparsity_warmup * total_steps as f64).round() as u64,
    })?)
}

/// Default quantization sampler over the six bit widths 3..=8.
pub fn quant_sampler() -> SamplerSpec {
    SamplerSpec::new(SamplerMode::QuantDiscrete { set: uniform_set(6) }).expect("valid set")
}

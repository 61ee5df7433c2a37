//! Compression functions `f(ω, γ)`, their level calculators `γ(α)`, the
//! sparsity warmup schedule, and cost accounting.

mod cost;
mod quant;
mod structured;
mod topk;

pub use cost::{compression_cost, CostReport};
pub use quant::{fake_quantize, quantize_affine, QuantParams, MAX_BITS, MIN_BITS};
pub use structured::{active_channels, channel_plan, kept_channels, mask_structured};
pub use topk::{topk_in_place, topk_mask, topk_zero_count};

use thiserror::Error;

use crate::nn::{ChannelPlan, Model, ModelError, NamedTensors, ParamKind, WeightVars};
use crate::tensor::{Scalar, Tape, TensorError};

#[derive(Debug, Error)]
pub enum CompressionError {
    #[error("invalid compression level: {0}")]
    Level(String),
    #[error("missing weight `{0}`")]
    MissingWeight(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CompressionKind {
    /// No compression; the dense network.
    None,
    Structured,
    Unstructured,
    Quantization,
}

/// Structured width factor: `γ = w_min + (1 - w_min)·α`.
pub fn gamma_structured(alpha: f64, width_min: f64) -> f64 {
    width_min + (1.0 - width_min) * alpha
}

/// Inverse of [`gamma_structured`].
pub fn alpha_from_width(gamma: f64, width_min: f64) -> f64 {
    (gamma - width_min) / (1.0 - width_min)
}

/// Unstructured sparsity: `γ = 1 - α`.
pub fn gamma_unstructured(alpha: f64) -> f64 {
    1.0 - alpha
}

/// Bit width `b_min + (b_max - b_min)·α`, rounded to the nearest integer.
pub fn gamma_quant(alpha: f64, bits_min: u32, bits_max: u32) -> u32 {
    let b = f64::from(bits_min) + f64::from(bits_max - bits_min) * alpha;
    b.round_ties_even().clamp(f64::from(bits_min), f64::from(bits_max)) as u32
}

/// Linear sparsity warmup over the first `total_steps` iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WarmupSchedule {
    pub total_steps: u64,
}

impl WarmupSchedule {
    /// Warmup factor `d = max(1 - c/t, 0)`.
    pub fn d(&self, step: u64) -> f64 {
        (1.0 - step as f64 / self.total_steps.max(1) as f64).max(0.0)
    }
}

/// Effective sparsity during warmup: `γ = (1 - α)(1 - d)`.
pub fn warmup_gamma(alpha: f64, step: u64, schedule: &WarmupSchedule) -> f64 {
    (1.0 - alpha) * (1.0 - schedule.d(step))
}

/// A concrete compression level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Level {
    Dense,
    Width(f64),
    Sparsity(f64),
    Bits(u32),
}

impl Level {
    /// The level as a number, as written to sweep output.
    pub fn value(&self) -> f64 {
        match *self {
            Level::Dense => 0.0,
            Level::Width(g) | Level::Sparsity(g) => g,
            Level::Bits(b) => f64::from(b),
        }
    }

    pub fn bits(&self) -> Option<u32> {
        match *self {
            Level::Bits(b) => Some(b),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionSpec {
    pub kind: CompressionKind,
    /// Structured width at `α = 0`.
    pub width_min: f64,
    pub bits_min: u32,
    pub bits_max: u32,
    /// Sparsity warmup (unstructured only).
    pub warmup: Option<WarmupSchedule>,
    /// Quantize the first and last layers as well.
    pub quantize_first_last: bool,
}

impl CompressionSpec {
    pub fn new(kind: CompressionKind) -> Self {
        Self {
            kind,
            width_min: 0.25,
            bits_min: MIN_BITS,
            bits_max: MAX_BITS,
            warmup: None,
            quantize_first_last: true,
        }
    }

    pub fn validate(&self) -> Result<(), CompressionError> {
        if !(self.width_min > 0.0 && self.width_min < 1.0) {
            return Err(CompressionError::Level(format!(
                "structured width range must start in (0, 1), got {}",
                self.width_min
            )));
        }
        if self.bits_min < MIN_BITS || self.bits_max > MAX_BITS || self.bits_min >= self.bits_max {
            return Err(CompressionError::Level(format!(
                "bit range [{}, {}] must lie in [{MIN_BITS}, {MAX_BITS}]",
                self.bits_min, self.bits_max
            )));
        }
        Ok(())
    }

    /// `γ(α)` without warmup.
    pub fn level(&self, alpha: f64) -> Result<Level, CompressionError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CompressionError::Level(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(match self.kind {
            CompressionKind::None => Level::Dense,
            CompressionKind::Structured => Level::Width(gamma_structured(alpha, self.width_min)),
            CompressionKind::Unstructured => Level::Sparsity(gamma_unstructured(alpha)),
            CompressionKind::Quantization => Level::Bits(gamma_quant(alpha, self.bits_min, self.bits_max)),
        })
    }

    /// `γ(α)` at training iteration `step`, applying the sparsity warmup.
    pub fn level_at(&self, alpha: f64, step: u64) -> Result<Level, CompressionError> {
        match (self.kind, &self.warmup) {
            (CompressionKind::Unstructured, Some(w)) => {
                self.level(alpha)?;
                Ok(Level::Sparsity(warmup_gamma(alpha, step, w)))
            }
            _ => self.level(alpha),
        }
    }
}

/// A compressed weight set. For structured levels the weights are masked at
/// full shape and `plan` holds the sliced widths actually used by the
/// forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Compressed {
    pub weights: NamedTensors,
    pub plan: Option<ChannelPlan>,
}

/// Names of conv/linear weights with their first/last flags.
fn weight_roles(model: &Model) -> Vec<(String, bool)> {
    let descs = model.descriptors();
    model
        .param_specs()
        .into_iter()
        .filter(|s| s.kind == ParamKind::Weight)
        .map(|s| {
            let d = descs.iter().find(|d| d.name == s.layer).expect("spec layer exists");
            (s.name, d.is_first_layer || d.is_last_layer)
        })
        .collect()
}

fn check_sparsity(gamma: f64) -> Result<(), CompressionError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(CompressionError::Level(format!("sparsity {gamma} outside [0, 1)")));
    }
    Ok(())
}

fn check_bits(bits: u32) -> Result<(), CompressionError> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(CompressionError::Level(format!(
            "bit width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

/// Zeroes the `⌊γ·n⌋` smallest-magnitude weights of every conv/linear layer
/// except the first and last.
pub fn apply_topk(model: &Model, weights: &NamedTensors, gamma: f64) -> Result<NamedTensors, CompressionError> {
    check_sparsity(gamma)?;
    let mut out = weights.clone();
    for (name, exempt) in weight_roles(model) {
        if exempt {
            continue;
        }
        let t = out.get_mut(&name).ok_or(CompressionError::MissingWeight(name))?;
        topk_in_place(t.data_mut(), gamma);
    }
    Ok(out)
}

/// Keeps a channel prefix of width `γ` in every layer boundary; see
/// [`channel_plan`].
pub fn apply_structured(
    model: &Model,
    weights: &NamedTensors,
    gamma: f64,
) -> Result<(NamedTensors, ChannelPlan), CompressionError> {
    let plan = channel_plan(model, gamma)?;
    let masked = mask_structured(model, weights, &plan)?;
    Ok((masked, plan))
}

/// Fake-quantizes conv/linear weights per tensor. Biases and norm affines
/// stay in full precision.
pub fn apply_quantization(
    model: &Model,
    weights: &NamedTensors,
    bits: u32,
    quantize_first_last: bool,
) -> Result<NamedTensors, CompressionError> {
    check_bits(bits)?;
    let mut out = weights.clone();
    for (name, first_or_last) in weight_roles(model) {
        if first_or_last && !quantize_first_last {
            continue;
        }
        let t = out.get_mut(&name).ok_or(CompressionError::MissingWeight(name))?;
        *t = quantize_affine(t, bits)?.1;
    }
    Ok(out)
}

/// `f(ω, γ)` for any level.
pub fn compress(
    model: &Model,
    weights: &NamedTensors,
    level: Level,
    quantize_first_last: bool,
) -> Result<Compressed, CompressionError> {
    Ok(match level {
        Level::Dense => Compressed {
            weights: weights.clone(),
            plan: None,
        },
        Level::Width(g) => {
            let (weights, plan) = apply_structured(model, weights, g)?;
            Compressed {
                weights,
                plan: Some(plan),
            }
        }
        Level::Sparsity(g) => Compressed {
            weights: apply_topk(model, weights, g)?,
            plan: None,
        },
        Level::Bits(b) => Compressed {
            weights: apply_quantization(model, weights, b, quantize_first_last)?,
            plan: None,
        },
    })
}

/// Differentiable `f(ω, γ)` on a tape. TopK multiplies by a constant mask,
/// so pruned entries receive no gradient; quantization passes gradients
/// straight through; structured levels return a channel plan and leave the
/// weights to be sliced by the forward pass.
pub fn compress_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model,
    weights: &WeightVars,
    level: Level,
    quantize_first_last: bool,
) -> Result<(WeightVars, Option<ChannelPlan>), CompressionError> {
    let mut out = weights.clone();
    match level {
        Level::Dense => Ok((out, None)),
        Level::Width(g) => Ok((out, Some(channel_plan(model, g)?))),
        Level::Sparsity(g) => {
            check_sparsity(g)?;
            for (name, exempt) in weight_roles(model) {
                if exempt || g == 0.0 {
                    continue;
                }
                let v = *weights.get(&name).ok_or_else(|| CompressionError::MissingWeight(name.clone()))?;
                let value = tape.value(v);
                let mask = crate::tensor::Tensor::new(value.shape().to_vec(), topk_mask(value.data(), g))?;
                let m = tape.constant(mask);
                let pruned = tape.mul(v, m)?;
                out.insert(name, pruned);
            }
            Ok((out, None))
        }
        Level::Bits(b) => {
            check_bits(b)?;
            for (name, first_or_last) in weight_roles(model) {
                if first_or_last && !quantize_first_last {
                    continue;
                }
                let v = *weights.get(&name).ok_or_else(|| CompressionError::MissingWeight(name.clone()))?;
                let q = fake_quantize(tape.value(v), b)?;
                let st = tape.straight_through(v, q)?;
                out.insert(name, st);
            }
            Ok((out, None))
        }
    }
}

#[cfg(test)]
mod tests;

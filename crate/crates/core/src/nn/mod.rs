//! Layers, normalization, and the two desk-scale architectures.
//!
//! A [`Model`] describes the layer graph and owns BatchNorm running
//! statistics. Trainable weights live outside the model (in a subspace) and
//! are handed to [`Model::forward`] as tape variables, so the same graph can
//! be evaluated at any point of a weight subspace.

mod params;

pub use params::{NamedTensors, ParamKind, ParamSet, ParamSpec, Parameter};

use indexmap::IndexMap;
use rand::Rng;
use thiserror::Error;

use crate::compression::fake_quantize;
use crate::tensor::{conv2d_output_size, pool_output_size, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing weight `{0}`")]
    MissingWeight(String),
    #[error("channel plan does not match the model: {0}")]
    Plan(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Group,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupsRule {
    Fixed(usize),
    /// `g = c`, i.e. InstanceNorm.
    PerChannel,
}

impl GroupsRule {
    /// Group count for a layer with `channels` channels. A fixed count that
    /// does not divide the channels (or exceeds them) falls back to one group
    /// per channel.
    pub fn effective_groups(self, channels: usize) -> usize {
        match self {
            GroupsRule::PerChannel => channels,
            GroupsRule::Fixed(g) if g == 0 || channels < g || channels % g != 0 => channels,
            GroupsRule::Fixed(g) => g,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormSpec {
    pub kind: NormKind,
    pub groups: GroupsRule,
    pub affine: bool,
    pub bn_momentum: f64,
    pub eps: f64,
}

impl Default for NormSpec {
    // Momentum/eps follow the common framework defaults; the method itself
    // does not pin them.
    fn default() -> Self {
        Self {
            kind: NormKind::Group,
            groups: GroupsRule::Fixed(32),
            affine: true,
            bn_momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    /// Hidden widths; each hidden layer is linear → norm → ReLU.
    Mlp { widths: Vec<usize> },
    /// Per-block channels; each block is 3×3 conv → norm → ReLU → 2×2 avg pool.
    SmallCnn { channels: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub norm: NormSpec,
    pub num_classes: usize,
    /// `[features]` for the MLP, `[channels, height, width]` for the CNN.
    pub input_shape: Vec<usize>,
}

impl ModelConfig {
    pub fn mlp(input: usize, widths: &[usize], num_classes: usize, norm: NormSpec) -> Self {
        Self {
            architecture: Architecture::Mlp {
                widths: widths.to_vec(),
            },
            norm,
            num_classes,
            input_shape: vec![input],
        }
    }

    pub fn small_cnn(input: [usize; 3], channels: &[usize], num_classes: usize, norm: NormSpec) -> Self {
        Self {
            architecture: Architecture::SmallCnn {
                channels: channels.to_vec(),
            },
            norm,
            num_classes,
            input_shape: input.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if let GroupsRule::Fixed(0) = self.norm.groups {
            return bad("fixed group count must be >= 1".into());
        }
        if !(self.norm.bn_momentum > 0.0 && self.norm.bn_momentum < 1.0) || !(self.norm.eps > 0.0) {
            return bad("norm momentum must be in (0,1) and eps > 0".into());
        }
        match &self.architecture {
            Architecture::Mlp { widths } => {
                if widths.is_empty() || widths.contains(&0) {
                    return bad(format!("MLP widths must be positive, got {widths:?}"));
                }
                if self.input_shape.len() != 1 || self.input_shape[0] == 0 {
                    return bad(format!("MLP input must be [features], got {:?}", self.input_shape));
                }
            }
            Architecture::SmallCnn { channels } => {
                if channels.is_empty() || channels.contains(&0) {
                    return bad(format!("CNN channels must be positive, got {channels:?}"));
                }
                let &[c, h, w] = self.input_shape.as_slice() else {
                    return bad(format!("CNN input must be [c, h, w], got {:?}", self.input_shape));
                };
                let div = 1usize << channels.len();
                if c == 0 || h == 0 || w == 0 || h % div != 0 || w % div != 0 {
                    return bad(format!(
                        "CNN input {h}x{w} must be divisible by {div} for {} pooled blocks",
                        channels.len()
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Conv,
    Norm,
    Activation,
    Pool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDescriptor {
    pub name: String,
    pub kind: LayerKind,
    pub is_first_layer: bool,
    pub is_last_layer: bool,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    /// Weight stored as `[in, out]`.
    Linear { bias: bool },
    /// Weight stored as `[out, in, k, k]`.
    Conv { kernel: usize, stride: usize, pad: usize },
    Norm,
    Relu,
    AvgPool { kernel: usize, stride: usize },
    GlobalAvgPool,
}

/// Running statistics of one BatchNorm layer. Starts at mean 0, variance 1,
/// so evaluating before any training step is well defined.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }

    /// `running = (1 - m) * running + m * batch` over the leading
    /// `mean.len()` channels; the variance update uses the unbiased batch
    /// variance.
    pub fn update(&mut self, momentum: f64, mean: &[f64], biased_var: &[f64], count: usize) {
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = ((1.0 - momentum) * f64::from(*r) + momentum * m) as f32;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(biased_var) {
            *r = ((1.0 - momentum) * f64::from(*r) + momentum * v * unbias) as f32;
        }
    }
}

/// Active `(in, out)` channel counts for every linear/conv layer, indexed like
/// [`Model::descriptors`]. Produced by structured compression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelPlan {
    pub widths: Vec<Option<(usize, usize)>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    pub train: bool,
    pub plan: Option<&'a ChannelPlan>,
    /// Fake-quantize activations after every norm + ReLU.
    pub act_bits: Option<u32>,
    /// Record batch moments at BatchNorm inputs in eval mode too.
    pub observe_bn: bool,
}

/// Moments of a BatchNorm layer's input on the current batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub layer: String,
    pub mean: Vec<f64>,
    pub biased_var: Vec<f64>,
    pub count: usize,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub bn_stats: Vec<BnBatchStats>,
}

pub type WeightVars = IndexMap<String, Var>;

/// Per-sample shape facts for one linear/conv layer, used by cost accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeometry {
    /// Index into [`Model::descriptors`].
    pub index: usize,
    /// `k_h * k_w` (1 for linear layers).
    pub kernel_area: usize,
    /// Output positions per sample, `H₁W₁` (1 for linear layers).
    pub out_positions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
    descriptors: Vec<LayerDescriptor>,
    bn: IndexMap<String, BatchNormState>,
}

pub fn build_model(config: ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let mut layers = Vec::new();
    let mut desc = Vec::new();
    let mut push = |layer: Layer, name: String, kind, cin, cout| {
        layers.push(layer);
        desc.push(LayerDescriptor {
            name,
            kind,
            is_first_layer: false,
            is_last_layer: false,
            in_channels: cin,
            out_channels: cout,
        });
    };
    match &config.architecture {
        Architecture::Mlp { widths } => {
            let mut cin = config.input_shape[0];
            for (i, &w) in widths.iter().enumerate() {
                let i = i + 1;
                push(Layer::Linear { bias: false }, format!("fc{i}"), LayerKind::Linear, cin, w);
                push(Layer::Norm, format!("norm{i}"), LayerKind::Norm, w, w);
                push(Layer::Relu, format!("relu{i}"), LayerKind::Activation, w, w);
                cin = w;
            }
            let last = widths.len() + 1;
            push(
                Layer::Linear { bias: true },
                format!("fc{last}"),
                LayerKind::Linear,
                cin,
                config.num_classes,
            );
        }
        Architecture::SmallCnn { channels } => {
            let mut cin = config.input_shape[0];
            for (i, &c) in channels.iter().enumerate() {
                let i = i + 1;
                push(
                    Layer::Conv {
                        kernel: 3,
                        stride: 1,
                        pad: 1,
                    },
                    format!("conv{i}"),
                    LayerKind::Conv,
                    cin,
                    c,
                );
                push(Layer::Norm, format!("norm{i}"), LayerKind::Norm, c, c);
                push(Layer::Relu, format!("relu{i}"), LayerKind::Activation, c, c);
                push(
                    Layer::AvgPool { kernel: 2, stride: 2 },
                    format!("pool{i}"),
                    LayerKind::Pool,
                    c,
                    c,
                );
                cin = c;
            }
            push(Layer::GlobalAvgPool, "gap".into(), LayerKind::Pool, cin, cin);
            push(
                Layer::Linear { bias: true },
                "fc".into(),
                LayerKind::Linear,
                cin,
                config.num_classes,
            );
        }
    }
    let weighted: Vec<usize> = (0..desc.len())
        .filter(|&i| matches!(desc[i].kind, LayerKind::Linear | LayerKind::Conv))
        .collect();
    desc[weighted[0]].is_first_layer = true;
    desc[*weighted.last().expect("at least one weighted layer")].is_last_layer = true;

    let bn = if config.norm.kind == NormKind::Batch {
        desc.iter()
            .filter(|d| d.kind == LayerKind::Norm)
            .map(|d| (d.name.clone(), BatchNormState::new(d.out_channels)))
            .collect()
    } else {
        IndexMap::new()
    };
    Ok(Model {
        config,
        layers,
        descriptors: desc,
        bn,
    })
}

/// Swaps every BatchNorm for GroupNorm using the config's group rule. Affine
/// parameter names are unchanged, so trained affines carry over; running
/// statistics are dropped.
pub fn replace_bn_with_gn(model: &Model) -> Model {
    let mut out = model.clone();
    out.config.norm.kind = NormKind::Group;
    out.bn.clear();
    out
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn descriptors(&self) -> &[LayerDescriptor] {
        &self.descriptors
    }

    pub fn norm_kind(&self) -> NormKind {
        self.config.norm.kind
    }

    pub fn bn_states(&self) -> &IndexMap<String, BatchNormState> {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut IndexMap<String, BatchNormState> {
        &mut self.bn
    }

    pub fn norm_layer_count(&self) -> usize {
        self.descriptors.iter().filter(|d| d.kind == LayerKind::Norm).count()
    }

    /// Group count used by every norm layer at full width (`None` for BN).
    pub fn group_counts(&self) -> Vec<Option<usize>> {
        self.descriptors
            .iter()
            .filter(|d| d.kind == LayerKind::Norm)
            .map(|d| match self.config.norm.kind {
                NormKind::Batch => None,
                NormKind::Group => Some(self.config.norm.groups.effective_groups(d.out_channels)),
            })
            .collect()
    }

    /// Indices of linear/conv layers.
    pub fn weighted_layers(&self) -> impl Iterator<Item = (usize, &LayerDescriptor)> {
        self.descriptors
            .iter()
            .enumerate()
            .filter(|(_, d)| matches!(d.kind, LayerKind::Linear | LayerKind::Conv))
    }

    /// Geometry of every linear/conv layer for one input sample.
    pub fn layer_geometry(&self) -> Result<Vec<LayerGeometry>, ModelError> {
        let mut hw = match self.config.input_shape.as_slice() {
            &[_, h, w] => (h, w),
            _ => (1, 1),
        };
        let mut out = Vec::new();
        for (index, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear { .. } => out.push(LayerGeometry {
                    index,
                    kernel_area: 1,
                    out_positions: 1,
                }),
                Layer::Conv { kernel, stride, pad } => {
                    hw = (
                        conv2d_output_size(hw.0, *kernel, *stride, *pad)?,
                        conv2d_output_size(hw.1, *kernel, *stride, *pad)?,
                    );
                    out.push(LayerGeometry {
                        index,
                        kernel_area: kernel * kernel,
                        out_positions: hw.0 * hw.1,
                    });
                }
                Layer::AvgPool { kernel, stride } => {
                    hw = (
                        pool_output_size(hw.0, *kernel, *stride)?,
                        pool_output_size(hw.1, *kernel, *stride)?,
                    );
                }
                Layer::GlobalAvgPool => hw = (1, 1),
                Layer::Norm | Layer::Relu => {}
            }
        }
        Ok(out)
    }

    /// Trainable parameters in registration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for (layer, d) in self.layers.iter().zip(&self.descriptors) {
            match layer {
                Layer::Linear { bias } => {
                    specs.push(ParamSpec {
                        name: format!("{}.weight", d.name),
                        shape: vec![d.in_channels, d.out_channels],
                        kind: ParamKind::Weight,
                        fan_in: d.in_channels,
                        layer: d.name.clone(),
                    });
                    if *bias {
                        specs.push(ParamSpec {
                            name: format!("{}.bias", d.name),
                            shape: vec![d.out_channels],
                            kind: ParamKind::Bias,
                            fan_in: d.in_channels,
                            layer: d.name.clone(),
                        });
                    }
                }
                Layer::Conv { kernel, .. } => specs.push(ParamSpec {
                    name: format!("{}.weight", d.name),
                    shape: vec![d.out_channels, d.in_channels, *kernel, *kernel],
                    kind: ParamKind::Weight,
                    fan_in: d.in_channels * kernel * kernel,
                    layer: d.name.clone(),
                }),
                Layer::Norm if self.config.norm.affine => {
                    for (suffix, kind) in [("scale", ParamKind::NormScale), ("shift", ParamKind::NormShift)] {
                        specs.push(ParamSpec {
                            name: format!("{}.{suffix}", d.name),
                            shape: vec![d.out_channels],
                            kind,
                            fan_in: d.out_channels,
                            layer: d.name.clone(),
                        });
                    }
                }
                _ => {}
            }
        }
        specs
    }

    /// Kaiming-uniform fan-in weights, zero biases, unit scales. Hidden layers
    /// use the ReLU gain; the classifier uses `1/sqrt(fan_in)` so fresh logits
    /// stay close to uniform.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamSet {
        let last = self.descriptors.iter().find(|d| d.is_last_layer).map(|d| d.name.clone());
        let mut set = ParamSet::default();
        for spec in self.param_specs() {
            let n: usize = spec.shape.iter().product();
            let data = match spec.kind {
                ParamKind::Weight => {
                    let gain2 = if Some(&spec.layer) == last.as_ref() { 1.0 / 6.0 } else { 1.0 };
                    let bound = (6.0 * gain2 / spec.fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
                }
                ParamKind::Bias | ParamKind::NormShift => vec![0.0; n],
                ParamKind::NormScale => vec![1.0; n],
            };
            let value = Tensor::new(spec.shape.clone(), data).expect("spec shapes are valid");
            set.insert(Parameter::new(spec.name, spec.kind, value));
        }
        set
    }

    /// Full-width channel plan (every layer keeps all channels).
    pub fn full_plan(&self) -> ChannelPlan {
        ChannelPlan {
            widths: self
                .descriptors
                .iter()
                .map(|d| {
                    matches!(d.kind, LayerKind::Linear | LayerKind::Conv)
                        .then_some((d.in_channels, d.out_channels))
                })
                .collect(),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        weights: &WeightVars,
        input: Var,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput, ModelError> {
        let get = |name: String| -> Result<Var, ModelError> {
            weights.get(&name).copied().ok_or(ModelError::MissingWeight(name))
        };
        if let Some(plan) = opts.plan {
            if plan.widths.len() != self.layers.len() {
                return Err(ModelError::Plan(format!(
                    "{} entries for {} layers",
                    plan.widths.len(),
                    self.layers.len()
                )));
            }
        }
        let norm = &self.config.norm;
        let mut h = input;
        let mut active = 0usize;
        let mut bn_stats = Vec::new();
        for (idx, (layer, d)) in self.layers.iter().zip(&self.descriptors).enumerate() {
            h = match layer {
                Layer::Linear { bias } => {
                    let (kin, kout) = self.layer_width(opts.plan, idx)?;
                    let w = narrow_to(tape, get(format!("{}.weight", d.name))?, &[kin, kout])?;
                    let mut y = tape.matmul(h, w)?;
                    if *bias {
                        let b = narrow_to(tape, get(format!("{}.bias", d.name))?, &[kout])?;
                        y = tape.add_channel(y, b)?;
                    }
                    active = kout;
                    y
                }
                Layer::Conv { kernel, stride, pad } => {
                    let (kin, kout) = self.layer_width(opts.plan, idx)?;
                    let w = narrow_to(
                        tape,
                        get(format!("{}.weight", d.name))?,
                        &[kout, kin, *kernel, *kernel],
                    )?;
                    active = kout;
                    tape.conv2d(h, w, *stride, *pad)?
                }
                Layer::Norm => {
                    let y = match norm.kind {
                        NormKind::Group => {
                            let g = norm.groups.effective_groups(active);
                            tape.group_norm(h, g, norm.eps)?
                        }
                        NormKind::Batch if opts.train => {
                            let (n, _, s) = tape.value(h).channel_layout()?;
                            let (y, mean, var) = tape.batch_norm_train(h, norm.eps)?;
                            bn_stats.push(BnBatchStats {
                                layer: d.name.clone(),
                                mean,
                                biased_var: var,
                                count: n * s,
                            });
                            y
                        }
                        NormKind::Batch => {
                            let state = self
                                .bn
                                .get(&d.name)
                                .ok_or_else(|| ModelError::MissingWeight(format!("{} running stats", d.name)))?;
                            if opts.observe_bn {
                                let v = tape.value(h);
                                let (n, c, s) = v.channel_layout()?;
                                let (mean, var) = crate::tensor::channel_moments(v.data(), n, c, s);
                                bn_stats.push(BnBatchStats {
                                    layer: d.name.clone(),
                                    mean,
                                    biased_var: var,
                                    count: n * s,
                                });
                            }
                            let mean: Vec<f64> =
                                state.running_mean.data()[..active].iter().map(|&v| f64::from(v)).collect();
                            let var: Vec<f64> =
                                state.running_var.data()[..active].iter().map(|&v| f64::from(v)).collect();
                            tape.normalize_fixed(h, &mean, &var, norm.eps)?
                        }
                    };
                    if norm.affine {
                        let scale = narrow_to(tape, get(format!("{}.scale", d.name))?, &[active])?;
                        let shift = narrow_to(tape, get(format!("{}.shift", d.name))?, &[active])?;
                        tape.channel_affine(y, scale, shift)?
                    } else {
                        y
                    }
                }
                Layer::Relu => {
                    let y = tape.relu(h)?;
                    match opts.act_bits {
                        Some(bits) => {
                            let q = fake_quantize(tape.value(y), bits)?;
                            tape.straight_through(y, q)?
                        }
                        None => y,
                    }
                }
                Layer::AvgPool { kernel, stride } => tape.avgpool2d(h, *kernel, *stride)?,
                Layer::GlobalAvgPool => {
                    let &[_, _, hh, ww] = tape.shape(h) else {
                        return Err(ModelError::Config("global pool expects NCHW".into()));
                    };
                    if hh != ww {
                        return Err(ModelError::Config(format!("global pool expects square maps, got {hh}x{ww}")));
                    }
                    let p = tape.avgpool2d(h, hh, 1)?;
                    tape.flatten(p)?
                }
            };
        }
        Ok(ForwardOutput { logits: h, bn_stats })
    }

    fn layer_width(&self, plan: Option<&ChannelPlan>, idx: usize) -> Result<(usize, usize), ModelError> {
        let d = &self.descriptors[idx];
        match plan {
            None => Ok((d.in_channels, d.out_channels)),
            Some(p) => {
                let (kin, kout) = p.widths[idx]
                    .ok_or_else(|| ModelError::Plan(format!("no width for layer {}", d.name)))?;
                if kin == 0 || kout == 0 || kin > d.in_channels || kout > d.out_channels {
                    return Err(ModelError::Plan(format!(
                        "layer {} keeps ({kin}, {kout}) of ({}, {})",
                        d.name, d.in_channels, d.out_channels
                    )));
                }
                Ok((kin, kout))
            }
        }
    }

    /// Folds the batch statistics recorded by a training forward pass into
    /// the running statistics.
    pub fn update_bn(&mut self, stats: &[BnBatchStats]) {
        let momentum = self.config.norm.bn_momentum;
        for s in stats {
            if let Some(state) = self.bn.get_mut(&s.layer) {
                state.update(momentum, &s.mean, &s.biased_var, s.count);
            }
        }
    }

    /// Places `weights` on `tape` as leaves (`trainable`) or constants.
    pub fn weights_on_tape<T: Scalar>(tape: &mut Tape<T>, weights: &NamedTensors, trainable: bool) -> WeightVars {
        weights
            .iter()
            .map(|(name, t)| {
                let v = t.cast::<T>();
                let var = if trainable { tape.leaf(v) } else { tape.constant(v) };
                (name.clone(), var)
            })
            .collect()
    }

    /// Eval-mode logits for a batch (no gradients).
    pub fn predict(
        &self,
        weights: &NamedTensors,
        batch: &Tensor,
        plan: Option<&ChannelPlan>,
        act_bits: Option<u32>,
    ) -> Result<Tensor, ModelError> {
        let mut tape = Tape::<f32>::new();
        let vars = Self::weights_on_tape(&mut tape, weights, false);
        let x = tape.constant(batch.clone());
        let opts = ForwardOptions {
            train: false,
            plan,
            act_bits,
            observe_bn: false,
        };
        let out = self.forward(&mut tape, &vars, x, &opts)?;
        Ok(tape.value(out.logits).clone())
    }
}

fn narrow_to<T: Scalar>(tape: &mut Tape<T>, v: Var, keep: &[usize]) -> Result<Var, TensorError> {
    if tape.shape(v) == keep {
        Ok(v)
    } else {
        tape.narrow_prefix(v, keep)
    }
}

#[cfg(test)]
mod tests;

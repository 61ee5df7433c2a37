//! Evaluation of trained subspaces: α sweeps (forward and reversed),
//! BatchNorm drift analysis and correlation statistics.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::compression::{compress, compression_cost, CompressionError, CompressionKind, CompressionSpec, Level};
use crate::data::Dataset;
use crate::nn::{BnBatchStats, ChannelPlan, ForwardOptions, Model, ModelError, NamedTensors, NormKind};
use crate::subspace::{Subspace, SubspaceError};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error(transparent)]
    Subspace(#[from] SubspaceError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Mean cross-entropy per sample.
    pub loss: f64,
}

/// Accuracy and mean loss of `weights` on `data` in eval mode.
pub fn evaluate(
    model: &Model,
    weights: &NamedTensors,
    data: &Dataset,
    batch_size: usize,
    plan: Option<&ChannelPlan>,
    act_bits: Option<u32>,
) -> Result<EvalResult, EvalError> {
    if data.is_empty() || batch_size == 0 {
        return Err(EvalError::Invalid("empty dataset or zero batch size".into()));
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for idx in data.ordered_batches(batch_size) {
        let (x, y) = data.batch(&idx);
        let logits = model.predict(weights, &x, plan, act_bits)?;
        let (c, l) = score(&logits, &y)?;
        correct += c;
        loss += l;
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

/// Correct count and summed cross-entropy (in f64) of a logits batch.
fn score(logits: &Tensor, labels: &[usize]) -> Result<(usize, f64), EvalError> {
    let &[n, k] = logits.shape() else {
        return Err(EvalError::Invalid(format!("logits must be rank 2, got {:?}", logits.shape())));
    };
    let mut correct = 0;
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks(k).zip(labels).take(n) {
        if label >= k {
            return Err(EvalError::Invalid(format!("label {label} out of range for {k} classes")));
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        // first maximal index wins ties
        let pred = row.iter().position(|&v| v == max).unwrap_or(0);
        correct += usize::from(pred == label);
        let lse = f64::from(max) + row.iter().map(|&v| f64::from(v - max).exp()).sum::<f64>().ln();
        loss += lse - f64::from(row[label]);
    }
    Ok((correct, loss))
}

/// Everything needed to evaluate one point of a trained subspace.
#[derive(Clone, Copy)]
pub struct Evaluator<'a> {
    pub model: &'a Model,
    pub subspace: &'a Subspace,
    pub spec: &'a CompressionSpec,
    pub data: &'a Dataset,
    pub batch_size: usize,
    /// Quantize activations alongside weights (as in the last stretch of
    /// quantization training).
    pub quantize_activations: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    /// Applied level: width factor, sparsity fraction or bit width.
    pub gamma: f64,
    pub accuracy: f64,
    pub loss: f64,
    pub flops: u64,
    pub nonzero: u64,
    pub bits: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub const HEADER: &'static str = "alpha,gamma,accuracy,loss,flops,nonzero,bits";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.alpha, r.gamma, r.accuracy, r.loss, r.flops, r.nonzero, r.bits
            );
        }
        s
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.rows.iter().map(|r| r.accuracy).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

impl Evaluator<'_> {
    /// Evaluates `ω*(alpha)` compressed at `level`.
    pub fn evaluate_at(&self, alpha: f64, level: Level) -> Result<EvalResult, EvalError> {
        let weights = self.subspace.materialize(alpha)?;
        let c = compress(self.model, &weights, level, self.spec.quantize_first_last)?;
        let act_bits = if self.quantize_activations { level.bits() } else { None };
        evaluate(self.model, &c.weights, self.data, self.batch_size, c.plan.as_ref(), act_bits)
    }

    fn row(&self, alpha: f64, level_alpha: f64) -> Result<SweepRow, EvalError> {
        let level = self.spec.level(level_alpha)?;
        let r = self.evaluate_at(alpha, level)?;
        let cost = compression_cost(self.model, self.subspace.kind(), level, self.spec.quantize_first_last)?;
        Ok(SweepRow {
            alpha,
            gamma: level.value(),
            accuracy: r.accuracy,
            loss: r.loss,
            flops: cost.compressed_flops,
            nonzero: cost.nonzero_params,
            bits: cost.storage_bits,
        })
    }

    fn run(&self, grid: &[f64], reversed: bool) -> Result<SweepResult, EvalError> {
        check_grid(grid)?;
        let n = grid.len();
        let rows = (0..n)
            .into_par_iter()
            .map(|i| self.row(grid[i], if reversed { grid[n - 1 - i] } else { grid[i] }))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SweepResult { rows })
    }

    /// Evaluates `f(ω*(α), γ(α))` at every grid point. Rows are computed in
    /// parallel and returned in grid order.
    pub fn sweep(&self, grid: &[f64]) -> Result<SweepResult, EvalError> {
        self.run(grid, false)
    }

    /// Evaluates `f(ω*(α), γ(α'))` where `α'` is α mirrored within the grid
    /// (`grid[n-1-i]` for `grid[i]`), pairing each end of the line with the
    /// other end's compression level. For a grid spanning `[0, 1]` this is
    /// `γ(1 − α)`.
    pub fn reversed_sweep(&self, grid: &[f64]) -> Result<SweepResult, EvalError> {
        self.run(grid, true)
    }
}

fn check_grid(grid: &[f64]) -> Result<(), EvalError> {
    if grid.is_empty() {
        return Err(EvalError::Invalid("empty alpha grid".into()));
    }
    if grid.iter().any(|a| !(0.0..=1.0).contains(a)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::Invalid(format!("alpha grid must be strictly increasing within [0, 1]: {grid:?}")));
    }
    Ok(())
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn alpha_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![hi],
        _ => (0..n)
            .map(|i| if i == n - 1 { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

/// Default evaluation grid for a compression kind: 33 points over
/// `[alpha_min, 1]`, or the six trained bit widths for quantization.
pub fn default_grid(kind: CompressionKind, alpha_min: f64) -> Vec<f64> {
    match kind {
        CompressionKind::Quantization => crate::subspace::uniform_set(6),
        _ => alpha_grid(alpha_min, 1.0, 33),
    }
}

/// Pearson correlation coefficient, `None` when fewer than two pairs or
/// either side is constant.
pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Which running statistic the drift is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DriftStat {
    #[default]
    Mean,
    Variance,
}

/// Histogram with log-spaced buckets; values outside the range land in the
/// first or last bucket.
#[derive(Clone, Debug, PartialEq)]
pub struct LogHistogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl LogHistogram {
    pub fn new(lo: f64, hi: f64, buckets: usize) -> Self {
        Self {
            lo,
            hi,
            counts: vec![0; buckets],
        }
    }

    pub fn bucket(&self, v: f64) -> usize {
        let n = self.counts.len();
        if !(v > self.lo) {
            return 0;
        }
        let t = (v / self.lo).ln() / (self.hi / self.lo).ln();
        ((t * n as f64) as usize).min(n - 1)
    }

    pub fn add(&mut self, v: f64) {
        let b = self.bucket(v);
        self.counts[b] += 1;
    }

    /// Lower edge of bucket `i`.
    pub fn edge(&self, i: usize) -> f64 {
        self.lo * (self.hi / self.lo).powf(i as f64 / self.counts.len() as f64)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub const DRIFT_BUCKETS: usize = 64;
pub const DRIFT_RANGE: (f64, f64) = (1e-6, 10.0);

#[derive(Clone, Debug, PartialEq)]
pub struct SettingDrift {
    pub label: String,
    pub level: Level,
    /// `(layer, mean over batches of the channel-averaged |μ − μ̂|)`.
    pub layers: Vec<(String, f64)>,
    /// Average of the per-layer values.
    pub mean_drift: f64,
    /// Test error under this setting.
    pub error: f64,
    /// Pooled per-channel `|μ − μ̂|` over all layers and batches.
    pub histogram: LogHistogram,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriftReport {
    pub settings: Vec<SettingDrift>,
    /// Correlation between mean drift and test error across settings.
    pub pearson_r: Option<f64>,
}

impl DriftReport {
    pub const HEADER: &'static str = "setting,layer,mad_mean,error";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for set in &self.settings {
            for (layer, mad) in &set.layers {
                let _ = writeln!(s, "{},{},{},{}", set.label, layer, mad, set.error);
            }
        }
        s
    }
}

pub fn level_label(level: Level) -> String {
    match level {
        Level::Dense => "dense".into(),
        Level::Width(g) => format!("width={g}"),
        Level::Sparsity(g) => format!("sparsity={g}"),
        Level::Bits(b) => format!("bits={b}"),
    }
}

fn require_bn(model: &Model) -> Result<(), EvalError> {
    if model.norm_kind() != NormKind::Batch {
        return Err(EvalError::Invalid("drift analysis needs a BatchNorm model".into()));
    }
    Ok(())
}

/// Eval-mode forward that records each BN layer's input moments.
fn observe(
    model: &Model,
    weights: &NamedTensors,
    x: &Tensor,
    plan: Option<&ChannelPlan>,
    act_bits: Option<u32>,
) -> Result<(Tensor, Vec<BnBatchStats>), EvalError> {
    let mut tape = Tape::<f32>::new();
    let vars = Model::weights_on_tape(&mut tape, weights, false);
    let xv = tape.constant(x.clone());
    let opts = ForwardOptions {
        train: false,
        plan,
        act_bits,
        observe_bn: true,
    };
    let out = model.forward(&mut tape, &vars, xv, &opts)?;
    Ok((tape.value(out.logits).clone(), out.bn_stats))
}

/// Per-channel `|stored − observed|`, with the observed statistic rounded to
/// the model's f32 precision first.
fn channel_gaps<'a>(model: &'a Model, s: &'a BnBatchStats, stat: DriftStat) -> impl Iterator<Item = f64> + 'a {
    let state = &model.bn_states()[&s.layer];
    let (stored, seen) = match stat {
        DriftStat::Mean => (&state.running_mean, &s.mean),
        DriftStat::Variance => (&state.running_var, &s.biased_var),
    };
    stored
        .data()
        .iter()
        .zip(seen)
        .map(|(&a, &b)| (f64::from(a) - f64::from(b as f32)).abs())
}

/// Runs `data` through the compressed model in eval mode and measures, at
/// every BN layer, the gap between stored and observed batch statistics.
pub fn measure_drift(
    model: &Model,
    weights: &NamedTensors,
    data: &Dataset,
    batch_size: usize,
    level: Level,
    quantize_first_last: bool,
    stat: DriftStat,
) -> Result<SettingDrift, EvalError> {
    require_bn(model)?;
    if data.is_empty() || batch_size == 0 {
        return Err(EvalError::Invalid("empty dataset or zero batch size".into()));
    }
    let c = compress(model, weights, level, quantize_first_last)?;
    let names: Vec<String> = model.bn_states().keys().cloned().collect();
    let mut sums = vec![0.0; names.len()];
    let mut batches = 0usize;
    let mut histogram = LogHistogram::new(DRIFT_RANGE.0, DRIFT_RANGE.1, DRIFT_BUCKETS);
    let (mut correct, mut seen) = (0usize, 0usize);
    for idx in data.ordered_batches(batch_size) {
        let (x, y) = data.batch(&idx);
        let (logits, stats) = observe(model, &c.weights, &x, c.plan.as_ref(), level.bits())?;
        correct += score(&logits, &y)?.0;
        seen += y.len();
        for s in &stats {
            let li = names.iter().position(|n| *n == s.layer).expect("stats come from known layers");
            let mut sum = 0.0;
            let mut n = 0usize;
            for g in channel_gaps(model, s, stat) {
                histogram.add(g);
                sum += g;
                n += 1;
            }
            sums[li] += sum / n as f64;
        }
        batches += 1;
    }
    let layers: Vec<(String, f64)> = names.into_iter().zip(sums.iter().map(|s| s / batches as f64)).collect();
    let mean_drift = layers.iter().map(|(_, m)| m).sum::<f64>() / layers.len() as f64;
    Ok(SettingDrift {
        label: level_label(level),
        level,
        layers,
        mean_drift,
        error: 1.0 - correct as f64 / seen as f64,
        histogram,
    })
}

/// Drift of one BN model across several evaluation-time compression levels,
/// plus the drift/error correlation across those levels.
pub fn analyze_bn_drift(
    model: &Model,
    weights: &NamedTensors,
    data: &Dataset,
    batch_size: usize,
    levels: &[Level],
    quantize_first_last: bool,
    stat: DriftStat,
) -> Result<DriftReport, EvalError> {
    let settings = levels
        .par_iter()
        .map(|&l| measure_drift(model, weights, data, batch_size, l, quantize_first_last, stat))
        .collect::<Result<Vec<_>, _>>()?;
    let xs: Vec<f64> = settings.iter().map(|s| s.mean_drift).collect();
    let ys: Vec<f64> = settings.iter().map(|s| s.error).collect();
    Ok(DriftReport {
        pearson_r: pearson_correlation(&xs, &ys),
        settings,
    })
}

/// Self-check of the drift measurement: for every batch, overwrite the
/// running means layer by layer with that batch's own observed means, then
/// re-measure. Returns the largest gap seen, which must be exactly 0.
pub fn replay_self_consistency(
    model: &Model,
    weights: &NamedTensors,
    data: &Dataset,
    batch_size: usize,
) -> Result<f64, EvalError> {
    require_bn(model)?;
    let mut worst: f64 = 0.0;
    for idx in data.ordered_batches(batch_size) {
        let (x, _) = data.batch(&idx);
        let mut m = model.clone();
        let names: Vec<String> = m.bn_states().keys().cloned().collect();
        // each pass fixes one more layer; earlier layers' inputs no longer move
        for name in &names {
            let (_, stats) = observe(&m, weights, &x, None, None)?;
            let s = stats.iter().find(|s| s.layer == *name).expect("every BN layer reports");
            let state = m.bn_states_mut().get_mut(name).expect("known layer");
            let mean: Vec<f32> = s.mean.iter().map(|&v| v as f32).collect();
            state.running_mean = Tensor::new(vec![mean.len()], mean)?;
        }
        let (_, stats) = observe(&m, weights, &x, None, None)?;
        for s in &stats {
            worst = channel_gaps(&m, s, DriftStat::Mean).fold(worst, f64::max);
        }
    }
    Ok(worst)
}

//! Weight subspaces and the α samplers that train them.
//!
//! All three shapes store their tensors in one [`ParamSet`] under qualified
//! names: `w/` for single-copy tensors and `w1/`, `w2/` for the two endpoints
//! of a line. `ω*(α) = α·ω₁ + (1 - α)·ω₂`.

use indexmap::IndexMap;
use rand::Rng;
use thiserror::Error;

use crate::compression::alpha_from_width;
use crate::nn::{Model, NamedTensors, ParamKind, ParamSet, Parameter, WeightVars};
use crate::rng::rng_for;
use crate::tensor::{Scalar, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum SubspaceError {
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("endpoint shapes differ for `{name}`: {a:?} vs {b:?}")]
    ShapeMismatch { name: String, a: Vec<usize>, b: Vec<usize> },
    #[error("invalid sampler: {0}")]
    Sampler(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SubspaceKind {
    /// One weight set shared by every α.
    Point,
    /// Two full endpoint sets.
    Linear,
    /// Shared conv/linear weights and biases; only norm affines have two
    /// endpoints.
    Hybrid,
}

impl SubspaceKind {
    pub fn name(self) -> &'static str {
        match self {
            SubspaceKind::Point => "point",
            SubspaceKind::Linear => "linear",
            SubspaceKind::Hybrid => "hybrid",
        }
    }

    /// Whether parameters of `kind` get two endpoints under this subspace.
    pub fn is_line(self, kind: ParamKind) -> bool {
        match self {
            SubspaceKind::Point => false,
            SubspaceKind::Linear => true,
            SubspaceKind::Hybrid => kind.is_norm_affine(),
        }
    }
}

pub const SHARED: &str = "w/";
pub const END1: &str = "w1/";
pub const END2: &str = "w2/";

#[derive(Clone, Debug, PartialEq)]
pub struct Subspace {
    kind: SubspaceKind,
    params: ParamSet,
    /// Coefficient of the cosine regularizer (linear subspace only).
    pub beta: f64,
}

impl Subspace {
    /// Fresh subspace for `model`. The two endpoints use independent seeds.
    pub fn init(model: &Model, kind: SubspaceKind, seed: u64, beta: f64) -> Self {
        let shared = model.init_params(&mut rng_for(seed, "init/w"));
        let e1 = model.init_params(&mut rng_for(seed, "init/w1"));
        let e2 = model.init_params(&mut rng_for(seed, "init/w2"));
        let mut params = ParamSet::default();
        for ((p, p1), p2) in shared.iter().zip(e1.iter()).zip(e2.iter()) {
            if kind.is_line(p.kind) {
                params.insert(Parameter::new(format!("{END1}{}", p.name), p.kind, p1.value.clone()));
                params.insert(Parameter::new(format!("{END2}{}", p.name), p.kind, p2.value.clone()));
            } else {
                params.insert(Parameter::new(format!("{SHARED}{}", p.name), p.kind, p.value.clone()));
            }
        }
        Self { kind, params, beta }
    }

    /// Builds a subspace from already-qualified tensors, checking that every
    /// model parameter is present with the right shape.
    pub fn from_parts(model: &Model, kind: SubspaceKind, params: ParamSet, beta: f64) -> Result<Self, SubspaceError> {
        let s = Self { kind, params, beta };
        for spec in model.param_specs() {
            for q in s.qualified_names(&spec.name, spec.kind) {
                let p = s.params.get(&q).ok_or_else(|| SubspaceError::Missing(q.clone()))?;
                if p.value.shape() != spec.shape.as_slice() {
                    return Err(SubspaceError::ShapeMismatch {
                        name: q,
                        a: p.value.shape().to_vec(),
                        b: spec.shape.clone(),
                    });
                }
            }
        }
        let expected: usize = model
            .param_specs()
            .iter()
            .map(|sp| s.qualified_names(&sp.name, sp.kind).len())
            .sum();
        if expected != s.params.len() {
            return Err(SubspaceError::Missing(format!(
                "{} tensors stored, {expected} expected",
                s.params.len()
            )));
        }
        Ok(s)
    }

    /// A point subspace holding `weights`.
    pub fn point(model: &Model, weights: &NamedTensors) -> Result<Self, SubspaceError> {
        let mut params = ParamSet::default();
        for spec in model.param_specs() {
            let t = weights.get(&spec.name).ok_or_else(|| SubspaceError::Missing(spec.name.clone()))?;
            params.insert(Parameter::new(format!("{SHARED}{}", spec.name), spec.kind, t.clone()));
        }
        Self::from_parts(model, SubspaceKind::Point, params, 0.0)
    }

    fn qualified_names(&self, name: &str, kind: ParamKind) -> Vec<String> {
        if self.kind.is_line(kind) {
            vec![format!("{END1}{name}"), format!("{END2}{name}")]
        } else {
            vec![format!("{SHARED}{name}")]
        }
    }

    pub fn kind(&self) -> SubspaceKind {
        self.kind
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Number of stored scalars.
    pub fn stored_len(&self) -> usize {
        self.params.numel()
    }

    fn unqualified(name: &str) -> &str {
        name.split_once('/').map_or(name, |(_, rest)| rest)
    }

    /// `ω*(α)` as plain tensors, keyed by model parameter name.
    pub fn materialize(&self, alpha: f64) -> Result<NamedTensors, SubspaceError> {
        check_alpha(alpha)?;
        let mut out = IndexMap::new();
        for p in self.params.iter() {
            let name = Self::unqualified(&p.name);
            if p.name.starts_with(SHARED) {
                out.insert(name.to_string(), p.value.clone());
            } else if p.name.starts_with(END1) {
                let other = self
                    .params
                    .get(&format!("{END2}{name}"))
                    .ok_or_else(|| SubspaceError::Missing(format!("{END2}{name}")))?;
                let mut t = p.value.clone();
                for (a, &b) in t.data_mut().iter_mut().zip(other.value.data()) {
                    *a = (alpha * f64::from(*a) + (1.0 - alpha) * f64::from(b)) as f32;
                }
                out.insert(name.to_string(), t);
            }
        }
        Ok(out)
    }

    /// Places every stored tensor on `tape` as a leaf and returns the leaves
    /// (by qualified name) together with the materialized weights.
    pub fn materialize_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        alpha: f64,
    ) -> Result<(IndexMap<String, Var>, WeightVars), SubspaceError> {
        let leaves: IndexMap<String, Var> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), tape.leaf(p.value.cast::<T>())))
            .collect();
        let weights = self.materialize_vars(tape, &leaves, alpha)?;
        Ok((leaves, weights))
    }

    /// `ω*(α)` built from existing leaves; reuse one set of leaves for all α
    /// of a batch so gradients accumulate on the same nodes.
    pub fn materialize_vars<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        leaves: &IndexMap<String, Var>,
        alpha: f64,
    ) -> Result<WeightVars, SubspaceError> {
        check_alpha(alpha)?;
        let get = |q: String| leaves.get(&q).copied().ok_or(SubspaceError::Missing(q));
        let mut out = IndexMap::new();
        for p in self.params.iter() {
            let name = Self::unqualified(&p.name);
            if p.name.starts_with(SHARED) {
                out.insert(name.to_string(), get(p.name.clone())?);
            } else if p.name.starts_with(END1) {
                let a = get(p.name.clone())?;
                let b = get(format!("{END2}{name}"))?;
                out.insert(name.to_string(), tape.lerp(a, b, T::of(alpha))?);
            }
        }
        Ok(out)
    }

    /// `β·Σ cos²(ω₁ˡ, ω₂ˡ)` over conv/linear weights, on the tape. `None` for
    /// subspaces without a weight line.
    pub fn regularizer_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        leaves: &IndexMap<String, Var>,
    ) -> Result<Option<Var>, SubspaceError> {
        if self.kind != SubspaceKind::Linear || self.beta == 0.0 {
            return Ok(None);
        }
        let mut total: Option<Var> = None;
        for p in self.params.iter().filter(|p| p.kind == ParamKind::Weight && p.name.starts_with(END1)) {
            let name = Self::unqualified(&p.name);
            let a = leaves[&p.name];
            let b = *leaves
                .get(&format!("{END2}{name}"))
                .ok_or_else(|| SubspaceError::Missing(format!("{END2}{name}")))?;
            let c = tape.cos_sq(a, b)?;
            total = Some(match total {
                Some(t) => tape.add(t, c)?,
                None => c,
            });
        }
        match total {
            Some(t) => Ok(Some(tape.scalar_mul(t, T::of(self.beta))?)),
            None => Ok(None),
        }
    }

    /// Value of the cosine regularizer (0 for point and hybrid subspaces).
    pub fn regularizer(&self) -> f64 {
        if self.kind != SubspaceKind::Linear {
            return 0.0;
        }
        let pairs = self.params.iter().filter(|p| p.kind == ParamKind::Weight && p.name.starts_with(END1));
        let total: f64 = pairs
            .filter_map(|p| {
                let other = self.params.get(&format!("{END2}{}", Self::unqualified(&p.name)))?;
                Some(cosine_sq(p.value.data(), other.value.data()))
            })
            .sum();
        self.beta * total
    }
}

fn check_alpha(alpha: f64) -> Result<(), SubspaceError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SubspaceError::Alpha(alpha));
    }
    Ok(())
}

/// Squared cosine similarity in `f64`; 0 when either vector has zero norm.
pub fn cosine_sq(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    dot * dot / (aa * bb)
}

/// `β·Σ_l cos²(w1ˡ, w2ˡ)` over matched conv/linear weights of two sets.
pub fn cosine_regularizer(w1: &ParamSet, w2: &ParamSet, beta: f64) -> Result<f64, SubspaceError> {
    let mut total = 0.0;
    for p in w1.iter().filter(|p| p.kind == ParamKind::Weight) {
        let q = w2.get(&p.name).ok_or_else(|| SubspaceError::Missing(p.name.clone()))?;
        if p.value.shape() != q.value.shape() {
            return Err(SubspaceError::ShapeMismatch {
                name: p.name.clone(),
                a: p.value.shape().to_vec(),
                b: q.value.shape().to_vec(),
            });
        }
        total += cosine_sq(p.value.data(), q.value.data());
    }
    Ok(beta * total)
}

#[derive(Clone, Debug, PartialEq)]
pub enum SamplerMode {
    /// Smallest width, full width, and two uniform widths per batch.
    /// `as_width` reads the sampled values as widths `γ` and maps them back to
    /// `α`; otherwise they are used as `α` directly.
    StructuredSandwich { width_min: f64, as_width: bool },
    /// One α per batch: each endpoint with probability `p_end`, otherwise
    /// uniform in between.
    UnstructuredBiased { alpha_min: f64, alpha_max: f64, p_end: f64 },
    /// One α per batch, uniform over a finite set.
    QuantDiscrete { set: Vec<f64> },
    /// One α per batch: `alpha_max` for the first `warmup_steps`, then
    /// uniform in `[alpha_min, alpha_max]`. Used for point subspaces.
    PointWarmup { alpha_min: f64, alpha_max: f64, warmup_steps: u64 },
    /// Always the same α (fixed-target baselines).
    Fixed { alpha: f64 },
    /// Every value of a finite set on every batch.
    All { set: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSpec {
    pub mode: SamplerMode,
}

impl SamplerSpec {
    pub fn new(mode: SamplerMode) -> Result<Self, SubspaceError> {
        let bad = |m: String| Err(SubspaceError::Sampler(m));
        match &mode {
            SamplerMode::StructuredSandwich { width_min, .. } => {
                if !(*width_min > 0.0 && *width_min < 1.0) {
                    return bad(format!("width_min {width_min} outside (0, 1)"));
                }
            }
            SamplerMode::UnstructuredBiased { alpha_min, alpha_max, p_end } => {
                if !(0.0 <= *alpha_min && alpha_min < alpha_max && *alpha_max <= 1.0) {
                    return bad(format!("need 0 <= alpha_min < alpha_max <= 1, got [{alpha_min}, {alpha_max}]"));
                }
                if !(0.0..=0.5).contains(p_end) {
                    return bad(format!("p_end {p_end} outside [0, 0.5]"));
                }
            }
            SamplerMode::QuantDiscrete { set } => {
                if set.is_empty() || set.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
                    return bad(format!("discrete set must be non-empty within (0, 1], got {set:?}"));
                }
            }
            SamplerMode::All { set } => {
                if set.is_empty() || set.iter().any(|a| !(0.0..=1.0).contains(a)) {
                    return bad(format!("alpha set must be non-empty within [0, 1], got {set:?}"));
                }
            }
            SamplerMode::PointWarmup { alpha_min, alpha_max, .. } => {
                if !(0.0 <= *alpha_min && alpha_min < alpha_max && *alpha_max <= 1.0) {
                    return bad(format!("need 0 <= alpha_min < alpha_max <= 1, got [{alpha_min}, {alpha_max}]"));
                }
            }
            SamplerMode::Fixed { alpha } => {
                if !(0.0..=1.0).contains(alpha) {
                    return bad(format!("alpha {alpha} outside [0, 1]"));
                }
            }
        }
        Ok(Self { mode })
    }

    /// The α values for one batch at training step `step`.
    pub fn sample_alphas(&self, step: u64, rng: &mut impl Rng) -> Vec<f64> {
        match &self.mode {
            SamplerMode::StructuredSandwich { width_min, as_width } => {
                let raw = [
                    *width_min,
                    1.0,
                    rng.random_range(*width_min..=1.0),
                    rng.random_range(*width_min..=1.0),
                ];
                raw.iter()
                    .map(|&v| {
                        if *as_width {
                            alpha_from_width(v, *width_min).clamp(0.0, 1.0)
                        } else {
                            v
                        }
                    })
                    .collect()
            }
            SamplerMode::UnstructuredBiased { alpha_min, alpha_max, p_end } => {
                let u: f64 = rng.random();
                let a = if u < *p_end {
                    *alpha_min
                } else if u < 2.0 * p_end {
                    *alpha_max
                } else {
                    rng.random_range(*alpha_min..=*alpha_max)
                };
                vec![a]
            }
            SamplerMode::QuantDiscrete { set } => vec![set[rng.random_range(0..set.len())]],
            SamplerMode::PointWarmup {
                alpha_min,
                alpha_max,
                warmup_steps,
            } => {
                if step < *warmup_steps {
                    vec![*alpha_max]
                } else {
                    vec![rng.random_range(*alpha_min..=*alpha_max)]
                }
            }
            SamplerMode::Fixed { alpha } => vec![*alpha],
            SamplerMode::All { set } => set.clone(),
        }
    }
}

/// `{1/n, 2/n, …, 1}`.
pub fn uniform_set(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / n as f64).collect()
}

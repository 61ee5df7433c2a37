//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use lcs_core::tensor::{finite_diff_check, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const SEEDS: u64 = 20;
/// Step for whole-network checks, where f64 roundoff is the smaller error.
pub const CHAIN_EPS: f64 = 1e-5;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so ±ε never crosses a ReLU kink.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

/// Contracts `out` with a fixed random tensor so every output element
/// contributes to the checked scalar.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = random(&mut rng, tape.shape(out));
    let r = tape.constant(r);
    let p = tape.mul(out, r)?;
    tape.sum(p)
}

type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;
type Op = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    inputs: Inputs,
    op: Op,
}

impl OpCase {
    fn new(
        name: &'static str,
        inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
        op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name,
            inputs: Box::new(inputs),
            op: Box::new(op),
        }
    }

    /// Largest relative error against central differences over `SEEDS` seeds.
    pub fn worst_error(&self) -> f64 {
        (0..SEEDS)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let params = (self.inputs)(&mut rng);
                finite_diff_check(
                    |tape, vars| {
                        let out = (self.op)(tape, vars)?;
                        if tape.value(out).len() == 1 {
                            Ok(out)
                        } else {
                            project(tape, out, seed)
                        }
                    },
                    &params,
                    EPS,
                )
                .unwrap_or_else(|e| panic!("{}: seed {seed}: {e}", self.name))
            })
            .fold(0.0, f64::max)
    }
}

/// One case per differentiable tape op.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase::new("matmul", |r| vec![random(r, &[3, 4]), random(r, &[4, 2])], |t, v| {
            t.matmul(v[0], v[1])
        }),
        OpCase::new("conv2d", |r| vec![random(r, &[2, 3, 5, 5]), random(r, &[4, 3, 3, 3])], |t, v| {
            t.conv2d(v[0], v[1], 1, 0)
        }),
        OpCase::new(
            "conv2d pad 1 stride 2",
            |r| vec![random(r, &[1, 2, 5, 5]), random(r, &[3, 2, 3, 3])],
            |t, v| t.conv2d(v[0], v[1], 2, 1),
        ),
        OpCase::new("relu", |r| vec![away_from_zero(r, &[3, 5])], |t, v| t.relu(v[0])),
        OpCase::new("add", |r| vec![random(r, &[2, 3]), random(r, &[2, 3])], |t, v| t.add(v[0], v[1])),
        OpCase::new("mul", |r| vec![random(r, &[2, 3]), random(r, &[2, 3])], |t, v| t.mul(v[0], v[1])),
        OpCase::new("scalar_mul", |r| vec![random(r, &[4])], |t, v| t.scalar_mul(v[0], -1.7)),
        OpCase::new("lerp", |r| vec![random(r, &[2, 2]), random(r, &[2, 2])], |t, v| {
            t.lerp(v[0], v[1], 0.3)
        }),
        OpCase::new("add_channel", |r| vec![random(r, &[2, 3, 2, 2]), random(r, &[3])], |t, v| {
            t.add_channel(v[0], v[1])
        }),
        OpCase::new("sum", |r| vec![random(r, &[2, 3])], |t, v| t.sum(v[0])),
        OpCase::new("mean", |r| vec![random(r, &[2, 3])], |t, v| t.mean(v[0])),
        OpCase::new("variance", |r| vec![random(r, &[7])], |t, v| t.variance(v[0])),
        OpCase::new("avgpool2d", |r| vec![random(r, &[2, 2, 4, 4])], |t, v| t.avgpool2d(v[0], 2, 2)),
        OpCase::new("reshape", |r| vec![random(r, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4])),
        OpCase::new("flatten", |r| vec![random(r, &[2, 2, 3])], |t, v| t.flatten(v[0])),
        OpCase::new("narrow_prefix", |r| vec![random(r, &[4, 3, 2, 2])], |t, v| {
            t.narrow_prefix(v[0], &[2, 2, 2, 2])
        }),
        OpCase::new(
            "softmax_cross_entropy",
            |r| vec![random(r, &[4, 10]).map(|v| 3.0 * v)],
            |t, v| t.softmax_cross_entropy(v[0], &[0, 3, 9, 3]),
        ),
        OpCase::new("group_norm", |r| vec![random(r, &[2, 4, 3, 3])], |t, v| t.group_norm(v[0], 2, 1e-5)),
        OpCase::new("instance_norm", |r| vec![random(r, &[2, 3, 3, 3])], |t, v| {
            t.group_norm(v[0], 3, 1e-5)
        }),
        OpCase::new("group_norm rank 2", |r| vec![random(r, &[3, 16])], |t, v| t.group_norm(v[0], 2, 1e-5)),
        OpCase::new("batch_norm_train", |r| vec![random(r, &[4, 3, 2, 2])], |t, v| {
            t.batch_norm_train(v[0], 1e-5).map(|(y, _, _)| y)
        }),
        OpCase::new("normalize_fixed", |r| vec![random(r, &[3, 2])], |t, v| {
            t.normalize_fixed(v[0], &[0.1, -0.2], &[0.5, 2.0], 1e-5)
        }),
        OpCase::new(
            "channel_affine",
            |r| vec![random(r, &[2, 3, 2, 2]), random(r, &[3]), random(r, &[3])],
            |t, v| t.channel_affine(v[0], v[1], v[2]),
        ),
        OpCase::new("cos_sq", |r| vec![random(r, &[3, 4]), random(r, &[3, 4])], |t, v| t.cos_sq(v[0], v[1])),
    ]
}

/// A small network, a subspace over it and a batch, for checking the whole
/// materialize → compress → forward → loss chain.
pub struct Chain {
    pub name: String,
    pub model: lcs_core::nn::Model,
    pub subspace: lcs_core::subspace::Subspace,
    pub alpha: f64,
    pub level: lcs_core::compression::Level,
    pub x: Tensor<f64>,
    pub y: Vec<usize>,
}

impl Chain {
    pub fn build(
        name: &str,
        config: lcs_core::nn::ModelConfig,
        kind: lcs_core::subspace::SubspaceKind,
        level: lcs_core::compression::Level,
        seed: u64,
    ) -> Self {
        let model = lcs_core::nn::build_model(config).unwrap();
        let mut subspace = lcs_core::subspace::Subspace::init(&model, kind, seed, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc4a1);
        // non-trivial affines so every parameter carries gradient
        for p in subspace.params_mut().iter_mut() {
            if p.kind.is_norm_affine() || p.kind == lcs_core::nn::ParamKind::Bias {
                p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3f32..0.3));
            }
        }
        let mut shape = vec![4];
        shape.extend_from_slice(&model.config().input_shape);
        let x = random(&mut rng, &shape);
        let classes = model.config().num_classes;
        let y = (0..4).map(|_| rng.random_range(0..classes)).collect();
        Self {
            name: name.to_string(),
            model,
            subspace,
            alpha: rng.random_range(0.0..=1.0),
            level,
            x,
            y,
        }
    }

    pub fn params(&self) -> Vec<Tensor<f64>> {
        self.subspace.params().iter().map(|p| p.value.cast::<f64>()).collect()
    }

    /// Loss (plus the subspace regularizer) with the stored tensors bound to
    /// `vars` in order. `offsets` are added to the materialized weights before
    /// compression.
    pub fn loss_with(
        &self,
        tape: &mut Tape<f64>,
        vars: &[Var],
        level: lcs_core::compression::Level,
        offsets: &[(String, Tensor<f64>)],
    ) -> Var {
        use lcs_core::compression::compress_on_tape;
        use lcs_core::nn::ForwardOptions;
        let leaves = self
            .subspace
            .params()
            .iter()
            .map(|p| p.name.clone())
            .zip(vars.iter().copied())
            .collect();
        let mut w = self.subspace.materialize_vars(tape, &leaves, self.alpha).unwrap();
        for (name, off) in offsets {
            let c = tape.constant(off.clone());
            let shifted = tape.add(w[name], c).unwrap();
            w.insert(name.clone(), shifted);
        }
        let (w, plan) = compress_on_tape(tape, &self.model, &w, level, true).unwrap();
        let x = tape.constant(self.x.clone());
        let opts = ForwardOptions {
            train: true,
            plan: plan.as_ref(),
            ..ForwardOptions::default()
        };
        let out = self.model.forward(tape, &w, x, &opts).unwrap();
        let loss = tape.softmax_cross_entropy(out.logits, &self.y).unwrap();
        match self.subspace.regularizer_on_tape(tape, &leaves).unwrap() {
            Some(r) => tape.add(loss, r).unwrap(),
            None => loss,
        }
    }

    /// Largest relative error of the chain's gradients against central
    /// differences.
    pub fn worst_error(&self, eps: f64) -> f64 {
        finite_diff_check(|tape, vars| Ok(self.loss_with(tape, vars, self.level, &[])), &self.params(), eps).unwrap()
    }

    /// Like [`Chain::worst_error`] for the dense chain with `offsets` added to
    /// the materialized weights.
    pub fn worst_error_held(&self, eps: f64, offsets: &[(String, Tensor<f64>)]) -> f64 {
        let level = lcs_core::compression::Level::Dense;
        finite_diff_check(|tape, vars| Ok(self.loss_with(tape, vars, level, offsets)), &self.params(), eps).unwrap()
    }

    /// Analytic gradients of the stored tensors.
    pub fn gradients(&self, level: lcs_core::compression::Level, offsets: &[(String, Tensor<f64>)]) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params().into_iter().map(|p| tape.leaf(p)).collect();
        let loss = self.loss_with(&mut tape, &vars, level, offsets);
        let grads = tape.backward(loss).unwrap();
        vars.iter()
            .zip(self.params())
            .map(|(v, p)| grads.get(*v).map_or(vec![0.0; p.len()], |g| g.data().to_vec()))
            .collect()
    }
}

/// Chains over every subspace kind, compression family and norm family.
pub fn chain_cases(seed: u64) -> Vec<Chain> {
    use lcs_core::compression::Level;
    use lcs_core::nn::{GroupsRule, ModelConfig, NormKind, NormSpec};
    use lcs_core::subspace::SubspaceKind;
    let gn = NormSpec {
        groups: GroupsRule::Fixed(2),
        ..NormSpec::default()
    };
    let bn = NormSpec {
        kind: NormKind::Batch,
        ..NormSpec::default()
    };
    let inorm = NormSpec {
        groups: GroupsRule::PerChannel,
        ..NormSpec::default()
    };
    let mlp = |norm| ModelConfig::mlp(5, &[6, 6], 3, norm);
    let cnn = ModelConfig::small_cnn([1, 8, 8], &[2, 4], 3, inorm);
    vec![
        Chain::build("line dense", mlp(gn.clone()), SubspaceKind::Linear, Level::Dense, seed),
        Chain::build("line topk", mlp(gn.clone()), SubspaceKind::Linear, Level::Sparsity(0.5), seed),
        Chain::build("line topk bn", mlp(bn), SubspaceKind::Linear, Level::Sparsity(0.3), seed),
        Chain::build("line structured cnn", cnn, SubspaceKind::Linear, Level::Width(0.5), seed),
        Chain::build("hybrid topk", mlp(gn.clone()), SubspaceKind::Hybrid, Level::Sparsity(0.5), seed),
        Chain::build("point topk", mlp(gn), SubspaceKind::Point, Level::Sparsity(0.7), seed),
    ]
}

//! Wengert-list autodiff. Nodes are appended in evaluation order, so the node
//! index order is a topological order and backward is a single reverse scan.

use super::conv::{self, ConvGeom, PoolGeom};
use super::{invalid, Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    AddChannel { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    AvgPool { x: Var, geom: PoolGeom },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Variance(Var),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    GroupNorm { x: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNorm { x: Var, xhat: Vec<T>, inv_std: Vec<T> },
    NormalizeFixed { x: Var, inv_std: Vec<T> },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    NarrowPrefix(Var),
    StraightThrough(Var),
    Lerp { a: Var, b: Var, alpha: T },
    CosSq { a: Var, b: Var, cos: T, na: T, nb: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddChannel { .. } => "add_channel",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scalar_mul",
            Op::Relu(..) => "relu",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool { .. } => "avgpool2d",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Variance(..) => "variance",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::GroupNorm { .. } => "group_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::NormalizeFixed { .. } => "normalize_fixed",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::NarrowPrefix(..) => "narrow_prefix",
            Op::StraightThrough(..) => "straight_through",
            Op::Lerp { .. } => "lerp",
            Op::CosSq { .. } => "cos_sq",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Lerp { a, b, .. } | Op::CosSq { a, b, .. } => vec![a, b],
            Op::AddChannel { x, bias } => vec![x, bias],
            Op::Conv2d { x, w, .. } => vec![x, w],
            Op::ChannelAffine { x, scale, shift } => vec![x, scale, shift],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Variance(x)
            | Op::NarrowPrefix(x)
            | Op::StraightThrough(x)
            | Op::AvgPool { x, .. }
            | Op::GroupNorm { x, .. }
            | Op::BatchNorm { x, .. }
            | Op::NormalizeFixed { x, .. } => vec![x],
            Op::SoftmaxCe { logits, .. } => vec![logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for a single backward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    visits: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the loss with respect to every leaf that requires grad.
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            visits: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes processed by the last `backward` call.
    pub fn backward_visits(&self) -> usize {
        self.visits
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn channel_vector(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize, usize)> {
        let layout = self.value(x).channel_layout()?;
        if self.shape(v) != [layout.1] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        Ok(layout)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (&[m, k], &[k2, n]) = (self.shape(a), self.shape(b)) else {
            return Err(invalid("matmul", "operands must be rank 2"));
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Add(a, b))
    }

    /// Adds a per-channel vector along dimension 1.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c, s) = self.channel_vector("add_channel", x, bias)?;
        let b = self.value(bias).data();
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / s) % c])
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(value, Op::AddChannel { x, bias })
    }

    /// Elementwise product. Multiplying by a [`Tape::constant`] mask keeps
    /// gradients away from the masked-out entries.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, x: Var, s: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        let out = conv::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(vec![geom.n, geom.f, geom.ho, geom.wo], out)?;
        self.push(value, Op::Conv2d { x, w, geom })
    }

    pub fn avgpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(x), kernel, stride)?;
        let out = conv::avgpool_forward(&geom, self.value(x).data());
        let (n, c) = (self.shape(x)[0], self.shape(x)[1]);
        let value = Tensor::new(vec![n, c, geom.ho, geom.wo], out)?;
        self.push(value, Op::AvgPool { x, geom })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push(value, Op::Reshape(x))
    }

    /// Collapses all dimensions after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[n, rest])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = T::of(self.value(x).sum());
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = T::of(v.sum() / v.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Population variance over all elements.
    pub fn variance(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = v.len() as f64;
        let mean = v.sum() / n;
        let var = v.data().iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / n;
        self.push(Tensor::scalar(T::of(var)), Op::Variance(x))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[n, k] = self.shape(logits) else {
            return Err(invalid("softmax_cross_entropy", "logits must be [N, K]"));
        };
        if labels.len() != n {
            return Err(invalid(
                "softmax_cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let data = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0f64;
        for (row, &label) in data.chunks_exact(k).zip(labels) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            total += z.ln() - (row[label].as_f64() - max);
            probs.extend(exps.iter().map(|e| T::of(e / z)));
        }
        let loss = T::of(total / n as f64);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Normalizes each sample over contiguous channel groups (and all spatial
    /// positions). `groups` must divide the channel count. No affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, s) = vx.channel_layout()?;
        if groups == 0 || c % groups != 0 {
            return Err(invalid(
                "group_norm",
                format!("{groups} groups do not divide {c} channels"),
            ));
        }
        let block = c / groups * s;
        let (xhat, inv_std) = normalize_blocks(vx.data(), n * groups, block, eps);
        let value = Tensor::new(vx.shape().to_vec(), xhat.clone())?;
        self.push(
            value,
            Op::GroupNorm { x, xhat, inv_std },
        )
    }

    /// Normalizes each channel by the batch moments. Returns the output along
    /// with the per-channel batch mean and biased variance.
    pub fn batch_norm_train(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let vx = self.value(x);
        let (n, c, s) = vx.channel_layout()?;
        if n < 2 {
            return Err(invalid("batch_norm", "training mode requires batch size >= 2"));
        }
        let (mean, var) = channel_moments(vx.data(), n, c, s);
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let xhat: Vec<T> = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / s) % c;
                T::of((v.as_f64() - mean[ch]) * inv_std[ch].as_f64())
            })
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), xhat.clone())?;
        let out = self.push(value, Op::BatchNorm { x, xhat, inv_std })?;
        Ok((out, mean, var))
    }

    /// `(x - mean_c) / sqrt(var_c + eps)` with fixed statistics.
    pub fn normalize_fixed(&mut self, x: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let (_, c, s) = vx.channel_layout()?;
        if mean.len() != c || var.len() != c {
            return Err(invalid(
                "normalize_fixed",
                format!("{c} channels but {} / {} statistics", mean.len(), var.len()),
            ));
        }
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / s) % c;
                T::of((v.as_f64() - mean[ch]) * inv[ch])
            })
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let inv_std = inv.into_iter().map(T::of).collect();
        self.push(value, Op::NormalizeFixed { x, inv_std })
    }

    /// `x * scale_c + shift_c` along dimension 1.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (_, c, s) = self.channel_vector("channel_affine", x, scale)?;
        self.channel_vector("channel_affine", x, shift)?;
        let (g, b) = (self.value(scale).data(), self.value(shift).data());
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / s) % c;
                v * g[ch] + b[ch]
            })
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(value, Op::ChannelAffine { x, scale, shift })
    }

    /// Keeps the leading `keep[d]` entries of every dimension `d`.
    pub fn narrow_prefix(&mut self, x: Var, keep: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if keep.len() != src.rank() || keep.iter().zip(src.shape()).any(|(&k, &d)| k == 0 || k > d) {
            return Err(invalid(
                "narrow_prefix",
                format!("cannot keep {keep:?} of shape {:?}", src.shape()),
            ));
        }
        if keep == src.shape() {
            // still recorded so the caller always gets a fresh node
            let value = src.clone();
            return self.push(value, Op::NarrowPrefix(x));
        }
        let mut out = Vec::with_capacity(keep.iter().product());
        prefix_gather(src.shape(), keep, src.data(), &mut out);
        let value = Tensor::new(keep.to_vec(), out)?;
        self.push(value, Op::NarrowPrefix(x))
    }

    /// Records `value` as the forward result while passing gradients straight
    /// through to `x` (the usual estimator for rounding).
    pub fn straight_through(&mut self, x: Var, value: Tensor<T>) -> Result<Var> {
        if value.shape() != self.shape(x) {
            return Err(TensorError::ShapeMismatch {
                op: "straight_through",
                lhs: self.shape(x).to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.push(value, Op::StraightThrough(x))
    }

    /// `alpha * a + (1 - alpha) * b`.
    pub fn lerp(&mut self, a: Var, b: Var, alpha: T) -> Result<Var> {
        self.same_shape("lerp", a, b)?;
        let beta = T::one() - alpha;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| alpha * x + beta * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Lerp { a, b, alpha })
    }

    /// Squared cosine similarity of the flattened operands; zero when either
    /// has zero norm.
    pub fn cos_sq(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cos_sq", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (mut dot, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in va.iter().zip(vb) {
            let (x, y) = (x.as_f64(), y.as_f64());
            dot += x * y;
            aa += x * x;
            bb += y * y;
        }
        let (na, nb) = (aa.sqrt(), bb.sqrt());
        let cos = if na > 0.0 && nb > 0.0 { dot / (na * nb) } else { 0.0 };
        self.push(
            Tensor::scalar(T::of(cos * cos)),
            Op::CosSq {
                a,
                b,
                cos: T::of(cos),
                na: T::of(na),
                nb: T::of(nb),
            },
        )
    }

    /// Reverse pass from a scalar loss. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        self.visits = 0;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.visits += 1;
            if let Op::Leaf = node.op {
                leaves[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            for (var, contribution) in self.local_grads(idx, &g) {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &c)| *a = *a + c),
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn local_grads(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    // g (m×n) · bᵀ (n×k)
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g, (n as isize, 1), val(b), (1, n as isize), T::zero(), &mut ga);
                    out.push((a, ga));
                }
                if self.wants(b) {
                    // aᵀ (k×m) · g (m×n)
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), val(a), (1, k as isize), g, (n as isize, 1), T::zero(), &mut gb);
                    out.push((b, gb));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::AddChannel { x, bias } => {
                out.push((x, g.to_vec()));
                if self.wants(bias) {
                    let (_, c, s) = self.nodes[x.0].value.channel_layout().expect("checked in forward");
                    let mut gb = vec![T::zero(); c];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[(i / s) % c] = gb[(i / s) % c] + gi;
                    }
                    out.push((bias, gb));
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    out.push((a, g.iter().zip(val(b)).map(|(&gi, &y)| gi * y).collect()));
                }
                if self.wants(b) {
                    out.push((b, g.iter().zip(val(a)).map(|(&gi, &x)| gi * x).collect()));
                }
            }
            &Op::Scale(x, s) => out.push((x, g.iter().map(|&gi| gi * s).collect())),
            &Op::Relu(x) => out.push((
                x,
                g.iter()
                    .zip(val(x))
                    .map(|(&gi, &v)| if v > T::zero() { gi } else { T::zero() })
                    .collect(),
            )),
            Op::Conv2d { x, w, geom } => {
                let (gx, gw) =
                    conv::conv2d_backward(geom, val(*x), val(*w), g, self.wants(*x), self.wants(*w));
                out.extend(gx.map(|gx| (*x, gx)));
                out.extend(gw.map(|gw| (*w, gw)));
            }
            Op::AvgPool { x, geom } => out.push((*x, conv::avgpool_backward(geom, g))),
            &Op::Reshape(x) | &Op::StraightThrough(x) => out.push((x, g.to_vec())),
            &Op::Sum(x) => out.push((x, vec![g[0]; val(x).len()])),
            &Op::Mean(x) => {
                let n = val(x).len();
                out.push((x, vec![g[0] / T::of(n as f64); n]));
            }
            &Op::Variance(x) => {
                let v = val(x);
                let n = v.len() as f64;
                let mean = v.iter().map(|x| x.as_f64()).sum::<f64>() / n;
                let scale = 2.0 * g[0].as_f64() / n;
                out.push((x, v.iter().map(|&xi| T::of(scale * (xi.as_f64() - mean))).collect()));
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / T::of(labels.len() as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    gl[row * k + label] = gl[row * k + label] - scale;
                }
                out.push((*logits, gl));
            }
            Op::GroupNorm { x, xhat, inv_std, .. } => {
                let block = xhat.len() / inv_std.len();
                let mut gx = vec![T::zero(); xhat.len()];
                for (b, &istd) in inv_std.iter().enumerate() {
                    let r = b * block..(b + 1) * block;
                    normalize_backward(&g[r.clone()], &xhat[r.clone()], istd, &mut gx[r]);
                }
                out.push((*x, gx));
            }
            Op::BatchNorm { x, xhat, inv_std } => {
                let (n, c, s) = self.nodes[x.0].value.channel_layout().expect("checked in forward");
                out.push((*x, batch_norm_backward(g, xhat, inv_std, n, c, s)));
            }
            Op::NormalizeFixed { x, inv_std } => {
                let (_, c, s) = self.nodes[x.0].value.channel_layout().expect("checked in forward");
                out.push((
                    *x,
                    g.iter().enumerate().map(|(i, &gi)| gi * inv_std[(i / s) % c]).collect(),
                ));
            }
            &Op::ChannelAffine { x, scale, shift } => {
                let (_, c, s) = self.nodes[x.0].value.channel_layout().expect("checked in forward");
                let sc = val(scale);
                if self.wants(x) {
                    out.push((x, g.iter().enumerate().map(|(i, &gi)| gi * sc[(i / s) % c]).collect()));
                }
                if self.wants(scale) || self.wants(shift) {
                    let (mut gs, mut gb) = (vec![T::zero(); c], vec![T::zero(); c]);
                    for (i, (&gi, &xi)) in g.iter().zip(val(x)).enumerate() {
                        let ch = (i / s) % c;
                        gs[ch] = gs[ch] + gi * xi;
                        gb[ch] = gb[ch] + gi;
                    }
                    out.push((scale, gs));
                    out.push((shift, gb));
                }
            }
            &Op::NarrowPrefix(x) => {
                let full = self.nodes[x.0].value.shape();
                let kept = node.value.shape();
                let mut gx = vec![T::zero(); val(x).len()];
                prefix_scatter(full, kept, g, &mut gx);
                out.push((x, gx));
            }
            &Op::Lerp { a, b, alpha } => {
                out.push((a, g.iter().map(|&gi| gi * alpha).collect()));
                out.push((b, g.iter().map(|&gi| gi * (T::one() - alpha)).collect()));
            }
            &Op::CosSq { a, b, cos, na, nb } => {
                if na > T::zero() && nb > T::zero() {
                    let two_c = T::of(2.0) * cos * g[0];
                    let (va, vb) = (val(a), val(b));
                    let grad = |own: &[T], other: &[T], n_own: T| -> Vec<T> {
                        own.iter()
                            .zip(other)
                            .map(|(&x, &y)| two_c * (y / (na * nb) - cos * x / (n_own * n_own)))
                            .collect()
                    };
                    out.push((a, grad(va, vb, na)));
                    out.push((b, grad(vb, va, nb)));
                }
            }
        }
        out
    }
}

fn normalize_blocks<T: Scalar>(x: &[T], blocks: usize, block: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(blocks);
    for chunk in x.chunks_exact(block) {
        let m = block as f64;
        let mean = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / m;
        let var = chunk.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m;
        let istd = 1.0 / (var + eps).sqrt();
        xhat.extend(chunk.iter().map(|v| T::of((v.as_f64() - mean) * istd)));
        inv_std.push(T::of(istd));
    }
    (xhat, inv_std)
}

/// `gx = inv_std * (g - mean(g) - xhat * mean(g * xhat))` over one block.
fn normalize_backward<T: Scalar>(g: &[T], xhat: &[T], inv_std: T, gx: &mut [T]) {
    let m = g.len() as f64;
    let mean_g = g.iter().map(|v| v.as_f64()).sum::<f64>() / m;
    let mean_gx = g.iter().zip(xhat).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() / m;
    let istd = inv_std.as_f64();
    for ((o, &gi), &xh) in gx.iter_mut().zip(g).zip(xhat) {
        *o = T::of(istd * (gi.as_f64() - mean_g - xh.as_f64() * mean_gx));
    }
}

/// Per-channel batch mean and biased variance of an `(n, c, s)` layout.
pub fn channel_moments<T: Scalar>(x: &[T], n: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * s) as f64;
    let mut mean = vec![0.0f64; c];
    for (i, v) in x.iter().enumerate() {
        mean[(i / s) % c] += v.as_f64();
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0f64; c];
    for (i, v) in x.iter().enumerate() {
        let ch = (i / s) % c;
        var[ch] += (v.as_f64() - mean[ch]).powi(2);
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

fn batch_norm_backward<T: Scalar>(g: &[T], xhat: &[T], inv_std: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let m = (n * s) as f64;
    let (mut sum_g, mut sum_gx) = (vec![0.0f64; c], vec![0.0f64; c]);
    for (i, (&gi, &xh)) in g.iter().zip(xhat).enumerate() {
        let ch = (i / s) % c;
        sum_g[ch] += gi.as_f64();
        sum_gx[ch] += gi.as_f64() * xh.as_f64();
    }
    g.iter()
        .zip(xhat)
        .enumerate()
        .map(|(i, (&gi, &xh))| {
            let ch = (i / s) % c;
            T::of(inv_std[ch].as_f64() * (gi.as_f64() - sum_g[ch] / m - xh.as_f64() * sum_gx[ch] / m))
        })
        .collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        st[d] = st[d + 1] * shape[d + 1];
    }
    st
}

fn prefix_gather<T: Copy>(full: &[usize], keep: &[usize], src: &[T], out: &mut Vec<T>) {
    let st = strides(full);
    fn rec<T: Copy>(d: usize, base: usize, keep: &[usize], st: &[usize], src: &[T], out: &mut Vec<T>) {
        if d + 1 == keep.len() {
            out.extend_from_slice(&src[base..base + keep[d]]);
            return;
        }
        for i in 0..keep[d] {
            rec(d + 1, base + i * st[d], keep, st, src, out);
        }
    }
    rec(0, 0, keep, &st, src, out);
}

fn prefix_scatter<T: Copy>(full: &[usize], keep: &[usize], g: &[T], dst: &mut [T]) {
    let st = strides(full);
    fn rec<T: Copy>(d: usize, base: usize, pos: &mut usize, keep: &[usize], st: &[usize], g: &[T], dst: &mut [T]) {
        if d + 1 == keep.len() {
            dst[base..base + keep[d]].copy_from_slice(&g[*pos..*pos + keep[d]]);
            *pos += keep[d];
            return;
        }
        for i in 0..keep[d] {
            rec(d + 1, base + i * st[d], pos, keep, st, g, dst);
        }
    }
    rec(0, 0, &mut 0, keep, &st, g, dst);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::<f32>::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_grad_is_row_broadcast_of_column_sums() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let b = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let grads = tape.backward(s).unwrap();
        // row sums of b broadcast over rows of a
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
    }

    #[test]
    fn conv_identity_and_box_kernels() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 4, 4]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        assert!(tape.conv2d(x, w, 2, 0).is_err());
        let w = tape.constant(Tensor::ones(&[1, 2, 3, 3]));
        assert!(tape.conv2d(x, w, 1, 1).is_err());
    }

    #[test]
    fn relu_mean_variance_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let m = tape.constant(Tensor::from_vec(vec![2.0, 4.0, 6.0]));
        let mean = tape.mean(m).unwrap();
        assert_eq!(tape.value(mean).item(), 4.0);
        let var = tape.variance(m).unwrap();
        assert!((tape.value(var).item() - 8.0 / 3.0).abs() < 1e-6);

        // subgradient at exactly zero is zero
        let s = tape.sum(r).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(Tensor::zeros(&[3, 10]));
        let loss = tape.softmax_cross_entropy(logits, &[0, 4, 9]).unwrap();
        assert!((tape.value(loss).item() - 10f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let mut prev = f32::INFINITY;
        for margin in [1.0f32, 5.0, 20.0, 80.0] {
            let mut tape = Tape::<f32>::new();
            let mut row = vec![0.0; 10];
            row[3] = margin;
            let logits = tape.constant(t(&[1, 10], &row));
            let loss = tape.softmax_cross_entropy(logits, &[3]).unwrap();
            let v = tape.value(loss).item();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 4]));
        assert_eq!(
            tape.softmax_cross_entropy(logits, &[4]).unwrap_err(),
            TensorError::LabelOutOfRange { label: 4, classes: 4 }
        );
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        // diamond: x feeds two branches that rejoin
        let a = tape.relu(x).unwrap();
        let b = tape.scalar_mul(x, 2.0).unwrap();
        let c = tape.add(a, b).unwrap();
        let d = tape.mul(c, x).unwrap();
        let s = tape.sum(d).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(tape.backward_visits(), tape.len());
        // d = (relu(x) + 2x) * x  =>  dd/dx = relu'(x) x + relu(x) + 4x
        assert_eq!(grads.get(x).unwrap().data(), &[6.0, -8.0, 18.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let m = tape.constant(Tensor::from_vec(vec![0.0, 1.0]));
        let y = tape.mul(x, m).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
        assert!(grads.get(m).is_none());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec(vec![f32::MAX]));
        assert!(matches!(tape.scalar_mul(x, 10.0), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn narrow_prefix_gathers_and_scatters() {
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let x = tape.leaf(t(&[2, 3, 4], &data));
        let y = tape.narrow_prefix(x, &[1, 2, 3]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 2.0, 4.0, 5.0, 6.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        let gx = g.get(x).unwrap().data();
        assert_eq!(gx.iter().filter(|&&v| v == 1.0).count(), 6);
        assert_eq!(gx[3], 0.0);
        assert_eq!(gx[4], 1.0);
        assert_eq!(gx[12], 0.0);
    }

    #[test]
    fn cos_sq_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 0.0]));
        let b = tape.leaf(Tensor::from_vec(vec![0.0, 3.0]));
        let c = tape.cos_sq(a, b).unwrap();
        assert_eq!(tape.value(c).item(), 0.0);
        let b2 = tape.leaf(Tensor::from_vec(vec![2.0, 0.0]));
        let c = tape.cos_sq(a, b2).unwrap();
        assert!((tape.value(c).item() - 1.0).abs() < 1e-12);
        let z = tape.leaf(Tensor::from_vec(vec![0.0, 0.0]));
        let c = tape.cos_sq(a, z).unwrap();
        assert_eq!(tape.value(c).item(), 0.0);
        let g = tape.backward(c).unwrap();
        assert!(g.get(z).is_none() || g.get(z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let data: Vec<f32> = (0..2 * 3 * 5 * 5).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.1).collect();
            let x = tape.constant(t(&[2, 3, 5, 5], &data));
            let wd: Vec<f32> = (0..4 * 3 * 9).map(|i| ((i * 13 % 7) as f32 - 3.0) * 0.2).collect();
            let w = tape.constant(t(&[4, 3, 3, 3], &wd));
            let y = tape.conv2d(x, w, 1, 1).unwrap();
            let y = tape.group_norm(y, 2, 1e-5).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

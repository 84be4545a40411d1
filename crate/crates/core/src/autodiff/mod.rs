//! Tape-based reverse-mode automatic differentiation over a fixed op set.
//!
//! A [`Graph`] records every op in execution order. Parameters are not copied
//! into the tape: the graph borrows the [`ParamStore`] and backward
//! accumulates straight into each parameter's `grad` slot.

pub mod conv;

use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{lit, Real, Tensor};

pub use conv::ConvGeom;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Relu6,
    Silu,
    Prelu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Relu6 => "relu6",
            Activation::Silu => "silu",
            Activation::Prelu => "prelu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "relu6" => Ok(Activation::Relu6),
            "silu" | "swish" => Ok(Activation::Silu),
            "prelu" => Ok(Activation::Prelu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics slots for a batch-norm call.
#[derive(Debug, Clone, Copy)]
pub struct BnState {
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Act {
        x: Var,
        kind: Activation,
        slope: Option<Var>,
    },
    Sigmoid {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulScalar {
        x: Var,
        s: T,
    },
    ChannelScale {
        x: Var,
        s: Var,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mask {
        x: Var,
        mask: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<T>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Act { kind, .. } => kind.name(),
            Op::Sigmoid { .. } => "sigmoid",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::MulScalar { .. } => "mul_scalar",
            Op::ChannelScale { .. } => "broadcast_mul_channels",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::Mask { .. } => "dropout_mask",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

enum Store<'s, T> {
    Owned(ParamStore<T>),
    Borrowed(&'s mut ParamStore<T>),
}

pub struct Graph<'s, T: Real> {
    store: Store<'s, T>,
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    grad_fault: Option<(&'static str, T)>,
}

impl<T: Real> Default for Graph<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<'static, T> {
    /// A graph with no parameter store; only `input` leaves can carry gradients.
    pub fn new() -> Self {
        Self {
            store: Store::Owned(ParamStore::new()),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            grad_fault: None,
        }
    }
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn with_params(store: &'s mut ParamStore<T>) -> Self {
        Self {
            store: Store::Borrowed(store),
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            grad_fault: None,
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        match &self.store {
            Store::Owned(s) => s,
            Store::Borrowed(s) => s,
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        match &mut self.store {
            Store::Owned(s) => s,
            Store::Borrowed(s) => s,
        }
    }

    /// Scale every gradient emitted by ops named `op` by `factor`.
    /// Only used as a negative control for the gradient checker.
    #[doc(hidden)]
    pub fn inject_grad_fault(&mut self, op: &'static str, factor: T) {
        self.grad_fault = Some((op, factor));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params().value(*id),
        }
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.value(v).dims()
    }

    /// Accumulated gradient of a leaf (`input` or `param`) after `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        match &self.nodes[v.0].op {
            Op::Param(id) => Some(&self.params().get(*id).grad),
            Op::Leaf => self.leaf_grads[v.0].as_ref(),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("{} produced NaN/Inf", op.name())));
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let requires_grad = self.params().get(id).kind.trainable();
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.dims(x), self.dims(w), stride, padding, groups)?;
        if let Some(b) = b {
            if self.dims(b) != [geom.cout] {
                return Err(Error::Dimension(format!(
                    "conv2d bias dims {:?} != [{}]",
                    self.dims(b),
                    geom.cout
                )));
            }
        }
        let out = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(&geom.output_dims(), out)?;
        self.push(t, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Batch normalization over `(N, H, W)` per channel. Train mode also updates the
    /// running statistics in `state`; eval mode normalizes with them.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: BnState,
        mode: Mode,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if self.dims(gamma) != [c] || self.dims(beta) != [c] {
            return Err(Error::Dimension(format!(
                "batchnorm expects [{c}] affine params, got {:?} / {:?}",
                self.dims(gamma),
                self.dims(beta)
            )));
        }
        let eps: T = lit(BN_EPS);
        let momentum: T = lit(BN_MOMENTUM);
        let plane = h * w;
        let count = n * plane;
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut batch_stats = Vec::with_capacity(c);
        let running_mean = self.params().value(state.running_mean).data().to_vec();
        let running_var = self.params().value(state.running_var).data().to_vec();
        let train = mode == Mode::Train;
        for ch in 0..c {
            let (mean, var) = if train {
                let mut s = T::zero();
                for i in 0..n {
                    for &v in &xs[(i * c + ch) * plane..][..plane] {
                        s += v;
                    }
                }
                let mean = s / T::from_f64(count as f64);
                let mut sq = T::zero();
                for i in 0..n {
                    for &v in &xs[(i * c + ch) * plane..][..plane] {
                        sq += (v - mean) * (v - mean);
                    }
                }
                let var = sq / T::from_f64(count as f64);
                batch_stats.push((mean, var));
                (mean, var)
            } else {
                (running_mean[ch], running_var[ch])
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for i in 0..n {
                let base = (i * c + ch) * plane;
                for k in base..base + plane {
                    let xh = (xs[k] - mean) * is;
                    xhat[k] = xh;
                    out[k] = gs[ch] * xh + bs[ch];
                }
            }
        }
        if train {
            let unbias = if count > 1 {
                T::from_f64(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            let store = self.params_mut();
            let rm = store.get_mut(state.running_mean).value.data_mut();
            for (r, (m, _)) in rm.iter_mut().zip(&batch_stats) {
                *r = (T::one() - momentum) * *r + momentum * *m;
            }
            let rv = store.get_mut(state.running_var).value.data_mut();
            for (r, (_, v)) in rv.iter_mut().zip(&batch_stats) {
                *r = (T::one() - momentum) * *r + momentum * *v * unbias;
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = Tensor::new(&[n, c, h, w], out)?;
        self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        )
    }

    /// Elementwise activation. `slope` must be a `[1]` tensor for PReLU and `None` otherwise.
    pub fn activation(&mut self, x: Var, kind: Activation, slope: Option<Var>) -> Result<Var> {
        let a = match (kind, slope) {
            (Activation::Prelu, Some(s)) => {
                if self.dims(s) != [1] {
                    return Err(Error::Dimension("prelu slope must have dims [1]".into()));
                }
                self.value(s).data()[0]
            }
            (Activation::Prelu, None) => {
                return Err(Error::Contract("prelu requires a slope parameter".into()))
            }
            (_, Some(_)) => {
                return Err(Error::Contract(format!(
                    "{} takes no slope parameter",
                    kind.name()
                )))
            }
            _ => T::zero(),
        };
        let six: T = lit(6.0);
        let out = self.value(x).map(|v| match kind {
            Activation::Relu => v.max(T::zero()),
            Activation::Relu6 => v.max(T::zero()).min(six),
            Activation::Silu => v * sigmoid(v),
            Activation::Prelu => {
                if v >= T::zero() {
                    v
                } else {
                    a * v
                }
            }
        });
        let rg = self.rg(x) || slope.is_some_and(|s| self.rg(s));
        self.push(out, Op::Act { x, kind, slope }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let plane = h * w;
        let inv = T::one() / T::from_f64(plane as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(&[n, c, 1, 1], data)?, Op::GlobalAvgPool { x }, rg)
    }

    /// `x[N,F] · w[O,F]ᵀ + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xd, wd) = (self.dims(x), self.dims(w));
        let (&[n, f], &[o, f2]) = (xd, wd) else {
            return Err(Error::Dimension(format!(
                "linear expects x[N,F] and w[O,F], got {xd:?} and {wd:?}"
            )));
        };
        if f != f2 {
            return Err(Error::Dimension(format!(
                "linear feature mismatch: input {f}, weight {f2}"
            )));
        }
        if let Some(b) = b {
            if self.dims(b) != [o] {
                return Err(Error::Dimension(format!("linear bias must be [{o}]")));
            }
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * o];
        for i in 0..n {
            let row = &xs[i * f..][..f];
            for j in 0..o {
                let mut acc = bs.map_or(T::zero(), |b| b[j]);
                for (&a, &bw) in row.iter().zip(&ws[j * f..][..f]) {
                    acc += a * bw;
                }
                out[i * o + j] = acc;
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(&[n, o], out)?, Op::Linear { x, w, b }, rg)
    }

    fn same_dims(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Dimension(format!(
                "{op}: dims {:?} and {:?} differ",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let t = Tensor::new(self.dims(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p * q)
            .collect();
        let t = Tensor::new(self.dims(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul { a, b }, rg)
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::MulScalar { x, s }, rg)
    }

    /// `x[N,C,H,W] * s[n,c]` broadcast over the spatial extent. `s` may be `[N,C]` or `[N,C,1,1]`.
    pub fn broadcast_mul_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let sd = self.dims(s);
        if !(sd == [n, c] || sd == [n, c, 1, 1]) {
            return Err(Error::Dimension(format!(
                "channel scale dims {sd:?} incompatible with input [{n},{c},{h},{w}]"
            )));
        }
        let plane = h * w;
        let ss = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .zip(ss)
            .flat_map(|(p, &k)| p.iter().map(move |&v| v * k))
            .collect();
        let t = Tensor::new(&[n, c, h, w], data)?;
        let rg = self.rg(x) || self.rg(s);
        self.push(t, Op::ChannelScale { x, s }, rg)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(dims)?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum { x }, rg)
    }

    /// Multiply by a constant mask of the same shape (dropout with its scaling folded in).
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::Dimension(format!(
                "mask has {} entries, tensor has {}",
                mask.len(),
                self.value(x).numel()
            )));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let t = Tensor::new(self.dims(x), data)?;
        let rg = self.rg(x);
        self.push(t, Op::Mask { x, mask }, rg)
    }

    /// Mean over the batch of `-Σ_k y_k log softmax(z)_k`. Rows of `targets` must sum to 1.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let [n, k] = self.dims(logits)[..] else {
            return Err(Error::Dimension(format!(
                "logits must be [N,K], got {:?}",
                self.dims(logits)
            )));
        };
        if targets.dims() != [n, k] {
            return Err(Error::Dimension(format!(
                "targets dims {:?} != logits dims [{n},{k}]",
                targets.dims()
            )));
        }
        validate_soft_targets(targets)?;
        let probs = softmax_rows(self.value(logits).data(), k);
        let zs = self.value(logits).data();
        let mut total = T::zero();
        for i in 0..n {
            let row = &zs[i * k..][..k];
            let lse = log_sum_exp(row);
            for j in 0..k {
                let y = targets.data()[i * k + j];
                if y != T::zero() {
                    total -= y * (row[j] - lse);
                }
            }
        }
        let loss = total / T::from_f64(n as f64);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Hash of which linear piece every piecewise activation input falls on.
    /// Finite differences are only valid when a perturbation leaves this unchanged.
    pub fn kink_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let six: T = lit(6.0);
        for node in &self.nodes {
            if let Op::Act { x, kind, .. } = node.op {
                if kind == Activation::Silu {
                    continue;
                }
                for &v in self.value(x).data() {
                    let region: u8 = if v < T::zero() {
                        0
                    } else if kind == Activation::Relu6 && v > six {
                        2
                    } else {
                        1
                    };
                    h.write_u8(region);
                }
            }
        }
        h.finish()
    }

    /// Propagate d(loss)/d(node) to every leaf that requires grad.
    ///
    /// Leaf and parameter gradients accumulate across calls; intermediate
    /// gradients are recomputed each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..end).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..end).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match self.nodes[i].op {
                Op::Leaf => {
                    let dims = self.value(Var(i)).dims().to_vec();
                    match &mut self.leaf_grads[i] {
                        Some(t) => add_into(t.data_mut(), &g),
                        slot => *slot = Some(Tensor::new(&dims, g)?),
                    }
                    continue;
                }
                Op::Param(id) => {
                    add_into(self.params_mut().get_mut(id).grad.data_mut(), &g);
                    continue;
                }
                _ => {}
            }
            let mut contribs = self.local_grads(i, &g);
            if let Some((name, factor)) = self.grad_fault {
                if self.nodes[i].op.name() == name {
                    for (_, c) in &mut contribs {
                        c.iter_mut().for_each(|v| *v *= factor);
                    }
                }
            }
            for (v, c) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => add_into(acc, &c),
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    /// Gradients flowing from node `i` (with upstream gradient `g`) into its inputs.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                if self.rg(*x) {
                    out.push((*x, conv::backward_input(geom, g, self.value(*w).data())));
                }
                if self.rg(*w) {
                    out.push((*w, conv::backward_weight(geom, g, self.value(*x).data())));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        out.push((*b, conv::backward_bias(geom, g)));
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.value(*x).nchw().expect("rank 4");
                let plane = h * w;
                let m = T::from_f64((n * plane) as f64);
                let gam = self.value(*gamma).data();
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        for k in base..base + plane {
                            sum_g += g[k];
                            sum_gx += g[k] * xhat[k];
                        }
                    }
                    dgamma[ch] = sum_gx;
                    dbeta[ch] = sum_g;
                    let scale = gam[ch] * inv_std[ch];
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        for k in base..base + plane {
                            dx[k] = if *train {
                                scale * (g[k] - sum_g / m - xhat[k] * sum_gx / m)
                            } else {
                                scale * g[k]
                            };
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Act { x, kind, slope } => {
                let xs = self.value(*x).data();
                let six: T = lit(6.0);
                let a = slope.map_or(T::zero(), |s| self.value(s).data()[0]);
                let dx = xs
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| match kind {
                        Activation::Relu => {
                            if v > T::zero() {
                                gv
                            } else {
                                T::zero()
                            }
                        }
                        Activation::Relu6 => {
                            if v > T::zero() && v < six {
                                gv
                            } else {
                                T::zero()
                            }
                        }
                        Activation::Silu => {
                            let s = sigmoid(v);
                            gv * s * (T::one() + v * (T::one() - s))
                        }
                        Activation::Prelu => {
                            if v >= T::zero() {
                                gv
                            } else {
                                a * gv
                            }
                        }
                    })
                    .collect();
                out.push((*x, dx));
                if let Some(s) = slope {
                    let da = xs
                        .iter()
                        .zip(g)
                        .filter(|(&v, _)| v < T::zero())
                        .map(|(&v, &gv)| v * gv)
                        .sum();
                    out.push((*s, vec![da]));
                }
            }
            Op::Sigmoid { x } => {
                let ys = match &node.value {
                    Value::Owned(t) => t.data(),
                    Value::Param(_) => unreachable!(),
                };
                let dx = ys
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * y * (T::one() - y))
                    .collect();
                out.push((*x, dx));
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.value(*x).nchw().expect("rank 4");
                let plane = h * w;
                let inv = T::one() / T::from_f64(plane as f64);
                let dx = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * inv, plane))
                    .collect();
                out.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let (n, f) = (self.dims(*x)[0], self.dims(*x)[1]);
                let o = self.dims(*w)[0];
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    for i in 0..n {
                        for j in 0..o {
                            let gv = g[i * o + j];
                            for (d, &wv) in dx[i * f..][..f].iter_mut().zip(&ws[j * f..][..f]) {
                                *d += gv * wv;
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); o * f];
                    for j in 0..o {
                        for i in 0..n {
                            let gv = g[i * o + j];
                            for (d, &xv) in dw[j * f..][..f].iter_mut().zip(&xs[i * f..][..f]) {
                                *d += gv * xv;
                            }
                        }
                    }
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    let db = (0..o)
                        .map(|j| (0..n).map(|i| g[i * o + j]).sum())
                        .collect();
                    out.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                out.push((*a, g.iter().zip(bv).map(|(&gv, &q)| gv * q).collect()));
                out.push((*b, g.iter().zip(av).map(|(&gv, &p)| gv * p).collect()));
            }
            Op::MulScalar { x, s } => {
                out.push((*x, g.iter().map(|&gv| gv * *s).collect()));
            }
            Op::ChannelScale { x, s } => {
                let (_, _, h, w) = self.value(*x).nchw().expect("rank 4");
                let plane = h * w;
                let xs = self.value(*x).data();
                let ss = self.value(*s).data();
                let dx = g
                    .chunks(plane)
                    .zip(ss)
                    .flat_map(|(p, &k)| p.iter().map(move |&gv| gv * k))
                    .collect();
                let ds = g
                    .chunks(plane)
                    .zip(xs.chunks(plane))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                    .collect();
                out.push((*x, dx));
                out.push((*s, ds));
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                out.push((*x, vec![g[0]; n]));
            }
            Op::Mask { x, mask } => {
                out.push((*x, g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect()));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = self.dims(*logits)[0];
                let k = self.dims(*logits)[1];
                let scale = g[0] / T::from_f64(n as f64);
                let mut dz = vec![T::zero(); n * k];
                for i in 0..n {
                    let row_mass: T = targets[i * k..][..k].iter().copied().sum();
                    for j in 0..k {
                        dz[i * k + j] = scale * (probs[i * k + j] * row_mass - targets[i * k + j]);
                    }
                }
                out.push((*logits, dz));
            }
        }
        out
    }
}

fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&z| (z - max).exp()).sum();
    max + s.ln()
}

/// Row-wise softmax of a `[rows, k]` buffer with max-subtraction.
pub fn softmax_rows<T: Real>(z: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let s: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / s));
    }
    out
}

pub fn validate_soft_targets<T: Real>(targets: &Tensor<T>) -> Result<()> {
    let k = *targets.dims().last().unwrap_or(&1);
    for (i, row) in targets.data().chunks(k).enumerate() {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| v.as_f64() < 0.0 || !v.is_finite()) {
            return Err(Error::Validation(format!(
                "soft target row {i} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_all_ones_counts_overlap() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 1, 1).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv_zero_kernel_gives_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 5, 4], |i| i as f64 * 0.37 - 3.0));
        let w = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 3.0, 8.0]));
        let y = g.activation(x, Activation::Relu6, None).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 3.0, 6.0]);

        let z = g.constant(t(&[1], &[0.0]));
        let s = g.activation(z, Activation::Silu, None).unwrap();
        assert_eq!(g.value(s).data(), &[0.0]);

        let neg = g.constant(t(&[1], &[-4.0]));
        let a = g.constant(t(&[1], &[0.25]));
        let p = g.activation(neg, Activation::Prelu, Some(a)).unwrap();
        assert_eq!(g.value(p).data(), &[-1.0]);
        assert!(g.activation(neg, Activation::Prelu, None).is_err());
    }

    #[test]
    fn gap_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.dims(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[2.5]);
        let c = g.constant(Tensor::full(&[2, 3, 4, 5], 1.75));
        let y = g.global_avg_pool(c).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        let mut g = Graph::new();
        let z = g.input(Tensor::full(&[1, 4], 0.3), true);
        let y = t(&[1, 4], &[0.0, 0.0, 1.0, 0.0]);
        let l = g.softmax_cross_entropy(z, &y).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_rows() {
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[2, 2]), true);
        let y = t(&[2, 2], &[0.5, 0.5, 0.7, 0.7]);
        assert!(matches!(
            g.softmax_cross_entropy(z, &y),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn cross_entropy_against_own_distribution_is_entropy() {
        let logits = [0.2, -1.3, 2.0];
        let p: Vec<f64> = softmax_rows(&logits, 3);
        let entropy: f64 = -p.iter().map(|&q| q * q.ln()).sum::<f64>();
        let mut g = Graph::new();
        let z = g.input(t(&[1, 3], &logits), true);
        let l = g.softmax_cross_entropy(z, &t(&[1, 3], &p)).unwrap();
        assert!((g.value(l).data()[0] - entropy).abs() < 1e-12);
    }

    #[test]
    fn sum_of_product_grad_is_other_factor() {
        let mut g = Graph::new();
        let xv = t(&[2, 2], &[1.0, -2.0, 3.5, 0.25]);
        let w = g.input(Tensor::full(&[2, 2], 0.1), true);
        let x = g.constant(xv.clone());
        let p = g.mul(w, x).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), xv.data());
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64 * 0.1 - 0.4), true);
        let w = g.input(Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f64).sin()), true);
        let y = g.conv2d(x, w, None, 1, 1, 2).unwrap();
        let a = g.activation(y, Activation::Silu, None).unwrap();
        let l = g.sum(a).unwrap();
        g.backward(l).unwrap();
        let once = g.grad(w).unwrap().clone();
        g.backward(l).unwrap();
        let twice = g.grad(w).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn batchnorm_constant_input_gives_beta() {
        let mut store = ParamStore::<f64>::new();
        let gamma = store.add("g", crate::params::ParamKind::BnGamma, Tensor::full(&[2], 1.0));
        let beta = store.add("b", crate::params::ParamKind::BnBeta, Tensor::zeros(&[2]));
        let rm = store.add("rm", crate::params::ParamKind::Buffer, Tensor::zeros(&[2]));
        let rv = store.add("rv", crate::params::ParamKind::Buffer, Tensor::full(&[2], 1.0));
        let state = BnState {
            running_mean: rm,
            running_var: rv,
        };
        let mut g = Graph::with_params(&mut store);
        let x = g.constant(Tensor::from_fn(&[3, 2, 2, 2], |i| if (i / 4) % 2 == 0 { 5.0 } else { -2.0 }));
        let (gv, bv) = (g.param(gamma), g.param(beta));
        let y = g.batchnorm2d(x, gv, bv, state, Mode::Train).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        drop(g);
        let rmv = store.value(rm).data();
        assert!((rmv[0] - 0.5).abs() < 1e-12 && (rmv[1] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_without_stats_uses_unit_defaults() {
        let mut store = ParamStore::<f64>::new();
        let gamma = store.add("g", crate::params::ParamKind::BnGamma, Tensor::full(&[1], 1.0));
        let beta = store.add("b", crate::params::ParamKind::BnBeta, Tensor::zeros(&[1]));
        let rm = store.add("rm", crate::params::ParamKind::Buffer, Tensor::zeros(&[1]));
        let rv = store.add("rv", crate::params::ParamKind::Buffer, Tensor::full(&[1], 1.0));
        let mut g = Graph::with_params(&mut store);
        let xv = t(&[1, 1, 1, 3], &[1.0, -2.0, 0.5]);
        let x = g.constant(xv.clone());
        let (gv, bv) = (g.param(gamma), g.param(beta));
        let y = g
            .batchnorm2d(
                x,
                gv,
                bv,
                BnState {
                    running_mean: rm,
                    running_var: rv,
                },
                Mode::Eval,
            )
            .unwrap();
        for (a, b) in g.value(y).data().iter().zip(xv.data()) {
            assert!((a - b / (1.0 + BN_EPS).sqrt()).abs() < 1e-15);
        }
    }
}

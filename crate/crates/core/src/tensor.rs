//! Dense tensors with reverse-mode automatic differentiation on a
//! define-by-run tape, plus the AdamW optimizer.
//!
//! The tape is rebuilt on every forward pass: ops append nodes holding
//! their output buffer and whatever the backward pass needs, and
//! [`Tape::backward`] walks the nodes in reverse. Values are `f32` in
//! production; every op is generic over [`Real`] so the same code path
//! runs in `f64` for gradient verification.

use crate::error::{Error, Result};
use rand::Rng;

/// Scalar element type for tensors: `f32` for training and inference,
/// `f64` for verification.
pub trait Real: num_traits::Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Round half to even, for deterministic quantization grids.
    fn round_even(self) -> Self;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn round_even(self) -> Self {
        self.round_ties_even()
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn round_even(self) -> Self {
        self.round_ties_even()
    }
}

/// Dense N-dimensional array. Holds network weights and any value that
/// outlives a single tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    /// Uniform init in `[-bound, bound]`, the fan-in rule used for all
    /// convolution weights.
    pub fn uniform(shape: &[usize], bound: T, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let b = bound.as_f64();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-b..=b)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn requires_grad(mut self, yes: bool) -> Self {
        self.requires_grad = yes;
        self
    }

    pub fn set_requires_grad(&mut self, yes: bool) {
        self.requires_grad = yes;
        if !yes {
            self.grad = None;
        }
    }

    pub fn is_grad_required(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Replace the gradient buffer. Shape must match the tensor.
    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "grad length {} != tensor length {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Add into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, grad: &[T]) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "grad length {} != tensor length {}",
                grad.len(),
                self.data.len()
            )));
        }
        match &mut self.grad {
            Some(g) => {
                for (gi, &ui) in g.iter_mut().zip(grad) {
                    *gi = *gi + ui;
                }
            }
            None => self.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

/// Train/eval switch for batch norm and quantizer calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm running statistics. Lives with the model, not the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T: Real> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub initialized: bool,
}

impl<T: Real> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            initialized: false,
        }
    }
}

struct ConvDims {
    batch: usize,
    c_in: usize,
    len_in: usize,
    c_out: usize,
    kernel: usize,
    len_out: usize,
    stride: usize,
    padding: usize,
    groups: usize,
}

enum Op<T: Real> {
    Leaf,
    Add(Value, Value),
    Mul(Value, Value),
    Scale(Value, T),
    Sum(Value),
    Mean(Value),
    Relu(Value),
    /// Clamp and straight-through fake quantization share the same
    /// adjoint: pass the gradient inside `[lo, hi]`, zero outside.
    ClampLike {
        x: Value,
        lo: T,
        hi: T,
    },
    Conv1d {
        x: Value,
        w: Value,
        b: Option<Value>,
        dims: ConvDims,
    },
    BatchNorm {
        x: Value,
        gamma: Value,
        beta: Value,
        // per-channel mean and 1/sqrt(var+eps) used in the forward pass
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    LogSoftmax {
        x: Value,
        axis: usize,
    },
    Exp(Value),
    /// Multiply a tensor by a scalar node (both differentiable).
    ScaleBy {
        x: Value,
        s: Value,
    },
    /// Extract one element as a scalar node.
    Index(Value, usize),
    /// Scalar output whose input gradient was computed during the
    /// forward pass (used by the CTC loss).
    ScalarWithGrad {
        x: Value,
        grad: Vec<T>,
    },
}

struct Node<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Vec<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Recording of one forward pass. Supports exactly one backward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, needs_grad: bool, op: Op<T>) -> Value {
        self.nodes.push(Node {
            shape,
            data,
            grad: Vec::new(),
            needs_grad,
            op,
        });
        Value(self.nodes.len() - 1)
    }

    fn check_finite(&self, v: Value, what: &str) -> Result<Value> {
        if self.nodes[v.0].data.iter().all(|x| x.is_finite()) {
            Ok(v)
        } else {
            Err(Error::Autodiff(format!("{what} produced non-finite values")))
        }
    }

    /// Copy a tensor onto the tape. Gradients flow back if the tensor
    /// requires them; read the result with [`Tape::grad`] after
    /// backward.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Value {
        self.push(
            t.shape.clone(),
            t.data.clone(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Value> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "constant shape {:?} wants {n} elements, got {}",
                shape,
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    pub fn scalar(&mut self, v: T) -> Value {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Value) -> &[T] {
        &self.nodes[v.0].data
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Value) -> T {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient of the loss w.r.t. this node; empty until backward ran.
    pub fn grad(&self, v: Value) -> &[T] {
        &self.nodes[v.0].grad
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        let shape = self.nodes[a.0].shape.clone();
        let v = self.push(shape, data, ng, Op::Add(a, b));
        self.check_finite(v, "add")
    }

    /// Elementwise product of same-shape values.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        let shape = self.nodes[a.0].shape.clone();
        let v = self.push(shape, data, ng, Op::Mul(a, b));
        self.check_finite(v, "mul")
    }

    pub fn scale(&mut self, a: Value, c: T) -> Value {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let ng = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, ng, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let s = self.nodes[a.0]
            .data
            .iter()
            .fold(T::zero(), |acc, &x| acc + x);
        let ng = self.needs(a);
        self.push(vec![1], vec![s], ng, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Value) -> Value {
        let n = self.nodes[a.0].data.len();
        let s = self.nodes[a.0]
            .data
            .iter()
            .fold(T::zero(), |acc, &x| acc + x);
        let m = s / T::from_f64(n as f64);
        let ng = self.needs(a);
        self.push(vec![1], vec![m], ng, Op::Mean(a))
    }

    pub fn relu(&mut self, a: Value) -> Value {
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let ng = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, ng, Op::Relu(a))
    }

    pub fn clamp(&mut self, a: Value, lo: T, hi: T) -> Result<Value> {
        if lo > hi {
            return Err(Error::Shape(format!("clamp: lo {lo} > hi {hi}")));
        }
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x < lo { lo } else if x > hi { hi } else { x })
            .collect();
        let ng = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, data, ng, Op::ClampLike { x: a, lo, hi }))
    }

    /// Apply `snap` elementwise with a straight-through gradient: the
    /// adjoint passes the upstream gradient where the input lies in
    /// `[lo, hi]` and zeroes it outside.
    pub fn straight_through(
        &mut self,
        a: Value,
        lo: T,
        hi: T,
        snap: impl Fn(T) -> T,
    ) -> Value {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| snap(x)).collect();
        let ng = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, ng, Op::ClampLike { x: a, lo, hi })
    }

    pub fn exp(&mut self, a: Value) -> Result<Value> {
        let data: Vec<T> = self.nodes[a.0].data.iter().map(|&x| x.exp()).collect();
        let ng = self.needs(a);
        let shape = self.nodes[a.0].shape.clone();
        let v = self.push(shape, data, ng, Op::Exp(a));
        self.check_finite(v, "exp")
    }

    /// Multiply every element of `x` by the scalar node `s`.
    pub fn scale_by(&mut self, x: Value, s: Value) -> Result<Value> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(Error::Shape(format!(
                "scale_by: scalar operand has shape {:?}",
                self.nodes[s.0].shape
            )));
        }
        let sv = self.nodes[s.0].data[0];
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v * sv).collect();
        let ng = self.needs(x) || self.needs(s);
        let shape = self.nodes[x.0].shape.clone();
        let v = self.push(shape, data, ng, Op::ScaleBy { x, s });
        self.check_finite(v, "scale_by")
    }

    /// Extract element `i` of a node as a scalar node.
    pub fn index(&mut self, x: Value, i: usize) -> Result<Value> {
        if i >= self.nodes[x.0].data.len() {
            return Err(Error::Shape(format!(
                "index {i} out of bounds for shape {:?}",
                self.nodes[x.0].shape
            )));
        }
        let v = self.nodes[x.0].data[i];
        let ng = self.needs(x);
        Ok(self.push(vec![1], vec![v], ng, Op::Index(x, i)))
    }

    /// Push a scalar node whose gradient w.r.t. `x` was already
    /// computed in the forward pass (chain rule applies the upstream
    /// scalar gradient multiplicatively).
    pub fn scalar_with_grad(&mut self, x: Value, loss: T, grad: Vec<T>) -> Result<Value> {
        if grad.len() != self.nodes[x.0].data.len() {
            return Err(Error::Shape(format!(
                "scalar_with_grad: grad length {} != input length {}",
                grad.len(),
                self.nodes[x.0].data.len()
            )));
        }
        let ng = self.needs(x);
        Ok(self.push(vec![1], vec![loss], ng, Op::ScalarWithGrad { x, grad }))
    }

    /// 1-D cross-correlation over `[N, C_in, L]` with kernel
    /// `[C_out, C_in/groups, K]`, symmetric zero padding.
    pub fn conv1d(
        &mut self,
        x: Value,
        w: Value,
        b: Option<Value>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Value> {
        let xs = &self.nodes[x.0].shape;
        let ws = &self.nodes[w.0].shape;
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::Shape(format!(
                "conv1d wants [N,C,L] and [Cout,Cin/g,K], got {xs:?} and {ws:?}"
            )));
        }
        let (batch, c_in, len_in) = (xs[0], xs[1], xs[2]);
        let (c_out, c_in_g, kernel) = (ws[0], ws[1], ws[2]);
        if stride == 0 {
            return Err(Error::Shape("conv1d: stride must be >= 1".into()));
        }
        if kernel == 0 {
            return Err(Error::Shape("conv1d: kernel must be >= 1".into()));
        }
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Shape(format!(
                "conv1d: groups {groups} must divide C_in {c_in} and C_out {c_out}"
            )));
        }
        if c_in_g != c_in / groups {
            return Err(Error::Shape(format!(
                "conv1d: weight C_in/g {c_in_g} != {}",
                c_in / groups
            )));
        }
        if let Some(bv) = b {
            let bs = &self.nodes[bv.0].shape;
            if bs != &[c_out] {
                return Err(Error::Shape(format!(
                    "conv1d: bias shape {bs:?} != [{c_out}]"
                )));
            }
        }
        if len_in + 2 * padding < kernel {
            return Err(Error::Shape(format!(
                "conv1d: L {len_in} + 2*{padding} < K {kernel}"
            )));
        }
        let len_out = (len_in + 2 * padding - kernel) / stride + 1;

        let dims = ConvDims {
            batch,
            c_in,
            len_in,
            c_out,
            kernel,
            len_out,
            stride,
            padding,
            groups,
        };
        let mut out = vec![T::zero(); batch * c_out * len_out];
        conv1d_forward(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            b.map(|bv| self.nodes[bv.0].data.as_slice()),
            &dims,
            &mut out,
        );
        let ng = self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        let v = self.push(
            vec![batch, c_out, len_out],
            out,
            ng,
            Op::Conv1d { x, w, b, dims },
        );
        self.check_finite(v, "conv1d")
    }

    /// Batch norm over `[N, C, L]`, normalizing each channel over the
    /// batch and length axes. Train mode uses batch statistics and
    /// updates `state` by exponential moving average; eval mode uses
    /// the stored running statistics.
    pub fn batch_norm1d(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        state: &mut BnState<T>,
        mode: Mode,
        momentum: T,
        eps: T,
    ) -> Result<Value> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("batch_norm1d wants [N,C,L], got {xs:?}")));
        }
        let (batch, channels, len) = (xs[0], xs[1], xs[2]);
        if self.nodes[gamma.0].shape != [channels] || self.nodes[beta.0].shape != [channels] {
            return Err(Error::Shape(format!(
                "batch_norm1d: gamma/beta must be [{channels}]"
            )));
        }
        if state.running_mean.len() != channels {
            return Err(Error::Shape(format!(
                "batch_norm1d: state has {} channels, input {channels}",
                state.running_mean.len()
            )));
        }
        if eps <= T::zero() {
            return Err(Error::Shape("batch_norm1d: epsilon must be > 0".into()));
        }
        let m = batch * len;
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                if m == 0 {
                    return Err(Error::Shape("batch_norm1d: empty batch in train mode".into()));
                }
                let mf = T::from_f64(m as f64);
                let mut mean = vec![T::zero(); channels];
                let mut var = vec![T::zero(); channels];
                let xd = &self.nodes[x.0].data;
                for n in 0..batch {
                    for c in 0..channels {
                        let row = &xd[(n * channels + c) * len..(n * channels + c + 1) * len];
                        mean[c] = mean[c] + row.iter().fold(T::zero(), |a, &v| a + v);
                    }
                }
                for c in 0..channels {
                    mean[c] = mean[c] / mf;
                }
                for n in 0..batch {
                    for c in 0..channels {
                        let row = &xd[(n * channels + c) * len..(n * channels + c + 1) * len];
                        var[c] = var[c]
                            + row
                                .iter()
                                .fold(T::zero(), |a, &v| a + (v - mean[c]) * (v - mean[c]));
                    }
                }
                for c in 0..channels {
                    var[c] = var[c] / mf;
                }
                for c in 0..channels {
                    if state.initialized {
                        state.running_mean[c] =
                            (T::one() - momentum) * state.running_mean[c] + momentum * mean[c];
                        state.running_var[c] =
                            (T::one() - momentum) * state.running_var[c] + momentum * var[c];
                    } else {
                        state.running_mean[c] = mean[c];
                        state.running_var[c] = var[c];
                    }
                }
                state.initialized = true;
                (mean, var)
            }
            Mode::Eval => {
                if !state.initialized {
                    return Err(Error::Autodiff(
                        "batch_norm1d: eval mode before running stats were populated".into(),
                    ));
                }
                (state.running_mean.clone(), state.running_var.clone())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

        let mut out = vec![T::zero(); batch * channels * len];
        {
            let xd = &self.nodes[x.0].data;
            let g = &self.nodes[gamma.0].data;
            let bt = &self.nodes[beta.0].data;
            for n in 0..batch {
                for c in 0..channels {
                    let base = (n * channels + c) * len;
                    let (mu, is, gc, bc) = (mean[c], inv_std[c], g[c], bt[c]);
                    for l in 0..len {
                        out[base + l] = gc * (xd[base + l] - mu) * is + bc;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            xs,
            out,
            ng,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train: matches!(mode, Mode::Train),
            },
        );
        self.check_finite(v, "batch_norm1d")
    }

    /// Log-softmax along `axis`; `exp` of the result sums to 1 per lane.
    pub fn log_softmax(&mut self, x: Value, axis: usize) -> Result<Value> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "log_softmax: axis {axis} out of range for {shape:?}"
            )));
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xd = &self.nodes[x.0].data;
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * lane + k) * inner + i;
                let mut mx = T::neg_infinity();
                for k in 0..lane {
                    mx = mx.max(xd[idx(k)]);
                }
                let mut s = T::zero();
                for k in 0..lane {
                    s = s + (xd[idx(k)] - mx).exp();
                }
                let lse = mx + s.ln();
                for k in 0..lane {
                    out[idx(k)] = xd[idx(k)] - lse;
                }
            }
        }
        let ng = self.needs(x);
        let v = self.push(shape, out, ng, Op::LogSoftmax { x, axis });
        self.check_finite(v, "log_softmax")
    }

    /// Reverse pass from a scalar loss. Populates node gradients; read
    /// them back with [`Tape::grad`]. Errors on a non-scalar loss or if
    /// backward already ran for this recording.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran for this tape; record a new forward pass".into(),
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::Autodiff(
                "loss is detached: no tape input requires gradients".into(),
            ));
        }
        self.backward_done = true;
        for node in &mut self.nodes {
            node.grad = vec![T::zero(); node.data.len()];
        }
        self.nodes[loss.0].grad[0] = T::one();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = std::mem::take(&mut node.grad);
                    accumulate(&mut head[a.0], &g);
                    accumulate(&mut head[b.0], &g);
                    node.grad = g;
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if head[a.0].needs_grad {
                        let bd_then_g: Vec<T> = head[b.0]
                            .data
                            .iter()
                            .zip(&node.grad)
                            .map(|(&bv, &gv)| bv * gv)
                            .collect();
                        accumulate(&mut head[a.0], &bd_then_g);
                    }
                    if head[b.0].needs_grad {
                        let ad_then_g: Vec<T> = head[a.0]
                            .data
                            .iter()
                            .zip(&node.grad)
                            .map(|(&av, &gv)| av * gv)
                            .collect();
                        accumulate(&mut head[b.0], &ad_then_g);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    let g: Vec<T> = node.grad.iter().map(|&gv| gv * c).collect();
                    accumulate(&mut head[a.0], &g);
                }
                Op::Sum(a) => {
                    let g = node.grad[0];
                    let buf = vec![g; head[a.0].data.len()];
                    accumulate(&mut head[a.0], &buf);
                }
                Op::Mean(a) => {
                    let n = head[a.0].data.len();
                    let g = node.grad[0] / T::from_f64(n as f64);
                    let buf = vec![g; n];
                    accumulate(&mut head[a.0], &buf);
                }
                Op::Relu(a) => {
                    let g: Vec<T> = head[a.0]
                        .data
                        .iter()
                        .zip(&node.grad)
                        .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut head[a.0], &g);
                }
                Op::ClampLike { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let g: Vec<T> = head[x.0]
                        .data
                        .iter()
                        .zip(&node.grad)
                        .map(|(&xv, &gv)| if xv >= lo && xv <= hi { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut head[x.0], &g);
                }
                Op::Conv1d { x, w, b, dims } => {
                    let (x, w, b) = (*x, *w, *b);
                    let need_x = head[x.0].needs_grad;
                    let need_w = head[w.0].needs_grad;
                    let mut dx = if need_x {
                        vec![T::zero(); head[x.0].data.len()]
                    } else {
                        Vec::new()
                    };
                    let mut dw = if need_w {
                        vec![T::zero(); head[w.0].data.len()]
                    } else {
                        Vec::new()
                    };
                    conv1d_backward(
                        &head[x.0].data,
                        &head[w.0].data,
                        dims,
                        &node.grad,
                        need_x.then_some(&mut dx),
                        need_w.then_some(&mut dw),
                    );
                    if need_x {
                        accumulate(&mut head[x.0], &dx);
                    }
                    if need_w {
                        accumulate(&mut head[w.0], &dw);
                    }
                    if let Some(bv) = b {
                        if head[bv.0].needs_grad {
                            let mut db = vec![T::zero(); dims.c_out];
                            for n in 0..dims.batch {
                                for co in 0..dims.c_out {
                                    let base = (n * dims.c_out + co) * dims.len_out;
                                    db[co] = db[co]
                                        + node.grad[base..base + dims.len_out]
                                            .iter()
                                            .fold(T::zero(), |a, &v| a + v);
                                }
                            }
                            accumulate(&mut head[bv.0], &db);
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    train,
                } => {
                    let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                    let shape = &node.shape;
                    let (batch, channels, len) = (shape[0], shape[1], shape[2]);
                    let m = T::from_f64((batch * len) as f64);
                    let g = &node.grad;
                    // per-channel reductions: sum(dy), sum(dy * xhat)
                    let mut sum_dy = vec![T::zero(); channels];
                    let mut sum_dy_xhat = vec![T::zero(); channels];
                    {
                        let xd = &head[x.0].data;
                        for n in 0..batch {
                            for c in 0..channels {
                                let base = (n * channels + c) * len;
                                let (mu, is) = (mean[c], inv_std[c]);
                                for l in 0..len {
                                    let xhat = (xd[base + l] - mu) * is;
                                    sum_dy[c] = sum_dy[c] + g[base + l];
                                    sum_dy_xhat[c] = sum_dy_xhat[c] + g[base + l] * xhat;
                                }
                            }
                        }
                    }
                    if head[gamma.0].needs_grad {
                        accumulate(&mut head[gamma.0], &sum_dy_xhat);
                    }
                    if head[beta.0].needs_grad {
                        accumulate(&mut head[beta.0], &sum_dy);
                    }
                    if head[x.0].needs_grad {
                        let gam = head[gamma.0].data.clone();
                        let dx = {
                            let xd = &head[x.0].data;
                            let mut dx = vec![T::zero(); xd.len()];
                            for n in 0..batch {
                                for c in 0..channels {
                                    let base = (n * channels + c) * len;
                                    let (mu, is, gc) = (mean[c], inv_std[c], gam[c]);
                                    if train {
                                        let mdy = sum_dy[c] / m;
                                        let mdyx = sum_dy_xhat[c] / m;
                                        for l in 0..len {
                                            let xhat = (xd[base + l] - mu) * is;
                                            dx[base + l] =
                                                gc * is * (g[base + l] - mdy - xhat * mdyx);
                                        }
                                    } else {
                                        for l in 0..len {
                                            dx[base + l] = gc * is * g[base + l];
                                        }
                                    }
                                }
                            }
                            dx
                        };
                        accumulate(&mut head[x.0], &dx);
                    }
                }
                Op::LogSoftmax { x, axis } => {
                    let (x, axis) = (*x, *axis);
                    let shape = &node.shape;
                    let lane = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..axis].iter().product();
                    let y = &node.data;
                    let g = &node.grad;
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * lane + k) * inner + i;
                            let mut gsum = T::zero();
                            for k in 0..lane {
                                gsum = gsum + g[idx(k)];
                            }
                            for k in 0..lane {
                                dx[idx(k)] = g[idx(k)] - y[idx(k)].exp() * gsum;
                            }
                        }
                    }
                    accumulate(&mut head[x.0], &dx);
                }
                Op::Exp(a) => {
                    let g: Vec<T> = node
                        .data
                        .iter()
                        .zip(&node.grad)
                        .map(|(&y, &gv)| y * gv)
                        .collect();
                    accumulate(&mut head[a.0], &g);
                }
                Op::ScaleBy { x, s } => {
                    let (x, s) = (*x, *s);
                    let sv = head[s.0].data[0];
                    if head[x.0].needs_grad {
                        let g: Vec<T> = node.grad.iter().map(|&gv| gv * sv).collect();
                        accumulate(&mut head[x.0], &g);
                    }
                    if head[s.0].needs_grad {
                        let ds = head[x.0]
                            .data
                            .iter()
                            .zip(&node.grad)
                            .fold(T::zero(), |acc, (&xv, &gv)| acc + xv * gv);
                        accumulate(&mut head[s.0], &[ds]);
                    }
                }
                Op::Index(x, i) => {
                    let (x, i) = (*x, *i);
                    let mut g = vec![T::zero(); head[x.0].data.len()];
                    g[i] = node.grad[0];
                    accumulate(&mut head[x.0], &g);
                }
                Op::ScalarWithGrad { x, grad } => {
                    let up = node.grad[0];
                    let g: Vec<T> = grad.iter().map(|&gv| gv * up).collect();
                    accumulate(&mut head[x.0], &g);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(node: &mut Node<T>, g: &[T]) {
    if !node.needs_grad {
        return;
    }
    for (dst, &src) in node.grad.iter_mut().zip(g) {
        *dst = *dst + src;
    }
}

fn conv1d_forward<T: Real>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    d: &ConvDims,
    out: &mut [T],
) {
    let c_in_g = d.c_in / d.groups;
    let c_out_g = d.c_out / d.groups;
    for n in 0..d.batch {
        for co in 0..d.c_out {
            let g = co / c_out_g;
            let out_base = (n * d.c_out + co) * d.len_out;
            if let Some(bias) = b {
                out[out_base..out_base + d.len_out].fill(bias[co]);
            }
            for cig in 0..c_in_g {
                let ci = g * c_in_g + cig;
                let x_base = (n * d.c_in + ci) * d.len_in;
                let w_base = (co * c_in_g + cig) * d.kernel;
                for k in 0..d.kernel {
                    let wv = w[w_base + k];
                    if d.stride == 1 {
                        // input index = l + k - padding; clip to valid range
                        let l0 = d.padding.saturating_sub(k);
                        let l1 = (d.len_in + d.padding - k).min(d.len_out);
                        if l0 >= l1 {
                            continue;
                        }
                        let xoff = x_base + l0 + k - d.padding;
                        let orow = &mut out[out_base + l0..out_base + l1];
                        let xrow = &x[xoff..xoff + (l1 - l0)];
                        for (o, &xv) in orow.iter_mut().zip(xrow) {
                            *o = *o + wv * xv;
                        }
                    } else {
                        for l in 0..d.len_out {
                            let pos = l * d.stride + k;
                            if pos < d.padding || pos - d.padding >= d.len_in {
                                continue;
                            }
                            out[out_base + l] =
                                out[out_base + l] + wv * x[x_base + pos - d.padding];
                        }
                    }
                }
            }
        }
    }
}

fn conv1d_backward<T: Real>(
    x: &[T],
    w: &[T],
    d: &ConvDims,
    dy: &[T],
    mut dx: Option<&mut Vec<T>>,
    mut dw: Option<&mut Vec<T>>,
) {
    let c_in_g = d.c_in / d.groups;
    let c_out_g = d.c_out / d.groups;
    for n in 0..d.batch {
        for co in 0..d.c_out {
            let g = co / c_out_g;
            let out_base = (n * d.c_out + co) * d.len_out;
            for cig in 0..c_in_g {
                let ci = g * c_in_g + cig;
                let x_base = (n * d.c_in + ci) * d.len_in;
                let w_base = (co * c_in_g + cig) * d.kernel;
                for k in 0..d.kernel {
                    if d.stride == 1 {
                        let l0 = d.padding.saturating_sub(k);
                        let l1 = (d.len_in + d.padding - k).min(d.len_out);
                        if l0 >= l1 {
                            continue;
                        }
                        let xoff = x_base + l0 + k - d.padding;
                        let grow = &dy[out_base + l0..out_base + l1];
                        if let Some(dw) = dw.as_deref_mut() {
                            let xrow = &x[xoff..xoff + (l1 - l0)];
                            let mut acc = T::zero();
                            for (&gv, &xv) in grow.iter().zip(xrow) {
                                acc = acc + gv * xv;
                            }
                            dw[w_base + k] = dw[w_base + k] + acc;
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let wv = w[w_base + k];
                            let xrow = &mut dx[xoff..xoff + (l1 - l0)];
                            for (o, &gv) in xrow.iter_mut().zip(grow) {
                                *o = *o + wv * gv;
                            }
                        }
                    } else {
                        for l in 0..d.len_out {
                            let pos = l * d.stride + k;
                            if pos < d.padding || pos - d.padding >= d.len_in {
                                continue;
                            }
                            let xi = x_base + pos - d.padding;
                            let gv = dy[out_base + l];
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[w_base + k] = dw[w_base + k] + gv * x[xi];
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xi] = dx[xi] + gv * w[w_base + k];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// AdamW hyperparameters. Defaults match the training setup used
/// throughout the pipeline: lr 2e-3, betas (0.9, 0.999), weight decay
/// 0.01, epsilon 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers and step counter.
#[derive(Debug, Clone)]
pub struct AdamWState<T: Real> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn new(len: usize) -> Self {
        AdamWState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// AdamW with decoupled weight decay over an ordered parameter list.
/// State slot `i` always pairs with parameter `i`; [`AdamW::step`]
/// updates every parameter, [`AdamW::step_subset`] only the listed
/// ones (used by the architecture search, which touches only the
/// sampled path each iteration).
#[derive(Debug, Clone)]
pub struct AdamW<T: Real> {
    pub cfg: AdamWConfig,
    states: Vec<AdamWState<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, param_lens: &[usize]) -> Self {
        AdamW {
            cfg,
            states: param_lens.iter().map(|&n| AdamWState::new(n)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        let all: Vec<usize> = (0..params.len()).collect();
        self.step_subset(params, &all)
    }

    /// Apply one update to the parameters at `active` indices,
    /// consuming their gradients. Errors if an active parameter has no
    /// gradient.
    pub fn step_subset(&mut self, params: &mut [&mut Tensor<T>], active: &[usize]) -> Result<()> {
        if params.len() != self.states.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} params, got {}",
                self.states.len(),
                params.len()
            )));
        }
        let c = self.cfg;
        for &i in active {
            let p = &mut params[i];
            let grad = p.take_grad().ok_or_else(|| {
                Error::Autodiff(format!("missing gradient for parameter {i}"))
            })?;
            let st = &mut self.states[i];
            if st.m.len() != p.numel() {
                return Err(Error::Shape(format!(
                    "optimizer state {i} has {} entries, parameter has {}",
                    st.m.len(),
                    p.numel()
                )));
            }
            st.step += 1;
            let t = st.step as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
            let one_m_b1 = T::from_f64(1.0 - c.beta1);
            let one_m_b2 = T::from_f64(1.0 - c.beta2);
            let lr = T::from_f64(c.lr);
            let eps = T::from_f64(c.eps);
            let decay = T::from_f64(1.0 - c.lr * c.weight_decay);
            let ibc1 = T::from_f64(1.0 / bc1);
            let ibc2 = T::from_f64(1.0 / bc2);
            for ((w, g), (m, v)) in p
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(st.m.iter_mut().zip(st.v.iter_mut()))
            {
                // decoupled decay acts on the parameter directly
                *w = *w * decay;
                *m = b1 * *m + one_m_b1 * *g;
                *v = b2 * *v + one_m_b2 * *g * *g;
                let mhat = *m * ibc1;
                let vhat = *v * ibc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_backward_is_ones() {
        let x = t64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let loss = tape.sum(xv);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xv), &[1.0; 6]);
    }

    #[test]
    fn relu_forward_backward() {
        let x = t64(&[3], &[-1., 0., 2.]).requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = tape.relu(xv);
        assert_eq!(tape.data(y), &[0., 0., 2.]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xv), &[0., 0., 1.]);
    }

    #[test]
    fn double_backward_is_an_error() {
        let x = t64(&[2], &[1., 2.]).requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let loss = tape.sum(xv);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Autodiff(_))));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let x = t64(&[2], &[1., 2.]).requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        assert!(matches!(tape.backward(xv), Err(Error::Autodiff(_))));
    }

    #[test]
    fn detached_loss_is_an_error() {
        let x = t64(&[2], &[1., 2.]); // requires_grad = false
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let loss = tape.sum(xv);
        assert!(matches!(tape.backward(loss), Err(Error::Autodiff(_))));
    }

    #[test]
    fn conv1d_identity_kernel() {
        let x = t64(&[1, 1, 3], &[1., 2., 3.]);
        let w = t64(&[1, 1, 1], &[1.]);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.leaf(&x), tape.leaf(&w));
        let y = tape.conv1d(xv, wv, None, 1, 0, 1).unwrap();
        assert_eq!(tape.data(y), &[1., 2., 3.]);
    }

    #[test]
    fn conv1d_sum_kernel() {
        let x = t64(&[1, 1, 3], &[1., 2., 3.]);
        let w = t64(&[1, 1, 3], &[1., 1., 1.]);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.leaf(&x), tape.leaf(&w));
        let y = tape.conv1d(xv, wv, None, 1, 0, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.data(y), &[6.]);
    }

    /// Direct triple-loop reference, kept deliberately naive.
    fn conv1d_naive(
        x: &[f64],
        xs: (usize, usize, usize),
        w: &[f64],
        ws: (usize, usize, usize),
        b: Option<&[f64]>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Vec<f64> {
        let (n_b, c_in, l_in) = xs;
        let (c_out, c_in_g, k) = ws;
        let l_out = (l_in + 2 * padding - k) / stride + 1;
        let c_out_g = c_out / groups;
        let mut out = vec![0.0; n_b * c_out * l_out];
        for n in 0..n_b {
            for co in 0..c_out {
                for l in 0..l_out {
                    let mut acc = b.map(|bb| bb[co]).unwrap_or(0.0);
                    let g = co / c_out_g;
                    for cig in 0..c_in_g {
                        let ci = g * c_in_g + cig;
                        for kk in 0..k {
                            let pos = l * stride + kk;
                            if pos < padding || pos - padding >= l_in {
                                continue;
                            }
                            acc += x[(n * c_in + ci) * l_in + pos - padding]
                                * w[(co * c_in_g + cig) * k + kk];
                        }
                    }
                    out[(n * c_out + co) * l_out + l] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv1d_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(groups, stride, padding) in &[(1usize, 1usize, 0usize), (2, 1, 1), (2, 2, 1), (4, 1, 2)] {
            let (n, c_in, l, c_out, k) = (2, 4, 16, 8, 3);
            let x = Tensor::<f64>::uniform(&[n, c_in, l], 1.0, &mut rng);
            let w = Tensor::<f64>::uniform(&[c_out, c_in / groups, k], 1.0, &mut rng);
            let b = Tensor::<f64>::uniform(&[c_out], 1.0, &mut rng);
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
            let y = tape.conv1d(xv, wv, Some(bv), stride, padding, groups).unwrap();
            let want = conv1d_naive(
                x.data(),
                (n, c_in, l),
                w.data(),
                (c_out, c_in / groups, k),
                Some(b.data()),
                stride,
                padding,
                groups,
            );
            for (got, want) in tape.data(y).iter().zip(&want) {
                assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn conv1d_rejects_bad_shapes() {
        let x = t64(&[1, 3, 4], &[0.; 12]);
        let w = t64(&[2, 2, 3], &[0.; 12]);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.leaf(&x), tape.leaf(&w));
        // groups=2 does not divide c_in=3
        assert!(tape.conv1d(xv, wv, None, 1, 0, 2).is_err());
        // kernel longer than padded input
        let w2 = t64(&[2, 3, 7], &[0.; 42]);
        let wv2 = tape.leaf(&w2);
        assert!(tape.conv1d(xv, wv2, None, 1, 0, 1).is_err());
    }

    #[test]
    fn conv1d_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::uniform(&[1, 2, 10], 1.0, &mut rng);
        let y = Tensor::<f64>::uniform(&[1, 2, 10], 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(&[3, 2, 3], 1.0, &mut rng);
        let (a, b) = (0.7, -1.3);
        let combo = Tensor::from_vec(
            &[1, 2, 10],
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&xv, &yv)| a * xv + b * yv)
                .collect(),
        )
        .unwrap();
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::new();
            let (xv, wv) = (tape.leaf(input), tape.leaf(&w));
            let out = tape.conv1d(xv, wv, None, 1, 1, 1).unwrap();
            tape.data(out).to_vec()
        };
        let lhs = run(&combo);
        let rx = run(&x);
        let ry = run(&y);
        for ((l, xv), yv) in lhs.iter().zip(&rx).zip(&ry) {
            assert!((l - (a * xv + b * yv)).abs() <= 1e-5);
        }
    }

    #[test]
    fn batch_norm_normalizes_in_train_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(&[4, 3, 8], 2.0, &mut rng);
        let gamma = t64(&[3], &[1., 1., 1.]);
        let beta = t64(&[3], &[0., 0., 0.]);
        let mut state = BnState::new(3);
        let mut tape = Tape::new();
        let (xv, gv, bv) = (tape.leaf(&x), tape.leaf(&gamma), tape.leaf(&beta));
        let y = tape
            .batch_norm1d(xv, gv, bv, &mut state, Mode::Train, 0.1, 1e-5)
            .unwrap();
        let data = tape.data(y);
        for c in 0..3 {
            let mut vals = Vec::new();
            for n in 0..4 {
                for l in 0..8 {
                    vals.push(data[(n * 3 + c) * 8 + l]);
                }
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() <= 1e-5, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-3, "channel {c} var {var}");
        }
        assert!(state.initialized);
    }

    #[test]
    fn batch_norm_constant_channel_gives_beta() {
        let x = t64(&[2, 1, 4], &[5.0; 8]);
        let gamma = t64(&[1], &[1.]);
        let beta = t64(&[1], &[0.25]);
        let mut state = BnState::new(1);
        let mut tape = Tape::new();
        let (xv, gv, bv) = (tape.leaf(&x), tape.leaf(&gamma), tape.leaf(&beta));
        let y = tape
            .batch_norm1d(xv, gv, bv, &mut state, Mode::Train, 0.1, 1e-5)
            .unwrap();
        for &v in tape.data(y) {
            assert!((v - 0.25).abs() <= 1e-9);
        }
    }

    #[test]
    fn batch_norm_eval_before_stats_is_an_error() {
        let x = t64(&[1, 1, 2], &[1., 2.]);
        let gamma = t64(&[1], &[1.]);
        let beta = t64(&[1], &[0.]);
        let mut state = BnState::new(1);
        let mut tape = Tape::new();
        let (xv, gv, bv) = (tape.leaf(&x), tape.leaf(&gamma), tape.leaf(&beta));
        assert!(tape
            .batch_norm1d(xv, gv, bv, &mut state, Mode::Eval, 0.1, 1e-5)
            .is_err());
    }

    #[test]
    fn log_softmax_symmetry_and_normalization() {
        let x = t64(&[2], &[0., 0.]);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = tape.log_softmax(xv, 0).unwrap();
        let ln2 = 2f64.ln();
        assert!((tape.data(y)[0] + ln2).abs() <= 1e-12);
        assert!((tape.data(y)[1] + ln2).abs() <= 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::uniform(&[4, 5, 3], 3.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = tape.log_softmax(xv, 1).unwrap();
        let d = tape.data(y);
        for o in 0..4 {
            for i in 0..3 {
                let s: f64 = (0..5).map(|k| d[(o * 5 + k) * 3 + i].exp()).sum();
                assert!((s - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn log_softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::uniform(&[6], 2.0, &mut rng);
        let shifted =
            Tensor::from_vec(&[6], x.data().iter().map(|&v| v + 17.5).collect()).unwrap();
        let run = |t: &Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.leaf(t);
            let y = tape.log_softmax(v, 0).unwrap();
            tape.data(y).to_vec()
        };
        for (a, b) in run(&x).iter().zip(run(&shifted)) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Every differentiable op, checked against central differences
        // in f64 over 10 seeds.
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::uniform(&[2, 4, 9], 1.0, &mut rng).requires_grad(true);
            let w = Tensor::<f64>::uniform(&[6, 2, 3], 1.0, &mut rng).requires_grad(true);
            let b = Tensor::<f64>::uniform(&[6], 1.0, &mut rng).requires_grad(true);
            let gamma = Tensor::<f64>::uniform(&[6], 1.0, &mut rng).requires_grad(true);
            let beta = Tensor::<f64>::uniform(&[6], 1.0, &mut rng).requires_grad(true);

            // conv -> batch norm -> relu -> clamp -> log_softmax -> mean
            let forward = |tensors: &[&Tensor<f64>]| {
                let mut state = BnState::new(6);
                let mut tape = Tape::new();
                let xv = tape.leaf(tensors[0]);
                let wv = tape.leaf(tensors[1]);
                let bv = tape.leaf(tensors[2]);
                let gv = tape.leaf(tensors[3]);
                let btv = tape.leaf(tensors[4]);
                let c = tape.conv1d(xv, wv, Some(bv), 1, 1, 2).unwrap();
                let bn = tape
                    .batch_norm1d(c, gv, btv, &mut state, Mode::Train, 0.1, 1e-5)
                    .unwrap();
                let r = tape.relu(bn);
                let cl = tape.clamp(r, 0.0, 0.8).unwrap();
                let ls = tape.log_softmax(cl, 1).unwrap();
                let loss = tape.mean(ls);
                (tape, vec![xv, wv, bv, gv, btv], loss)
            };
            let tensors = [&x, &w, &b, &gamma, &beta];
            let (mut tape, leaves, loss) = forward(&tensors);
            tape.backward(loss).unwrap();
            let grads: Vec<Vec<f64>> =
                leaves.iter().map(|&v| tape.grad(v).to_vec()).collect();

            for (ti, _) in tensors.iter().enumerate() {
                let f = |perturbed: &Tensor<f64>| {
                    let mut copies: Vec<Tensor<f64>> =
                        tensors.iter().map(|t| (*t).clone()).collect();
                    copies[ti] = perturbed.clone();
                    let refs: Vec<&Tensor<f64>> = copies.iter().collect();
                    let (tape, _, loss) = forward(&refs);
                    tape.item(loss)
                };
                let rel = fd::max_rel_error(tensors[ti], &grads[ti], f);
                assert!(
                    rel <= 1e-4,
                    "seed {seed} tensor {ti}: rel error {rel}"
                );
            }
        }
    }

    #[test]
    fn mixture_ops_match_finite_differences() {
        // exp / index / scale_by combination, as used by the
        // architecture-mixture forward
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
            let alpha = Tensor::<f64>::uniform(&[3], 1.0, &mut rng).requires_grad(true);
            let x = Tensor::<f64>::uniform(&[2, 4], 1.0, &mut rng).requires_grad(true);

            let forward = |a: &Tensor<f64>, xx: &Tensor<f64>| {
                let mut tape = Tape::new();
                let av = tape.leaf(a);
                let xv = tape.leaf(xx);
                let ls = tape.log_softmax(av, 0).unwrap();
                let w = tape.exp(ls).unwrap();
                let w0 = tape.index(w, 0).unwrap();
                let w2 = tape.index(w, 2).unwrap();
                let coeff = tape.add(w0, w2).unwrap();
                let scaled = tape.scale_by(xv, coeff).unwrap();
                let loss = tape.mean(scaled);
                (tape, av, xv, loss)
            };
            let (mut tape, av, xv, loss) = forward(&alpha, &x);
            tape.backward(loss).unwrap();
            let ga = tape.grad(av).to_vec();
            let gx = tape.grad(xv).to_vec();

            let fa = |t: &Tensor<f64>| {
                let (tape, _, _, loss) = forward(t, &x);
                tape.item(loss)
            };
            let fx = |t: &Tensor<f64>| {
                let (tape, _, _, loss) = forward(&alpha, t);
                tape.item(loss)
            };
            assert!(fd::max_rel_error(&alpha, &ga, fa) <= 1e-4);
            assert!(fd::max_rel_error(&x, &gx, fx) <= 1e-4);
        }
    }

    #[test]
    fn adamw_zero_grad_no_decay_leaves_params() {
        let mut p = t64(&[3], &[1., -2., 3.]).requires_grad(true);
        p.set_grad(vec![0.; 3]).unwrap();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &[3]);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[1., -2., 3.]);
    }

    #[test]
    fn adamw_single_step_closed_form() {
        let mut p = t64(&[4], &[0.5; 4]).requires_grad(true);
        p.set_grad(vec![1.0; 4]).unwrap();
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            eps: 1e-8,
        };
        let mut opt = AdamW::new(cfg, &[4]);
        opt.step(&mut [&mut p]).unwrap();
        // bias-corrected m=1, v=1 -> delta = -lr / (1 + eps)
        let want = 0.5 - 0.1 / (1.0 + 1e-8);
        for &v in p.data() {
            assert!((v - want).abs() <= 1e-12, "{v} vs {want}");
        }
    }

    #[test]
    fn adamw_decoupled_decay_only() {
        let mut p = t64(&[2], &[2.0, -4.0]).requires_grad(true);
        p.set_grad(vec![0.0; 2]).unwrap();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &[2]);
        opt.step(&mut [&mut p]).unwrap();
        let f = 1.0 - 0.1 * 0.01;
        assert!((p.data()[0] - 2.0 * f).abs() <= 1e-12);
        assert!((p.data()[1] + 4.0 * f).abs() <= 1e-12);
    }

    #[test]
    fn adamw_missing_grad_is_an_error() {
        let mut p = t64(&[2], &[1., 1.]).requires_grad(true);
        let mut opt = AdamW::new(AdamWConfig::default(), &[2]);
        assert!(opt.step(&mut [&mut p]).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let x = Tensor::<f32>::uniform(&[2, 3, 12], 1.0, &mut rng).requires_grad(true);
            let w = Tensor::<f32>::uniform(&[3, 1, 3], 1.0, &mut rng).requires_grad(true);
            let mut tape = Tape::new();
            let (xv, wv) = (tape.leaf(&x), tape.leaf(&w));
            let y = tape.conv1d(xv, wv, None, 1, 1, 3).unwrap();
            let ls = tape.log_softmax(y, 1).unwrap();
            let loss = tape.mean(ls);
            tape.backward(loss).unwrap();
            (
                tape.data(y).to_vec(),
                tape.grad(xv).to_vec(),
                tape.grad(wv).to_vec(),
            )
        };
        let (y1, gx1, gw1) = run();
        let (y2, gx2, gw2) = run();
        assert_eq!(y1, y2);
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }
}

//! Execution backends over the closed kernel set.
//!
//! Model code is written once against [`Backend`]. [`Eager`] evaluates and
//! forgets; [`Graph`] records every op so that [`Graph::backward`] can run
//! reverse-mode differentiation. Both share one forward kernel per op, so a
//! model evaluated on either backend produces bit-identical values.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, DepthwiseKernel, Scalar, Tensor};

/// Closed set of recordable operations. Non-tensor arguments live in the variant.
#[derive(Clone, Debug)]
pub enum Op<T> {
    MatMul,
    /// `a * b^T`
    MatMulNt,
    Add,
    Mul,
    Scale(T),
    AddBias,
    SoftmaxRows,
    Gelu,
    DepthwiseConv,
    AvgPool,
    Reshape(Vec<usize>),
    ConcatRows,
    ConcatLast,
    /// `x[n, d] * g[n, col]`
    Gate(usize),
    /// Each row of a `[F, D]` input repeated `n` times: `[F * n, D]`.
    RepeatRows(usize),
    SpaceToDepth(usize),
    Upsample(usize),
    SegLoss(Arc<SegLossTarget<T>>),
    Sum,
}

/// Ground truth for the fused segmentation loss.
#[derive(Debug)]
pub struct SegLossTarget<T> {
    /// Binary `[.., C]` target with the same shape as the logits.
    pub target: Tensor<T>,
    /// Channels that take part in the loss; others are ignored.
    pub channels: Vec<usize>,
    pub eps: f64,
}

/// Instrumentation shared by both backends.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub ops: u64,
    pub softmax_calls: u64,
    pub flops: u64,
}

impl OpCounter {
    fn record<T: Scalar>(&mut self, op: &Op<T>, inputs: &[&Tensor<T>], out: &Tensor<T>) {
        self.ops += 1;
        let n = out.len() as u64;
        self.flops += match op {
            Op::MatMul => 2 * inputs[0].len() as u64 * inputs[1].shape()[1] as u64,
            Op::MatMulNt => 2 * inputs[0].len() as u64 * inputs[1].shape()[0] as u64,
            Op::SoftmaxRows => {
                self.softmax_calls += 1;
                5 * n
            }
            Op::DepthwiseConv => 2 * n * inputs[1].shape()[0].pow(2) as u64,
            Op::Upsample(_) => 8 * n,
            Op::SegLoss(_) => 10 * inputs[0].len() as u64,
            Op::Gelu => 8 * n,
            Op::Reshape(_) | Op::ConcatRows | Op::ConcatLast | Op::RepeatRows(_) | Op::SpaceToDepth(_) => 0,
            _ => inputs.iter().map(|t| t.len() as u64).max().unwrap_or(0),
        };
    }
}

fn as_kernel<T: Scalar>(k: &Tensor<T>) -> Result<DepthwiseKernel<T>> {
    DepthwiseKernel::new(k.clone())
}

fn expect_inputs(op: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Usage(format!("{op} takes {want} inputs, got {got}")));
    }
    Ok(())
}

/// The single forward kernel per op used by every backend.
pub fn forward<T: Scalar>(op: &Op<T>, x: &[&Tensor<T>]) -> Result<Tensor<T>> {
    match op {
        Op::MatMul => {
            expect_inputs("matmul", x.len(), 2)?;
            tensor::matmul(x[0], x[1])
        }
        Op::MatMulNt => {
            expect_inputs("matmul_nt", x.len(), 2)?;
            tensor::matmul_nt(x[0], x[1])
        }
        Op::Add => {
            expect_inputs("add", x.len(), 2)?;
            x[0].zip_map(x[1], "add", |a, b| a + b)
        }
        Op::Mul => {
            expect_inputs("mul", x.len(), 2)?;
            x[0].zip_map(x[1], "mul", |a, b| a * b)
        }
        Op::Scale(s) => {
            expect_inputs("scale", x.len(), 1)?;
            Ok(x[0].map(|v| v * *s))
        }
        Op::AddBias => {
            expect_inputs("add_bias", x.len(), 2)?;
            tensor::add_row_bias(x[0], x[1])
        }
        Op::SoftmaxRows => {
            expect_inputs("softmax_rows", x.len(), 1)?;
            tensor::softmax_rows(x[0])
        }
        Op::Gelu => {
            expect_inputs("gelu", x.len(), 1)?;
            Ok(tensor::gelu(x[0]))
        }
        Op::DepthwiseConv => {
            expect_inputs("depthwise_conv", x.len(), 2)?;
            tensor::depthwise_conv(x[0], &as_kernel(x[1])?)
        }
        Op::AvgPool => {
            expect_inputs("avg_pool", x.len(), 1)?;
            tensor::global_avg_pool(x[0])
        }
        Op::Reshape(shape) => {
            expect_inputs("reshape", x.len(), 1)?;
            x[0].reshape(shape)
        }
        Op::ConcatRows => tensor::concat_rows(x),
        Op::ConcatLast => tensor::concat_last(x),
        Op::Gate(col) => {
            expect_inputs("gate", x.len(), 2)?;
            let (rows, d) = x[0].rows_cols();
            let (grows, k) = x[1].rows_cols();
            if rows != grows || *col >= k {
                return Err(Error::dim("gate", x[0].shape(), x[1].shape()));
            }
            let g = x[1].data();
            let mut out = x[0].clone();
            for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
                let s = g[r * k + col];
                for v in row.iter_mut() {
                    *v = *v * s;
                }
            }
            Ok(out)
        }
        Op::RepeatRows(n) => {
            expect_inputs("repeat_rows", x.len(), 1)?;
            let (rows, d) = x[0].rows_cols();
            let mut data = Vec::with_capacity(rows * n * d);
            for r in 0..rows {
                for _ in 0..*n {
                    data.extend_from_slice(x[0].row(r));
                }
            }
            Tensor::from_vec(&[rows * n, d], data)
        }
        Op::SpaceToDepth(k) => {
            expect_inputs("space_to_depth", x.len(), 1)?;
            tensor::space_to_depth(x[0], *k)
        }
        Op::Upsample(f) => {
            expect_inputs("upsample", x.len(), 1)?;
            tensor::upsample_bilinear(x[0], *f)
        }
        Op::SegLoss(t) => {
            expect_inputs("seg_loss", x.len(), 1)?;
            seg_loss_forward(x[0], t)
        }
        Op::Sum => {
            expect_inputs("sum", x.len(), 1)?;
            Ok(Tensor::scalar(x[0].sum()))
        }
    }
}

/// Per-channel sigmoid probabilities plus the reductions the loss needs.
struct ChannelStats {
    inter: f64,
    union: f64,
    bce: f64,
}

fn channel_stats<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>, c: usize) -> ChannelStats {
    let (_, ch) = logits.rows_cols();
    let (ld, td) = (logits.data(), target.data());
    let mut s = ChannelStats {
        inter: 0.0,
        union: 0.0,
        bce: 0.0,
    };
    for i in (c..ld.len()).step_by(ch) {
        let x = ld[i].as_f64();
        let g = td[i].as_f64();
        let p = tensor::sigmoid_scalar(x);
        s.inter += p * g;
        s.union += p + g - p * g;
        // softplus(x) - g x, stable for large |x|
        s.bce += x.max(0.0) + (-x.abs()).exp().ln_1p() - g * x;
    }
    s
}

fn seg_loss_forward<T: Scalar>(logits: &Tensor<T>, t: &SegLossTarget<T>) -> Result<Tensor<T>> {
    if logits.shape() != t.target.shape() {
        return Err(Error::dim("seg_loss", logits.shape(), t.target.shape()));
    }
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric {
            op: "seg_loss",
            reason: "NaN logits".into(),
        });
    }
    let (pixels, ch) = logits.rows_cols();
    if t.channels.is_empty() || t.channels.iter().any(|&c| c >= ch) {
        return Err(Error::Usage(format!(
            "seg_loss channels {:?} invalid for {ch} logit channels",
            t.channels
        )));
    }
    let mut total = 0.0;
    for &c in &t.channels {
        let s = channel_stats(logits, &t.target, c);
        let jaccard = 1.0 - (s.inter + t.eps) / (s.union + t.eps);
        total += 0.5 * s.bce / pixels as f64 + 0.5 * jaccard;
    }
    Ok(Tensor::scalar(T::lit(total / t.channels.len() as f64)))
}

fn seg_loss_backward<T: Scalar>(logits: &Tensor<T>, t: &SegLossTarget<T>, upstream: T) -> Tensor<T> {
    let (pixels, ch) = logits.rows_cols();
    let (ld, td) = (logits.data(), t.target.data());
    let mut grad = vec![T::zero(); ld.len()];
    let w = upstream.as_f64() / t.channels.len() as f64;
    for &c in &t.channels {
        let s = channel_stats(logits, &t.target, c);
        let inter = s.inter + t.eps;
        let union = s.union + t.eps;
        for i in (c..ld.len()).step_by(ch) {
            let x = ld[i].as_f64();
            let g = td[i].as_f64();
            let p = tensor::sigmoid_scalar(x);
            // d/dp of 1 - I/U with dI/dp = g, dU/dp = 1 - g
            let dj_dp = -(g * union - inter * (1.0 - g)) / (union * union);
            let d = 0.5 * (p - g) / pixels as f64 + 0.5 * dj_dp * p * (1.0 - p);
            grad[i] = T::lit(w * d);
        }
    }
    Tensor::from_vec(logits.shape(), grad).expect("same shape as logits")
}

/// Gradients of one op with respect to each of its inputs.
fn backward_op<T: Scalar>(
    op: &Op<T>,
    x: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let grads = match op {
        Op::MatMul => vec![
            want(0).then(|| tensor::matmul_nt(g, x[1])).transpose()?,
            want(1).then(|| tensor::matmul_tn(x[0], g)).transpose()?,
        ],
        Op::MatMulNt => vec![
            want(0).then(|| tensor::matmul(g, x[1])).transpose()?,
            want(1).then(|| tensor::matmul_tn(g, x[0])).transpose()?,
        ],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Mul => vec![
            want(0).then(|| g.zip_map(x[1], "mul", |a, b| a * b)).transpose()?,
            want(1).then(|| g.zip_map(x[0], "mul", |a, b| a * b)).transpose()?,
        ],
        Op::Scale(s) => vec![Some(g.map(|v| v * *s))],
        Op::AddBias => vec![Some(g.clone()), want(1).then(|| tensor::sum_rows(g))],
        Op::SoftmaxRows => {
            let (m, n) = out.rows_cols();
            let (y, gd) = (out.data(), g.data());
            let mut gx = vec![T::zero(); y.len()];
            for r in 0..m {
                let row = r * n..(r + 1) * n;
                let dot: T = y[row.clone()].iter().zip(&gd[row.clone()]).map(|(&a, &b)| a * b).sum();
                for i in row {
                    gx[i] = y[i] * (gd[i] - dot);
                }
            }
            vec![Some(Tensor::from_vec(out.shape(), gx)?)]
        }
        Op::Gelu => vec![Some(g.zip_map(x[0], "gelu", |gv, xv| gv * tensor::gelu_derivative(xv))?)],
        Op::DepthwiseConv => {
            let (gx, gk) = tensor::depthwise_conv_backward(x[0], &as_kernel(x[1])?, g)?;
            vec![Some(gx), Some(gk)]
        }
        Op::AvgPool => {
            let (f, h, w, d) = tensor::grid_dims(x[0].shape(), "avg_pool")?;
            let scale = T::one() / T::lit((h * w) as f64);
            let gd = g.data();
            let gx = Tensor::from_fn(x[0].shape(), |idx| {
                let fr = idx / (h * w * d);
                gd[fr * d + idx % d] * scale
            });
            debug_assert_eq!(gd.len(), f * d);
            vec![Some(gx)]
        }
        Op::Reshape(_) => vec![Some(g.reshape(x[0].shape())?)],
        Op::ConcatRows => {
            let mut offset = 0;
            let mut parts = Vec::with_capacity(x.len());
            for xi in x {
                let n = xi.len();
                parts.push(Some(Tensor::from_vec(xi.shape(), g.data()[offset..offset + n].to_vec())?));
                offset += n;
            }
            parts
        }
        Op::ConcatLast => {
            let widths: Vec<usize> = x.iter().map(|t| t.rows_cols().1).collect();
            tensor::split_last(g, &widths)?
                .into_iter()
                .zip(x)
                .map(|(p, xi)| p.into_reshaped(xi.shape()).map(Some))
                .collect::<Result<_>>()?
        }
        Op::Gate(col) => {
            let (rows, d) = x[0].rows_cols();
            let k = x[1].rows_cols().1;
            let (xd, gd, gate) = (x[0].data(), g.data(), x[1].data());
            let gx = Tensor::from_fn(x[0].shape(), |i| gd[i] * gate[(i / d) * k + col]);
            let gg = want(1).then(|| {
                let mut gg = Tensor::zeros(x[1].shape());
                for r in 0..rows {
                    let s: T = (0..d).map(|c| gd[r * d + c] * xd[r * d + c]).sum();
                    gg.data_mut()[r * k + col] = s;
                }
                gg
            });
            vec![Some(gx), gg]
        }
        Op::RepeatRows(n) => {
            let (rows, d) = x[0].rows_cols();
            let mut gx = Tensor::zeros(x[0].shape());
            let gd = g.data();
            for r in 0..rows {
                for rep in 0..*n {
                    let src = (r * n + rep) * d;
                    for c in 0..d {
                        gx.data_mut()[r * d + c] = gx.data()[r * d + c] + gd[src + c];
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::SpaceToDepth(k) => vec![Some(tensor::depth_to_space(g, *k)?)],
        Op::Upsample(f) => {
            let [h, w, _] = *x[0].shape() else {
                return Err(Error::Usage("upsample input must be rank 3".into()));
            };
            vec![Some(tensor::upsample_bilinear_adjoint(g, h, w, *f)?)]
        }
        Op::SegLoss(t) => vec![Some(seg_loss_backward(x[0], t, g.data()[0]))],
        Op::Sum => vec![Some(Tensor::full(x[0].shape(), g.data()[0]))],
    };
    Ok(grads)
}

/// Uniform interface over the kernel set; model code is generic over it.
pub trait Backend {
    type Scalar: Scalar;
    type Value: Clone;

    /// A value that never receives a gradient.
    fn constant(&mut self, t: Tensor<Self::Scalar>) -> Self::Value;

    /// A trainable leaf. Registration order defines the gradient order.
    fn param(&mut self, t: &Tensor<Self::Scalar>) -> Self::Value;

    fn get<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<Self::Scalar>;

    fn apply(&mut self, op: Op<Self::Scalar>, inputs: &[&Self::Value]) -> Result<Self::Value>;

    fn counters(&self) -> &OpCounter;

    fn reset_counters(&mut self);

    fn shape(&self, v: &Self::Value) -> Vec<usize> {
        self.get(v).shape().to_vec()
    }

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::MatMul, &[a, b])
    }

    fn matmul_nt(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::MatMulNt, &[a, b])
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Add, &[a, b])
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Mul, &[a, b])
    }

    fn scale(&mut self, a: &Self::Value, s: Self::Scalar) -> Result<Self::Value> {
        self.apply(Op::Scale(s), &[a])
    }

    fn add_bias(&mut self, x: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::AddBias, &[x, b])
    }

    fn linear(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: Option<&Self::Value>,
    ) -> Result<Self::Value> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(&y, b),
            None => Ok(y),
        }
    }

    fn softmax_rows(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::SoftmaxRows, &[x])
    }

    fn gelu(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Gelu, &[x])
    }

    fn depthwise_conv(&mut self, x: &Self::Value, k: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::DepthwiseConv, &[x, k])
    }

    fn avg_pool(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::AvgPool, &[x])
    }

    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value> {
        if self.get(x).shape() == shape {
            return Ok(x.clone());
        }
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }

    fn concat_rows(&mut self, xs: &[&Self::Value]) -> Result<Self::Value> {
        if let [only] = xs {
            return Ok((*only).clone());
        }
        self.apply(Op::ConcatRows, xs)
    }

    fn concat_last(&mut self, xs: &[&Self::Value]) -> Result<Self::Value> {
        self.apply(Op::ConcatLast, xs)
    }

    fn gate(&mut self, x: &Self::Value, g: &Self::Value, col: usize) -> Result<Self::Value> {
        self.apply(Op::Gate(col), &[x, g])
    }

    fn repeat_rows(&mut self, x: &Self::Value, n: usize) -> Result<Self::Value> {
        self.apply(Op::RepeatRows(n), &[x])
    }

    fn space_to_depth(&mut self, x: &Self::Value, k: usize) -> Result<Self::Value> {
        self.apply(Op::SpaceToDepth(k), &[x])
    }

    fn upsample(&mut self, x: &Self::Value, factor: usize) -> Result<Self::Value> {
        self.apply(Op::Upsample(factor), &[x])
    }

    fn seg_loss(
        &mut self,
        logits: &Self::Value,
        target: Arc<SegLossTarget<Self::Scalar>>,
    ) -> Result<Self::Value> {
        self.apply(Op::SegLoss(target), &[logits])
    }

    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value> {
        self.apply(Op::Sum, &[x])
    }
}

/// Evaluates immediately; nothing is retained.
#[derive(Clone, Debug, Default)]
pub struct Eager<T: Scalar = f64> {
    counter: OpCounter,
    _scalar: std::marker::PhantomData<T>,
}

impl<T: Scalar> Eager<T> {
    pub fn new() -> Self {
        Self {
            counter: OpCounter::default(),
            _scalar: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Backend for Eager<T> {
    type Scalar = T;
    type Value = Arc<Tensor<T>>;

    fn constant(&mut self, t: Tensor<T>) -> Self::Value {
        Arc::new(t)
    }

    fn param(&mut self, t: &Tensor<T>) -> Self::Value {
        Arc::new(t.clone())
    }

    fn get<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T> {
        v
    }

    fn apply(&mut self, op: Op<T>, inputs: &[&Self::Value]) -> Result<Self::Value> {
        let xs: Vec<&Tensor<T>> = inputs.iter().map(|v| v.as_ref()).collect();
        let out = forward(&op, &xs)?;
        self.counter.record(&op, &xs, &out);
        Ok(Arc::new(out))
    }

    fn counters(&self) -> &OpCounter {
        &self.counter
    }

    fn reset_counters(&mut self) {
        self.counter = OpCounter::default();
    }
}

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Option<Op<T>>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// A recording context for reverse-mode differentiation.
///
/// Not meant to be shared across threads; build one per training step.
pub struct Graph<T: Scalar = f64> {
    id: u32,
    nodes: Vec<Node<T>>,
    params: Vec<usize>,
    counter: OpCounter,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            counter: OpCounter::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> Vec<Var> {
        self.params
            .iter()
            .map(|&index| Var {
                graph: self.id,
                index,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Option<Op<T>>, inputs: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: &Var) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "value {v:?} was not recorded on graph {}",
                self.id
            )));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        self.check(&output)?;
        let out = &self.nodes[output.index];
        if out.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.index] = Some(Tensor::ones(out.value.shape()));
        for i in (0..=output.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
                let input_grads = backward_op(op, &xs, &node.value, &g, &needs)?;
                for ((&j, gi), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                    let (Some(gi), true) = (gi, need) else { continue };
                    match &mut grads[j] {
                        Some(acc) => acc.add_assign(&gi),
                        slot => *slot = Some(gi),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            output: output.index,
            grads,
            params: self.params.clone(),
        })
    }
}

impl<T: Scalar> Backend for Graph<T> {
    type Scalar = T;
    type Value = Var;

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, None, Vec::new(), false)
    }

    fn param(&mut self, t: &Tensor<T>) -> Var {
        let v = self.push(t.clone(), None, Vec::new(), true);
        self.params.push(v.index);
        v
    }

    fn get<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        assert_eq!(v.graph, self.id, "value from a different graph");
        &self.nodes[v.index].value
    }

    fn apply(&mut self, op: Op<T>, inputs: &[&Var]) -> Result<Var> {
        for v in inputs {
            self.check(v)?;
        }
        let idx: Vec<usize> = inputs.iter().map(|v| v.index).collect();
        let xs: Vec<&Tensor<T>> = idx.iter().map(|&j| &self.nodes[j].value).collect();
        let out = forward(&op, &xs)?;
        self.counter.record(&op, &xs, &out);
        let requires_grad = idx.iter().any(|&j| self.nodes[j].requires_grad);
        Ok(self.push(out, Some(op), idx, requires_grad))
    }

    fn counters(&self) -> &OpCounter {
        &self.counter
    }

    fn reset_counters(&mut self) {
        self.counter = OpCounter::default();
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    graph: u32,
    output: usize,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the output with respect to `v`; zeros if `v` does not influence it.
    pub fn wrt(&self, v: &Var) -> Result<Tensor<T>> {
        if v.graph != self.graph {
            return Err(Error::Usage(format!(
                "gradient requested for {v:?}, which was not recorded on graph {}",
                self.graph
            )));
        }
        if v.index > self.output || v.index >= self.shapes.len() {
            return Err(Error::Usage(format!(
                "gradient requested for {v:?}, recorded after the differentiated output"
            )));
        }
        Ok(self.grads[v.index]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.index])))
    }

    /// Gradients of every registered parameter, in registration order.
    pub fn params(&self) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .map(|&i| {
                self.grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&self.shapes[i]))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = g.sum(&x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn scalar_matmul_chain_rule() {
        let mut g = Graph::<f64>::new();
        let a = g.param(&Tensor::from_vec(&[1, 1], vec![3.0]).unwrap());
        let b = g.param(&Tensor::from_vec(&[1, 1], vec![-7.0]).unwrap());
        let y = g.matmul(&a, &b).unwrap();
        let s = g.sum(&y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&a).unwrap().data(), &[-7.0]);
        assert_eq!(grads.wrt(&b).unwrap().data(), &[3.0]);
    }

    #[test]
    fn foreign_value_is_usage_error() {
        let mut g1 = Graph::<f64>::new();
        let mut g2 = Graph::<f64>::new();
        let x = g1.param(&Tensor::ones(&[1]));
        let y = g2.param(&Tensor::ones(&[1]));
        let s = g1.sum(&x).unwrap();
        let grads = g1.backward(s).unwrap();
        assert!(matches!(grads.wrt(&y), Err(Error::Usage(_))));
        assert!(matches!(g1.sum(&y), Err(Error::Usage(_))));
        let late = g1.constant(Tensor::ones(&[1]));
        assert!(matches!(grads.wrt(&late), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn eager_and_graph_agree_bitwise() {
        let a = Tensor::from_vec(&[2, 2], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let mut e = Eager::<f64>::new();
        let mut g = Graph::<f64>::new();
        let ve = {
            let x = e.constant(a.clone());
            let y = e.softmax_rows(&x).unwrap();
            let z = e.gelu(&y).unwrap();
            e.get(&z).clone()
        };
        let vg = {
            let x = g.constant(a.clone());
            let y = g.softmax_rows(&x).unwrap();
            let z = g.gelu(&y).unwrap();
            g.get(&z).clone()
        };
        assert_eq!(ve, vg);
        assert_eq!(e.counters(), g.counters());
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::ones(&[2]));
        let unused = g.param(&Tensor::ones(&[3]));
        let s = g.sum(&x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&unused).unwrap(), Tensor::zeros(&[3]));
        assert_eq!(grads.params().len(), 2);
    }
}

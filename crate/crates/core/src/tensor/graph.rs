use super::conv::{conv2d_forward, conv2d_input_grad, conv2d_weight_grad, ConvConfig};
use super::{Element, Tensor};
use crate::error::{contract, Error, Result};
use std::collections::BTreeMap;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Gradients keyed by leaf handle.
pub type GradMap<T> = BTreeMap<Var, Tensor<T>>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    /// `grad * slope(input)`; the mask is treated as locally constant.
    LeakyReluGrad { grad: Var, input: Var, alpha: f64 },
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Reshape(Var),
    SumAll(Var),
    BroadcastScalar(Var),
    SumAxis1(Var),
    BroadcastAxis1(Var),
    BroadcastChannel(Var),
    SumChannel(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, cfg: ConvConfig },
    Conv2dInputGrad { gy: Var, w: Var, cfg: ConvConfig },
    Conv2dWeightGrad { x: Var, gy: Var, cfg: ConvConfig },
    Upsample2(Var),
    AvgPool2(Var),
    Concat1(Vec<Var>),
    Slice1 { x: Var, start: usize },
    Pad1 { x: Var, start: usize },
    Gather1 { x: Var, idx: Vec<usize> },
    Scatter1 { x: Var, idx: Vec<usize> },
    LogSoftmax(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::LeakyReluGrad { .. } => "leaky_relu_grad",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Reshape(..) => "reshape",
            Op::SumAll(..) => "sum",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::SumAxis1(..) => "sum_axis1",
            Op::BroadcastAxis1(..) => "broadcast_axis1",
            Op::BroadcastChannel(..) => "broadcast_channel",
            Op::SumChannel(..) => "sum_channel",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dInputGrad { .. } => "conv2d_input_grad",
            Op::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
            Op::Upsample2(..) => "upsample_nearest2",
            Op::AvgPool2(..) => "avg_pool2",
            Op::Concat1(..) => "concat_channels",
            Op::Slice1 { .. } => "slice_channels",
            Op::Pad1 { .. } => "pad_channels",
            Op::Gather1 { .. } => "gather_channels",
            Op::Scatter1 { .. } => "scatter_channels",
            Op::LogSoftmax(..) => "log_softmax",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Conv2dInputGrad { gy, w, .. } => vec![*gy, *w],
            Op::Conv2dWeightGrad { x, gy, .. } => vec![*x, *gy],
            Op::LeakyReluGrad { grad, input, .. } => vec![*grad, *input],
            Op::Concat1(vs) => vs.clone(),
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::LeakyRelu(x, _)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Reshape(x)
            | Op::SumAll(x)
            | Op::BroadcastScalar(x)
            | Op::SumAxis1(x)
            | Op::BroadcastAxis1(x)
            | Op::BroadcastChannel(x)
            | Op::SumChannel(x)
            | Op::Upsample2(x)
            | Op::AvgPool2(x)
            | Op::LogSoftmax(x)
            | Op::Slice1 { x, .. }
            | Op::Pad1 { x, .. }
            | Op::Gather1 { x, .. }
            | Op::Scatter1 { x, .. } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Nodes are appended in execution order, so the node list
/// is always topologically sorted.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn c<T: Element>(v: f64) -> T {
    T::from_f64(v)
}

/// `[lead, C, inner]` view of a rank >= 2 shape.
fn split_axis1(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(contract(format!("axis-1 op needs rank >= 2, got {:?}", shape)));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), recording: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.recording = true;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Leaf that participates in differentiation when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let requires_grad =
            self.recording && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(contract(format!(
                "{}: shape mismatch {:?} vs {:?}",
                what,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let k: T = c(s);
        let v = self.value(x).map(|p| p * k);
        self.push(v, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let k: T = c(s);
        let v = self.value(x).map(|p| p + k);
        self.push(v, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same node has same shape")
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(contract(format!("leaky_relu slope {} outside (0, 1)", alpha)));
        }
        let a: T = c(alpha);
        let v = self.value(x).map(|p| if p > T::zero() { p } else { p * a });
        Ok(self.push(v, Op::LeakyRelu(x, alpha)))
    }

    fn leaky_relu_grad(&mut self, grad: Var, input: Var, alpha: f64) -> Result<Var> {
        let a: T = c(alpha);
        let v = self
            .value(grad)
            .zip_map(self.value(input), |g, x| if x > T::zero() { g } else { g * a })?;
        Ok(self.push(v, Op::LeakyReluGrad { grad, input, alpha }))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|p| p.tanh());
        self.push(v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(softplus);
        self.push(v, Op::Softplus(x))
    }

    // ---- shape ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn broadcast_scalar(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.value(x).len() != 1 {
            return Err(contract("broadcast_scalar needs a single-element input"));
        }
        let v = Tensor::full(shape, self.value(x).item());
        Ok(self.push(v, Op::BroadcastScalar(x)))
    }

    /// `[B, N] -> [B]` row sums.
    pub fn sum_axis1(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(contract(format!("sum_axis1 expects rank 2, got {:?}", s)));
        }
        let (b, n) = (s[0], s[1]);
        let d = self.value(x).data();
        let v = Tensor::from_fn(&[b], |i| d[i * n..(i + 1) * n].iter().copied().sum());
        Ok(self.push(v, Op::SumAxis1(x)))
    }

    fn broadcast_axis1(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 1 {
            return Err(contract(format!("broadcast_axis1 expects rank 1, got {:?}", s)));
        }
        let b = s[0];
        let d = self.value(x).data();
        let v = Tensor::from_fn(&[b, n], |i| d[i / n]);
        Ok(self.push(v, Op::BroadcastAxis1(x)))
    }

    /// Broadcasts a per-channel vector `[C]` to `shape` (channel axis 1).
    pub fn broadcast_channel(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let (_, ch, inner) = split_axis1(shape)?;
        if self.shape(x) != [ch] {
            return Err(contract(format!(
                "channel vector {:?} does not match target {:?}",
                self.shape(x),
                shape
            )));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(shape.iter().product());
        for _ in 0..shape[0] {
            for &v in d {
                out.resize(out.len() + inner, v);
            }
        }
        let v = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(v, Op::BroadcastChannel(x)))
    }

    /// Sums everything except the channel axis: `[B, C, ...] -> [C]`.
    pub fn sum_channel(&mut self, x: Var) -> Result<Var> {
        let (lead, ch, inner) = split_axis1(self.shape(x))?;
        let d = self.value(x).data();
        let mut out = vec![T::zero(); ch];
        for b in 0..lead {
            for (k, o) in out.iter_mut().enumerate() {
                let off = (b * ch + k) * inner;
                *o = *o + d[off..off + inner].iter().copied().sum::<T>();
            }
        }
        let v = Tensor::new(vec![ch], out)?;
        Ok(self.push(v, Op::SumChannel(x)))
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let b = self.broadcast_channel(bias, &shape)?;
        self.add(x, b)
    }

    // ---- linear algebra ----

    /// `op(a) * op(b)` where `op` optionally transposes a rank-2 tensor.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(contract(format!("matmul expects rank 2, got {:?} and {:?}", sa, sb)));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(contract(format!(
                "matmul inner dims differ: {:?}{} x {:?}{}",
                sa,
                if ta { "^T" } else { "" },
                sb,
                if tb { "^T" } else { "" }
            )));
        }
        let (ra, ca) = (sa[1] as isize, 1isize);
        let (rb, cb) = (sb[1] as isize, 1isize);
        let (rsa, csa) = if ta { (ca, ra) } else { (ra, ca) };
        let (rsb, csb) = if tb { (cb, rb) } else { (rb, cb) };
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            ka,
            n,
            T::one(),
            self.value(a).data(),
            rsa,
            csa,
            self.value(b).data(),
            rsb,
            csb,
            T::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }))
    }

    /// Affine map `x W^T + b` with `x: [B, F_in]`, `W: [F_out, F_in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w, false, true)?;
        match b {
            Some(b) => self.add_channel_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, cfg: ConvConfig) -> Result<Var> {
        let v = conv2d_forward(self.value(x), self.value(w), &cfg)?;
        let y = self.push(v, Op::Conv2d { x, w, cfg });
        match bias {
            Some(b) => self.add_channel_bias(y, b),
            None => Ok(y),
        }
    }

    fn conv2d_input_grad(&mut self, gy: Var, w: Var, cfg: ConvConfig, h: usize, wd: usize) -> Result<Var> {
        let v = conv2d_input_grad(self.value(gy), self.value(w), &cfg, h, wd)?;
        Ok(self.push(v, Op::Conv2dInputGrad { gy, w, cfg }))
    }

    fn conv2d_weight_grad(&mut self, x: Var, gy: Var, cfg: ConvConfig, kh: usize, kw: usize) -> Result<Var> {
        let v = conv2d_weight_grad(self.value(x), self.value(gy), &cfg, kh, kw)?;
        Ok(self.push(v, Op::Conv2dWeightGrad { x, gy, cfg }))
    }

    // ---- resampling ----

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(contract(format!("upsample expects rank 4, got {:?}", s)));
        }
        let (h, w) = (s[2], s[3]);
        let d = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            let plane = &d[p * h * w..(p + 1) * h * w];
            for i in 0..2 * h {
                let row = &plane[(i / 2) * w..(i / 2 + 1) * w];
                for j in 0..2 * w {
                    out.push(row[j / 2]);
                }
            }
        }
        let v = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?;
        Ok(self.push(v, Op::Upsample2(x)))
    }

    /// 2x2 average pooling with stride 2 of `[B, C, H, W]` (H, W even).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(contract(format!("avg_pool2 expects rank 4 with even H, W, got {:?}", s)));
        }
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let q: T = c(0.25);
        let d = self.value(x).data();
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let plane = &d[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let a = plane[2 * i * w + 2 * j] + plane[2 * i * w + 2 * j + 1];
                    let b = plane[(2 * i + 1) * w + 2 * j] + plane[(2 * i + 1) * w + 2 * j + 1];
                    out.push((a + b) * q);
                }
            }
        }
        let v = Tensor::new(vec![s[0], s[1], ho, wo], out)?;
        Ok(self.push(v, Op::AvgPool2(x)))
    }

    // ---- channel plumbing ----

    /// Concatenates along axis 1; all other axes must agree.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| contract("concat of nothing"))?;
        let s0 = self.shape(*first).to_vec();
        let (lead, _, inner) = split_axis1(&s0)?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(contract(format!("concat shape mismatch {:?} vs {:?}", s, s0)));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(lead * total * inner);
        for b in 0..lead {
            for &x in xs {
                let ch = self.shape(x)[1];
                let d = self.value(x).data();
                out.extend_from_slice(&d[b * ch * inner..(b + 1) * ch * inner]);
            }
        }
        let mut shape = s0;
        shape[1] = total;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Concat1(xs.to_vec())))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (lead, ch, inner) = split_axis1(&s)?;
        if start + len > ch {
            return Err(contract(format!("channel slice {}..{} of {}", start, start + len, ch)));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(lead * len * inner);
        for b in 0..lead {
            out.extend_from_slice(&d[(b * ch + start) * inner..(b * ch + start + len) * inner]);
        }
        let mut shape = s;
        shape[1] = len;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Slice1 { x, start }))
    }

    fn pad_channels(&mut self, x: Var, start: usize, total: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (lead, len, inner) = split_axis1(&s)?;
        let d = self.value(x).data();
        let mut shape = s.clone();
        shape[1] = total;
        let mut v = Tensor::zeros(&shape);
        let o = v.data_mut();
        for b in 0..lead {
            o[(b * total + start) * inner..(b * total + start + len) * inner]
                .copy_from_slice(&d[b * len * inner..(b + 1) * len * inner]);
        }
        Ok(self.push(v, Op::Pad1 { x, start }))
    }

    /// Output channel `i` is input channel `idx[i]`.
    pub fn gather_channels(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (lead, ch, inner) = split_axis1(&s)?;
        if let Some(bad) = idx.iter().find(|&&i| i >= ch) {
            return Err(contract(format!("gather index {} out of {} channels", bad, ch)));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(lead * idx.len() * inner);
        for b in 0..lead {
            for &i in idx {
                out.extend_from_slice(&d[(b * ch + i) * inner..(b * ch + i + 1) * inner]);
            }
        }
        let mut shape = s;
        shape[1] = idx.len();
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Gather1 { x, idx: idx.to_vec() }))
    }

    fn scatter_channels(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (lead, ch, inner) = split_axis1(&s)?;
        debug_assert_eq!(ch, idx.len());
        let d = self.value(x).data();
        let mut shape = s.clone();
        shape[1] = n;
        let mut v = Tensor::zeros(&shape);
        let o = v.data_mut();
        for b in 0..lead {
            for (k, &i) in idx.iter().enumerate() {
                for e in 0..inner {
                    let dst = (b * n + i) * inner + e;
                    o[dst] = o[dst] + d[(b * ch + k) * inner + e];
                }
            }
        }
        Ok(self.push(v, Op::Scatter1 { x, idx: idx.to_vec() }))
    }

    /// Row-wise log-softmax of `[B, C]`. First-order differentiable only.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(contract(format!("log_softmax expects rank 2, got {:?}", s)));
        }
        let (b, n) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(b * n);
        for r in 0..b {
            let row = &d[r * n..(r + 1) * n];
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let v = Tensor::new(s, out)?;
        Ok(self.push(v, Op::LogSoftmax(x)))
    }

    // ---- differentiation ----

    /// Vector-Jacobian products of `input_pos`-th input of node `node`.
    fn vjp(&mut self, node: usize, gy: Var, input_pos: usize, create_graph: bool) -> Result<Var> {
        let op = self.nodes[node].op.clone();
        let out = Var(node);
        match op {
            Op::Leaf => unreachable!("leaves have no inputs"),
            Op::Add(..) => Ok(gy),
            Op::Mul(a, b) => {
                let other = if input_pos == 0 { b } else { a };
                self.mul(gy, other)
            }
            Op::Scale(_, s) => Ok(self.scale(gy, s)),
            Op::AddScalar(..) => Ok(gy),
            Op::LeakyRelu(x, alpha) => self.leaky_relu_grad(gy, x, alpha),
            Op::LeakyReluGrad { input, alpha, .. } => {
                debug_assert_eq!(input_pos, 0);
                self.leaky_relu_grad(gy, input, alpha)
            }
            Op::Tanh(_) => {
                let sq = self.square(out);
                let neg = self.scale(sq, -1.0);
                let d = self.add_scalar(neg, 1.0);
                self.mul(gy, d)
            }
            Op::Sigmoid(_) => {
                let neg = self.scale(out, -1.0);
                let one_minus = self.add_scalar(neg, 1.0);
                let d = self.mul(out, one_minus)?;
                self.mul(gy, d)
            }
            Op::Softplus(x) => {
                let s = self.sigmoid(x);
                self.mul(gy, s)
            }
            Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                self.reshape(gy, &shape)
            }
            Op::SumAll(x) => {
                let shape = self.shape(x).to_vec();
                self.broadcast_scalar(gy, &shape)
            }
            Op::BroadcastScalar(x) => {
                let s = self.sum(gy);
                let shape = self.shape(x).to_vec();
                self.reshape(s, &shape)
            }
            Op::SumAxis1(x) => {
                let n = self.shape(x)[1];
                self.broadcast_axis1(gy, n)
            }
            Op::BroadcastAxis1(_) => self.sum_axis1(gy),
            Op::BroadcastChannel(_) => self.sum_channel(gy),
            Op::SumChannel(x) => {
                let shape = self.shape(x).to_vec();
                self.broadcast_channel(gy, &shape)
            }
            Op::MatMul { a, b, ta, tb } => {
                if input_pos == 0 {
                    if !ta {
                        self.matmul(gy, b, false, !tb)
                    } else {
                        self.matmul(b, gy, tb, true)
                    }
                } else if !tb {
                    self.matmul(a, gy, !ta, false)
                } else {
                    self.matmul(gy, a, true, ta)
                }
            }
            Op::Conv2d { x, w, cfg } => {
                if input_pos == 0 {
                    let s = self.shape(x).to_vec();
                    self.conv2d_input_grad(gy, w, cfg, s[2], s[3])
                } else {
                    let s = self.shape(w).to_vec();
                    self.conv2d_weight_grad(x, gy, cfg, s[2], s[3])
                }
            }
            Op::Conv2dInputGrad { gy: g0, w, cfg } => {
                if input_pos == 0 {
                    self.conv2d(gy, w, None, cfg)
                } else {
                    let s = self.shape(w).to_vec();
                    self.conv2d_weight_grad(gy, g0, cfg, s[2], s[3])
                }
            }
            Op::Conv2dWeightGrad { x, gy: g0, cfg } => {
                if input_pos == 0 {
                    let s = self.shape(x).to_vec();
                    self.conv2d_input_grad(g0, gy, cfg, s[2], s[3])
                } else {
                    self.conv2d(x, gy, None, cfg)
                }
            }
            Op::Upsample2(_) => {
                let p = self.avg_pool2(gy)?;
                Ok(self.scale(p, 4.0))
            }
            Op::AvgPool2(_) => {
                let u = self.upsample2(gy)?;
                Ok(self.scale(u, 0.25))
            }
            Op::Concat1(xs) => {
                let start: usize = xs[..input_pos].iter().map(|&v| self.shape(v)[1]).sum();
                let len = self.shape(xs[input_pos])[1];
                self.slice_channels(gy, start, len)
            }
            Op::Slice1 { x, start } => {
                let total = self.shape(x)[1];
                self.pad_channels(gy, start, total)
            }
            Op::Pad1 { x, start } => {
                let len = self.shape(x)[1];
                self.slice_channels(gy, start, len)
            }
            Op::Gather1 { x, idx } => {
                let n = self.shape(x)[1];
                self.scatter_channels(gy, &idx, n)
            }
            Op::Scatter1 { idx, .. } => self.gather_channels(gy, &idx),
            Op::LogSoftmax(_) => {
                if create_graph {
                    return Err(contract("log_softmax supports first-order gradients only"));
                }
                let probs = self.value(out).map(|v| v.exp());
                let p = self.constant(probs);
                let n = self.shape(gy)[1];
                let rs = self.sum_axis1(gy)?;
                let rb = self.broadcast_axis1(rs, n)?;
                let t = self.mul(p, rb)?;
                self.sub(gy, t)
            }
        }
    }

    /// Gradients of scalar `y` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned gradients are themselves
    /// differentiable nodes; otherwise they are constants.
    pub fn grad(&mut self, y: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Option<Var>>> {
        if self.nodes.is_empty() {
            return Err(contract("backward on an empty tape"));
        }
        if self.value(y).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(y)
            )));
        }
        let end = y.0 + 1;
        let mut depends = vec![false; end];
        for &w in wrt {
            if w.0 < end && self.nodes[w.0].requires_grad {
                depends[w.0] = true;
            }
        }
        for i in 0..end {
            if !depends[i] && self.nodes[i].requires_grad {
                depends[i] = self.nodes[i].op.inputs().iter().any(|v| depends[v.0]);
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; end];
        if !depends[y.0] {
            return Ok(wrt.iter().map(|_| None).collect());
        }
        let prev = self.recording;
        self.recording = create_graph;
        let seed = Tensor::full(self.shape(y), T::one());
        grads[y.0] = Some(self.constant(seed));
        let result = self.propagate(end, &depends, &mut grads, create_graph);
        self.recording = prev;
        result?;
        Ok(wrt.iter().map(|w| if w.0 < end { grads[w.0] } else { None }).collect())
    }

    fn propagate(
        &mut self,
        end: usize,
        depends: &[bool],
        grads: &mut [Option<Var>],
        create_graph: bool,
    ) -> Result<()> {
        for i in (0..end).rev() {
            let gy = match grads[i] {
                Some(g) if depends[i] => g,
                _ => continue,
            };
            let inputs = self.nodes[i].op.inputs();
            for (pos, inp) in inputs.iter().enumerate() {
                if !depends[inp.0] {
                    continue;
                }
                if let Op::LeakyReluGrad { .. } = self.nodes[i].op {
                    if pos == 1 {
                        continue;
                    }
                }
                let contrib = self.vjp(i, gy, pos, create_graph)?;
                if !self.value(contrib).all_finite() {
                    return Err(Error::Numeric {
                        location: format!("node {} ({})", i, self.nodes[i].op.name()),
                        detail: "non-finite gradient".into(),
                    });
                }
                grads[inp.0] = Some(match grads[inp.0] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }
        Ok(())
    }

    /// Gradients of `loss` for every reachable leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap<T>> {
        let leaves: Vec<Var> = (0..=loss.0.min(self.nodes.len().saturating_sub(1)))
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad)
            .map(Var)
            .collect();
        let gs = self.grad(loss, &leaves, false)?;
        Ok(leaves
            .into_iter()
            .zip(gs)
            .filter_map(|(l, g)| g.map(|g| (l, self.value(g).clone())))
            .collect())
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads[&x].data(), &[1.0; 6]);
    }

    #[test]
    fn frozen_leaf_is_absent() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[3], 2.0));
        let w = g.constant(Tensor::full(&[3], 5.0));
        let y = g.mul(x, w).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads[&x].data(), &[5.0; 3]);
        assert!(!grads.contains_key(&w));
    }

    #[test]
    fn untouched_leaf_is_absent() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[2], 1.0));
        let unused = g.param(Tensor::full(&[2], 1.0));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.contains_key(&x));
        assert!(!grads.contains_key(&unused));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[2], 1.0));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn leaky_relu_definition() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.leaky_relu(x, 0.2).unwrap();
        assert_eq!(g.value(y).data(), &[-0.2, 0.0, 2.0]);
    }

    #[test]
    fn add_zeros_is_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[5], |i| (i as f32).sin() * 1e7));
        let z = g.constant(Tensor::zeros(&[5]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn pool_inverts_upsample() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f64 * 0.37).cos()));
        let u = g.upsample2(x).unwrap();
        assert_eq!(g.shape(u), &[2, 3, 8, 10]);
        let p = g.avg_pool2(u).unwrap();
        for (a, b) in g.value(p).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_gradient_reports_op() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[2], 1.0));
        let big = g.constant(Tensor::full(&[2], f64::INFINITY));
        let y = g.mul(x, big).unwrap();
        let s = g.sum(y);
        match g.backward(s) {
            Err(Error::Numeric { location, .. }) => assert!(location.contains("mul")),
            other => panic!("expected numeric failure, got {:?}", other.map(|m| m.len())),
        }
    }

    #[test]
    fn second_order_of_cubic() {
        // d/dx (d/dx sum(x^3)) summed = sum(6x)
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2], vec![0.5, -2.0]).unwrap());
        let x2 = g.square(x);
        let x3 = g.mul(x2, x).unwrap();
        let s = g.sum(x3);
        let dx = g.grad(s, &[x], true).unwrap()[0].unwrap();
        assert_eq!(g.value(dx).data(), &[0.75, 12.0]);
        let s2 = g.sum(dx);
        let d2 = g.backward(s2).unwrap();
        assert_eq!(d2[&x].data(), &[3.0, -12.0]);
    }
}

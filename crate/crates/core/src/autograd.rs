//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every op appends its output
//! after its inputs, so the arena order is already a topological order and
//! [`Graph::backward`] walks it once in reverse.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::{self, window_out, ConvGeom};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Add,
    Mul,
    Relu,
    Sigmoid,
    MaxPool2d,
    AvgPool2d,
    AdaptiveAvgPool2d,
    GlobalMaxPool,
    ChannelMean,
    ChannelMax,
    Concat,
    Linear,
    Reshape,
    SoftmaxCrossEntropy,
    Sum,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 16] = [
        OpKind::Conv2d,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::MaxPool2d,
        OpKind::AvgPool2d,
        OpKind::AdaptiveAvgPool2d,
        OpKind::GlobalMaxPool,
        OpKind::ChannelMean,
        OpKind::ChannelMax,
        OpKind::Concat,
        OpKind::Linear,
        OpKind::Reshape,
        OpKind::SoftmaxCrossEntropy,
        OpKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::MaxPool2d => "maxpool2d",
            OpKind::AvgPool2d => "avgpool2d",
            OpKind::AdaptiveAvgPool2d => "adaptive_avgpool2d",
            OpKind::GlobalMaxPool => "global_maxpool",
            OpKind::ChannelMean => "channel_mean",
            OpKind::ChannelMax => "channel_max",
            OpKind::Concat => "concat",
            OpKind::Linear => "linear",
            OpKind::Reshape => "reshape",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::Sum => "sum",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::DIFFERENTIABLE
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown op `{s}`")))
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool2d {
        x: Var,
        k: usize,
        stride: usize,
        pad: usize,
    },
    AdaptiveAvgPool2d {
        x: Var,
    },
    GlobalMaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    ChannelMean {
        x: Var,
    },
    ChannelMax {
        x: Var,
        argmax: Vec<u32>,
    },
    Concat {
        xs: Vec<Var>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum {
        x: Var,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::AvgPool2d { .. } => OpKind::AvgPool2d,
            Op::AdaptiveAvgPool2d { .. } => OpKind::AdaptiveAvgPool2d,
            Op::GlobalMaxPool { .. } => OpKind::GlobalMaxPool,
            Op::ChannelMean { .. } => OpKind::ChannelMean,
            Op::ChannelMax { .. } => OpKind::ChannelMax,
            Op::Concat { .. } => OpKind::Concat,
            Op::Linear { .. } => OpKind::Linear,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Sum { .. } => OpKind::Sum,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Records a forward computation for later differentiation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    parallel: bool,
    macs: u64,
    kink_hash: u64,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            parallel: crate::parallel_enabled(),
            macs: 0,
            kink_hash: FNV_OFFSET,
            fault: None,
        }
    }

    /// Test hook: scales the input gradients of every `kind` node by 1.5
    /// during backward, producing a deliberately wrong derivative.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    /// Multiply-accumulates executed by conv and linear ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Hash of every piecewise-linear branch decision taken so far (relu
    /// signs, max-pool winners). Two evaluations with equal signatures lie
    /// on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn mix(&mut self, word: u64) {
        self.kink_hash = (self.kink_hash ^ word).wrapping_mul(FNV_PRIME);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        self.value(v)
            .dims4()
            .ok_or_else(|| Error::shape(op, format!("expected rank-4 input, got {:?}", self.shape(v))))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c_in, h, wd] = self.dims4(x, "conv2d")?;
        let ws = self.shape(w).to_vec();
        let [c_out, wc, kh, kw] = ws[..] else {
            return Err(Error::shape("conv2d", format!("weight must be rank 4, got {ws:?}")));
        };
        if wc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?} has {c_in} channels but weight {ws:?} expects {wc}",
                    self.shape(x)
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {:?} (pad {pad})", self.shape(x)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {c_out} outputs", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh: window_out(h, kh, stride, pad),
            ow: window_out(wd, kw, stride, pad),
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
            self.parallel,
        );
        self.macs += (n * c_out * geom.oh * geom.ow * c_in * kh * kw) as u64;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::from_parts_unchecked(vec![n, c_out, geom.oh, geom.ow], out);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    fn broadcast(&self, a: Var, b: Var, op: &'static str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        broadcast_shape(sa, sb).ok_or_else(|| Error::shape(op, format!("cannot broadcast {sa:?} with {sb:?}")))
    }

    fn binary(&mut self, a: Var, b: Var, kind: OpKind) -> Result<Var> {
        let op_name = kind.name();
        let out_shape = self.broadcast(a, b, op_name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = if va.shape() == vb.shape() {
            let (da, db) = (va.data(), vb.data());
            match kind {
                OpKind::Add => da.iter().zip(db).map(|(x, y)| *x + *y).collect(),
                _ => da.iter().zip(db).map(|(x, y)| *x * *y).collect(),
            }
        } else {
            let mut data = vec![T::zero(); out_shape.iter().product()];
            let (da, db) = (va.data(), vb.data());
            for_each_broadcast(&out_shape, va.shape(), vb.shape(), |o, ia, ib| {
                data[o] = match kind {
                    OpKind::Add => da[ia] + db[ib],
                    _ => da[ia] * db[ib],
                };
            });
            data
        };
        let rg = self.rg(a) || self.rg(b);
        let op = match kind {
            OpKind::Add => Op::Add { a, b },
            _ => Op::Mul { a, b },
        };
        Ok(self.push(Tensor::from_parts_unchecked(out_shape, data), op, rg))
    }

    /// Pointwise sum with broadcasting along singleton axes of equal rank.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Add)
    }

    /// Pointwise product with broadcasting along singleton axes of equal rank.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Mul)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data: Vec<T> = v
            .data()
            .iter()
            .map(|&a| if a > T::zero() { a } else { T::zero() })
            .collect();
        let shape = v.shape().to_vec();
        let mut word = 0u64;
        let mut words = Vec::with_capacity(data.len() / 64 + 1);
        for (i, a) in data.iter().enumerate() {
            word = (word << 1) | (*a > T::zero()) as u64;
            if i % 64 == 63 {
                words.push(word);
                word = 0;
            }
        }
        words.push(word);
        for w in words {
            self.mix(w);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts_unchecked(shape, data), Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| sigmoid(a)).collect();
        let shape = v.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts_unchecked(shape, data), Op::Sigmoid { x }, rg)
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let dims = self.dims4(x, "maxpool2d")?;
        if k == 0 || stride == 0 || k > dims[2] || k > dims[3] {
            return Err(Error::shape(
                "maxpool2d",
                format!("window {k} (stride {stride}) does not fit input {:?}", self.shape(x)),
            ));
        }
        let (out, argmax, oh, ow) = kernels::max_pool_forward(self.value(x).data(), dims, k, stride);
        for a in &argmax {
            self.mix(*a as u64);
        }
        let rg = self.rg(x);
        let value = Tensor::from_parts_unchecked(vec![dims[0], dims[1], oh, ow], out);
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Average pooling; zero padding counts toward the divisor.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let dims = self.dims4(x, "avgpool2d")?;
        if k == 0 || stride == 0 || k > dims[2] + 2 * pad || k > dims[3] + 2 * pad {
            return Err(Error::shape(
                "avgpool2d",
                format!("window {k} does not fit {:?}", self.shape(x)),
            ));
        }
        let (out, oh, ow) = kernels::avg_pool_forward(self.value(x).data(), dims, k, stride, pad);
        let rg = self.rg(x);
        let value = Tensor::from_parts_unchecked(vec![dims[0], dims[1], oh, ow], out);
        Ok(self.push(value, Op::AvgPool2d { x, k, stride, pad }, rg))
    }

    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let dims = self.dims4(x, "adaptive_avgpool2d")?;
        if oh == 0 || ow == 0 {
            return Err(Error::shape("adaptive_avgpool2d", "zero output extent"));
        }
        let out = kernels::adaptive_avg_forward(self.value(x).data(), dims, oh, ow);
        let rg = self.rg(x);
        let value = Tensor::from_parts_unchecked(vec![dims[0], dims[1], oh, ow], out);
        Ok(self.push(value, Op::AdaptiveAvgPool2d { x }, rg))
    }

    /// Spatial maximum per channel: `N x C x H x W -> N x C x 1 x 1`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "global_maxpool")?;
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let s = &src[p * plane..(p + 1) * plane];
            let mut best = 0;
            for (i, v) in s.iter().enumerate() {
                if *v > s[best] {
                    best = i;
                }
            }
            out.push(s[best]);
            argmax.push((p * plane + best) as u32);
        }
        for a in &argmax {
            self.mix(*a as u64);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts_unchecked(vec![n, c, 1, 1], out),
            Op::GlobalMaxPool { x, argmax },
            rg,
        ))
    }

    /// Mean over channels: `N x C x H x W -> N x 1 x H x W`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "channel_mean")?;
        let plane = h * w;
        let src = self.value(x).data();
        let inv = T::one() / T::from_f64(c as f64);
        let mut out = vec![T::zero(); n * plane];
        for b in 0..n {
            let o = &mut out[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let s = &src[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                for (acc, v) in o.iter_mut().zip(s) {
                    *acc += *v;
                }
            }
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts_unchecked(vec![n, 1, h, w], out),
            Op::ChannelMean { x },
            rg,
        ))
    }

    /// Maximum over channels: `N x C x H x W -> N x 1 x H x W`.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "channel_max")?;
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * plane);
        let mut argmax = Vec::with_capacity(n * plane);
        for b in 0..n {
            for p in 0..plane {
                let mut best = b * c * plane + p;
                for ch in 1..c {
                    let idx = (b * c + ch) * plane + p;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best as u32);
            }
        }
        for a in &argmax {
            self.mix(*a as u64);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts_unchecked(vec![n, 1, h, w], out),
            Op::ChannelMax { x, argmax },
            rg,
        ))
    }

    /// Concatenation along axis 1 of rank-4 tensors with equal N, H, W.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let [n, _, h, w] = self.dims4(first, "concat")?;
        let mut total_c = 0;
        for &v in xs {
            let [vn, vc, vh, vw] = self.dims4(v, "concat")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", self.shape(first), self.shape(v)),
                ));
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts_unchecked(vec![n, total_c, h, w], out),
            Op::Concat { xs: xs.to_vec() },
            rg,
        ))
    }

    /// `y = x w^T + b` for `x: N x D_in`, `w: D_out x D_in`, `b: D_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[n, d_in], &[d_out, wd]) = (&xs[..], &ws[..]) else {
            return Err(Error::shape(
                "linear",
                format!("expected rank-2 operands, got {xs:?} and {ws:?}"),
            ));
        };
        if wd != d_in {
            return Err(Error::shape("linear", format!("input {xs:?} vs weight {ws:?}")));
        }
        let mut out = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [d_out] {
                    return Err(Error::shape(
                        "linear",
                        format!("bias {:?} for {d_out} outputs", bv.shape()),
                    ));
                }
                bv.data().repeat(n)
            }
            None => vec![T::zero(); n * d_out],
        };
        T::gemm(
            n,
            d_in,
            d_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            T::one(),
        );
        self.macs += (n * d_in * d_out) as u64;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts_unchecked(vec![n, d_out], out),
            Op::Linear { x, w, b },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Mean softmax cross-entropy of `logits: N x C` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let [n, c] = s[..] else {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits must be N x C, got {s:?}"),
            ));
        };
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = T::zero();
        for (row, &label) in z.chunks(c).zip(labels) {
            let (lse, p) = log_softmax_row(row);
            loss += lse - row[label];
            probs.extend(p);
        }
        loss = loss / T::from_f64(n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Reverse pass from a scalar node. Gradients are summed at fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            let mut contributions = self.node_backward(node, &gy);
            if self.fault == Some(node.op.kind()) {
                let scale = T::from_f64(1.5);
                for (_, g) in contributions.iter_mut() {
                    g.iter_mut().for_each(|v| *v *= scale);
                }
            }
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<T>, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let want = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let g = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy,
                    geom,
                    want,
                    self.parallel,
                );
                if let Some(dx) = g.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = g.dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    out.push((*b, db));
                }
            }
            Op::Add { a, b } | Op::Mul { a, b } => {
                let is_mul = matches!(node.op, Op::Mul { .. });
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = vec![T::zero(); va.numel()];
                let mut gb = vec![T::zero(); vb.numel()];
                let (da, db) = (va.data(), vb.data());
                for_each_broadcast(node.value.shape(), va.shape(), vb.shape(), |o, ia, ib| {
                    if is_mul {
                        ga[ia] += gy[o] * db[ib];
                        gb[ib] += gy[o] * da[ia];
                    } else {
                        ga[ia] += gy[o];
                        gb[ib] += gy[o];
                    }
                });
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Relu { x } => {
                let g = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gy)
                    .map(|(v, g)| if *v > T::zero() { *g } else { T::zero() })
                    .collect();
                out.push((*x, g));
            }
            Op::Sigmoid { x } => {
                let g = node
                    .value
                    .data()
                    .iter()
                    .zip(gy)
                    .map(|(s, g)| *g * *s * (T::one() - *s))
                    .collect();
                out.push((*x, g));
            }
            Op::MaxPool2d { x, argmax } | Op::GlobalMaxPool { x, argmax } | Op::ChannelMax { x, argmax } => {
                let mut g = vec![T::zero(); self.value(*x).numel()];
                for (a, gv) in argmax.iter().zip(gy) {
                    g[*a as usize] += *gv;
                }
                out.push((*x, g));
            }
            Op::AvgPool2d { x, k, stride, pad } => {
                let dims = self.value(*x).dims4().expect("rank 4");
                out.push((*x, kernels::avg_pool_backward(gy, dims, *k, *stride, *pad)));
            }
            Op::AdaptiveAvgPool2d { x } => {
                let dims = self.value(*x).dims4().expect("rank 4");
                let [_, _, oh, ow] = node.value.dims4().expect("rank 4");
                out.push((*x, kernels::adaptive_avg_backward(gy, dims, oh, ow)));
            }
            Op::ChannelMean { x } => {
                let [n, c, h, w] = self.value(*x).dims4().expect("rank 4");
                let plane = h * w;
                let inv = T::one() / T::from_f64(c as f64);
                let mut g = vec![T::zero(); n * c * plane];
                for b in 0..n {
                    let src = &gy[b * plane..(b + 1) * plane];
                    for ch in 0..c {
                        let dst = &mut g[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *s * inv;
                        }
                    }
                }
                out.push((*x, g));
            }
            Op::Concat { xs } => {
                let [n, total_c, h, w] = node.value.dims4().expect("rank 4");
                let plane = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    let mut g = Vec::with_capacity(n * c * plane);
                    for b in 0..n {
                        let start = (b * total_c + offset) * plane;
                        g.extend_from_slice(&gy[start..start + c * plane]);
                    }
                    offset += c;
                    out.push((v, g));
                }
            }
            Op::Linear { x, w, b } => {
                let [n, d_in] = self.shape(*x)[..] else { unreachable!() };
                let d_out = self.shape(*w)[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * d_in];
                    T::gemm(
                        n,
                        d_out,
                        d_in,
                        gy,
                        false,
                        self.value(*w).data(),
                        false,
                        &mut dx,
                        T::zero(),
                    );
                    out.push((*x, dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); d_out * d_in];
                    T::gemm(
                        d_out,
                        n,
                        d_in,
                        gy,
                        true,
                        self.value(*x).data(),
                        false,
                        &mut dw,
                        T::zero(),
                    );
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); d_out];
                    for row in gy.chunks(d_out) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += *g;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Reshape { x } => out.push((*x, gy.to_vec())),
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let scale = gy[0] / T::from_f64(labels.len() as f64);
                let mut g: Vec<T> = probs.iter().map(|p| *p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    g[row * c + label] -= scale;
                }
                out.push((*logits, g));
            }
            Op::Sum { x } => out.push((*x, vec![gy[0]; self.value(*x).numel()])),
        }
        out
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

/// Returns `(logsumexp(row), softmax(row))`.
pub(crate) fn log_softmax_row<T: Real>(row: &[T]) -> (T, Vec<T>) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|v| (*v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let lse = max + total.ln();
    (lse, exps.into_iter().map(|e| e / total).collect())
}

/// Softmax of each row of an `N x C` buffer.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<Vec<T>> {
    let c = *logits.shape().last().expect("non-empty shape");
    logits.data().chunks(c).map(|r| log_softmax_row(r).1).collect()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = out.iter().product();
    if sa == out && sb == out {
        for i in 0..numel {
            f(i, i, i);
        }
        return;
    }
    let (ta, tb) = (broadcast_strides(sa, out), broadcast_strides(sb, out));
    let rank = out.len();
    let mut counter = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..numel {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            counter[d] += 1;
            ia += ta[d];
            ib += tb[d];
            if counter[d] < out[d] {
                break;
            }
            ia -= ta[d] * out[d];
            ib -= tb[d] * out[d];
            counter[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_golden_value() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| (i as f64).sin()).collect();
        let x = g.constant(t(&[2, 3, 5, 4], &data));
        // Identity over channels: 3x3x1x1 eye.
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.constant(t(&[3, 3, 1, 1], &eye));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);

        let mut g = Graph::new();
        let x1 = g.constant(t(&[1, 1, 3, 3], &data[..9]));
        let one = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x1, one, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..9]);
    }

    #[test]
    fn conv_paper_input_shape() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 282, 231]));
        let w = g.constant(Tensor::zeros(&[8, 3, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 141, 116]);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let msg = g.conv2d(x, w, None, 1, 0).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data(), &[0.5]);
        let zeros = g.constant(Tensor::zeros(&[2]));
        let a = g.add(x, zeros).unwrap();
        assert_eq!(g.value(a).data(), g.value(x).data());
        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(x, bad).is_err());
    }

    #[test]
    fn broadcast_mul_over_spatial_axes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let m = g.constant(t(&[1, 2, 1, 1], &[10.0, 100.0]));
        let y = g.mul(x, m).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 10.0, 20.0, 30.0, 400.0, 500.0, 600.0, 700.0]);
        let s = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y2 = g.mul(x, s).unwrap();
        assert_eq!(g.value(y2).data(), &[0.0, 2.0, 6.0, 12.0, 4.0, 10.0, 18.0, 28.0]);
    }

    #[test]
    fn maxpool_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let ramp = g.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
        let y = g.max_pool2d(ramp, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 7.0, 13.0, 15.0]);

        let c = g.constant(Tensor::full(&[1, 2, 3, 3], 0.7));
        let y = g.max_pool2d(c, 2, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));

        assert!(g.max_pool2d(x, 3, 1).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.max_pool2d(x, 2, 2).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[1, 2], &[3.0, 4.0]));
        let b = g.constant(t(&[1], &[5.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[16.0]);

        let xb = g.constant(t(&[2, 2], &[1.0, 2.0, -3.0, 0.5]));
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = g.constant(Tensor::zeros(&[2]));
        let y = g.linear(xb, eye, Some(zero)).unwrap();
        assert_eq!(g.value(y).data(), g.value(xb).data());

        let bad = g.constant(Tensor::zeros(&[1, 3]));
        assert!(g.linear(x, bad, None).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::full(&[3, 5], 0.3));
        let l = g.softmax_cross_entropy(z, &[0, 2, 4]).unwrap();
        assert!((g.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);

        let z = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let l = g.softmax_cross_entropy(z, &[1]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((g.value(l).data()[0] - expected).abs() < 1e-12);
        assert!((expected - 0.31326).abs() < 1e-5);

        let z = g.constant(t(&[1, 3], &[800.0, 0.0, 0.0]));
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-300);

        assert!(g.softmax_cross_entropy(z, &[3]).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[2], &[3.0, 4.0]));
        let a = g.sum(x);
        let b = g.sum(x);
        let c = g.add(a, b).unwrap();
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0]);

        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let k = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, k).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(k).is_none());
    }

    #[test]
    fn counts_macs() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
        g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.macs(), 16);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::DIFFERENTIABLE {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
    }
}

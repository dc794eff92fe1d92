//! Network building blocks: convolution and linear layers, residual blocks
//! (basic, three-conv, bottleneck), a four-branch Inception module and CBAM.
//!
//! Every layer declares its parameters into a [`Layout`] when built and
//! reads them back from a slice of graph variables during the forward pass.
//! `trace` methods propagate per-item shapes `[C, H, W]` and count
//! multiply-accumulates without touching any data.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kernels::window_out;
use crate::params::{Init, Layout, ParamId};
use crate::tensor::Real;

/// Per-item feature shape `[C, H, W]`.
pub type Shape3 = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        layout: &mut Layout,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        Self::with_init(
            layout,
            name,
            [in_c, out_c, kernel, stride, pad],
            Init::HeUniform { fan_in },
            Init::Zeros,
        )
    }

    /// `dims` is `[in, out, kernel, stride, pad]`.
    pub fn with_init(layout: &mut Layout, name: &str, dims: [usize; 5], weight: Init, bias: Init) -> Self {
        let [in_c, out_c, kernel, stride, pad] = dims;
        let w = layout.add(format!("{name}.weight"), &[out_c, in_c, kernel, kernel], weight);
        let b = layout.add(format!("{name}.bias"), &[out_c], bias);
        Conv {
            w,
            b,
            in_channels: in_c,
            out_channels: out_c,
            kernel,
            stride,
            pad,
        }
    }

    /// `kernel x kernel` convolution that preserves spatial size at stride 1.
    pub fn same(layout: &mut Layout, name: &str, in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Self {
        Self::new(layout, name, in_c, out_c, kernel, stride, kernel / 2)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, pv[self.w.index()], Some(pv[self.b.index()]), self.stride, self.pad)
    }

    pub fn trace(&self, s: Shape3) -> Result<(Shape3, u64)> {
        let [c, h, w] = s;
        if c != self.in_channels || self.kernel > h + 2 * self.pad || self.kernel > w + 2 * self.pad {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "{s:?} into {}x{}x{k}x{k} kernel",
                    self.out_channels,
                    self.in_channels,
                    k = self.kernel
                ),
            ));
        }
        let oh = window_out(h, self.kernel, self.stride, self.pad);
        let ow = window_out(w, self.kernel, self.stride, self.pad);
        let macs = (self.out_channels * oh * ow * c * self.kernel * self.kernel) as u64;
        Ok(([self.out_channels, oh, ow], macs))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(layout: &mut Layout, name: &str, d_in: usize, d_out: usize, init: Init) -> Self {
        let w = layout.add(format!("{name}.weight"), &[d_out, d_in], init);
        let b = layout.add(format!("{name}.bias"), &[d_out], Init::Zeros);
        Linear {
            w,
            b,
            in_features: d_in,
            out_features: d_out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<Var> {
        g.linear(x, pv[self.w.index()], Some(pv[self.b.index()]))
    }

    pub fn macs(&self) -> u64 {
        (self.in_features * self.out_features) as u64
    }
}

fn check_pool(s: Shape3, k: usize) -> Result<Shape3> {
    let [c, h, w] = s;
    if k > h || k > w {
        return Err(Error::shape("maxpool2d", format!("window {k} does not fit {s:?}")));
    }
    Ok([c, window_out(h, k, k, 0), window_out(w, k, k, 0)])
}

/// Shape after a `k x k`, stride-`k` max pool.
pub fn trace_pool(s: Shape3, k: usize) -> Result<Shape3> {
    check_pool(s, k)
}

/// Residual block with a stack of 3x3 convolutions (two for the basic block,
/// three for the ResNet12 block) and a projection shortcut when the shape
/// changes: `y = relu(convs(x) + shortcut(x))`, relu between convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub convs: Vec<Conv>,
    pub shortcut: Option<Conv>,
}

impl ResidualBlock {
    pub fn new(layout: &mut Layout, name: &str, in_c: usize, out_c: usize, stride: usize, depth: usize) -> Self {
        assert!(depth >= 1, "residual block needs at least one conv");
        let convs = (0..depth)
            .map(|i| {
                let (ci, s) = if i == 0 { (in_c, stride) } else { (out_c, 1) };
                // the last conv starts at zero so a fresh block is its shortcut
                let w = if i + 1 == depth {
                    Init::Zeros
                } else {
                    Init::HeUniform { fan_in: ci * 9 }
                };
                Conv::with_init(
                    layout,
                    &format!("{name}.conv{}", i + 1),
                    [ci, out_c, 3, s, 1],
                    w,
                    Init::Zeros,
                )
            })
            .collect();
        let shortcut = (in_c != out_c || stride != 1)
            .then(|| Conv::new(layout, &format!("{name}.shortcut"), in_c, out_c, 1, stride, 0));
        ResidualBlock { convs, shortcut }
    }

    pub fn basic(layout: &mut Layout, name: &str, in_c: usize, out_c: usize, stride: usize) -> Self {
        Self::new(layout, name, in_c, out_c, stride, 2)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, pv, h)?;
            if i + 1 < self.convs.len() {
                h = g.relu(h);
            }
        }
        let skip = match &self.shortcut {
            Some(sc) => sc.forward(g, pv, x)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum))
    }

    pub fn trace(&self, s: Shape3) -> Result<(Shape3, u64)> {
        let mut shape = s;
        let mut macs = 0;
        for conv in &self.convs {
            let (next, m) = conv.trace(shape)?;
            shape = next;
            macs += m;
        }
        if let Some(sc) = &self.shortcut {
            macs += sc.trace(s)?.1;
        }
        Ok((shape, macs))
    }
}

/// `y = relu(expand(relu(conv3x3(relu(reduce(x))))) + shortcut(x))` with the
/// inner width `max(out/4, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    pub reduce: Conv,
    pub conv: Conv,
    pub expand: Conv,
    pub shortcut: Option<Conv>,
}

impl Bottleneck {
    pub fn mid_width(out_c: usize) -> usize {
        (out_c / 4).max(1)
    }

    pub fn new(layout: &mut Layout, name: &str, in_c: usize, out_c: usize, stride: usize) -> Self {
        let mid = Self::mid_width(out_c);
        Bottleneck {
            reduce: Conv::new(layout, &format!("{name}.reduce"), in_c, mid, 1, 1, 0),
            conv: Conv::same(layout, &format!("{name}.conv"), mid, mid, 3, stride),
            expand: Conv::with_init(
                layout,
                &format!("{name}.expand"),
                [mid, out_c, 1, 1, 0],
                Init::Zeros,
                Init::Zeros,
            ),
            shortcut: (in_c != out_c || stride != 1)
                .then(|| Conv::new(layout, &format!("{name}.shortcut"), in_c, out_c, 1, stride, 0)),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<Var> {
        let h = self.reduce.forward(g, pv, x)?;
        let h = g.relu(h);
        let h = self.conv.forward(g, pv, h)?;
        let h = g.relu(h);
        let h = self.expand.forward(g, pv, h)?;
        let skip = match &self.shortcut {
            Some(sc) => sc.forward(g, pv, x)?,
            None => x,
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum))
    }

    pub fn trace(&self, s: Shape3) -> Result<(Shape3, u64)> {
        let (a, m1) = self.reduce.trace(s)?;
        let (b, m2) = self.conv.trace(a)?;
        let (c, m3) = self.expand.trace(b)?;
        let m4 = match &self.shortcut {
            Some(sc) => sc.trace(s)?.1,
            None => 0,
        };
        Ok((c, m1 + m2 + m3 + m4))
    }
}

/// Four parallel branches concatenated along channels:
/// 1x1 | 1x1 -> 3x3 | 1x1 -> 3x3 -> 3x3 | 3x3 avg-pool -> 1x1.
/// Every conv is followed by relu; spatial size is preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct Inception {
    pub branch1: Conv,
    pub branch3: [Conv; 2],
    pub branch5: [Conv; 3],
    pub branch_pool: Conv,
}

impl Inception {
    pub fn new(layout: &mut Layout, name: &str, in_c: usize, widths: [usize; 4]) -> Self {
        let [w1, w3, w5, wp] = widths;
        Inception {
            branch1: Conv::new(layout, &format!("{name}.b1"), in_c, w1, 1, 1, 0),
            branch3: [
                Conv::new(layout, &format!("{name}.b3_reduce"), in_c, w3, 1, 1, 0),
                Conv::same(layout, &format!("{name}.b3"), w3, w3, 3, 1),
            ],
            branch5: [
                Conv::new(layout, &format!("{name}.b5_reduce"), in_c, w5, 1, 1, 0),
                Conv::same(layout, &format!("{name}.b5a"), w5, w5, 3, 1),
                Conv::same(layout, &format!("{name}.b5b"), w5, w5, 3, 1),
            ],
            branch_pool: Conv::new(layout, &format!("{name}.bpool"), in_c, wp, 1, 1, 0),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.branch1.out_channels
            + self.branch3[1].out_channels
            + self.branch5[2].out_channels
            + self.branch_pool.out_channels
    }

    fn chain<T: Real>(g: &mut Graph<T>, pv: &[Var], convs: &[Conv], x: Var) -> Result<Var> {
        let mut h = x;
        for conv in convs {
            h = conv.forward(g, pv, h)?;
            h = g.relu(h);
        }
        Ok(h)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<Var> {
        let a = Self::chain(g, pv, std::slice::from_ref(&self.branch1), x)?;
        let b = Self::chain(g, pv, &self.branch3, x)?;
        let c = Self::chain(g, pv, &self.branch5, x)?;
        let pooled = g.avg_pool2d(x, 3, 1, 1)?;
        let d = Self::chain(g, pv, std::slice::from_ref(&self.branch_pool), pooled)?;
        g.concat(&[a, b, c, d])
    }

    pub fn trace(&self, s: Shape3) -> Result<(Shape3, u64)> {
        let mut macs = self.branch1.trace(s)?.1 + self.branch_pool.trace(s)?.1;
        for chain in [&self.branch3[..], &self.branch5[..]] {
            let mut shape = s;
            for conv in chain {
                let (next, m) = conv.trace(shape)?;
                shape = next;
                macs += m;
            }
        }
        Ok(([self.out_channels(), s[1], s[2]], macs))
    }
}

/// Convolutional block attention: channel attention from a shared two-layer
/// MLP over average- and max-pooled descriptors, then spatial attention from
/// a 7x7 convolution over the channel-wise mean and max maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Cbam {
    pub fc1: Conv,
    pub fc2: Conv,
    pub spatial: Conv,
    pub channels: usize,
}

/// Outputs of [`Cbam::forward_maps`].
#[derive(Debug, Clone, Copy)]
pub struct CbamMaps {
    pub output: Var,
    /// `N x C x 1 x 1`
    pub channel: Var,
    /// `N x 1 x H x W`
    pub spatial: Var,
}

/// Initial pre-sigmoid value of both attention gates. The gate-producing
/// layers start with zero weights, so a fresh CBAM scales its input by
/// `sigmoid(GATE_BIAS)^2` (about 0.78) everywhere; stacks of five stay trainable.
pub const GATE_BIAS: f64 = 2.0;

impl Cbam {
    pub fn new(layout: &mut Layout, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::InvalidArgument(format!(
                "CBAM reduction ratio {reduction} must divide channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Cbam {
            fc1: Conv::new(layout, &format!("{name}.mlp1"), channels, hidden, 1, 1, 0),
            fc2: Conv::with_init(
                layout,
                &format!("{name}.mlp2"),
                [hidden, channels, 1, 1, 0],
                Init::Zeros,
                Init::Constant(GATE_BIAS / 2.0),
            ),
            spatial: Conv::with_init(
                layout,
                &format!("{name}.spatial"),
                [2, 1, 7, 1, 3],
                Init::Zeros,
                Init::Constant(GATE_BIAS),
            ),
            channels,
        })
    }

    fn mlp<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, pv, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, pv, h)
    }

    pub fn forward_maps<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<CbamMaps> {
        let avg = g.adaptive_avg_pool2d(x, 1, 1)?;
        let max = g.global_max_pool(x)?;
        let a = self.mlp(g, pv, avg)?;
        let m = self.mlp(g, pv, max)?;
        let logits = g.add(a, m)?;
        let channel = g.sigmoid(logits);
        let refined = g.mul(x, channel)?;

        let mean_map = g.channel_mean(refined)?;
        let max_map = g.channel_max(refined)?;
        let stacked = g.concat(&[mean_map, max_map])?;
        let s = self.spatial.forward(g, pv, stacked)?;
        let spatial = g.sigmoid(s);
        let output = g.mul(refined, spatial)?;
        Ok(CbamMaps {
            output,
            channel,
            spatial,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<Var> {
        Ok(self.forward_maps(g, pv, x)?.output)
    }

    pub fn trace(&self, s: Shape3) -> Result<(Shape3, u64)> {
        if s[0] != self.channels {
            return Err(Error::shape(
                "cbam",
                format!("{s:?} into CBAM over {} channels", self.channels),
            ));
        }
        let (hidden, m1) = self.fc1.trace([s[0], 1, 1])?;
        let (_, m2) = self.fc2.trace(hidden)?;
        let (_, m3) = self.spatial.trace([2, s[1], s[2]])?;
        // The shared MLP runs on both descriptors.
        Ok((s, 2 * (m1 + m2) + m3))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Basic,
    Bottleneck,
    Inception,
    Cbam,
}

/// Declarative description of a single block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub cbam_reduction: usize,
    pub inception_branch_widths: [usize; 4],
}

impl BlockSpec {
    pub fn basic(in_c: usize, out_c: usize, stride: usize) -> Self {
        Self::with_kind(BlockKind::Basic, in_c, out_c, stride)
    }

    pub fn bottleneck(in_c: usize, out_c: usize, stride: usize) -> Self {
        Self::with_kind(BlockKind::Bottleneck, in_c, out_c, stride)
    }

    pub fn inception(in_c: usize, widths: [usize; 4]) -> Self {
        BlockSpec {
            inception_branch_widths: widths,
            ..Self::with_kind(BlockKind::Inception, in_c, widths.iter().sum(), 1)
        }
    }

    pub fn cbam(channels: usize, reduction: usize) -> Self {
        BlockSpec {
            cbam_reduction: reduction,
            ..Self::with_kind(BlockKind::Cbam, channels, channels, 1)
        }
    }

    fn with_kind(kind: BlockKind, in_c: usize, out_c: usize, stride: usize) -> Self {
        BlockSpec {
            kind,
            in_channels: in_c,
            out_channels: out_c,
            stride,
            cbam_reduction: 1,
            inception_branch_widths: [0; 4],
        }
    }
}

/// A constructed block of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Basic(ResidualBlock),
    Bottleneck(Bottleneck),
    Inception(Inception),
    Cbam(Cbam),
}

impl Block {
    pub fn build(layout: &mut Layout, name: &str, spec: &BlockSpec) -> Result<Self> {
        if spec.in_channels == 0 || spec.out_channels == 0 || spec.stride == 0 {
            return Err(Error::InvalidArgument(format!("degenerate block spec {spec:?}")));
        }
        Ok(match spec.kind {
            BlockKind::Basic => Block::Basic(ResidualBlock::basic(
                layout,
                name,
                spec.in_channels,
                spec.out_channels,
                spec.stride,
            )),
            BlockKind::Bottleneck => Block::Bottleneck(Bottleneck::new(
                layout,
                name,
                spec.in_channels,
                spec.out_channels,
                spec.stride,
            )),
            BlockKind::Inception => {
                if spec.inception_branch_widths.contains(&0) {
                    return Err(Error::InvalidArgument(
                        "inception branch widths must be positive".into(),
                    ));
                }
                Block::Inception(Inception::new(
                    layout,
                    name,
                    spec.in_channels,
                    spec.inception_branch_widths,
                ))
            }
            BlockKind::Cbam => Block::Cbam(Cbam::new(layout, name, spec.in_channels, spec.cbam_reduction)?),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<Var> {
        match self {
            Block::Basic(b) => b.forward(g, pv, x),
            Block::Bottleneck(b) => b.forward(g, pv, x),
            Block::Inception(b) => b.forward(g, pv, x),
            Block::Cbam(b) => b.forward(g, pv, x),
        }
    }

    pub fn trace(&self, s: Shape3) -> Result<(Shape3, u64)> {
        match self {
            Block::Basic(b) => b.trace(s),
            Block::Bottleneck(b) => b.trace(s),
            Block::Inception(b) => b.trace(s),
            Block::Cbam(b) => b.trace(s),
        }
    }
}

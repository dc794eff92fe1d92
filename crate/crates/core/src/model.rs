//! The dual-branch network: a ResNet global branch, an Inception local
//! branch, the CBAM-based fusion module and a linear classifier head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{trace_pool, Cbam, Conv, Inception, Linear, ResidualBlock, Shape3};
use crate::params::{Init, Layout, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::NUM_REGIONS;

/// Which branches and which fusion a network uses (the ablation rows).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "GFEM")]
    Gfem,
    #[serde(rename = "LFEM")]
    Lfem,
    #[serde(rename = "DBFEM")]
    Dbfem,
    #[serde(rename = "DBFEM+CAFFM")]
    DbfemCaffm,
    #[serde(rename = "DBFEM+CAFFM_L")]
    DbfemCaffmLocal,
    #[serde(rename = "DBFEM+CAFFM_G")]
    DbfemCaffmGlobal,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Gfem,
        Variant::Lfem,
        Variant::Dbfem,
        Variant::DbfemCaffm,
        Variant::DbfemCaffmLocal,
        Variant::DbfemCaffmGlobal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gfem => "GFEM",
            Variant::Lfem => "LFEM",
            Variant::Dbfem => "DBFEM",
            Variant::DbfemCaffm => "DBFEM+CAFFM",
            Variant::DbfemCaffmLocal => "DBFEM+CAFFM_L",
            Variant::DbfemCaffmGlobal => "DBFEM+CAFFM_G",
        }
    }

    /// Row label used in the feature-module ablation table.
    pub fn table_label(self) -> &'static str {
        match self {
            Variant::Lfem => "LTFEM",
            other => other.name(),
        }
    }

    pub fn uses_global(self) -> bool {
        self != Variant::Lfem
    }

    pub fn uses_local(self) -> bool {
        self != Variant::Gfem
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "LTFEM" {
            return Ok(Variant::Lfem);
        }
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Paper,
    Desk,
}

/// Declarative description of a network variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub scale: Scale,
    /// Image channels: 1 for grayscale, 3 for color.
    pub in_channels: usize,
    /// Global (face) input `[H, W]`.
    pub global_size: [usize; 2],
    /// Size of each of the five region crops `[H, W]`.
    pub region_size: [usize; 2],
    /// 12, 18 or 34.
    pub resnet_depth: usize,
    pub stem_width: usize,
    pub stem_stride: usize,
    pub stage_widths: [usize; 4],
    pub inception_stem_width: usize,
    pub inception_stem_stride: usize,
    pub inception_widths: [usize; 4],
    pub inception_stack_depth: usize,
    /// Channels of each aligned branch feature.
    pub fused_channels: usize,
    /// Common spatial size `[H, W]` both branch features are pooled to.
    pub fusion_grid: [usize; 2],
    pub num_classes: usize,
    pub cbam_reduction: usize,
}

impl ModelConfig {
    /// Small network used for the synthetic task, tests and CPU experiments.
    pub fn desk() -> Self {
        ModelConfig {
            variant: Variant::DbfemCaffm,
            scale: Scale::Desk,
            in_channels: 1,
            global_size: [40, 32],
            region_size: [16, 16],
            resnet_depth: 12,
            stem_width: 8,
            stem_stride: 2,
            stage_widths: [8, 16, 32, 64],
            inception_stem_width: 16,
            inception_stem_stride: 1,
            inception_widths: [8, 8, 8, 8],
            inception_stack_depth: 2,
            fused_channels: 16,
            fusion_grid: [4, 4],
            num_classes: 5,
            cbam_reduction: 4,
        }
    }

    /// Full-size network on 282x231 color faces.
    pub fn paper() -> Self {
        ModelConfig {
            variant: Variant::DbfemCaffm,
            scale: Scale::Paper,
            in_channels: 3,
            global_size: [282, 231],
            region_size: [64, 64],
            resnet_depth: 12,
            stem_width: 32,
            stem_stride: 2,
            stage_widths: [48, 96, 192, 288],
            inception_stem_width: 128,
            inception_stem_stride: 1,
            inception_widths: [96, 192, 96, 96],
            inception_stack_depth: 4,
            fused_channels: 256,
            fusion_grid: [7, 7],
            num_classes: 5,
            cbam_reduction: 16,
        }
    }

    /// Tiny network for finite-difference checks of the whole model.
    pub fn tiny() -> Self {
        ModelConfig {
            global_size: [16, 16],
            region_size: [8, 8],
            stem_width: 4,
            stage_widths: [4, 4, 8, 8],
            inception_stem_width: 4,
            inception_widths: [2, 2, 2, 2],
            inception_stack_depth: 1,
            fused_channels: 4,
            fusion_grid: [2, 2],
            cbam_reduction: 2,
            ..Self::desk()
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        ModelConfig {
            variant,
            ..self.clone()
        }
    }

    /// Per-item shape of the global input `[C, H, W]`.
    pub fn global_input(&self) -> Shape3 {
        [self.in_channels, self.global_size[0], self.global_size[1]]
    }

    /// Per-item shape of the stacked region input `[5*C, h, w]`.
    pub fn region_input(&self) -> Shape3 {
        [NUM_REGIONS * self.in_channels, self.region_size[0], self.region_size[1]]
    }

    pub fn blocks_per_stage(&self) -> Result<[usize; 4]> {
        match self.resnet_depth {
            12 => Ok([1, 1, 1, 1]),
            18 => Ok([2, 2, 2, 2]),
            34 => Ok([3, 4, 6, 3]),
            d => Err(Error::Config(format!(
                "unsupported resnet_depth {d} (expected 12, 18 or 34)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.blocks_per_stage()?;
        let positive = [
            ("in_channels", self.in_channels),
            ("stem_width", self.stem_width),
            ("stem_stride", self.stem_stride),
            ("inception_stem_width", self.inception_stem_width),
            ("inception_stem_stride", self.inception_stem_stride),
            ("fused_channels", self.fused_channels),
            ("num_classes", self.num_classes),
            ("cbam_reduction", self.cbam_reduction),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if self.stage_widths.contains(&0) || self.inception_widths.contains(&0) {
            return Err(Error::Config("stage and inception widths must be positive".into()));
        }
        if self.global_size.contains(&0) || self.region_size.contains(&0) || self.fusion_grid.contains(&0) {
            return Err(Error::Config("spatial sizes must be positive".into()));
        }
        let attends = matches!(
            self.variant,
            Variant::DbfemCaffm | Variant::DbfemCaffmLocal | Variant::DbfemCaffmGlobal
        );
        if attends && (self.fusion_grid[0] < 2 || self.fusion_grid[1] < 2) {
            return Err(Error::Config(
                "fusion_grid must be at least 2x2 for attention fusion".into(),
            ));
        }
        Ok(())
    }
}

/// ResNet global branch. The ResNet12 layout is a stem conv followed by four
/// stages of one three-conv residual block; ResNet18/34 stack basic blocks.
/// A 2x2 max pool separates stages.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalBranch {
    pub stem: Conv,
    pub stages: Vec<Vec<ResidualBlock>>,
    pub project: Conv,
    pub grid: [usize; 2],
}

impl GlobalBranch {
    pub fn new(layout: &mut Layout, cfg: &ModelConfig) -> Result<Self> {
        let stem = Conv::same(layout, "gfem.stem", cfg.in_channels, cfg.stem_width, 3, cfg.stem_stride);
        let blocks = cfg.blocks_per_stage()?;
        let convs_per_block = if cfg.resnet_depth == 12 { 3 } else { 2 };
        let mut in_c = cfg.stem_width;
        let mut stages = Vec::new();
        for (s, (&width, &count)) in cfg.stage_widths.iter().zip(&blocks).enumerate() {
            let stage = (0..count)
                .map(|b| {
                    let block_in = if b == 0 { in_c } else { width };
                    ResidualBlock::new(
                        layout,
                        &format!("gfem.stage{}.block{}", s + 1, b + 1),
                        block_in,
                        width,
                        1,
                        convs_per_block,
                    )
                })
                .collect();
            stages.push(stage);
            in_c = width;
        }
        let project = Conv::new(layout, "gfem.project", in_c, cfg.fused_channels, 1, 1, 0);
        Ok(GlobalBranch {
            stem,
            stages,
            project,
            grid: cfg.fusion_grid,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<Var> {
        let h = self.stem.forward(g, pv, x)?;
        let mut h = g.relu(h);
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                h = g.max_pool2d(h, 2, 2)?;
            }
            for block in stage {
                h = block.forward(g, pv, h)?;
            }
        }
        let pooled = g.adaptive_avg_pool2d(h, self.grid[0], self.grid[1])?;
        self.project.forward(g, pv, pooled)
    }

    pub fn trace(&self, s: Shape3) -> Result<(Shape3, u64)> {
        let (mut shape, mut macs) = self.stem.trace(s)?;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                shape = trace_pool(shape, 2)?;
            }
            for block in stage {
                let (next, m) = block.trace(shape)?;
                shape = next;
                macs += m;
            }
        }
        let (out, m) = self.project.trace([shape[0], self.grid[0], self.grid[1]])?;
        Ok((out, macs + m))
    }
}

/// Inception local branch over the channel-stacked region crops.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalBranch {
    pub stem: Conv,
    pub modules: Vec<Inception>,
    pub project: Conv,
    pub grid: [usize; 2],
    pub in_channels: usize,
}

impl LocalBranch {
    pub fn new(layout: &mut Layout, cfg: &ModelConfig) -> Self {
        let in_channels = NUM_REGIONS * cfg.in_channels;
        let stem = Conv::same(
            layout,
            "lfem.stem",
            in_channels,
            cfg.inception_stem_width,
            3,
            cfg.inception_stem_stride,
        );
        let mut in_c = cfg.inception_stem_width;
        let modules = (0..cfg.inception_stack_depth)
            .map(|i| {
                let m = Inception::new(layout, &format!("lfem.inception{}", i + 1), in_c, cfg.inception_widths);
                in_c = m.out_channels();
                m
            })
            .collect();
        let project = Conv::new(layout, "lfem.project", in_c, cfg.fused_channels, 1, 1, 0);
        LocalBranch {
            stem,
            modules,
            project,
            grid: cfg.fusion_grid,
            in_channels,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_channels {
            return Err(Error::shape(
                "lfem",
                format!("region stack {:?} must have {} channels", g.shape(x), self.in_channels),
            ));
        }
        let h = self.stem.forward(g, pv, x)?;
        let mut h = g.relu(h);
        for m in &self.modules {
            h = m.forward(g, pv, h)?;
        }
        let pooled = g.adaptive_avg_pool2d(h, self.grid[0], self.grid[1])?;
        self.project.forward(g, pv, pooled)
    }

    pub fn trace(&self, s: Shape3) -> Result<(Shape3, u64)> {
        let (mut shape, mut macs) = self.stem.trace(s)?;
        for m in &self.modules {
            let (next, mm) = m.trace(shape)?;
            shape = next;
            macs += mm;
        }
        let (out, m) = self.project.trace([shape[0], self.grid[0], self.grid[1]])?;
        Ok((out, macs + m))
    }
}

/// Three CBAMs, relu and a residual tap on the input, then two more CBAMs
/// and a final relu.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    pub first: Vec<Cbam>,
    pub second: Vec<Cbam>,
}

/// Intermediate tensors of [`AttentionStack::forward_stages`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionStages {
    /// Input to the stack.
    pub z0: Var,
    /// After the first three CBAMs.
    pub z1: Var,
    /// `relu(z1) + z0`.
    pub z2: Var,
    /// After the last two CBAMs.
    pub z3: Var,
    /// `relu(z3)`.
    pub activated: Var,
}

impl AttentionStack {
    pub fn new(layout: &mut Layout, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        let first = (1..=3)
            .map(|i| Cbam::new(layout, &format!("{name}.cbam{i}"), channels, reduction))
            .collect::<Result<_>>()?;
        let second = (4..=5)
            .map(|i| Cbam::new(layout, &format!("{name}.cbam{i}"), channels, reduction))
            .collect::<Result<_>>()?;
        Ok(AttentionStack { first, second })
    }

    pub fn forward_stages<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], z0: Var) -> Result<AttentionStages> {
        let mut z1 = z0;
        for c in &self.first {
            z1 = c.forward(g, pv, z1)?;
        }
        let r = g.relu(z1);
        let z2 = g.add(r, z0)?;
        let mut z3 = z2;
        for c in &self.second {
            z3 = c.forward(g, pv, z3)?;
        }
        let activated = g.relu(z3);
        Ok(AttentionStages {
            z0,
            z1,
            z2,
            z3,
            activated,
        })
    }

    pub fn trace(&self, s: Shape3) -> Result<u64> {
        self.first
            .iter()
            .chain(&self.second)
            .map(|c| c.trace(s).map(|r| r.1))
            .sum()
    }
}

/// How the branch features are combined before the head.
#[derive(Debug, Clone, PartialEq)]
pub enum Fusion {
    /// One branch feeds the head directly.
    Single,
    /// Plain channel concatenation.
    Concat,
    /// Attention over the concatenated features, then 2x2 max pool.
    Caffm(AttentionStack),
    /// Attention over the local feature only, concat, then 2x2 max pool.
    LocalOnly(AttentionStack),
    /// Attention over the global feature only, concat, then 2x2 max pool.
    GlobalOnly(AttentionStack),
}

/// Branch and fusion outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace {
    pub global_feature: Option<Var>,
    pub local_feature: Option<Var>,
    pub attention: Option<AttentionStages>,
    pub fused: Var,
    pub logits: Var,
}

/// The assembled architecture. Holds parameter handles only; values live in
/// a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct DbfemNet {
    config: ModelConfig,
    layout: Layout,
    pub global: Option<GlobalBranch>,
    pub local: Option<LocalBranch>,
    pub fusion: Fusion,
    pub head: Linear,
}

impl DbfemNet {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = Layout::new();
        let v = config.variant;
        let global = if v.uses_global() {
            Some(GlobalBranch::new(&mut layout, config)?)
        } else {
            None
        };
        let local = v.uses_local().then(|| LocalBranch::new(&mut layout, config));
        let c = config.fused_channels;
        let r = config.cbam_reduction;
        let fusion = match v {
            Variant::Gfem | Variant::Lfem => Fusion::Single,
            Variant::Dbfem => Fusion::Concat,
            Variant::DbfemCaffm => Fusion::Caffm(AttentionStack::new(&mut layout, "caffm", 2 * c, r)?),
            Variant::DbfemCaffmLocal => Fusion::LocalOnly(AttentionStack::new(&mut layout, "caffm_l", c, r)?),
            Variant::DbfemCaffmGlobal => Fusion::GlobalOnly(AttentionStack::new(&mut layout, "caffm_g", c, r)?),
        };
        let head_in = if matches!(fusion, Fusion::Single) { c } else { 2 * c };
        let head = Linear::new(&mut layout, "head", head_in, config.num_classes, Init::Zeros);
        Ok(DbfemNet {
            config: config.clone(),
            layout,
            global,
            local,
            fusion,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn forward_trace<T: Real>(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        global: Option<Var>,
        regions: Option<Var>,
    ) -> Result<ForwardTrace> {
        let v = self.config.variant;
        let global_feature = match (&self.global, global) {
            (Some(branch), Some(x)) => Some(branch.forward(g, pv, x)?),
            (Some(_), None) => {
                return Err(Error::InvalidArgument(format!(
                    "variant {v} needs the global face image"
                )))
            }
            (None, _) => None,
        };
        let local_feature = match (&self.local, regions) {
            (Some(branch), Some(x)) => Some(branch.forward(g, pv, x)?),
            (Some(_), None) => return Err(Error::InvalidArgument(format!("variant {v} needs the region stack"))),
            (None, _) => None,
        };
        if let (Some(fg), Some(fl)) = (global_feature, local_feature) {
            if g.shape(fg) != g.shape(fl) {
                return Err(Error::shape(
                    "fusion",
                    format!("global feature {:?} vs local feature {:?}", g.shape(fg), g.shape(fl)),
                ));
            }
        }
        let mut attention = None;
        let fused = match &self.fusion {
            Fusion::Single => global_feature.or(local_feature).expect("one branch present"),
            Fusion::Concat => g.concat(&[global_feature.unwrap(), local_feature.unwrap()])?,
            Fusion::Caffm(stack) => {
                let z0 = g.concat(&[global_feature.unwrap(), local_feature.unwrap()])?;
                let stages = stack.forward_stages(g, pv, z0)?;
                attention = Some(stages);
                g.max_pool2d(stages.activated, 2, 2)?
            }
            Fusion::LocalOnly(stack) => {
                let stages = stack.forward_stages(g, pv, local_feature.unwrap())?;
                attention = Some(stages);
                let z = g.concat(&[global_feature.unwrap(), stages.activated])?;
                g.max_pool2d(z, 2, 2)?
            }
            Fusion::GlobalOnly(stack) => {
                let stages = stack.forward_stages(g, pv, global_feature.unwrap())?;
                attention = Some(stages);
                let z = g.concat(&[stages.activated, local_feature.unwrap()])?;
                g.max_pool2d(z, 2, 2)?
            }
        };
        let pooled = g.adaptive_avg_pool2d(fused, 1, 1)?;
        let n = g.shape(pooled)[0];
        let flat = g.reshape(pooled, &[n, self.head.in_features])?;
        let logits = self.head.forward(g, pv, flat)?;
        Ok(ForwardTrace {
            global_feature,
            local_feature,
            attention,
            fused,
            logits,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        global: Option<Var>,
        regions: Option<Var>,
    ) -> Result<Var> {
        Ok(self.forward_trace(g, pv, global, regions)?.logits)
    }

    /// Multiply-accumulates of one forward pass for a single item.
    pub fn trace_macs(&self, global: Shape3, regions: Shape3) -> Result<u64> {
        let mut macs = 0;
        let mut feature = None;
        if let Some(b) = &self.global {
            let (s, m) = b.trace(global)?;
            macs += m;
            feature = Some(s);
        }
        if let Some(b) = &self.local {
            let (s, m) = b.trace(regions)?;
            macs += m;
            feature = Some(s);
        }
        let [c, h, w] = feature.expect("at least one branch");
        macs += match &self.fusion {
            Fusion::Single | Fusion::Concat => 0,
            Fusion::Caffm(stack) => stack.trace([2 * c, h, w])?,
            Fusion::LocalOnly(stack) | Fusion::GlobalOnly(stack) => stack.trace([c, h, w])?,
        };
        Ok(macs + self.head.macs())
    }
}

/// Exact number of learnable scalars of a configuration.
pub fn param_count(config: &ModelConfig) -> Result<u64> {
    Ok(DbfemNet::new(config)?.layout().param_count())
}

/// Per-item input shapes for [`flops_estimate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub global: Shape3,
    pub regions: Shape3,
}

impl InputShape {
    pub fn of(config: &ModelConfig) -> Self {
        InputShape {
            global: config.global_input(),
            regions: config.region_input(),
        }
    }
}

/// Analytic multiply-accumulate count of one forward pass for one item.
/// Convolutions and the linear head are counted; pooling and pointwise ops
/// are not.
pub fn flops_estimate(config: &ModelConfig, input: &InputShape) -> Result<u64> {
    DbfemNet::new(config)?.trace_macs(input.global, input.regions)
}

/// A network with parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dbfem<T> {
    net: DbfemNet,
    params: ParamStore<T>,
}

impl<T: Real> Dbfem<T> {
    /// Builds a freshly initialised network. The classifier head starts at
    /// zero so the initial posterior is uniform.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let net = DbfemNet::new(config)?;
        let params = ParamStore::init(net.layout(), seed);
        Ok(Dbfem { net, params })
    }

    pub fn from_parts(net: DbfemNet, params: ParamStore<T>) -> Result<Self> {
        if params.layout() != net.layout() {
            return Err(Error::Checkpoint("parameter layout does not match the network".into()));
        }
        Ok(Dbfem { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn net(&self) -> &DbfemNet {
        &self.net
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> u64 {
        self.params.layout().param_count()
    }

    pub fn cast<U: Real>(&self) -> Dbfem<U> {
        Dbfem {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    /// Forward pass without gradient bookkeeping; returns `N x classes`.
    pub fn logits(&self, global: Option<&Tensor<T>>, regions: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let pv = self.params.attach(&mut g, false);
        let gv = global.map(|t| g.constant(t.clone()));
        let rv = regions.map(|t| g.constant(t.clone()));
        let out = self.net.forward(&mut g, &pv, gv, rv)?;
        Ok(g.value(out).clone())
    }

    /// Mean cross-entropy on a batch with gradients for every parameter.
    pub fn loss_and_grads(
        &self,
        global: Option<&Tensor<T>>,
        regions: Option<&Tensor<T>>,
        labels: &[usize],
    ) -> Result<(T, Tensor<T>, Vec<Vec<T>>)> {
        let mut g = Graph::new();
        let pv = self.params.attach(&mut g, true);
        let gv = global.map(|t| g.constant(t.clone()));
        let rv = regions.map(|t| g.constant(t.clone()));
        let logits = self.net.forward(&mut g, &pv, gv, rv)?;
        let loss = g.softmax_cross_entropy(logits, labels)?;
        let mut grads = g.backward(loss)?;
        let grads = pv
            .iter()
            .zip(self.params.tensors())
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| vec![T::zero(); p.numel()]))
            .collect();
        Ok((g.value(loss).data()[0], g.value(logits).clone(), grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert_eq!("LTFEM".parse::<Variant>().unwrap(), Variant::Lfem);
        assert!("ResNet".parse::<Variant>().is_err());
    }

    #[test]
    fn unsupported_depth_rejected() {
        let cfg = ModelConfig {
            resnet_depth: 50,
            ..ModelConfig::desk()
        };
        assert!(DbfemNet::new(&cfg).is_err());
    }

    #[test]
    fn resnet12_has_twelve_block_convs() {
        let net = DbfemNet::new(&ModelConfig::desk()).unwrap();
        let g = net.global.as_ref().unwrap();
        let convs: usize = g.stages.iter().flatten().map(|b| b.convs.len()).sum();
        assert_eq!(convs, 12);
    }

    #[test]
    fn attention_fusion_needs_room_to_pool() {
        let cfg = ModelConfig {
            fusion_grid: [1, 1],
            ..ModelConfig::desk()
        };
        assert!(cfg.validate().is_err());
        assert!(cfg.with_variant(Variant::Dbfem).validate().is_ok());
    }
}

//! Building blocks of the macro network.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BnParams, Ctx, LinearParams, ParamBuilder, ParamId};
use crate::tensor::{Element, Tensor};

use super::candidate::CandidateSpec;

/// Bottleneck ratios inside a CBlock.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    /// Squeeze/restore ratio of the 1x1 convolutions around the branches.
    pub reduction: usize,
    /// Hidden-layer ratio of the fusion gate.
    pub gate_reduction: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            reduction: 4,
            gate_reduction: 4,
        }
    }
}

/// 1x1 pointwise -> 3x3 depthwise -> BN -> ReLU.
#[derive(Clone, Debug)]
pub struct LiteUnit {
    pointwise: ParamId,
    depthwise: ParamId,
    bn: BnParams,
}

impl LiteUnit {
    pub fn build<T: Element>(b: &mut ParamBuilder<T>, channels: usize) -> Result<Self> {
        Ok(Self {
            pointwise: b.conv("pw", channels, channels, 1)?,
            depthwise: b.conv("dw", channels, 1, 3)?,
            bn: b.batch_norm("bn", channels)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (pw, dw) = (ctx.p(self.pointwise), ctx.p(self.depthwise));
        let y = ctx.tape.pointwise(x, pw)?;
        let y = ctx.tape.depthwise3x3(y, dw)?;
        let y = ctx.batch_norm(&self.bn, y)?;
        ctx.tape.relu(y)
    }
}

/// `floor(k/2)` chained Lite units: a `k x k` receptive field.
#[derive(Clone, Debug)]
pub struct Lite {
    pub kernel: usize,
    units: Vec<LiteUnit>,
}

impl Lite {
    pub fn build<T: Element>(b: &mut ParamBuilder<T>, kernel: usize, channels: usize) -> Result<Self> {
        if kernel < 3 || kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "lite kernel must be odd and at least 3, got {kernel}"
            )));
        }
        let units = (0..kernel / 2)
            .map(|i| b.scoped(format!("unit{i}"), |b| LiteUnit::build(b, channels)))
            .collect::<Result<_>>()?;
        Ok(Self { kernel, units })
    }

    pub fn depth(&self) -> usize {
        self.units.len()
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, mut x: Var) -> Result<Var> {
        for u in &self.units {
            x = u.forward(ctx, x)?;
        }
        Ok(x)
    }
}

/// Per-channel sigmoid weights from the pooled block input.
#[derive(Clone, Debug)]
pub struct FusionGate {
    fc1: LinearParams,
    fc2: LinearParams,
}

impl FusionGate {
    pub fn build<T: Element>(b: &mut ParamBuilder<T>, input: usize, hidden: usize, output: usize) -> Result<Self> {
        Ok(Self {
            fc1: b.linear("fc1", hidden, input, true)?,
            fc2: b.linear("fc2", output, hidden, true)?,
        })
    }

    /// `(N, C, H, W) -> (N, output)` weights in `(0, 1)`.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let pooled = ctx.tape.global_avg_pool(x)?;
        let h = ctx.linear(&self.fc1, pooled)?;
        let h = ctx.tape.relu(h)?;
        let g = ctx.linear(&self.fc2, h)?;
        ctx.tape.sigmoid(g)
    }
}

/// Combined-kernel residual block.
#[derive(Clone, Debug)]
pub struct CBlock {
    pub channels: usize,
    pub mid: usize,
    squeeze: ParamId,
    squeeze_bn: BnParams,
    pub lite1: Lite,
    pub lite2: Lite,
    gate: FusionGate,
    restore: ParamId,
    restore_bn: BnParams,
}

impl CBlock {
    pub fn build<T: Element>(
        b: &mut ParamBuilder<T>,
        k1: usize,
        k2: usize,
        channels: usize,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        if channels < cfg.reduction || channels < cfg.gate_reduction {
            return Err(Error::InvalidArgument(format!(
                "cblock needs at least {} channels, got {channels}",
                cfg.reduction.max(cfg.gate_reduction)
            )));
        }
        let mid = channels / cfg.reduction;
        let hidden = channels / cfg.gate_reduction;
        Ok(Self {
            channels,
            mid,
            squeeze: b.conv("squeeze", mid, channels, 1)?,
            squeeze_bn: b.batch_norm("squeeze_bn", mid)?,
            lite1: b.scoped("lite1", |b| Lite::build(b, k1, mid))?,
            lite2: b.scoped("lite2", |b| Lite::build(b, k2, mid))?,
            gate: b.scoped("gate", |b| FusionGate::build(b, channels, hidden, mid))?,
            restore: b.conv("restore", channels, mid, 1)?,
            restore_bn: b.batch_norm("restore_bn", channels)?,
        })
    }

    /// `w1 * a + (1 - w1) * b` with per-sample, per-channel `w1`.
    pub fn fuse<T: Element>(ctx: &mut Ctx<T>, a: Var, b: Var, w1: Var) -> Result<Var> {
        let w2 = ctx.tape.affine(w1, -T::one(), T::one())?;
        ctx.tape.channel_weighted_sum(a, w1, b, w2)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x).get(1).copied();
        if c != Some(self.channels) {
            return Err(Error::ShapeMismatch {
                op: "cblock",
                lhs: ctx.tape.shape(x).to_vec(),
                rhs: vec![self.channels],
            });
        }
        let w = ctx.p(self.squeeze);
        let s = ctx.tape.pointwise(x, w)?;
        let s = ctx.batch_norm(&self.squeeze_bn, s)?;
        let s = ctx.tape.relu(s)?;
        let a = self.lite1.forward(ctx, s)?;
        let b = self.lite2.forward(ctx, s)?;
        let w1 = self.gate.forward(ctx, x)?;
        let fused = Self::fuse(ctx, a, b, w1)?;
        let w = ctx.p(self.restore);
        let y = ctx.tape.pointwise(fused, w)?;
        let y = ctx.batch_norm(&self.restore_bn, y)?;
        ctx.tape.add(x, y)
    }
}

/// `r` chained CBlocks sharing one kernel pair.
#[derive(Clone, Debug)]
pub struct CdBlock {
    pub spec: CandidateSpec,
    pub blocks: Vec<CBlock>,
}

impl CdBlock {
    pub fn build<T: Element>(
        b: &mut ParamBuilder<T>,
        spec: CandidateSpec,
        channels: usize,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        let blocks = (0..spec.r)
            .map(|i| b.scoped(format!("cblock{i}"), |b| CBlock::build(b, spec.k1, spec.k2, channels, cfg)))
            .collect::<Result<_>>()?;
        Ok(Self { spec, blocks })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, mut x: Var) -> Result<Var> {
        for blk in &self.blocks {
            x = blk.forward(ctx, x)?;
        }
        Ok(x)
    }
}

/// 1x1 convolution to the next width, then 2x2 average pooling.
#[derive(Clone, Debug)]
pub struct DownSample {
    conv: ParamId,
}

impl DownSample {
    pub fn build<T: Element>(b: &mut ParamBuilder<T>, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            conv: b.conv("conv", output, input, 1)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.conv);
        let y = ctx.tape.pointwise(x, w)?;
        ctx.tape.avg_pool2s2(y)
    }
}

/// 7x7 stride-2 convolution, BN, ReLU, then 3x3 stride-2 max pooling.
#[derive(Clone, Debug)]
pub struct Stem {
    conv: ParamId,
    bn: BnParams,
}

impl Stem {
    pub fn build<T: Element>(b: &mut ParamBuilder<T>, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            conv: b.conv("conv", output, input, 7)?,
            bn: b.batch_norm("bn", output)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.conv);
        let y = ctx.tape.conv2d(x, w, 2, 3, 1)?;
        let y = ctx.batch_norm(&self.bn, y)?;
        let y = ctx.tape.relu(y)?;
        ctx.tape.max_pool3s2(y)
    }
}

/// 1x1 convolution to the embedding width, BN, ReLU.
#[derive(Clone, Debug)]
pub struct Projection {
    conv: ParamId,
    bn: BnParams,
}

impl Projection {
    pub fn build<T: Element>(b: &mut ParamBuilder<T>, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            conv: b.conv("conv", output, input, 1)?,
            bn: b.batch_norm("bn", output)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.p(self.conv);
        let y = ctx.tape.pointwise(x, w)?;
        let y = ctx.batch_norm(&self.bn, y)?;
        ctx.tape.relu(y)
    }
}

/// Zero tensor with the shape of `x`, as a constant.
pub(crate) fn zeros_like<T: Element>(ctx: &mut Ctx<T>, x: Var) -> Var {
    let shape = ctx.tape.shape(x).to_vec();
    ctx.tape.constant(Tensor::zeros(shape))
}

//! Training heads on top of the backbone and the metric-learning losses.
//!
//! The global branch pools the final map into the triplet-space feature and
//! maps it through a bridge into the classifier. The stripe branch squeezes
//! the second-stage map, pools horizontal stripes and gives each stripe its
//! own bridge and classifier. Only the pooled features reach inference;
//! every tensor under [`HEAD_SCOPE`] may be dropped after training.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{BnParams, Ctx, LinearParams, ParamBuilder, ParamId};
use crate::space::BackboneOutput;
use crate::tensor::Element;

/// Scope of the tensors that exist only for training.
pub const HEAD_SCOPE: &str = "neck";
/// Scope of neck tensors on the inference path.
pub const EMBED_SCOPE: &str = "embed";
pub const TRIPLET_MARGIN: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NeckVariant {
    /// Dense bridge on the global feature plus stripe heads.
    Fbl,
    /// Dense bridge on the global feature only.
    Bl,
    /// Batch normalization in place of the dense bridge, no stripes.
    Bn,
}

impl NeckVariant {
    pub fn name(self) -> &'static str {
        match self {
            NeckVariant::Fbl => "fblneck",
            NeckVariant::Bl => "blneck",
            NeckVariant::Bn => "bnneck",
        }
    }
}

impl fmt::Display for NeckVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NeckVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fblneck" | "fbl" => Ok(NeckVariant::Fbl),
            "blneck" | "bl" => Ok(NeckVariant::Bl),
            "bnneck" | "bn" => Ok(NeckVariant::Bn),
            other => Err(Error::InvalidArgument(format!("unknown neck `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeckConfig {
    pub global_width: usize,
    pub partitions: usize,
    pub stripe_width: usize,
    pub classes: usize,
    pub variant: NeckVariant,
}

impl NeckConfig {
    pub fn new(global_width: usize, classes: usize, variant: NeckVariant) -> Self {
        Self {
            global_width,
            partitions: 2,
            stripe_width: 128,
            classes,
            variant,
        }
    }

    /// Stripe heads actually built (zero unless the variant has them).
    pub fn stripes(&self) -> usize {
        match self.variant {
            NeckVariant::Fbl => self.partitions,
            _ => 0,
        }
    }

    pub fn inference_width(&self) -> usize {
        self.global_width + self.stripes() * self.stripe_width
    }
}

#[derive(Clone, Debug)]
enum Bridge {
    Dense { fc: LinearParams, bn: BnParams },
    Norm { bn: BnParams },
}

#[derive(Clone, Debug)]
struct Head {
    bridge: Bridge,
    classifier: LinearParams,
}

impl Head {
    fn build<T: Element>(b: &mut ParamBuilder<T>, width: usize, classes: usize, dense: bool) -> Result<Self> {
        let bridge = if dense {
            Bridge::Dense {
                fc: b.linear("bridge", width, width, false)?,
                bn: b.batch_norm("bridge_bn", width)?,
            }
        } else {
            Bridge::Norm {
                bn: b.batch_norm("bridge_bn", width)?,
            }
        };
        Ok(Self {
            bridge,
            classifier: b.linear("classifier", classes, width, false)?,
        })
    }

    fn logits<T: Element>(&self, ctx: &mut Ctx<T>, f: Var) -> Result<Var> {
        let z = match &self.bridge {
            Bridge::Dense { fc, bn } => {
                let z = ctx.linear(fc, f)?;
                let z = ctx.batch_norm(bn, z)?;
                ctx.tape.relu(z)?
            }
            Bridge::Norm { bn } => ctx.batch_norm(bn, f)?,
        };
        ctx.linear(&self.classifier, z)
    }
}

/// Pooled features plus, when requested, their classifier logits.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub f_tri1: Var,
    pub logits1: Option<Var>,
    pub f_tri2: Vec<Var>,
    pub logits2: Vec<Var>,
    /// Stripe heads the neck was built with.
    pub stripe_heads: usize,
}

#[derive(Clone, Debug)]
pub struct Neck {
    pub config: NeckConfig,
    global: Head,
    squeeze: Option<(ParamId, BnParams)>,
    stripes: Vec<Head>,
}

impl Neck {
    /// `fmap2_channels` is required when the variant has stripe heads.
    pub fn build<T: Element>(b: &mut ParamBuilder<T>, cfg: NeckConfig, fmap2_channels: Option<usize>) -> Result<Self> {
        let dense = cfg.variant != NeckVariant::Bn;
        let global = b.scoped(HEAD_SCOPE, |b| b.scoped("global", |b| Head::build(b, cfg.global_width, cfg.classes, dense)))?;
        let mut squeeze = None;
        let mut stripes = Vec::new();
        if cfg.stripes() > 0 {
            let c2 = fmap2_channels
                .ok_or_else(|| Error::InvalidArgument("stripe heads need a second-stage feature map".into()))?;
            squeeze = Some(b.scoped(EMBED_SCOPE, |b| {
                Ok((b.conv("squeeze", cfg.stripe_width, c2, 1)?, b.batch_norm("squeeze_bn", cfg.stripe_width)?))
            })?);
            for s in 0..cfg.stripes() {
                stripes.push(b.scoped(HEAD_SCOPE, |b| {
                    b.scoped(format!("stripe{s}"), |b| Head::build(b, cfg.stripe_width, cfg.classes, true))
                })?);
            }
        }
        Ok(Self {
            config: cfg,
            global,
            squeeze,
            stripes,
        })
    }

    /// Pooled triplet-space features; no head tensor is touched.
    pub fn features<T: Element>(&self, ctx: &mut Ctx<T>, out: &BackboneOutput, stripes: bool) -> Result<(Var, Vec<Var>)> {
        if ctx.tape.shape(out.fmap3).get(1) != Some(&self.config.global_width) {
            return Err(Error::ShapeMismatch {
                op: "neck",
                lhs: ctx.tape.shape(out.fmap3).to_vec(),
                rhs: vec![self.config.global_width],
            });
        }
        let f1 = ctx.tape.global_avg_pool(out.fmap3)?;
        let mut f2 = Vec::new();
        if stripes {
            if let Some((conv, bn)) = &self.squeeze {
                let fmap2 = out
                    .fmap2
                    .ok_or_else(|| Error::InvalidArgument("backbone produced no second-stage map".into()))?;
                let w = ctx.p(*conv);
                let z = ctx.tape.pointwise(fmap2, w)?;
                let z = ctx.batch_norm(bn, z)?;
                let z = ctx.tape.relu(z)?;
                let h = ctx.tape.shape(z)[2];
                let p = self.stripes.len();
                if h % p != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "feature height {h} is not divisible by {p} partitions"
                    )));
                }
                let rows = h / p;
                for s in 0..p {
                    f2.push(ctx.tape.stripe_avg_pool(z, s * rows, (s + 1) * rows)?);
                }
            }
        }
        Ok((f1, f2))
    }

    /// Features and logits. Stripe heads run only when `stripes` is set.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, out: &BackboneOutput, stripes: bool) -> Result<FeatureBundle> {
        let (f_tri1, f_tri2) = self.features(ctx, out, stripes)?;
        let logits1 = Some(self.global.logits(ctx, f_tri1)?);
        let logits2 = f_tri2
            .iter()
            .zip(&self.stripes)
            .map(|(&f, head)| head.logits(ctx, f))
            .collect::<Result<_>>()?;
        Ok(FeatureBundle {
            f_tri1,
            logits1,
            f_tri2,
            logits2,
            stripe_heads: self.stripes.len(),
        })
    }

    /// `[f_tri1 | f_tri2[0] | ... ]`, the retrieval descriptor.
    pub fn embedding<T: Element>(&self, ctx: &mut Ctx<T>, out: &BackboneOutput) -> Result<Var> {
        let (f1, f2) = self.features(ctx, out, true)?;
        f2.into_iter().try_fold(f1, |acc, f| ctx.tape.concat(acc, f))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Global terms only.
    Search,
    /// Global and stripe terms.
    Train,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_tri1: f64,
    pub l_id1: f64,
    pub l_tri2: f64,
    pub l_id2: f64,
    pub total: f64,
}

impl LossReport {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.l_tri1, self.l_id1, self.l_tri2, self.l_id2, self.total)
    }
}

fn mean_of<T: Element>(ctx: &mut Ctx<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = ctx.tape.add(acc, t)?;
    }
    ctx.tape.scale(acc, T::one() / T::from_usize(terms.len()).expect("small count"))
}

/// Sums the loss terms for `mode`; stripe terms are averaged over stripes.
pub fn compose_loss<T: Element>(
    ctx: &mut Ctx<T>,
    bundle: &FeatureBundle,
    labels: &[usize],
    mode: LossMode,
    margin: f64,
) -> Result<(Var, LossReport)> {
    let logits1 = bundle
        .logits1
        .ok_or_else(|| Error::InvalidArgument("global logits missing".into()))?;
    let tri1 = ctx.tape.triplet_batch_hard(bundle.f_tri1, labels, margin)?;
    let id1 = ctx.tape.cross_entropy(logits1, labels)?;
    let val = |ctx: &Ctx<T>, v: Var| ctx.tape.value(v).item().to_f64().unwrap_or(f64::NAN);
    let mut report = LossReport {
        l_tri1: val(ctx, tri1),
        l_id1: val(ctx, id1),
        ..LossReport::default()
    };
    let mut total = ctx.tape.add(tri1, id1)?;
    if mode == LossMode::Train && bundle.stripe_heads > 0 {
        if bundle.f_tri2.len() != bundle.stripe_heads || bundle.logits2.len() != bundle.stripe_heads {
            return Err(Error::InvalidArgument(format!(
                "train loss needs {} stripe features and logits",
                bundle.stripe_heads
            )));
        }
        let tris = bundle
            .f_tri2
            .iter()
            .map(|&f| ctx.tape.triplet_batch_hard(f, labels, margin))
            .collect::<Result<Vec<_>>>()?;
        let ids = bundle
            .logits2
            .iter()
            .map(|&l| ctx.tape.cross_entropy(l, labels))
            .collect::<Result<Vec<_>>>()?;
        let tri2 = mean_of(ctx, &tris)?;
        let id2 = mean_of(ctx, &ids)?;
        report.l_tri2 = val(ctx, tri2);
        report.l_id2 = val(ctx, id2);
        total = ctx.tape.add(total, tri2)?;
        total = ctx.tape.add(total, id2)?;
    }
    report.total = val(ctx, total);
    Ok((total, report))
}

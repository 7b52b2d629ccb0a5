//! A backbone together with its neck.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::neck::{FeatureBundle, Neck, NeckConfig, NeckVariant};
use crate::nn::{Ctx, Mode, ParamBuilder, ParamStore};
use crate::space::{
    network_positions, round_channels, supernet_positions, ArchitectureDescriptor, Backbone, BackboneConfig,
    Gating, SpaceKind,
};
use crate::tensor::{Element, Tensor};

/// Stripe width at full scale.
pub const STRIPE_WIDTH: usize = 128;

#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub neck: Neck,
}

impl Model {
    pub fn new<T: Element>(b: &mut ParamBuilder<T>, backbone: Backbone, neck: NeckConfig) -> Result<Self> {
        if neck.global_width != backbone.out_channels() {
            return Err(Error::ShapeMismatch {
                op: "model",
                lhs: vec![backbone.out_channels()],
                rhs: vec![neck.global_width],
            });
        }
        let neck = Neck::build(b, neck, backbone.fmap2_channels())?;
        Ok(Self { backbone, neck })
    }

    /// The single-path network a descriptor names, with the requested neck.
    /// Stripe widths scale with the descriptor's width multiplier.
    pub fn from_descriptor<T: Element>(
        store: &mut ParamStore<T>,
        seed: u64,
        d: &ArchitectureDescriptor,
        classes: usize,
        variant: NeckVariant,
        partitions: usize,
    ) -> Result<Self> {
        let mut b = ParamBuilder::new(store, seed);
        let cfg = BackboneConfig::from_descriptor(d);
        let backbone = Backbone::macro_net(&mut b, &cfg, &network_positions(d))?;
        let mut neck = NeckConfig::new(backbone.out_channels(), classes, variant);
        neck.partitions = partitions;
        neck.stripe_width = round_channels(STRIPE_WIDTH as f64 * d.beta);
        Self::new(&mut b, backbone, neck)
    }

    /// Every candidate of `kind` at every position, with the global head
    /// used during search. `template` supplies the widths and resolution.
    pub fn supernet<T: Element>(
        store: &mut ParamStore<T>,
        seed: u64,
        kind: SpaceKind,
        template: &ArchitectureDescriptor,
        classes: usize,
    ) -> Result<Self> {
        let mut b = ParamBuilder::new(store, seed);
        let cfg = BackboneConfig::from_descriptor(template);
        let backbone = Backbone::macro_net(&mut b, &cfg, &supernet_positions(kind))?;
        let neck = NeckConfig::new(backbone.out_channels(), classes, NeckVariant::Bl);
        Self::new(&mut b, backbone, neck)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var, gating: Gating, stripes: bool) -> Result<FeatureBundle> {
        let out = self.backbone.forward(ctx, x, gating)?;
        self.neck.forward(ctx, &out, stripes)
    }

    /// Inference embeddings of single-path networks, `chunk` images at a time.
    pub fn embed<T: Element>(&self, store: &ParamStore<T>, images: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let n = images.shape()[0];
        let mut rows: Vec<T> = Vec::new();
        let mut width = 0;
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let mut ctx = Ctx::new(store, Mode::Eval, false);
            let x = ctx.input(images.slice_rows(start, end)?);
            let out = self.backbone.forward(&mut ctx, x, Gating::Single)?;
            let e = self.neck.embedding(&mut ctx, &out)?;
            let v = ctx.tape.value(e);
            width = v.shape()[1];
            rows.extend_from_slice(v.data());
        }
        Tensor::new(vec![n, width], rows)
    }
}

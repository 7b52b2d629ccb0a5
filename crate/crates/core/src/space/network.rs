//! The six-position macro network, as a supernet or a single path.

use std::fmt;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamBuilder};
use crate::tensor::Element;

use super::blocks::{zeros_like, BlockConfig, CdBlock, DownSample, Projection, Stem};
use super::candidate::{candidate_set, CandidateSpec, SpaceKind, POSITIONS};
use super::descriptor::{ArchitectureDescriptor, ChannelPlan};

/// Scope of every backbone tensor name.
pub const BACKBONE_SCOPE: &str = "backbone";

/// What one branch of an MBlock computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchSpec {
    Candidate(CandidateSpec),
    Identity,
    /// Outputs zeros of the input shape.
    Zero,
}

impl BranchSpec {
    pub fn label(&self) -> String {
        match self {
            BranchSpec::Candidate(c) => c.label(),
            BranchSpec::Identity => "identity".into(),
            BranchSpec::Zero => "zero".into(),
        }
    }
}

impl fmt::Display for BranchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BranchSpec::Candidate(c) => write!(f, "{c}"),
            other => f.write_str(&other.label()),
        }
    }
}

#[derive(Clone, Debug)]
enum Branch {
    Cd(CdBlock),
    Identity,
    Zero,
}

/// Straight-through branch weights of one MBlock for one forward pass.
#[derive(Clone, Debug)]
pub struct BranchGate {
    /// `(n,)` weights; only entries in `active` are read.
    pub weights: Var,
    /// Branches to evaluate, ascending.
    pub active: Vec<usize>,
}

/// How MBlocks combine their branches.
#[derive(Clone, Copy, Debug)]
pub enum Gating<'a> {
    /// Every MBlock has exactly one branch, applied without weighting.
    Single,
    /// `F = sum_j w_j f_j(x)` over the active branches of each MBlock.
    Weighted(&'a [BranchGate]),
}

/// One searchable position with its parallel branches.
#[derive(Clone, Debug)]
pub struct MBlock {
    pub position: usize,
    pub specs: Vec<BranchSpec>,
    branches: Vec<Branch>,
}

impl MBlock {
    fn build<T: Element>(
        b: &mut ParamBuilder<T>,
        position: usize,
        specs: &[BranchSpec],
        channels: usize,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidArgument(format!("position {position} has no branches")));
        }
        let branches = specs
            .iter()
            .map(|s| match s {
                BranchSpec::Candidate(c) => b
                    .scoped(c.label(), |b| CdBlock::build(b, *c, channels, cfg))
                    .map(Branch::Cd),
                BranchSpec::Identity => Ok(Branch::Identity),
                BranchSpec::Zero => Ok(Branch::Zero),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            position,
            specs: specs.to_vec(),
            branches,
        })
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    fn branch<T: Element>(&self, ctx: &mut Ctx<T>, j: usize, x: Var) -> Result<Var> {
        ctx.count_branch(self.position);
        match &self.branches[j] {
            Branch::Cd(blk) => blk.forward(ctx, x),
            Branch::Identity => Ok(x),
            Branch::Zero => Ok(zeros_like(ctx, x)),
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var, gating: Gating) -> Result<Var> {
        match gating {
            Gating::Single => {
                if self.len() != 1 {
                    return Err(Error::InvalidArgument(format!(
                        "position {} has {} branches and needs a gate",
                        self.position,
                        self.len()
                    )));
                }
                self.branch(ctx, 0, x)
            }
            Gating::Weighted(gates) => {
                let gate = gates.get(self.position).ok_or_else(|| {
                    Error::InvalidArgument(format!("no gate for position {}", self.position))
                })?;
                if ctx.tape.shape(gate.weights) != [self.len()] {
                    return Err(Error::ShapeMismatch {
                        op: "mblock",
                        lhs: ctx.tape.shape(gate.weights).to_vec(),
                        rhs: vec![self.len()],
                    });
                }
                let mut out: Option<Var> = None;
                for &j in &gate.active {
                    if j >= self.len() {
                        return Err(Error::InvalidArgument(format!("branch {j} out of {}", self.len())));
                    }
                    let y = self.branch(ctx, j, x)?;
                    let term = ctx.tape.scale_by_entry(y, gate.weights, j)?;
                    out = Some(match out {
                        None => term,
                        Some(acc) => ctx.tape.add(acc, term)?,
                    });
                }
                out.ok_or_else(|| Error::InvalidArgument(format!("empty gate at position {}", self.position)))
            }
        }
    }
}

/// Static configuration of the macro network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub plan: ChannelPlan,
    /// `(height, width)` of the intended input.
    pub input: (usize, usize),
    pub blocks: BlockConfig,
}

impl BackboneConfig {
    pub fn from_descriptor(d: &ArchitectureDescriptor) -> Self {
        Self {
            in_channels: 3,
            plan: d.channel_plan(),
            input: d.input_resolution(),
            blocks: BlockConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::InvalidArgument(format!(
                "input resolution {h}x{w} must be divisible by 16"
            )));
        }
        Ok(())
    }

    /// Spatial size entering stage `s`.
    pub fn stage_resolution(&self, s: usize) -> (usize, usize) {
        let f = 4 << s;
        (self.input.0 / f, self.input.1 / f)
    }
}

/// Intermediate maps consumed by the necks.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    /// Output of the second stage, before its DownSample.
    pub fmap2: Option<Var>,
    /// Final feature map.
    pub fmap3: Var,
}

/// Stem, three stages of two MBlocks, DownSamples and the projection.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Option<Stem>,
    stages: Vec<Vec<MBlock>>,
    downs: Vec<DownSample>,
    proj: Option<Projection>,
    fmap2_stage: Option<usize>,
    fmap2_channels: usize,
    out_channels: usize,
}

impl Backbone {
    /// The macro network with the given branches at each of the six positions.
    pub fn macro_net<T: Element>(
        b: &mut ParamBuilder<T>,
        cfg: &BackboneConfig,
        positions: &[Vec<BranchSpec>],
    ) -> Result<Self> {
        cfg.validate()?;
        if positions.len() != POSITIONS {
            return Err(Error::InvalidArgument(format!(
                "expected {POSITIONS} positions, got {}",
                positions.len()
            )));
        }
        let plan = cfg.plan;
        b.push(BACKBONE_SCOPE);
        let built = (|| {
            let stem = b.scoped("stem", |b| Stem::build(b, cfg.in_channels, plan.stem))?;
            let mut stages = Vec::new();
            let mut downs = Vec::new();
            let mut width = plan.stem;
            for s in 0..3 {
                let c = plan.stages[s];
                if s > 0 {
                    downs.push(b.scoped(format!("down{s}"), |b| DownSample::build(b, width, c))?);
                } else if width != c {
                    return Err(Error::InvalidArgument(format!(
                        "stem width {width} must equal first stage width {c}"
                    )));
                }
                width = c;
                let mut blocks = Vec::new();
                for i in 2 * s..2 * s + 2 {
                    blocks.push(b.scoped(format!("pos{i}"), |b| MBlock::build(b, i, &positions[i], c, &cfg.blocks))?);
                }
                stages.push(blocks);
            }
            let proj = b.scoped("proj", |b| Projection::build(b, width, plan.embedding))?;
            Ok(Self {
                stem: Some(stem),
                stages,
                downs,
                proj: Some(proj),
                fmap2_stage: Some(1),
                fmap2_channels: plan.stages[1],
                out_channels: plan.embedding,
            })
        })();
        b.pop();
        built
    }

    /// A single stage of MBlocks over `channels`-wide inputs, with no stem,
    /// resampling or projection.
    pub fn plain<T: Element>(
        b: &mut ParamBuilder<T>,
        channels: usize,
        positions: &[Vec<BranchSpec>],
        blocks: &BlockConfig,
    ) -> Result<Self> {
        b.push(BACKBONE_SCOPE);
        let built = positions
            .iter()
            .enumerate()
            .map(|(i, specs)| b.scoped(format!("pos{i}"), |b| MBlock::build(b, i, specs, channels, blocks)))
            .collect::<Result<Vec<_>>>();
        b.pop();
        Ok(Self {
            stem: None,
            stages: vec![built?],
            downs: Vec::new(),
            proj: None,
            fmap2_stage: None,
            fmap2_channels: 0,
            out_channels: channels,
        })
    }

    /// The stem followed by one stage of MBlocks at the stem width.
    pub fn shallow<T: Element>(
        b: &mut ParamBuilder<T>,
        in_channels: usize,
        width: usize,
        positions: &[Vec<BranchSpec>],
        blocks: &BlockConfig,
    ) -> Result<Self> {
        b.push(BACKBONE_SCOPE);
        let built = (|| -> Result<(Stem, Vec<MBlock>)> {
            let stem = b.scoped("stem", |b| Stem::build(b, in_channels, width))?;
            let stage = positions
                .iter()
                .enumerate()
                .map(|(i, specs)| b.scoped(format!("pos{i}"), |b| MBlock::build(b, i, specs, width, blocks)))
                .collect::<Result<Vec<_>>>()?;
            Ok((stem, stage))
        })();
        b.pop();
        let (stem, stage) = built?;
        Ok(Self {
            stem: Some(stem),
            stages: vec![stage],
            downs: Vec::new(),
            proj: None,
            fmap2_stage: None,
            fmap2_channels: 0,
            out_channels: width,
        })
    }

    pub fn mblocks(&self) -> impl Iterator<Item = &MBlock> {
        self.stages.iter().flatten()
    }

    pub fn positions(&self) -> usize {
        self.mblocks().count()
    }

    /// Branch count per position.
    pub fn branch_counts(&self) -> Vec<usize> {
        self.mblocks().map(MBlock::len).collect()
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Channel width of `fmap2`, if tapped.
    pub fn fmap2_channels(&self) -> Option<usize> {
        self.fmap2_stage.map(|_| self.fmap2_channels)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<T>, x: Var, gating: Gating) -> Result<BackboneOutput> {
        let mut h = match &self.stem {
            Some(stem) => stem.forward(ctx, x)?,
            None => x,
        };
        let mut fmap2 = None;
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                h = self.downs[s - 1].forward(ctx, h)?;
            }
            for blk in blocks {
                h = blk.forward(ctx, h, gating)?;
            }
            if self.fmap2_stage == Some(s) {
                fmap2 = Some(h);
            }
        }
        let fmap3 = match &self.proj {
            Some(p) => p.forward(ctx, h)?,
            None => h,
        };
        Ok(BackboneOutput { fmap2, fmap3 })
    }
}

/// All candidates of `kind` at every position.
pub fn supernet_positions(kind: SpaceKind) -> Vec<Vec<BranchSpec>> {
    let row: Vec<_> = candidate_set(kind).into_iter().map(BranchSpec::Candidate).collect();
    vec![row; POSITIONS]
}

/// The descriptor's single candidate at every position.
pub fn network_positions(d: &ArchitectureDescriptor) -> Vec<Vec<BranchSpec>> {
    d.layers.iter().map(|&l| vec![BranchSpec::Candidate(l)]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore};
    use crate::space::descriptor::{fixtures, scale_descriptor};
    use crate::tensor::Tensor;

    fn small(d: &ArchitectureDescriptor) -> BackboneConfig {
        let d = scale_descriptor(d, 0.25, 0.25).unwrap();
        BackboneConfig::from_descriptor(&d)
    }

    #[test]
    fn cs_supernet_has_36_branches() {
        let d = fixtures::cnet();
        let mut store = ParamStore::<f32>::new();
        let net = Backbone::macro_net(&mut ParamBuilder::new(&mut store, 0), &small(&d), &supernet_positions(SpaceKind::Cs))
            .unwrap();
        assert_eq!(net.branch_counts(), vec![6; 6]);
        assert_eq!(net.branch_counts().iter().sum::<usize>(), 36);
        let mut store = ParamStore::<f32>::new();
        let net = Backbone::macro_net(&mut ParamBuilder::new(&mut store, 0), &small(&d), &supernet_positions(SpaceKind::Cds))
            .unwrap();
        assert_eq!(net.branch_counts(), vec![12; 6]);
        assert!(store.id("backbone.pos0.k3_5_r2.cblock1.squeeze").is_some());
        assert!(store.id("backbone.pos0.k3_5_r1.cblock1.squeeze").is_none());
    }

    #[test]
    fn resolution_must_divide_by_16() {
        let mut cfg = small(&fixtures::cnet());
        cfg.input = (72, 32);
        let mut store = ParamStore::<f32>::new();
        let net = Backbone::macro_net(&mut ParamBuilder::new(&mut store, 0), &cfg, &network_positions(&fixtures::cnet()));
        assert!(net.is_err());
    }

    #[test]
    fn stage_one_input_is_a_quarter() {
        let cfg = small(&fixtures::cdnet());
        assert_eq!(cfg.input, (64, 32));
        assert_eq!(cfg.stage_resolution(0), (16, 8));
    }

    #[test]
    fn single_path_forward_shapes() {
        for d in [fixtures::cnet(), fixtures::cdnet(), ArchitectureDescriptor::from_triples(SpaceKind::Cs, [(3, 5, 1); 6]).unwrap()] {
            let cfg = small(&d);
            let mut store = ParamStore::<f64>::new();
            let net = Backbone::macro_net(&mut ParamBuilder::new(&mut store, 1), &cfg, &network_positions(&d)).unwrap();
            let mut ctx = Ctx::new(&store, Mode::Train, true);
            let x = ctx.input(Tensor::from_fn(vec![2, 3, 64, 32], |i| (i as f64 * 0.37).sin()));
            let out = net.forward(&mut ctx, x, Gating::Single).unwrap();
            assert_eq!(ctx.tape.shape(out.fmap3), &[2, cfg.plan.embedding, 4, 2]);
            assert_eq!(ctx.tape.shape(out.fmap2.unwrap()), &[2, cfg.plan.stages[1], 8, 4]);
            assert_eq!(ctx.branch_evals(), &[1; 6]);
        }
    }
}

//! Closed-form cost model of single-path networks.

use super::blocks::BlockConfig;
use super::candidate::{space_size, CandidateSpec};
use super::descriptor::ArchitectureDescriptor;
use super::network::BackboneConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub position: usize,
    pub spec: CandidateSpec,
    pub channels: usize,
    /// `(height, width)` of the feature map at this position.
    pub resolution: (usize, usize),
    pub params: usize,
    pub macs: usize,
    /// Receptive field of the position's output, in input pixels.
    pub receptive_field: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    /// Trainable backbone parameters (necks excluded).
    pub params: usize,
    /// Multiply-adds of one forward pass on one image.
    pub macs: usize,
    pub depth: usize,
    pub layers: Vec<LayerReport>,
    /// Number of architectures in the descriptor's space.
    pub space_size: u64,
}

fn cblock_params(c: usize, k1: usize, k2: usize, cfg: &BlockConfig) -> usize {
    let mid = c / cfg.reduction;
    let hid = c / cfg.gate_reduction;
    let units = k1 / 2 + k2 / 2;
    let squeeze = c * mid + 2 * mid;
    let lite = units * (mid * mid + 9 * mid + 2 * mid);
    let gate = c * hid + hid + hid * mid + mid;
    let restore = mid * c + 2 * c;
    squeeze + lite + gate + restore
}

fn cblock_macs(c: usize, k1: usize, k2: usize, plane: usize, cfg: &BlockConfig) -> usize {
    let mid = c / cfg.reduction;
    let hid = c / cfg.gate_reduction;
    let units = k1 / 2 + k2 / 2;
    plane * c * mid + units * plane * (mid * mid + 9 * mid) + c * hid + hid * mid + plane * mid * c
}

pub fn analyze(d: &ArchitectureDescriptor) -> Analysis {
    analyze_with(d, &BackboneConfig::from_descriptor(d))
}

/// Analysis under an explicit backbone configuration.
pub fn analyze_with(d: &ArchitectureDescriptor, cfg: &BackboneConfig) -> Analysis {
    let plan = cfg.plan;
    let (h, w) = cfg.input;
    let mut params = cfg.in_channels * plan.stem * 49 + 2 * plan.stem;
    let mut macs = (h / 2) * (w / 2) * plan.stem * cfg.in_channels * 49;
    // stem: 7x7 stride 2, then 3x3 stride 2
    let (mut rf, mut jump) = (11, 4);
    let mut layers = Vec::new();
    let mut width = plan.stem;
    for s in 0..3 {
        let c = plan.stages[s];
        let (sh, sw) = cfg.stage_resolution(s);
        if s > 0 {
            let (ph, pw) = cfg.stage_resolution(s - 1);
            params += width * c;
            macs += ph * pw * width * c;
            rf += jump;
            jump *= 2;
        }
        width = c;
        for i in 2 * s..2 * s + 2 {
            let spec = d.layers[i];
            let p = spec.r * cblock_params(c, spec.k1, spec.k2, &cfg.blocks);
            let m = spec.r * cblock_macs(c, spec.k1, spec.k2, sh * sw, &cfg.blocks);
            rf += spec.r * (spec.k2 - 1) * jump;
            params += p;
            macs += m;
            layers.push(LayerReport {
                position: i,
                spec,
                channels: c,
                resolution: (sh, sw),
                params: p,
                macs: m,
                receptive_field: rf,
            });
        }
    }
    let (fh, fw) = cfg.stage_resolution(2);
    params += width * plan.embedding + 2 * plan.embedding;
    macs += fh * fw * width * plan.embedding;
    Analysis {
        params,
        macs,
        depth: d.depth(),
        layers,
        space_size: space_size(d.kind),
    }
}

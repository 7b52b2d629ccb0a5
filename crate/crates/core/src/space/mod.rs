//! Candidate operations, architecture descriptors and the macro network.

pub mod analyze;
pub mod blocks;
pub mod candidate;
pub mod descriptor;
pub mod network;

pub use analyze::{analyze, analyze_with, Analysis, LayerReport};
pub use blocks::{BlockConfig, CBlock, CdBlock, DownSample, Lite, LiteUnit, Stem};
pub use candidate::{candidate_set, space_size, CandidateSpec, SpaceKind, KERNEL_PAIRS, POSITIONS};
pub use descriptor::{fixtures, round_channels, scale_descriptor, ArchitectureDescriptor, ChannelPlan, BASE_RESOLUTION};
pub use network::{
    network_positions, supernet_positions, Backbone, BackboneConfig, BackboneOutput, BranchGate, BranchSpec, Gating,
    MBlock, BACKBONE_SCOPE,
};

//! Architecture vectors, top-k straight-through gating and the alternating
//! search loop.

mod alpha;
mod check;
mod gate;
mod searcher;

pub use alpha::{derive, AlphaParams, ALPHA_PREFIX};
pub use gate::{
    branch_probabilities, gate_on_tape, gate_with_bridge, straight_through, topk_gate, topk_indices, GateMode,
    GateState,
};
pub use check::{check_alpha_gradient, AlphaGradReport, ALPHA_FD_STEP, GATE_GAP_MIN};
pub use searcher::{search, AlphaPass, SearchConfig, SearchOutcome, Searcher, StepRecord};
pub use crate::eval::split_train_val;

#[cfg(test)]
mod tests;

//! Synthetic retrieval data, batch sampling, augmentation and metrics.

mod erasing;
mod metrics;
mod oracle;
mod planted;
mod sampler;
mod synthetic;

pub use erasing::{random_erasing, ErasingConfig, Rect};
pub use metrics::{evaluate_retrieval, RetrievalIndex, RetrievalMetrics};
pub use sampler::{split_train_val, CyclingSampler, PkSampler};
pub use synthetic::{generate_synthetic, Dataset, SyntheticSpec, BLOB_DIAMETERS, MIN_INSTANCES};
pub use planted::{
    planted_features, planted_model, planted_positions, planted_train_config, standalone_branch_losses, PlantedSpec,
};
pub use oracle::{
    average_ranks, enumerate_choices, exhaustive_space_oracle, micro_candidates, micro_model, spearman, OracleConfig,
    OracleRow, OracleTable, ORACLE_LIMIT,
};

//! Parameters, forward contexts and optimizers.

mod context;
mod gradcheck;
pub mod optim;
mod params;

pub use context::{apply_updates, Ctx, Mode, BN_EPS, BN_MOMENTUM};
pub use gradcheck::check_model_gradients;
pub use optim::{adam_step, cosine_schedule, sgd_step, step_schedule, AdamConfig, AdamState, Schedule, Sgd};
pub use params::{BnParams, LinearParams, ParamBuilder, ParamEntry, ParamId, ParamKind, ParamStore};

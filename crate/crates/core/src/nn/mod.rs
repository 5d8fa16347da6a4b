//! Network, parameters, optimiser and checkpoints.

pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod params;

pub use checkpoint::Checkpoint;
pub use model::{attention_pool, fp_merge, Forward, Mode, ModelConfig, ModelOutput, SedModel};
pub use optim::Adam;
pub use params::{ema_update, ParamGroup, ParamStore};

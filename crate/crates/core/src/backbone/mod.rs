//! The backbone network: architecture text, construction, forward pass,
//! cost accounting and checkpoints.

mod arch;
mod checkpoint;
mod cost;
mod model;

pub use arch::{ArchSpec, BlockSpec, Nonlinearity, Op, STANET_ARCH};
pub use checkpoint::{
    load_checkpoint, load_into, model_from_checkpoint, save_checkpoint, to_checkpoint, Checkpoint,
    META_PREFIX, STCK_MAGIC, STCK_VERSION,
};
pub use cost::{count_flops, count_params, CostReport, LayerCost};
pub use model::{build_model, Forward, MbConv, Model, ModelConfig, Shortcut, SiteMaps, Variant};

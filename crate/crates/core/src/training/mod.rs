//! Two-stage and joint training, plus checkpoints.

mod checkpoint;
mod config;
mod loops;

pub use checkpoint::{from_bytes, restore, save_checkpoint, to_bytes, Checkpoint, MAGIC, VERSION};
pub use config::{RadiusSource, Regime, TrainConfig};
pub use loops::{
    finetune_oneclass, pretrain_reconstruction, resolve_layer_set, train, train_joint, EpochRecord,
    RadiusUpdate, Stage, TrainLog, TrainOutcome,
};

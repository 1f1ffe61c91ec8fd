//! LDM training in the three paradigms (fixed rate, joint multi-rate,
//! low-rate pretraining then multi-rate finetuning), checkpointing and
//! generation.

mod config;
mod generate;
mod ldm;
mod model;

pub use config::{ExperimentConfig, ScheduleConfig, TrainMode};
pub use generate::{generate, GenRequest};
pub use ldm::{
    batch_conditions, encode_items, pretrain_then_finetune, step_loss, step_plan, train_ldm, validation_loss, LatentItem, PretrainOutcome, Start,
    TrainOutcome, BEST_FILE, LAST_FILE,
};
pub use model::{CheckpointMeta, LdmModel, Pipeline, CODEC_PREFIX, LDM_KIND, LDM_PREFIX};

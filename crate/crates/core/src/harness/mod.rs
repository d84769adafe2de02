//! Run configuration, training loop, checkpoints and the command bodies
//! behind the `tobo` binary.

mod checkpoint;
mod commands;
mod config;
mod train;

pub use checkpoint::{Checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_VERSION};
pub use commands::{
    ablate_mask_ratio, grad_check_objective, probe_dataset, probe_encoder, tail_mean, AblationRow, ProbeSettings,
    ABLATION_HEADER, DEFAULT_RATIOS,
};
pub use config::{OptimConfig, RunConfig, Seeds};
pub use train::{
    bottleneck_reliance, build_model, final_checkpoint_path, held_out_episode, pretrain, training_batch,
    PretrainOptions, PretrainSummary, Reliance, StepRecord, Trainer, METRICS_HEADER, TIMING_HEADER,
};

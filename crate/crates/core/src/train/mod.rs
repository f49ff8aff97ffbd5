//! Optimization: Adam, the in-context and feature-net training loops, run logs and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod featurenet;
pub mod icl;
pub mod runlog;

pub use adam::{adam_step, AdamConfig, AdamState, ParamGroup};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, TrainState};
pub use config::{Normalization, StopRule, TrainConfig};
pub use featurenet::{feature_escape_time, train_featurenet, FeatureRun, FeatureTrainConfig};
pub use icl::{initial_state, resolve_normalization, task_normalization, train_icl, transfer_init, RunOutcome, Trainer};
pub use runlog::{task_labels, MetricsRecord, RunLog};

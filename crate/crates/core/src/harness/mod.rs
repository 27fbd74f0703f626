//! Dataset ingestion, training, checkpoints and the experiment drivers
//! behind the command-line tool.

mod caption;
mod checkpoint;
mod config;
mod dataset;
mod evaluate;
mod experiments;
mod gradcheck;
pub mod toy;
mod train;

pub use caption::{caption_cmd, load_input, Captioned};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{Preset, RunConfig, TrainConfig};
pub use dataset::{annotations_for, load_dataset, load_dataset_with_root, Dataset, DatasetRecord, Source, DATA_ROOT_ENV, MAX_CAPTIONS};
pub use evaluate::load_eval_corpus;
pub use experiments::{
    depth_study, grad_experiment, param_report, scaling_fit, softmax_random_mean, write_csv, write_json, DepthRow,
    GradExperimentConfig, GradReport, GradRow, ParamRow, ScalingFit, REFERENCE_DEPTHS, REFERENCE_EMBEDDING_M,
    REFERENCE_ONE_HOT_M,
};
pub use gradcheck::{model_check, op_suite, ModelCheckDims, OpCheck, FD_STEP};
pub use train::{evaluate_items, in_validation, mean_loss, prepare_data, toy_encoder, train, EpochLog, TrainData, TrainItem, TrainOutcome};

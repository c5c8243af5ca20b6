//! Synthetic data, augmentation, training, sliding-window inference and evaluation.

pub mod augment;
pub mod dataset_io;
pub mod infer;
pub mod metrics;
pub mod scenario;
pub mod synth;
pub mod train;
pub mod volume;

pub use infer::{argmax_labels, sliding_window_infer, sliding_window_logits, InferOptions};
pub use metrics::{dsc, evaluate, merge_labels, Evaluation, MergeRule, MergeSpec};
pub use scenario::{validation_dsc, RunResult, Scenario, Schedule, TaskSpec};
pub use synth::{gen_dataset, ClassSpec, ShapeFamily, SynthSpec};
pub use train::{train, train_with, EpochRecord, History, TrainPlan};
pub use volume::{LabelMap, Volume};

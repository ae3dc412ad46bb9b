//! Joint multi-domain training, evaluation and checkpoints.

mod checkpoint;
mod config;
mod eval;
mod loss;
mod metrics;
mod model;
mod optim;
mod run;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{ExperimentConfig, TrainConfig};
pub use eval::{check_manifests, evaluate, evaluate_samples, DomainEval, EvalReport};
pub use loss::{dice, labels_to_union, masked_seg_loss_on, LossWeights, SegLossParts, DICE_SMOOTH};
pub use metrics::{metrics_csv, EpochSummary, MetricRow, METRICS_HEADER};
pub use model::{network_view, EvalMode, Model, Prediction};
pub use optim::{learning_rate, AdamState, AdamW, Schedule, FINAL_LR_FRACTION};
pub use run::{registry_from_manifests, train, TrainOptions};

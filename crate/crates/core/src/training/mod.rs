//! Multitask optimization: staged schedule, weighted losses, best-checkpoint
//! selection, transfer and few-shot protocols.

mod optim;
mod schedule;
mod step;
mod task;
mod trainer;

pub use optim::{Adam, Trainable};
pub use schedule::{build_schedule, Schedule};
pub use step::{aggregate_validation, evaluate, train_step, weighted_grads, StepBatch, StepGrads};
pub use task::{LossKind, SplitData, Targets, TaskData, TaskSpec};
pub use trainer::{
    fewshot_rows, fewshot_train, load_state, pretrain_finetune, record_test_metrics, save_state,
    train_multitask, write_metrics_csv, MetricRow, Selection, TrainConfig, TrainState,
};

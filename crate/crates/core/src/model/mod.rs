//! Shared unimodal Perceiver encoder, shared crossmodal fusion layer and
//! per-task heads, plus the ablation variants.

mod blocks;
mod config;
mod count;
mod highmmt;

pub use config::{
    BlockConfig, ModelConfig, SharingConfig, Variant, BATCH_NORM_EPS, LAYER_NORM_EPS,
};
pub use count::{parameter_count, ParamReport};
pub use highmmt::{large_setting_tasks, Component, Mode, Model, TaskHead, Trace};

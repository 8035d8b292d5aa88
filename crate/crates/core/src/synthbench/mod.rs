//! Seeded synthetic multimodal tasks: cross-modal fusion rules and
//! shared-class retrieval pairs.

mod dataset;
mod fusion;
mod io;
mod retrieval;

pub use dataset::{
    flip_class_labels, flip_labels, subsample, subsample_indices, Dataset, Split, SplitKind,
    SynthModality,
};
pub(crate) use fusion::name_seed;
pub use fusion::{
    bayes_accuracy, gen_fusion_task, rule_label, unimodal_majority_accuracy, Rule, SynthTaskConfig,
};
pub use io::{read_dataset, write_dataset, Manifest};
pub use retrieval::{gen_retrieval_task, Pair, RetrievalConfig, RetrievalPairSet};

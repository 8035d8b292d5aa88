#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod arrayfile;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod modality;
pub mod model;
pub mod synthbench;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use modality::{ModalityRegistry, ModalitySpec, StandardizedBatch};
pub use tensor::{Nonlinearity, Tape, Tensor, Var};

//! Heterogeneous modality inputs to the common standardized sequence format.

mod fourier;
mod patch;
mod presets;
mod spec;
mod standardize;

pub use fourier::{axis_coordinates, fourier_encoding, frequencies};
pub use patch::patchify;
pub use presets::large_setting_registry;
pub use spec::{Layout, ModalityRegistry, ModalitySpec};
pub use standardize::{shared_time_encoding, standardize, StandardizedBatch};

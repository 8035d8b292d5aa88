use super::spec::{ModalityRegistry, ModalitySpec};

/// The nine-modality registry of the four-task large setting
/// (healthcare time-series/table, image/audio digits, two video-sentiment tasks
/// that share one text modality).
pub fn large_setting_registry() -> ModalityRegistry {
    let entries = vec![
        ModalitySpec::new("mimic.static", 1, 1, 6, 1.0),
        ModalitySpec::new("mimic.timeseries", 1, 2, 6, 1.0),
        ModalitySpec::new("avmnist.image", 16, 2, 6, 1.0).with_patch(4),
        ModalitySpec::new("avmnist.audio", 256, 2, 6, 1.0).with_patch(16),
        ModalitySpec::new("mosei.image", 35, 1, 3, 1.0),
        ModalitySpec::new("mosei.audio", 74, 1, 3, 1.0),
        ModalitySpec::new("text", 300, 1, 3, 1.0),
        ModalitySpec::new("urfunny.image", 371, 1, 3, 1.0),
        ModalitySpec::new("urfunny.audio", 81, 1, 3, 1.0),
    ];
    ModalityRegistry::new(entries)
        .and_then(|r| r.with_alias("mosei.text", "text"))
        .and_then(|r| r.with_alias("urfunny.text", "text"))
        .expect("static registry is valid")
}

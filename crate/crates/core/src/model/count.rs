use std::collections::BTreeMap;

use serde::Serialize;

use super::highmmt::{Component, Model};

/// Trainable scalar counts per component; shared tensors count once.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub unimodal_encoder: usize,
    pub multimodal: usize,
    pub embeddings: usize,
    pub heads: usize,
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.unimodal_encoder + self.multimodal + self.embeddings + self.heads
    }

    pub fn get(&self, c: Component) -> usize {
        match c {
            Component::UnimodalEncoder => self.unimodal_encoder,
            Component::Multimodal => self.multimodal,
            Component::Embeddings => self.embeddings,
            Component::Heads => self.heads,
        }
    }
}

pub fn parameter_count(model: &Model) -> ParamReport {
    let mut counts: BTreeMap<Component, usize> = BTreeMap::new();
    for (name, t) in model.params() {
        *counts.entry(Component::of(name)).or_default() += t.numel();
    }
    let get = |c| counts.get(&c).copied().unwrap_or(0);
    ParamReport {
        unimodal_encoder: get(Component::UnimodalEncoder),
        multimodal: get(Component::Multimodal),
        embeddings: get(Component::Embeddings),
        heads: get(Component::Heads),
    }
}

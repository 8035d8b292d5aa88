use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Component, Model};

/// Which parameters an update may change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    /// (a) every parameter.
    #[default]
    All,
    /// (b) unimodal encoder and heads.
    Unimodal,
    /// (c) multimodal layer and heads.
    Multimodal,
}

impl Trainable {
    pub fn allows(self, name: &str) -> bool {
        match (self, Component::of(name)) {
            (Trainable::All, _) | (_, Component::Heads) | (_, Component::Embeddings) => true,
            (Trainable::Unimodal, c) => c == Component::UnimodalEncoder,
            (Trainable::Multimodal, c) => c == Component::Multimodal,
        }
    }
}

/// Adam with L2 weight decay folded into the gradient and per-tensor step counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub(crate) m: BTreeMap<String, Vec<f64>>,
    pub(crate) v: BTreeMap<String, Vec<f64>>,
    pub(crate) steps: BTreeMap<String, u64>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            steps: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter in `grads` that `trainable` allows.
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &BTreeMap<String, Vec<f64>>,
        trainable: Trainable,
    ) {
        for (name, g) in grads {
            if !trainable.allows(name) {
                continue;
            }
            let Some(p) = model.params_mut().get_mut(name) else {
                continue;
            };
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let c1 = 1.0 - self.beta1.powi(*t as i32);
            let c2 = 1.0 - self.beta2.powi(*t as i32);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] + self.weight_decay * *w;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{standardize, ModalityRegistry, StandardizedBatch};
use crate::model::TaskHead;
use crate::synthbench::{Dataset, Split, SplitKind};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
    PairwiseRetrievalBinary,
}

impl LossKind {
    pub fn metric_name(self) -> &'static str {
        match self {
            LossKind::Mse => "neg_mse",
            _ => "accuracy",
        }
    }
}

/// Training-side description of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub modalities: Vec<String>,
    pub loss: LossKind,
    /// Class count, or target width for `mse`.
    pub outputs: usize,
    #[serde(default = "one")]
    pub loss_weight: f64,
    #[serde(default = "one")]
    pub eval_weight: f64,
    pub batch_size: usize,
}

fn one() -> f64 {
    1.0
}

impl TaskSpec {
    pub fn new(
        name: impl Into<String>,
        modalities: &[&str],
        outputs: usize,
        batch_size: usize,
    ) -> Self {
        Self {
            name: name.into(),
            modalities: modalities.iter().map(|m| m.to_string()).collect(),
            loss: LossKind::CrossEntropy,
            outputs,
            loss_weight: 1.0,
            eval_weight: 1.0,
            batch_size,
        }
    }

    pub fn head(&self) -> TaskHead {
        TaskHead {
            name: self.name.clone(),
            modalities: self.modalities.clone(),
            outputs: self.outputs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.loss_weight >= 0.0 && self.loss_weight.is_finite()) {
            return Err(Error::Config(format!(
                "task `{}`: loss weight must be ≥ 0",
                self.name
            )));
        }
        if self.modalities.is_empty() || self.batch_size == 0 || self.outputs == 0 {
            return Err(Error::Config(format!(
                "task `{}` needs modalities, outputs and a batch size",
                self.name
            )));
        }
        if self.loss == LossKind::PairwiseRetrievalBinary && self.outputs != 2 {
            return Err(Error::Config(format!(
                "retrieval task `{}` must have 2 outputs",
                self.name
            )));
        }
        Ok(())
    }

    /// Scalar loss of `logits` against `targets`.
    pub fn loss(&self, tape: &mut Tape, logits: Var, targets: &Targets) -> Result<Var> {
        match (self.loss, targets) {
            (LossKind::Mse, Targets::Values(t)) => tape.mse(logits, t),
            (LossKind::Mse, Targets::Classes(_)) => Err(Error::Data(format!(
                "task `{}` needs real-valued targets",
                self.name
            ))),
            (_, Targets::Classes(y)) => tape.cross_entropy(logits, y),
            (_, Targets::Values(_)) => Err(Error::Data(format!(
                "task `{}` needs class labels",
                self.name
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(y) => y.len(),
            Targets::Values(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Result<Targets> {
        Ok(match self {
            Targets::Classes(y) => Targets::Classes(rows.iter().map(|&r| y[r]).collect()),
            Targets::Values(t) => Targets::Values(t.select_first(rows)?),
        })
    }
}

/// Standardized inputs (one batch per modality) and targets of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub inputs: Vec<StandardizedBatch>,
    pub targets: Targets,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Result<SplitData> {
        Ok(SplitData {
            inputs: self
                .inputs
                .iter()
                .map(|b| b.select(rows))
                .collect::<Result<_>>()?,
            targets: self.targets.select(rows)?,
        })
    }

    pub fn standardize(
        split: &Split,
        modalities: &[String],
        registry: &ModalityRegistry,
        task: &str,
    ) -> Result<Self> {
        if split.inputs.len() != modalities.len() {
            return Err(Error::Data(format!(
                "task `{task}` lists {} modalities, data has {}",
                modalities.len(),
                split.inputs.len()
            )));
        }
        let inputs = split
            .inputs
            .iter()
            .zip(modalities)
            .map(|(raw, m)| standardize(raw, registry.spec_by_name(m)?, registry, task))
            .collect::<Result<_>>()?;
        Ok(SplitData {
            inputs,
            targets: Targets::Classes(split.labels.clone()),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: SplitData,
    pub valid: SplitData,
    pub test: SplitData,
}

impl TaskData {
    pub fn from_dataset(
        ds: &Dataset,
        spec: &TaskSpec,
        registry: &ModalityRegistry,
    ) -> Result<Self> {
        let mut parts = SplitKind::ALL
            .into_iter()
            .map(|k| SplitData::standardize(ds.split(k), &spec.modalities, registry, &spec.name));
        Ok(TaskData {
            train: parts.next().expect("train")?,
            valid: parts.next().expect("valid")?,
            test: parts.next().expect("test")?,
        })
    }

    pub fn split(&self, kind: SplitKind) -> &SplitData {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Valid => &self.valid,
            SplitKind::Test => &self.test,
        }
    }
}

//! Declarative experiment configuration read from TOML.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::modality::{ModalityRegistry, ModalitySpec};
use crate::model::{BlockConfig, ModelConfig, SharingConfig, Variant};
use crate::synthbench::{name_seed, RetrievalConfig, Rule, SynthModality, SynthTaskConfig};
use crate::tensor::Nonlinearity;
use crate::training::{LossKind, TaskSpec, TrainConfig, Trainable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub run: RunSection,
    pub registry: RegistrySection,
    pub model: ModelSection,
    pub tasks: Vec<TaskSpec>,
    pub training: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub transfer: Option<TransferSection>,
    #[serde(default)]
    pub fewshot: Option<FewshotSection>,
    #[serde(default)]
    pub interference: Option<InterferenceSection>,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// One model trained on every task.
    #[default]
    Multitask,
    /// One model per task.
    SingleTask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub mode: RunMode,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out: default_out(),
            mode: RunMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrySection {
    pub modalities: Vec<ModalityEntry>,
    /// Alias → modality name.
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityEntry {
    pub name: String,
    /// Channels per position (after patching, for patched images).
    pub channels: usize,
    /// Positional axis extents of generated samples; its length is the axis count.
    pub shape: Vec<usize>,
    pub num_freq_bands: usize,
    pub max_freq: f64,
    #[serde(default)]
    pub patch_size: Option<usize>,
}

impl ModalityEntry {
    pub fn spec(&self) -> ModalitySpec {
        let spec = ModalitySpec::new(
            self.name.clone(),
            self.channels,
            self.shape.len(),
            self.num_freq_bands,
            self.max_freq,
        );
        match self.patch_size {
            Some(p) => spec.with_patch(p),
            None => spec,
        }
    }

    pub fn synth(&self) -> SynthModality {
        SynthModality::new(self.name.clone(), &self.shape, self.channels)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    pub num_latents: usize,
    pub latent_dim: usize,
    pub encoder: BlockConfig,
    pub multimodal: BlockConfig,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    #[serde(default = "default_latent_init_std")]
    pub latent_init_std: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_variant() -> Variant {
    Variant::Full
}
fn default_ff_mult() -> usize {
    1
}
fn default_latent_init_std() -> f64 {
    0.02
}
fn default_bn_momentum() -> f64 {
    0.1
}
fn default_one() -> f64 {
    1.0
}
fn default_levels() -> usize {
    2
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Dataset root; defaults to `<run.out>/data`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub fusion: Vec<FusionEntry>,
    #[serde(default)]
    pub retrieval: Vec<RetrievalEntry>,
}

/// Synthetic fusion data for one task. Seeds default to values derived from
/// `training.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionEntry {
    pub task: String,
    pub modalities: Vec<String>,
    pub rule: Rule,
    #[serde(default)]
    pub rule_modalities: Vec<usize>,
    #[serde(default = "default_levels")]
    pub levels: usize,
    pub noise: f64,
    #[serde(default = "default_one")]
    pub signal: f64,
    pub sizes: [usize; 3],
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub prototype_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalEntry {
    pub task: String,
    pub a: String,
    pub b: String,
    pub shared_classes: usize,
    pub items_per_class: usize,
    pub noise: f64,
    #[serde(default = "default_one")]
    pub signal: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub prototype_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    pub sources: Vec<String>,
    pub target: String,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewshotSection {
    pub target: String,
    pub p: f64,
    #[serde(default = "default_one")]
    pub boost: f64,
    /// Co-trained tasks; all other tasks when absent.
    #[serde(default)]
    pub auxiliary: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterferenceSection {
    /// Clean multitask epochs before the paired runs.
    #[serde(default)]
    pub pretrain_epochs: usize,
    pub epochs: usize,
    #[serde(default)]
    pub flip_seed: u64,
    #[serde(default = "default_regimes")]
    pub regimes: Vec<Trainable>,
    /// Also run the fully separate model.
    #[serde(default = "default_true")]
    pub control: bool,
}

fn default_regimes() -> Vec<Trainable> {
    vec![Trainable::All, Trainable::Unimodal, Trainable::Multimodal]
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Scalar,
    Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Fixed threshold; calibrated on the grid when absent.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default = "default_max_samples")]
    pub max_samples: usize,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default = "default_attention_batch")]
    pub attention_batch: usize,
}

fn default_max_samples() -> usize {
    200
}
fn default_attention_batch() -> usize {
    64
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            epsilon: None,
            max_samples: default_max_samples(),
            granularity: Granularity::default(),
            attention_batch: default_attention_batch(),
        }
    }
}

fn unknown(kind: &str, name: &str, valid: impl IntoIterator<Item = impl AsRef<str>>) -> Error {
    let valid: Vec<String> = valid.into_iter().map(|s| s.as_ref().to_string()).collect();
    Error::Config(format!(
        "unknown {kind} `{name}`; valid: {}",
        valid.join(", ")
    ))
}

impl ExperimentConfig {
    /// Parses and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.training.seed = seed;
        self
    }

    pub fn registry(&self) -> Result<ModalityRegistry> {
        let mut reg = ModalityRegistry::new(
            self.registry
                .modalities
                .iter()
                .map(ModalityEntry::spec)
                .collect(),
        )?;
        for (alias, target) in &self.registry.aliases {
            reg = reg.with_alias(alias.clone(), target)?;
        }
        Ok(reg)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            num_latents: m.num_latents,
            latent_dim: m.latent_dim,
            encoder: m.encoder.clone(),
            multimodal: m.multimodal.clone(),
            ff_mult: m.ff_mult,
            nonlinearity: m.nonlinearity,
            latent_init_std: m.latent_init_std,
            bn_momentum: m.bn_momentum,
            seed: self.training.seed,
        }
    }

    pub fn sharing(&self) -> SharingConfig {
        self.model.variant.sharing()
    }

    pub fn task_names(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| unknown("task", name, self.task_names()))
    }

    pub fn task(&self, name: &str) -> Result<&TaskSpec> {
        Ok(&self.tasks[self.task_index(name)?])
    }

    fn modality(&self, name: &str) -> Result<&ModalityEntry> {
        let target = self.registry.aliases.get(name).map_or(name, String::as_str);
        self.registry
            .modalities
            .iter()
            .find(|m| m.name == target)
            .ok_or_else(|| {
                unknown(
                    "modality",
                    name,
                    self.registry.modalities.iter().map(|m| &m.name),
                )
            })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data
            .dir
            .clone()
            .unwrap_or_else(|| self.run.out.join("data"))
    }

    pub fn fusion_config(&self, e: &FusionEntry) -> Result<SynthTaskConfig> {
        let task = self.task(&e.task)?;
        let modalities = e
            .modalities
            .iter()
            .map(|m| {
                let entry = self.modality(m)?;
                if entry.patch_size.is_some() {
                    return Err(Error::Config(format!(
                        "modality `{m}`: generated data cannot be patched"
                    )));
                }
                Ok(SynthModality::new(m.clone(), &entry.shape, entry.channels))
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = SynthTaskConfig {
            name: e.task.clone(),
            modalities,
            classes: task.outputs,
            rule: e.rule,
            rule_modalities: e.rule_modalities.clone(),
            levels: e.levels,
            noise: e.noise,
            signal: e.signal,
            sizes: e.sizes,
            seed: e
                .seed
                .unwrap_or_else(|| name_seed(self.training.seed, &e.task)),
            prototype_seed: e.prototype_seed.unwrap_or(self.training.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn retrieval_config(&self, e: &RetrievalEntry) -> Result<RetrievalConfig> {
        let side = |m: &str| -> Result<SynthModality> {
            let entry = self.modality(m)?;
            Ok(SynthModality::new(m, &entry.shape, entry.channels))
        };
        Ok(RetrievalConfig {
            name: e.task.clone(),
            a: side(&e.a)?,
            b: side(&e.b)?,
            shared_classes: e.shared_classes,
            items_per_class: e.items_per_class,
            noise: e.noise,
            signal: e.signal,
            seed: e
                .seed
                .unwrap_or_else(|| name_seed(self.training.seed, &e.task)),
            prototype_seed: e.prototype_seed.unwrap_or(self.training.seed),
        })
    }

    /// sha256 of the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Checks cross-references; every failure is reported as [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })
    }

    fn check(&self) -> Result<()> {
        let registry = self.registry()?;
        self.model_config().validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("no tasks configured".into()));
        }
        let mut names = BTreeSet::new();
        for t in &self.tasks {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Config(format!("duplicate task `{}`", t.name)));
            }
            t.validate()?;
            registry.resolve_all(&t.modalities)?;
        }
        if !(self.training.lr > 0.0)
            || self.training.epochs == 0
            || self.training.eval_batch_size == 0
        {
            return Err(Error::Config(
                "training needs lr > 0, epochs > 0 and eval_batch_size > 0".into(),
            ));
        }

        let mut with_data = BTreeSet::new();
        for e in &self.data.fusion {
            let t = self.task(&e.task)?;
            if t.modalities != e.modalities {
                return Err(Error::Config(format!(
                    "fusion data for `{}` lists modalities {:?}, task reads {:?}",
                    e.task, e.modalities, t.modalities
                )));
            }
            self.fusion_config(e)?;
            if !with_data.insert(e.task.as_str()) {
                return Err(Error::Config(format!(
                    "task `{}` has two data entries",
                    e.task
                )));
            }
        }
        for e in &self.data.retrieval {
            let t = self.task(&e.task)?;
            if t.modalities != [e.a.clone(), e.b.clone()]
                || t.loss != LossKind::PairwiseRetrievalBinary
                || t.outputs != 2
            {
                return Err(Error::Config(format!(
                    "retrieval task `{}` must read [{}, {}] with loss pairwise_retrieval_binary and 2 outputs",
                    e.task, e.a, e.b
                )));
            }
            self.retrieval_config(e)?;
            if !with_data.insert(e.task.as_str()) {
                return Err(Error::Config(format!(
                    "task `{}` has two data entries",
                    e.task
                )));
            }
        }

        if let Some(tr) = &self.transfer {
            self.task(&tr.target)?;
            for s in &tr.sources {
                self.task(s)?;
                if *s == tr.target {
                    return Err(Error::Config("transfer target is also a source".into()));
                }
            }
        }
        if let Some(fs) = &self.fewshot {
            self.task(&fs.target)?;
            if !(fs.p > 0.0 && fs.p <= 1.0) || !(fs.boost > 0.0) {
                return Err(Error::Config(
                    "fewshot needs 0 < p ≤ 1 and boost > 0".into(),
                ));
            }
            for a in fs.auxiliary.iter().flatten() {
                self.task(a)?;
            }
        }
        if let Some(i) = &self.interference {
            if i.epochs == 0 || i.regimes.is_empty() {
                return Err(Error::Config(
                    "interference needs epochs > 0 and at least one regime".into(),
                ));
            }
        }
        if let Some(eps) = self.analysis.epsilon {
            if !(0.0..1.0).contains(&eps) {
                return Err(Error::Config("analysis epsilon must lie in [0, 1)".into()));
            }
        }
        if self.analysis.max_samples == 0 || self.analysis.attention_batch == 0 {
            return Err(Error::Config(
                "analysis sample caps must be positive".into(),
            ));
        }
        Ok(())
    }
}

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{Ctx, Init};
use super::config::{ModelConfig, SharingConfig, BATCH_NORM_EPS};
use crate::error::{Error, Result};
use crate::modality::{ModalityRegistry, StandardizedBatch};
use crate::tensor::{Tape, Tensor, Var};

/// Per-task head metadata: which modalities the task reads and its output width.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskHead {
    pub name: String,
    pub modalities: Vec<String>,
    pub outputs: usize,
}

impl TaskHead {
    pub fn new(name: impl Into<String>, modalities: &[&str], outputs: usize) -> Self {
        Self {
            name: name.into(),
            modalities: modalities.iter().map(|m| m.to_string()).collect(),
            outputs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Side outputs collected during a forward pass.
#[derive(Debug, Default)]
pub struct Trace {
    /// (task, batch mean, biased batch variance, batch size) for each
    /// training-mode head batch norm.
    pub batch_norm: Vec<(String, Vec<f64>, Vec<f64>, usize)>,
    /// (modality index, first-layer encoder cross-attention weights `[n, h, d_LN, t]`).
    pub encoder_attention: Vec<(usize, Var)>,
}

/// Coarse parameter groups used for counting and freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    UnimodalEncoder,
    Multimodal,
    Embeddings,
    Heads,
}

impl Component {
    pub fn of(param_name: &str) -> Component {
        if param_name.starts_with("unimodal") {
            Component::UnimodalEncoder
        } else if param_name.starts_with("multimodal") {
            Component::Multimodal
        } else if param_name.starts_with("embedding") {
            Component::Embeddings
        } else {
            Component::Heads
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::UnimodalEncoder => "unimodal_encoder",
            Component::Multimodal => "multimodal",
            Component::Embeddings => "embeddings",
            Component::Heads => "heads",
        }
    }
}

/// The shared-parameter multimodal multitask model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    sharing: SharingConfig,
    registry: ModalityRegistry,
    tasks: Vec<TaskHead>,
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        sharing: SharingConfig,
        registry: ModalityRegistry,
        tasks: Vec<TaskHead>,
    ) -> Result<Self> {
        config.validate()?;
        let mut model = Self {
            config,
            sharing,
            registry,
            tasks,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        };
        model.validate_tasks()?;
        model.initialize();
        Ok(model)
    }

    /// Rebuilds a model from stored tensors; names and shapes must match
    /// exactly what [`Model::new`] would create.
    pub fn from_parts(
        config: ModelConfig,
        sharing: SharingConfig,
        registry: ModalityRegistry,
        tasks: Vec<TaskHead>,
        params: BTreeMap<String, Tensor>,
        buffers: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let skeleton = Self::new(config, sharing, registry, tasks)?;
        let same_layout = |a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>| {
            a.len() == b.len()
                && a.iter()
                    .zip(b)
                    .all(|((ka, ta), (kb, tb))| ka == kb && ta.shape() == tb.shape())
        };
        if !same_layout(&skeleton.params, &params) || !same_layout(&skeleton.buffers, &buffers) {
            return Err(Error::Incompatible(
                "stored tensors do not match the model layout".into(),
            ));
        }
        Ok(Self {
            params,
            buffers,
            ..skeleton
        })
    }

    fn validate_tasks(&self) -> Result<()> {
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::Config(format!("duplicate task `{}`", t.name)));
            }
            if t.name.is_empty() || t.name.contains(['.', '@']) {
                return Err(Error::Config(format!("invalid task name `{}`", t.name)));
            }
            if t.modalities.is_empty() || t.outputs == 0 {
                return Err(Error::Config(format!(
                    "task `{}` needs modalities and outputs",
                    t.name
                )));
            }
            let mut seen = Vec::new();
            for m in &t.modalities {
                let idx = self.registry.resolve(m)?;
                if seen.contains(&idx) {
                    return Err(Error::Config(format!(
                        "task `{}` lists modality `{m}` twice",
                        t.name
                    )));
                }
                seen.push(idx);
            }
        }
        Ok(())
    }

    fn initialize(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let cfg = self.config.clone();
        let d_all = self.registry.d_all();
        let width = self.stream_width();
        let encoder_scopes = self.scopes(true);
        let multimodal_scopes = self.scopes(false);
        let mut params = BTreeMap::new();
        let mut init = Init {
            params: &mut params,
            rng: &mut rng,
        };
        for scope in &encoder_scopes {
            init.gaussian(
                &format!("{scope}.latent"),
                &[cfg.num_latents, cfg.latent_dim],
                cfg.latent_init_std,
            );
            init.stack(
                scope,
                cfg.latent_dim,
                d_all,
                &cfg.encoder,
                cfg.ff_mult,
                true,
            );
        }
        for scope in &multimodal_scopes {
            init.stack(scope, width, width, &cfg.multimodal, cfg.ff_mult, false);
        }
        let mut buffers = BTreeMap::new();
        for t in &self.tasks {
            let f = self.head_input_width(t.modalities.len());
            init.norm(&format!("head.{}.bn", t.name), f);
            init.linear(&format!("head.{}.linear", t.name), f, t.outputs);
            buffers.insert(
                format!("head.{}.bn.running_mean", t.name),
                Tensor::zeros(&[f]),
            );
            buffers.insert(
                format!("head.{}.bn.running_var", t.name),
                Tensor::full(&[f], 1.0),
            );
        }
        self.params = params;
        self.buffers = buffers;
    }

    /// Parameter scopes for the encoder (`true`) or the multimodal layer.
    fn scopes(&self, encoder: bool) -> Vec<String> {
        let (used, shared, base) = if encoder {
            (
                self.sharing.use_unimodal_encoder,
                self.sharing.share_unimodal_across_tasks,
                "unimodal",
            )
        } else {
            (
                self.sharing.use_multimodal_layer,
                self.sharing.share_multimodal_across_tasks,
                "multimodal",
            )
        };
        if !used {
            return Vec::new();
        }
        if shared {
            return vec![base.to_string()];
        }
        self.tasks
            .iter()
            .filter(|t| encoder || t.modalities.len() >= 2)
            .map(|t| format!("{base}@{}", t.name))
            .collect()
    }

    fn encoder_scope(&self, task: &str) -> String {
        if self.sharing.share_unimodal_across_tasks {
            "unimodal".into()
        } else {
            format!("unimodal@{task}")
        }
    }

    fn multimodal_scope(&self, task: &str) -> String {
        if self.sharing.share_multimodal_across_tasks {
            "multimodal".into()
        } else {
            format!("multimodal@{task}")
        }
    }

    /// Width of the per-modality stream entering the multimodal layer.
    pub fn stream_width(&self) -> usize {
        if self.sharing.use_unimodal_encoder {
            self.config.latent_dim
        } else {
            self.registry.d_all()
        }
    }

    /// Head input width for a task over `k` modalities.
    pub fn head_input_width(&self, k: usize) -> usize {
        let w = self.stream_width();
        if self.sharing.use_multimodal_layer && k >= 2 {
            k * (k - 1) * w
        } else {
            k * w
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn sharing(&self) -> SharingConfig {
        self.sharing
    }

    pub fn registry(&self) -> &ModalityRegistry {
        &self.registry
    }

    pub fn tasks(&self) -> &[TaskHead] {
        &self.tasks
    }

    pub fn task(&self, name: &str) -> Result<&TaskHead> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.buffers
    }

    // ---- forward --------------------------------------------------------

    fn ctx<'a>(&'a self, tape: &'a mut Tape) -> Ctx<'a> {
        Ctx {
            params: &self.params,
            tape,
        }
    }

    /// Perceiver encoding of one standardized modality into `[n, d_LN, d_LS]`.
    pub fn encode_unimodal(
        &self,
        tape: &mut Tape,
        task: &str,
        batch: &StandardizedBatch,
        trace: &mut Trace,
    ) -> Result<Var> {
        if !self.sharing.use_unimodal_encoder {
            return Err(Error::Unsupported("model has no unimodal encoder".into()));
        }
        let d_all = self.registry.d_all();
        if batch.data.rank() != 3 || batch.data.shape()[2] != d_all {
            return Err(Error::Incompatible(format!(
                "batch shape {:?} vs registry width {d_all}",
                batch.data.shape()
            )));
        }
        let n = batch.batch_size();
        let scope = self.encoder_scope(task);
        let cfg = &self.config;
        let input = tape.constant(batch.data.clone());
        let mut ctx = self.ctx(tape);
        let latent = ctx.param(&format!("{scope}.latent"))?;
        let latent = ctx.tape.broadcast_leading(latent, &[n]);
        let (z, cross) = ctx.stack(latent, input, &scope, &cfg.encoder, cfg.nonlinearity, true)?;
        trace
            .encoder_attention
            .push((batch.modality_index, cross[0]));
        Ok(z)
    }

    /// One directed crossmodal transformer: `z_q` attends to `z_ctx`; returns
    /// the last row of the final query stream, `[n, width]`.
    pub fn crossmodal_direct(
        &self,
        tape: &mut Tape,
        task: &str,
        z_q: Var,
        z_ctx: Var,
    ) -> Result<Var> {
        if !self.sharing.use_multimodal_layer {
            return Err(Error::Unsupported("model has no multimodal layer".into()));
        }
        let (sq, sc) = (tape.shape(z_q).to_vec(), tape.shape(z_ctx).to_vec());
        let w = self.stream_width();
        if sq.len() != 3 || sc.len() != 3 || sq[0] != sc[0] || sq[2] != w || sc[2] != w {
            return Err(Error::Shape {
                op: "crossmodal",
                lhs: sq,
                rhs: sc,
            });
        }
        let scope = self.multimodal_scope(task);
        let cfg = &self.config;
        let mut ctx = self.ctx(tape);
        let (x, _) = ctx.stack(z_q, z_ctx, &scope, &cfg.multimodal, cfg.nonlinearity, false)?;
        ctx.last_row(x)
    }

    /// Directed crossmodal outputs for every ordered pair `(i, j)`, `i ≠ j`,
    /// concatenated in lexicographic order: `[n, k(k-1)·width]`.
    pub fn fuse(&self, tape: &mut Tape, task: &str, latents: &[Var]) -> Result<Var> {
        let k = latents.len();
        if k < 2 {
            return Err(Error::Arity(format!(
                "fuse needs at least 2 modalities, got {k}"
            )));
        }
        let mut blocks = Vec::with_capacity(k * (k - 1));
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    blocks.push(self.crossmodal_direct(tape, task, latents[i], latents[j])?);
                }
            }
        }
        tape.concat(&blocks, 1)
    }

    /// Batch norm followed by the task's linear layer.
    pub fn predict(
        &self,
        tape: &mut Tape,
        task: &str,
        z: Var,
        mode: Mode,
        trace: &mut Trace,
    ) -> Result<Var> {
        let head = self.task(task)?;
        let f = self.head_input_width(head.modalities.len());
        let s = tape.shape(z).to_vec();
        if s.len() != 2 || s[1] != f {
            return Err(Error::Shape {
                op: "predict",
                lhs: s,
                rhs: vec![f],
            });
        }
        let prefix = format!("head.{task}");
        let mut ctx = self.ctx(tape);
        let gain = ctx.param(&format!("{prefix}.bn.gain"))?;
        let bias = ctx.param(&format!("{prefix}.bn.bias"))?;
        let normed = match mode {
            Mode::Train => {
                let bn = ctx.tape.batch_norm_train(z, gain, bias, BATCH_NORM_EPS)?;
                trace
                    .batch_norm
                    .push((task.to_string(), bn.mean, bn.var, s[0]));
                bn.out
            }
            Mode::Eval => {
                let rm = &self.buffers[&format!("{prefix}.bn.running_mean")];
                let rv = &self.buffers[&format!("{prefix}.bn.running_var")];
                ctx.tape
                    .batch_norm_eval(z, gain, bias, rm.data(), rv.data(), BATCH_NORM_EPS)?
            }
        };
        ctx.linear(normed, &format!("{prefix}.linear"))
    }

    /// Full pipeline for one task: encode each modality, fuse, predict.
    pub fn forward_task(
        &self,
        tape: &mut Tape,
        task: &str,
        batches: &[StandardizedBatch],
        mode: Mode,
        trace: &mut Trace,
    ) -> Result<Var> {
        let head = self.task(task)?;
        if batches.len() != head.modalities.len() {
            return Err(Error::Contract(format!(
                "task `{task}` expects {} modalities, got {}",
                head.modalities.len(),
                batches.len()
            )));
        }
        let n = batches[0].batch_size();
        let mut streams = Vec::with_capacity(batches.len());
        for (m, b) in head.modalities.iter().zip(batches) {
            if self.registry.resolve(m)? != b.modality_index {
                return Err(Error::Contract(format!(
                    "task `{task}` expects modality `{m}` at this position"
                )));
            }
            if b.batch_size() != n {
                return Err(Error::Contract("modality batches differ in size".into()));
            }
            let stripped;
            let b = if self.sharing.use_modality_embeddings {
                b
            } else {
                stripped = b.without_modality_identity();
                &stripped
            };
            let z = if self.sharing.use_unimodal_encoder {
                self.encode_unimodal(tape, task, b, trace)?
            } else {
                if b.data.shape()[2] != self.registry.d_all() {
                    return Err(Error::Incompatible("batch width differs from d_all".into()));
                }
                tape.constant(b.data.clone())
            };
            streams.push(z);
        }
        let rep = if self.sharing.use_multimodal_layer && streams.len() >= 2 {
            self.fuse(tape, task, &streams)?
        } else {
            let mut ctx = self.ctx(tape);
            let rows = streams
                .iter()
                .map(|&z| ctx.last_row(z))
                .collect::<Result<Vec<_>>>()?;
            if rows.len() == 1 {
                rows[0]
            } else {
                tape.concat(&rows, 1)?
            }
        };
        self.predict(tape, task, rep, mode, trace)
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn apply_batch_norm_updates(&mut self, trace: &Trace) {
        let m = self.config.bn_momentum;
        for (task, mean, var, n) in &trace.batch_norm {
            let unbias = if *n > 1 {
                *n as f64 / (*n - 1) as f64
            } else {
                1.0
            };
            let rm = self
                .buffers
                .get_mut(&format!("head.{task}.bn.running_mean"))
                .expect("head buffers exist for every task");
            for (r, b) in rm.data_mut().iter_mut().zip(mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            let rv = self
                .buffers
                .get_mut(&format!("head.{task}.bn.running_var"))
                .expect("head buffers exist for every task");
            for (r, b) in rv.data_mut().iter_mut().zip(var) {
                *r = (1.0 - m) * *r + m * b * unbias;
            }
        }
    }
}

/// Heads of the four-task large setting over [`crate::modality::large_setting_registry`].
pub fn large_setting_tasks() -> Vec<TaskHead> {
    vec![
        TaskHead::new("mimic", &["mimic.static", "mimic.timeseries"], 2),
        TaskHead::new("avmnist", &["avmnist.image", "avmnist.audio"], 10),
        TaskHead::new("mosei", &["mosei.image", "mosei.audio", "mosei.text"], 2),
        TaskHead::new(
            "urfunny",
            &["urfunny.image", "urfunny.audio", "urfunny.text"],
            2,
        ),
    ]
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, Trainable};
use super::schedule::build_schedule;
use super::step::{aggregate_validation, evaluate, train_step, StepBatch};
use super::task::{SplitData, TaskData, TaskSpec};
use crate::checkpoint::{decode_model, encode_model};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synthbench::subsample_indices;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub trainable: Trainable,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

fn default_eval_batch() -> usize {
    256
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f64, seed: u64) -> Self {
        Self {
            epochs,
            lr,
            weight_decay: 0.0,
            seed,
            trainable: Trainable::All,
            eval_batch_size: default_eval_batch(),
        }
    }
}

/// How the best checkpoint is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Eval-weighted mean over all tasks.
    Aggregate,
    /// Validation metric of the task at this index only.
    Task(usize),
}

/// One line of the per-epoch metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub task: String,
    pub split: String,
    pub metric_name: String,
    pub value: f64,
    pub seed: u64,
}

pub fn write_metrics_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Model, optimizer and bookkeeping of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub best_score: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_model: Model,
    /// Best selection score after each epoch.
    pub best_record: Vec<f64>,
    pub history: Vec<MetricRow>,
    /// Active task names per step of the most recent epoch.
    pub last_schedule: Vec<Vec<String>>,
}

impl TrainState {
    pub fn new(model: Model, lr: f64, weight_decay: f64) -> Self {
        Self {
            best_model: model.clone(),
            model,
            optimizer: Adam::new(lr, weight_decay),
            epoch: 0,
            best_score: None,
            best_epoch: None,
            best_record: Vec::new(),
            history: Vec::new(),
            last_schedule: Vec::new(),
        }
    }

    /// Validation and test metric of every task on the best model.
    pub fn final_metrics(
        &self,
        tasks: &[TaskSpec],
        data: &[&TaskData],
        eval_batch: usize,
    ) -> Result<Vec<(f64, f64)>> {
        tasks
            .iter()
            .zip(data)
            .map(|(t, d)| {
                Ok((
                    evaluate(&self.best_model, t, &d.valid, eval_batch)?,
                    evaluate(&self.best_model, t, &d.test, eval_batch)?,
                ))
            })
            .collect()
    }
}

fn epoch_seed(seed: u64, epoch: usize, task: usize) -> u64 {
    seed ^ ((epoch as u64 + 1) << 32) ^ (task as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Shuffled row batches of one task for one epoch.
fn epoch_batches(n: usize, batch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    rows.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Runs epochs `state.epoch..cfg.epochs` of the staged multitask schedule,
/// tracking the best checkpoint by `selection`.
pub fn train_multitask(
    state: &mut TrainState,
    tasks: &[TaskSpec],
    data: &[&TaskData],
    cfg: &TrainConfig,
    selection: Selection,
) -> Result<()> {
    if tasks.is_empty() || tasks.len() != data.len() {
        return Err(Error::Config("need one data set per task".into()));
    }
    for t in tasks {
        t.validate()?;
        if state.model.task(&t.name)?.outputs != t.outputs {
            return Err(Error::Config(format!(
                "task `{}` output width differs from its head",
                t.name
            )));
        }
    }
    if let Selection::Task(i) = selection {
        if i >= tasks.len() {
            return Err(Error::Config("selection task index out of range".into()));
        }
    }
    state.optimizer.lr = cfg.lr;
    state.optimizer.weight_decay = cfg.weight_decay;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let batches: Vec<Vec<Vec<usize>>> = tasks
            .iter()
            .zip(data)
            .enumerate()
            .map(|(i, (t, d))| {
                epoch_batches(d.train.len(), t.batch_size, epoch_seed(cfg.seed, epoch, i))
            })
            .collect();
        let counts: Vec<(String, usize)> = tasks
            .iter()
            .zip(&batches)
            .map(|(t, b)| (t.name.clone(), b.len()))
            .collect();
        let schedule = build_schedule(&counts)?;
        let mut loss_sums = vec![(0.0, 0usize); tasks.len()];
        state.last_schedule.clear();
        for step in 0..schedule.steps_per_epoch() {
            let active = schedule.active(step);
            let parts: Vec<SplitData> = active
                .iter()
                .map(|&(i, b)| {
                    let rows = batches[i].get(b).ok_or_else(|| {
                        Error::Schedule(format!(
                            "task `{}` ran out of batches at step {step}",
                            tasks[i].name
                        ))
                    })?;
                    data[i].train.select(rows)
                })
                .collect::<Result<_>>()?;
            let step_batches: Vec<StepBatch> = active
                .iter()
                .zip(&parts)
                .map(|(&(i, _), p)| StepBatch {
                    task: &tasks[i],
                    inputs: &p.inputs,
                    targets: &p.targets,
                })
                .collect();
            let losses = train_step(
                &mut state.model,
                &mut state.optimizer,
                &step_batches,
                cfg.trainable,
            )
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("{m} at epoch {epoch} step {step}")),
                other => other,
            })?;
            for (&(i, _), l) in active.iter().zip(losses) {
                loss_sums[i].0 += l;
                loss_sums[i].1 += 1;
            }
            state
                .last_schedule
                .push(active.iter().map(|&(i, _)| tasks[i].name.clone()).collect());
        }

        let mut valid = Vec::with_capacity(tasks.len());
        for (i, (t, d)) in tasks.iter().zip(data).enumerate() {
            let metric = evaluate(&state.model, t, &d.valid, cfg.eval_batch_size)?;
            valid.push((metric, t.eval_weight));
            let row = |split: &str, name: &str, value| MetricRow {
                epoch,
                task: t.name.clone(),
                split: split.into(),
                metric_name: name.into(),
                value,
                seed: cfg.seed,
            };
            state.history.push(row(
                "train",
                "loss",
                loss_sums[i].0 / loss_sums[i].1.max(1) as f64,
            ));
            state
                .history
                .push(row("valid", t.loss.metric_name(), metric));
        }
        let score = match selection {
            Selection::Aggregate => aggregate_validation(&valid)?,
            Selection::Task(i) => valid[i].0,
        };
        if state.best_score.is_none_or(|b| score > b) {
            state.best_score = Some(score);
            state.best_epoch = Some(epoch);
            state.best_model = state.model.clone();
        }
        state.best_record.push(state.best_score.expect("set above"));
        state.epoch += 1;
    }
    Ok(())
}

/// Appends test rows for the best model (tagged with the best epoch).
pub fn record_test_metrics(
    state: &mut TrainState,
    tasks: &[TaskSpec],
    data: &[&TaskData],
    cfg: &TrainConfig,
) -> Result<()> {
    let epoch = state.best_epoch.unwrap_or(0);
    for (t, d) in tasks.iter().zip(data) {
        let value = evaluate(&state.best_model, t, &d.test, cfg.eval_batch_size)?;
        state.history.push(MetricRow {
            epoch,
            task: t.name.clone(),
            split: "test".into(),
            metric_name: t.loss.metric_name().into(),
            value,
            seed: cfg.seed,
        });
    }
    Ok(())
}

/// Pretrains on `sources` (if any), then fine-tunes every parameter on the
/// target alone starting from the best source checkpoint.
pub fn pretrain_finetune(
    model: Model,
    sources: &[(TaskSpec, &TaskData)],
    target: (&TaskSpec, &TaskData),
    pre: &TrainConfig,
    fine: &TrainConfig,
) -> Result<TrainState> {
    let start = if sources.is_empty() {
        model
    } else {
        let specs: Vec<TaskSpec> = sources.iter().map(|(s, _)| s.clone()).collect();
        let data: Vec<&TaskData> = sources.iter().map(|(_, d)| *d).collect();
        let mut state = TrainState::new(model, pre.lr, pre.weight_decay);
        train_multitask(&mut state, &specs, &data, pre, Selection::Aggregate)?;
        state.best_model
    };
    if start.registry().resolve_all(&target.0.modalities).is_err() {
        return Err(Error::Incompatible(format!(
            "target `{}` modalities are not registered",
            target.0.name
        )));
    }
    let mut state = TrainState::new(start, fine.lr, fine.weight_decay);
    train_multitask(
        &mut state,
        std::slice::from_ref(target.0),
        &[target.1],
        fine,
        Selection::Task(0),
    )?;
    Ok(state)
}

/// Target training rows kept at fraction `p` (stratified, nested in `p`).
pub fn fewshot_rows(target: &TaskSpec, data: &TaskData, p: f64, seed: u64) -> Result<Vec<usize>> {
    let super::task::Targets::Classes(labels) = &data.train.targets else {
        return Err(Error::Unsupported(
            "few-shot subsampling needs class labels".into(),
        ));
    };
    subsample_indices(labels, target.outputs, p, seed)
}

/// Joint training of the target (first, weight multiplied by `boost`) with
/// auxiliary tasks; selection uses the target's validation metric only.
pub fn fewshot_train(
    model: Model,
    auxiliary: &[(TaskSpec, &TaskData)],
    target: (&TaskSpec, &TaskData),
    p: f64,
    boost: f64,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    let rows = fewshot_rows(target.0, target.1, p, cfg.seed)?;
    if rows.is_empty() {
        return Err(Error::Data("fraction leaves no training batch".into()));
    }
    let sub = TaskData {
        train: target.1.train.select(&rows)?,
        ..target.1.clone()
    };
    let mut spec = target.0.clone();
    spec.loss_weight *= boost;
    let mut specs = vec![spec];
    let mut data = vec![&sub];
    for (s, d) in auxiliary {
        specs.push(s.clone());
        data.push(*d);
    }
    let mut state = TrainState::new(model, cfg.lr, cfg.weight_decay);
    train_multitask(&mut state, &specs, &data, cfg, Selection::Task(0))?;
    Ok(state)
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    epoch: usize,
    best_score: Option<f64>,
    best_epoch: Option<usize>,
    best_record: Vec<f64>,
    history: Vec<MetricRow>,
    last_schedule: Vec<Vec<String>>,
    lr: f64,
    weight_decay: f64,
    adam_steps: BTreeMap<String, u64>,
}

/// Serializes the full training state into one checkpoint file.
pub fn save_state(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let meta = StateMeta {
        epoch: state.epoch,
        best_score: state.best_score,
        best_epoch: state.best_epoch,
        best_record: state.best_record.clone(),
        history: state.history.clone(),
        last_schedule: state.last_schedule.clone(),
        lr: state.optimizer.lr,
        weight_decay: state.optimizer.weight_decay,
        adam_steps: state.optimizer.steps.clone(),
    };
    let mut extra_meta = BTreeMap::new();
    extra_meta.insert("train_state".to_string(), serde_json::to_value(meta)?);
    let mut tensors = BTreeMap::new();
    let vec_tensor = |v: &Vec<f64>| Tensor::new(vec![v.len()], v.clone());
    for (k, v) in &state.optimizer.m {
        tensors.insert(format!("adam.m.{k}"), vec_tensor(v)?);
    }
    for (k, v) in &state.optimizer.v {
        tensors.insert(format!("adam.v.{k}"), vec_tensor(v)?);
    }
    for (k, t) in state.best_model.params() {
        tensors.insert(format!("best.param.{k}"), t.clone());
    }
    for (k, t) in state.best_model.buffers() {
        tensors.insert(format!("best.buffer.{k}"), t.clone());
    }
    fs::write(path, encode_model(&state.model, &extra_meta, &tensors)?)?;
    Ok(())
}

pub fn load_state(path: impl AsRef<Path>) -> Result<TrainState> {
    let loaded = decode_model(&fs::read(path)?)?;
    let meta: StateMeta = serde_json::from_value(
        loaded
            .extra_meta
            .get("train_state")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("file holds a model, not a training state".into()))?,
    )
    .map_err(|e| Error::Checkpoint(format!("training state: {e}")))?;
    let mut optimizer = Adam::new(meta.lr, meta.weight_decay);
    optimizer.steps = meta.adam_steps;
    let mut best_params = BTreeMap::new();
    let mut best_buffers = BTreeMap::new();
    for (k, t) in loaded.extra_tensors {
        if let Some(name) = k.strip_prefix("adam.m.") {
            optimizer.m.insert(name.to_string(), t.into_data());
        } else if let Some(name) = k.strip_prefix("adam.v.") {
            optimizer.v.insert(name.to_string(), t.into_data());
        } else if let Some(name) = k.strip_prefix("best.param.") {
            best_params.insert(name.to_string(), t);
        } else if let Some(name) = k.strip_prefix("best.buffer.") {
            best_buffers.insert(name.to_string(), t);
        } else {
            return Err(Error::Checkpoint(format!("unexpected record `{k}`")));
        }
    }
    let m = &loaded.model;
    let best_model = Model::from_parts(
        m.config().clone(),
        m.sharing(),
        m.registry().clone(),
        m.tasks().to_vec(),
        best_params,
        best_buffers,
    )
    .map_err(|e| Error::Checkpoint(format!("best model: {e}")))?;
    Ok(TrainState {
        model: loaded.model,
        optimizer,
        epoch: meta.epoch,
        best_score: meta.best_score,
        best_epoch: meta.best_epoch,
        best_model,
        best_record: meta.best_record,
        history: meta.history,
        last_schedule: meta.last_schedule,
    })
}

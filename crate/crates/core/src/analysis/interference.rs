use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::synthbench::flip_class_labels;
use crate::training::{
    evaluate, train_multitask, Selection, Targets, TaskData, TaskSpec, TrainConfig, TrainState,
    Trainable,
};

/// Test metrics of the final model of one run, with what produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: TrainConfig,
    pub tasks: Vec<String>,
    pub test: Vec<f64>,
}

/// Trains from `start` and evaluates the final (not best) model on test.
pub fn run_and_evaluate(
    start: &Model,
    tasks: &[TaskSpec],
    data: &[&TaskData],
    cfg: &TrainConfig,
) -> Result<RunSummary> {
    let mut state = TrainState::new(start.clone(), cfg.lr, cfg.weight_decay);
    train_multitask(&mut state, tasks, data, cfg, Selection::Aggregate)?;
    let test = tasks
        .iter()
        .zip(data)
        .map(|(t, d)| evaluate(&state.model, t, &d.test, cfg.eval_batch_size))
        .collect::<Result<_>>()?;
    Ok(RunSummary {
        config: cfg.clone(),
        tasks: tasks.iter().map(|t| t.name.clone()).collect(),
        test,
    })
}

/// `flipped − clean` per evaluated task.
pub fn interference_row(clean: &RunSummary, flipped: &RunSummary) -> Result<Vec<f64>> {
    if clean.config != flipped.config || clean.tasks != flipped.tasks {
        return Err(Error::Config(
            "clean and flipped runs differ in configuration".into(),
        ));
    }
    Ok(flipped
        .test
        .iter()
        .zip(&clean.test)
        .map(|(f, c)| f - c)
        .collect())
}

/// Copy of `data` with the training labels of one task flipped.
pub fn flip_task(data: &TaskData, classes: usize, seed: u64) -> Result<TaskData> {
    let Targets::Classes(labels) = &data.train.targets else {
        return Err(Error::Unsupported(
            "label flipping needs class labels".into(),
        ));
    };
    let mut out = data.clone();
    out.train.targets = Targets::Classes(flip_class_labels(labels, classes, seed)?);
    Ok(out)
}

/// Paired clean/flipped runs from the same start model; returns the clean
/// summary and the delta row for flipping task `flip`.
pub fn interference_experiment(
    start: &Model,
    tasks: &[TaskSpec],
    data: &[&TaskData],
    flip: usize,
    flip_seed: u64,
    cfg: &TrainConfig,
) -> Result<(RunSummary, Vec<f64>)> {
    let flipped_task = flip_task(
        data.get(flip)
            .ok_or_else(|| Error::Config("flip index out of range".into()))?,
        tasks[flip].outputs,
        flip_seed,
    )?;
    let mut flipped_data = data.to_vec();
    flipped_data[flip] = &flipped_task;
    let clean = run_and_evaluate(start, tasks, data, cfg)?;
    let flipped = run_and_evaluate(start, tasks, &flipped_data, cfg)?;
    let row = interference_row(&clean, &flipped)?;
    Ok((clean, row))
}

/// Delta matrices for one training regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterferenceReport {
    pub regime: Trainable,
    /// Evaluated tasks (columns).
    pub tasks: Vec<String>,
    /// Flipped tasks (rows).
    pub flipped: Vec<String>,
    pub deltas: Vec<Vec<f64>>,
}

impl InterferenceReport {
    /// Runs one paired experiment per flipped task.
    pub fn build(
        start: &Model,
        tasks: &[TaskSpec],
        data: &[&TaskData],
        flip_seed: u64,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let mut deltas = Vec::with_capacity(tasks.len());
        for flip in 0..tasks.len() {
            deltas.push(interference_experiment(start, tasks, data, flip, flip_seed, cfg)?.1);
        }
        let names: Vec<String> = tasks.iter().map(|t| t.name.clone()).collect();
        Ok(Self {
            regime: cfg.trainable,
            tasks: names.clone(),
            flipped: names,
            deltas,
        })
    }
}

use std::collections::BTreeMap;

use super::optim::{Adam, Trainable};
use super::task::{LossKind, SplitData, Targets, TaskSpec};
use crate::error::{Error, Result};
use crate::modality::StandardizedBatch;
use crate::model::{Mode, Model, Trace};
use crate::tensor::Tape;

/// One task's batch within a training step.
#[derive(Clone, Copy, Debug)]
pub struct StepBatch<'a> {
    pub task: &'a TaskSpec,
    pub inputs: &'a [StandardizedBatch],
    pub targets: &'a Targets,
}

#[derive(Debug)]
pub struct StepGrads {
    /// Unweighted loss per batch, in input order.
    pub losses: Vec<f64>,
    /// Gradient of `Σ w_T · L_T` for every parameter the step touched.
    pub grads: BTreeMap<String, Vec<f64>>,
    pub trace: Trace,
}

/// Forward and backward through the weighted sum of task losses.
pub fn weighted_grads(model: &Model, batches: &[StepBatch]) -> Result<StepGrads> {
    if batches.is_empty() {
        return Err(Error::Schedule("training step without active tasks".into()));
    }
    let mut tape = Tape::new();
    let mut trace = Trace::default();
    let mut total = None;
    let mut losses = Vec::with_capacity(batches.len());
    for b in batches {
        let logits =
            model.forward_task(&mut tape, &b.task.name, b.inputs, Mode::Train, &mut trace)?;
        let loss = b.task.loss(&mut tape, logits, b.targets)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "task `{}` produced loss {value}",
                b.task.name
            )));
        }
        losses.push(value);
        let weighted = tape.scale(loss, b.task.loss_weight);
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        });
    }
    tape.backward(total.expect("at least one batch"))?;
    let grads = tape
        .params()
        .filter_map(|(name, v)| tape.grad(v).map(|g| (name.to_string(), g.to_vec())))
        .collect();
    Ok(StepGrads {
        losses,
        grads,
        trace,
    })
}

/// One optimizer update on the weighted loss of all active tasks.
pub fn train_step(
    model: &mut Model,
    opt: &mut Adam,
    batches: &[StepBatch],
    trainable: Trainable,
) -> Result<Vec<f64>> {
    let step = weighted_grads(model, batches)?;
    opt.step(model, &step.grads, trainable);
    model.apply_batch_norm_updates(&step.trace);
    Ok(step.losses)
}

/// Accuracy, or negated MSE, in evaluation mode; larger is better.
pub fn evaluate(
    model: &Model,
    task: &TaskSpec,
    data: &SplitData,
    batch_size: usize,
) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Data(format!(
            "task `{}` has an empty split",
            task.name
        )));
    }
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let len = batch_size.min(n - start);
        let rows: Vec<usize> = (start..start + len).collect();
        let part = data.select(&rows)?;
        let mut tape = Tape::new();
        let logits = model.forward_task(
            &mut tape,
            &task.name,
            &part.inputs,
            Mode::Eval,
            &mut Trace::default(),
        )?;
        let out = tape.value(logits);
        let width = out.shape()[1];
        match (&part.targets, task.loss) {
            (Targets::Values(t), LossKind::Mse) => {
                total += out
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / width as f64;
            }
            (Targets::Classes(y), _) => {
                for (row, &label) in out.data().chunks(width).zip(y) {
                    let pred = (0..width)
                        .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                        .expect("non-empty row");
                    total += f64::from(u8::from(pred == label));
                }
            }
            _ => {
                return Err(Error::Data(format!(
                    "task `{}` targets do not match its loss",
                    task.name
                )))
            }
        }
        start += len;
    }
    let mean = total / n as f64;
    Ok(if task.loss == LossKind::Mse {
        -mean
    } else {
        mean
    })
}

/// Weighted mean of larger-is-better metrics.
pub fn aggregate_validation(metrics: &[(f64, f64)]) -> Result<f64> {
    let wsum: f64 = metrics.iter().map(|(_, w)| w).sum();
    if metrics.is_empty() || !(wsum > 0.0) {
        return Err(Error::Config(
            "validation weights must sum to a positive value".into(),
        ));
    }
    Ok(metrics.iter().map(|(m, w)| m * w).sum::<f64>() / wsum)
}

use crate::error::{Error, Result};

/// Epoch-staged task activation: a task with `B` batches joins for the last
/// `B` steps of every epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    steps_per_epoch: usize,
    tasks: Vec<(String, usize)>,
}

pub fn build_schedule(batch_counts: &[(String, usize)]) -> Result<Schedule> {
    if batch_counts.is_empty() {
        return Err(Error::Schedule("no tasks to schedule".into()));
    }
    if let Some((name, _)) = batch_counts.iter().find(|(_, b)| *b == 0) {
        return Err(Error::Schedule(format!("task `{name}` has no batches")));
    }
    let steps = batch_counts
        .iter()
        .map(|(_, b)| *b)
        .max()
        .expect("non-empty");
    Ok(Schedule {
        steps_per_epoch: steps,
        tasks: batch_counts.to_vec(),
    })
}

impl Schedule {
    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn tasks(&self) -> &[(String, usize)] {
        &self.tasks
    }

    /// Tasks active at 0-based `step`, with the index of the batch each one
    /// consumes, in registration order.
    pub fn active(&self, step: usize) -> Vec<(usize, usize)> {
        self.tasks
            .iter()
            .enumerate()
            .filter_map(|(i, (_, b))| {
                let start = self.steps_per_epoch - b;
                (step >= start && step < self.steps_per_epoch).then(|| (i, step - start))
            })
            .collect()
    }

    pub fn active_names(&self, step: usize) -> Vec<&str> {
        self.active(step)
            .into_iter()
            .map(|(i, _)| self.tasks[i].0.as_str())
            .collect()
    }
}

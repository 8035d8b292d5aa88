use std::collections::BTreeMap;
use std::thread;

use crate::error::{Error, Result};
use crate::model::{Mode, Model, Trace};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{LossKind, SplitData, Targets, TaskSpec};

type SampleGrads = Vec<(String, Vec<f64>)>;

/// Mean over samples of `|∂ prob / ∂θ|` for every scalar of every named
/// tensor in `params`. `prob(tape, i)` builds the correct-class probability of
/// sample `i`, registering parameters with [`Tape::param`].
pub fn involvement_fn<F>(
    params: &BTreeMap<String, Tensor>,
    samples: usize,
    prob: F,
) -> Result<BTreeMap<String, Vec<f64>>>
where
    F: Fn(&mut Tape, usize) -> Result<Var> + Sync,
{
    if samples == 0 {
        return Err(Error::Data("involvement needs at least one sample".into()));
    }
    let per_sample = |i: usize| -> Result<Vec<(String, Vec<f64>)>> {
        let mut tape = Tape::new();
        let p = prob(&mut tape, i)?;
        if tape.value(p).numel() != 1 {
            return Err(Error::Contract("probability must be a scalar".into()));
        }
        tape.backward(p)?;
        Ok(tape
            .params()
            .filter_map(|(n, v)| tape.grad(v).map(|g| (n.to_string(), g.to_vec())))
            .collect())
    };
    let workers = thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(samples);
    let chunk = samples.div_ceil(workers);
    let results: Vec<Result<Vec<SampleGrads>>> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let per_sample = &per_sample;
                s.spawn(move || {
                    (w * chunk..((w + 1) * chunk).min(samples))
                        .map(per_sample)
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });

    let mut sums: BTreeMap<String, Vec<f64>> = params
        .iter()
        .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
        .collect();
    for sample in results
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
    {
        for (name, g) in sample {
            let Some(acc) = sums.get_mut(&name) else {
                continue;
            };
            for (a, x) in acc.iter_mut().zip(&g) {
                *a += x.abs();
            }
        }
    }
    let n = samples as f64;
    sums.values_mut()
        .for_each(|v| v.iter_mut().for_each(|x| *x /= n));
    Ok(sums)
}

/// Involvement of every model parameter in `task`, over at most `cap`
/// samples of `data` (evaluation mode, one sample per pass).
pub fn involvement(
    model: &Model,
    task: &TaskSpec,
    data: &SplitData,
    cap: usize,
) -> Result<BTreeMap<String, Vec<f64>>> {
    if task.loss == LossKind::Mse {
        return Err(Error::Unsupported(format!(
            "involvement is defined for classification only; `{}` is a regression task",
            task.name
        )));
    }
    let Targets::Classes(labels) = &data.targets else {
        return Err(Error::Data("involvement needs class labels".into()));
    };
    let n = data.len().min(cap);
    involvement_fn(model.params(), n, |tape, i| {
        let inputs = data
            .inputs
            .iter()
            .map(|b| b.narrow(i, 1))
            .collect::<Result<Vec<_>>>()?;
        let logits =
            model.forward_task(tape, &task.name, &inputs, Mode::Eval, &mut Trace::default())?;
        let probs = tape.softmax(logits, 1)?;
        let p = tape.pick(probs, &[labels[i]])?;
        Ok(tape.sum(p))
    })
}

/// Per-scalar involvement for several tasks over one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct InvolvementTable {
    pub tasks: Vec<String>,
    /// Tensor name and scalar count, in row order.
    pub tensors: Vec<(String, usize)>,
    /// `values[task][row]`.
    pub values: Vec<Vec<f64>>,
}

impl InvolvementTable {
    /// Assembles a table; tensors a task never touched get zero rows.
    pub fn new(
        params: &BTreeMap<String, Tensor>,
        per_task: Vec<(String, BTreeMap<String, Vec<f64>>)>,
    ) -> Result<Self> {
        let tensors: Vec<(String, usize)> =
            params.iter().map(|(k, t)| (k.clone(), t.numel())).collect();
        let mut tasks = Vec::new();
        let mut values = Vec::new();
        for (task, map) in per_task {
            let mut col = Vec::new();
            for (name, n) in &tensors {
                match map.get(name) {
                    Some(v) if v.len() == *n => col.extend_from_slice(v),
                    Some(_) => {
                        return Err(Error::Contract(format!(
                            "involvement size mismatch for `{name}`"
                        )))
                    }
                    None => col.extend(std::iter::repeat_n(0.0, *n)),
                }
            }
            if col.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "bad involvement value for task `{task}`"
                )));
            }
            tasks.push(task);
            values.push(col);
        }
        Ok(Self {
            tasks,
            tensors,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|(_, n)| n).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        self.values.iter().map(|col| col[r]).collect()
    }

    /// Tensor name of each row.
    pub fn row_names(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .flat_map(|(name, n)| std::iter::repeat_n(name.as_str(), *n))
            .collect()
    }

    /// One row per tensor holding the mean over its scalars.
    pub fn per_tensor(&self) -> InvolvementTable {
        let mut values = vec![Vec::new(); self.tasks.len()];
        let mut start = 0;
        for (_, n) in &self.tensors {
            for (t, col) in self.values.iter().enumerate() {
                values[t].push(col[start..start + n].iter().sum::<f64>() / *n as f64);
            }
            start += n;
        }
        InvolvementTable {
            tasks: self.tasks.clone(),
            tensors: self.tensors.iter().map(|(k, _)| (k.clone(), 1)).collect(),
            values,
        }
    }

    pub fn task_counts(&self, epsilon: f64) -> Vec<usize> {
        (0..self.len())
            .map(|r| task_count(&self.row(r), epsilon))
            .collect()
    }
}

/// Number of tasks whose involvement strictly exceeds `epsilon` times the
/// row maximum; an all-zero row gives 0.
pub fn task_count(row: &[f64], epsilon: f64) -> usize {
    let max = row.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    row.iter().filter(|&&x| x > epsilon * max).count()
}

/// Fraction of parameters at each task count, for one component.
#[derive(Clone, Debug, PartialEq)]
pub struct CountDistribution {
    pub component: String,
    /// Index = task count (0 is the inactive bucket).
    pub parameters: Vec<usize>,
}

impl CountDistribution {
    pub fn total(&self) -> usize {
        self.parameters.iter().sum()
    }

    pub fn fractions(&self) -> Vec<f64> {
        let t = self.total().max(1) as f64;
        self.parameters.iter().map(|&c| c as f64 / t).collect()
    }
}

/// Task-count histograms grouped by `component(tensor name)`.
pub fn count_distribution(
    table: &InvolvementTable,
    epsilon: f64,
    component: impl Fn(&str) -> String,
) -> Vec<CountDistribution> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let counts = table.task_counts(epsilon);
    for (name, n) in table.row_names().into_iter().zip(counts) {
        groups
            .entry(component(name))
            .or_insert_with(|| vec![0; table.tasks.len() + 1])[n] += 1;
    }
    groups
        .into_iter()
        .map(|(component, parameters)| CountDistribution {
            component,
            parameters,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub epsilon: f64,
    pub active_fraction: f64,
    /// Whether the fraction lies within the tolerance band.
    pub qualified: bool,
}

pub const EPSILON_GRID: [f64; 19] = [
    0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80,
    0.85, 0.90, 0.95,
];

/// Mean over (parameter, task) pairs of the active indicator.
pub fn active_fraction(table: &InvolvementTable, epsilon: f64) -> f64 {
    let rows = table.len();
    let tasks = table.tasks.len();
    if rows == 0 || tasks == 0 {
        return 0.0;
    }
    let active: usize = table.task_counts(epsilon).iter().sum();
    active as f64 / (rows * tasks) as f64
}

/// Smallest grid ε whose active fraction is within 5 points of one half,
/// or the grid point nearest to one half when none qualifies.
pub fn calibrate_epsilon(table: &InvolvementTable) -> Result<Calibration> {
    if table.tasks.len() < 2 {
        return Err(Error::Contract(
            "calibration needs at least two tasks".into(),
        ));
    }
    let scan: Vec<Calibration> = EPSILON_GRID
        .iter()
        .map(|&epsilon| {
            let f = active_fraction(table, epsilon);
            Calibration {
                epsilon,
                active_fraction: f,
                qualified: (f - 0.5).abs() <= 0.05 + 1e-12,
            }
        })
        .collect();
    if let Some(c) = scan.iter().find(|c| c.qualified) {
        return Ok(*c);
    }
    Ok(*scan
        .iter()
        .min_by(|a, b| {
            (a.active_fraction - 0.5)
                .abs()
                .total_cmp(&(b.active_fraction - 0.5).abs())
        })
        .expect("non-empty grid"))
}

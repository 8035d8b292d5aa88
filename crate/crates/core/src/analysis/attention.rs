use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Mode, Model, Trace};
use crate::tensor::{Tape, Tensor};
use crate::training::SplitData;

/// Running sum of first-layer encoder attention for one (modality, length).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSum {
    pub modality: usize,
    pub seq_len: usize,
    /// `[d_LN, t]` sum over samples of the head-averaged weights.
    pub sum: Tensor,
    pub count: usize,
}

impl AttentionSum {
    pub fn mean(&self) -> Tensor {
        let c = self.count.max(1) as f64;
        Tensor::from_fn(self.sum.shape(), |i| self.sum.data()[i] / c)
    }

    pub fn merge(&mut self, other: &AttentionSum) -> Result<()> {
        if (self.modality, self.seq_len) != (other.modality, other.seq_len) {
            return Err(Error::Contract(
                "merging attention of different groups".into(),
            ));
        }
        self.sum
            .data_mut()
            .iter_mut()
            .zip(other.sum.data())
            .for_each(|(a, b)| *a += b);
        self.count += other.count;
        Ok(())
    }
}

/// Sums attention over `data` in evaluation mode, grouped by modality and
/// sequence length.
pub fn attention_sums(
    model: &Model,
    task: &str,
    data: &SplitData,
    batch: usize,
) -> Result<Vec<AttentionSum>> {
    let mut groups: BTreeMap<(usize, usize), AttentionSum> = BTreeMap::new();
    let n = data.len();
    let mut start = 0;
    while start < n {
        let len = batch.min(n - start);
        let inputs = data
            .inputs
            .iter()
            .map(|b| b.narrow(start, len))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let mut trace = Trace::default();
        model.forward_task(&mut tape, task, &inputs, Mode::Eval, &mut trace)?;
        for (modality, v) in &trace.encoder_attention {
            let p = tape.value(*v);
            let (bn, heads, lat, t) = (p.shape()[0], p.shape()[1], p.shape()[2], p.shape()[3]);
            let entry = groups
                .entry((*modality, t))
                .or_insert_with(|| AttentionSum {
                    modality: *modality,
                    seq_len: t,
                    sum: Tensor::zeros(&[lat, t]),
                    count: 0,
                });
            let sum = entry.sum.data_mut();
            for b in 0..bn {
                for h in 0..heads {
                    let off = (b * heads + h) * lat * t;
                    for (s, x) in sum.iter_mut().zip(&p.data()[off..off + lat * t]) {
                        *s += x / heads as f64;
                    }
                }
            }
            entry.count += bn;
        }
        start += len;
    }
    Ok(groups.into_values().collect())
}

/// Mean `[d_LN, t]` attention per modality (and length) over `data`.
pub fn attention_average(
    model: &Model,
    task: &str,
    data: &SplitData,
    batch: usize,
) -> Result<Vec<(usize, Tensor)>> {
    Ok(attention_sums(model, task, data, batch)?
        .iter()
        .map(|s| (s.modality, s.mean()))
        .collect())
}

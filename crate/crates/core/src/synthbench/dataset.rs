use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::modality::ModalitySpec;
use crate::tensor::Tensor;

/// Shape of one synthetic modality: positional axis extents and channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthModality {
    pub name: String,
    pub axes: Vec<usize>,
    pub channels: usize,
}

impl SynthModality {
    pub fn new(name: impl Into<String>, axes: &[usize], channels: usize) -> Self {
        Self {
            name: name.into(),
            axes: axes.to_vec(),
            channels,
        }
    }

    pub fn numel(&self) -> usize {
        self.axes.iter().product::<usize>() * self.channels
    }

    /// Sample tensor shape for `n` items.
    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        let mut s = vec![n];
        s.extend(&self.axes);
        s.push(self.channels);
        s
    }

    pub fn spec(&self, num_freq_bands: usize, max_freq: f64) -> ModalitySpec {
        ModalitySpec::new(
            self.name.clone(),
            self.channels,
            self.axes.len(),
            num_freq_bands,
            max_freq,
        )
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || self.axes.is_empty()
            || self.channels == 0
            || self.axes.contains(&0)
        {
            return Err(Error::Data(format!("bad modality shape {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Valid,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Valid, SplitKind::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Valid => "valid",
            SplitKind::Test => "test",
        }
    }
}

/// Raw per-modality inputs `[n, axes.., channels]` with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Result<Split> {
        Ok(Split {
            inputs: self
                .inputs
                .iter()
                .map(|t| t.select_first(rows))
                .collect::<Result<_>>()?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
        })
    }

    /// Builds a split from per-sample rows, hashing contents into ids.
    pub(crate) fn from_rows(
        shapes: &[Vec<usize>],
        rows: Vec<(Vec<Vec<f64>>, usize)>,
    ) -> Result<Split> {
        let n = rows.len();
        let mut flat: Vec<Vec<f64>> = vec![Vec::new(); shapes.len()];
        let mut labels = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        for (parts, label) in rows {
            let mut h = Sha256::new();
            for (m, part) in parts.into_iter().enumerate() {
                for v in &part {
                    h.update(v.to_le_bytes());
                }
                flat[m].extend(part);
            }
            ids.push(hex(&h.finalize()[..12]));
            labels.push(label);
        }
        let inputs = shapes
            .iter()
            .zip(flat)
            .map(|(s, data)| {
                let mut shape = s.clone();
                shape[0] = n;
                Tensor::new(shape, data)
            })
            .collect::<Result<_>>()?;
        Ok(Split {
            inputs,
            labels,
            ids,
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One task's data over all three splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: String,
    pub modalities: Vec<SynthModality>,
    pub classes: usize,
    pub rule: String,
    pub seed: u64,
    pub train: Split,
    pub valid: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Valid => &self.valid,
            SplitKind::Test => &self.test,
        }
    }

    /// True when no sample id appears in more than one split.
    pub fn splits_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        let total = self.train.len() + self.valid.len() + self.test.len();
        for kind in SplitKind::ALL {
            seen.extend(self.split(kind).ids.iter().cloned());
        }
        seen.len() == total
    }
}

/// Replaces every training label with a different class, uniformly among the
/// wrong ones.
pub fn flip_labels(ds: &Dataset, seed: u64) -> Result<Dataset> {
    let mut out = ds.clone();
    out.train.labels = flip_class_labels(&ds.train.labels, ds.classes, seed)?;
    Ok(out)
}

/// Each label moved to a uniformly chosen different class.
pub fn flip_class_labels(labels: &[usize], classes: usize, seed: u64) -> Result<Vec<usize>> {
    if classes < 2 {
        return Err(Error::Data(
            "cannot flip labels of a single-class task".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(labels
        .iter()
        .map(|&y| (y + rng.random_range(1..classes)) % classes)
        .collect())
}

/// Stratified, nested training-row selection: for fixed `seed`, the rows kept
/// at fraction `p` are a subset of those kept at any larger fraction.
pub fn subsample_indices(
    labels: &[usize],
    classes: usize,
    p: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Data(format!("fraction {p} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for c in 0..classes {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if rows.is_empty() {
            continue;
        }
        rows.shuffle(&mut rng);
        let k = (p * rows.len() as f64).round() as usize;
        if k == 0 {
            return Err(Error::Data(format!(
                "class {c} is empty after subsampling at p={p}"
            )));
        }
        keep.extend_from_slice(&rows[..k]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Keeps a stratified fraction `p` of the training split.
pub fn subsample(ds: &Dataset, p: f64, seed: u64) -> Result<Dataset> {
    let rows = subsample_indices(&ds.train.labels, ds.classes, p, seed)?;
    Ok(Dataset {
        train: ds.train.select(&rows)?,
        ..ds.clone()
    })
}

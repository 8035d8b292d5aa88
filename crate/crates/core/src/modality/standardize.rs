use super::fourier::fourier_encoding;
use super::patch::patch_grid;
use super::spec::{Layout, ModalityRegistry, ModalitySpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A modality batch in the common `[n, t, d_all]` format.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizedBatch {
    pub data: Tensor,
    pub layout: Layout,
    pub modality_index: usize,
    pub task: String,
    /// Extents of the positional axes (product is `t`).
    pub axis_lengths: Vec<usize>,
}

impl StandardizedBatch {
    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.data.shape()[1]
    }

    // callers only pass the always non-empty segments
    fn segment(&self, range: &std::ops::Range<usize>) -> Tensor {
        let (n, t, d) = (
            self.data.shape()[0],
            self.data.shape()[1],
            self.data.shape()[2],
        );
        let w = range.len();
        let mut out = Vec::with_capacity(n * t * w);
        for row in self.data.data().chunks_exact(d) {
            out.extend_from_slice(&row[range.clone()]);
        }
        Tensor::from_parts(vec![n, t, w], out)
    }

    /// The raw (patchified, flattened) channels.
    pub fn raw_segment(&self) -> Tensor {
        self.segment(&self.layout.raw)
    }

    pub fn positional_segment(&self) -> Tensor {
        self.segment(&self.layout.positional)
    }

    pub fn modality_segment(&self) -> Tensor {
        self.segment(&self.layout.modality)
    }

    /// Rows `[start, start + len)` of the batch.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            data: self.data.narrow_first(start, len)?,
            ..self.clone()
        })
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            data: self.data.select_first(rows)?,
            ..self.clone()
        })
    }

    /// Copy with the one-hot identity segment zeroed.
    pub fn without_modality_identity(&self) -> Self {
        let mut out = self.clone();
        let d = self.layout.width();
        let range = self.layout.modality.clone();
        for row in out.data.data_mut().chunks_exact_mut(d) {
            row[range.clone()].iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }
}

/// Splits a raw modality tensor into `(n, positional axis extents, flat [n·t·d_m] data)`.
fn sequence_view(raw: &Tensor, spec: &ModalitySpec) -> Result<(usize, Vec<usize>, Vec<f64>)> {
    if let Some(patch) = spec.patch_size {
        let (grid, gh, gw) = patch_grid(raw, patch)?;
        if grid.shape()[3] != spec.channel_size {
            return Err(Error::Layout(format!(
                "modality `{}`: patches have {} channels, spec says {}",
                spec.name,
                grid.shape()[3],
                spec.channel_size
            )));
        }
        return Ok((grid.shape()[0], vec![gh, gw], grid.into_data()));
    }
    let s = raw.shape();
    if s.len() != spec.extra_axes + 2 || *s.last().unwrap() != spec.channel_size {
        return Err(Error::Layout(format!(
            "modality `{}` expects [n, {} axes, {}], got {s:?}",
            spec.name, spec.extra_axes, spec.channel_size
        )));
    }
    Ok((s[0], s[1..s.len() - 1].to_vec(), raw.data().to_vec()))
}

/// Serializes one modality into rows of `raw | zero pad | positional | one-hot`.
pub fn standardize(
    raw: &Tensor,
    spec: &ModalitySpec,
    registry: &ModalityRegistry,
    task: &str,
) -> Result<StandardizedBatch> {
    let index = registry.resolve(&spec.name)?;
    if registry.spec(index) != spec {
        return Err(Error::Config(format!(
            "spec for `{}` does not match the registry entry",
            spec.name
        )));
    }
    let (n, lengths, flat) = sequence_view(raw, spec)?;
    let t: usize = lengths.iter().product();
    let pos = fourier_encoding(&lengths, spec.num_freq_bands, spec.max_freq)?;
    let layout = registry.layout(index);
    let d_all = layout.width();
    let d_m = spec.channel_size;
    let d_pm = layout.positional.len();

    let mut data = vec![0.0; n * t * d_all];
    for b in 0..n {
        for i in 0..t {
            let row = &mut data[(b * t + i) * d_all..(b * t + i + 1) * d_all];
            let src = (b * t + i) * d_m;
            row[layout.raw.clone()].copy_from_slice(&flat[src..src + d_m]);
            row[layout.positional.clone()].copy_from_slice(&pos.data()[i * d_pm..(i + 1) * d_pm]);
            row[layout.modality.start + index] = 1.0;
        }
    }
    Ok(StandardizedBatch {
        data: Tensor::new(vec![n, t, d_all], data)?,
        layout,
        modality_index: index,
        task: task.to_string(),
        axis_lengths: lengths,
    })
}

/// Applies one positional table (the first batch's) to every listed
/// time-aligned modality.
pub fn shared_time_encoding(mut batches: Vec<StandardizedBatch>) -> Result<Vec<StandardizedBatch>> {
    let Some(first) = batches.first() else {
        return Ok(batches);
    };
    let t = first.seq_len();
    let n = first.batch_size();
    let d_pm = first.layout.positional.len();
    for b in &batches[1..] {
        if b.seq_len() != t {
            return Err(Error::Alignment(format!(
                "sequence lengths differ: {} vs {}",
                t,
                b.seq_len()
            )));
        }
        if b.batch_size() != n {
            return Err(Error::Alignment(format!(
                "batch sizes differ: {} vs {}",
                n,
                b.batch_size()
            )));
        }
        if b.layout.positional.len() != d_pm {
            return Err(Error::Alignment(format!(
                "positional widths differ: {} vs {}",
                d_pm,
                b.layout.positional.len()
            )));
        }
    }
    let table: Vec<f64> = {
        let d = first.layout.width();
        first.data.data()[..t * d]
            .chunks_exact(d)
            .flat_map(|row| row[first.layout.positional.clone()].to_vec())
            .collect()
    };
    for b in batches.iter_mut().skip(1) {
        let d = b.layout.width();
        let range = b.layout.positional.clone();
        for (r, row) in b.data.data_mut().chunks_exact_mut(d).enumerate() {
            let i = r % t;
            row[range.clone()].copy_from_slice(&table[i * d_pm..(i + 1) * d_pm]);
        }
        b.axis_lengths = vec![t];
    }
    Ok(batches)
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::{hex, Dataset, Split, SplitKind, SynthModality};
use crate::arrayfile;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub size: usize,
    /// File name → sha256 of its bytes.
    pub files: BTreeMap<String, String>,
}

/// Dataset description written next to the array files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: String,
    pub modalities: Vec<SynthModality>,
    pub classes: usize,
    pub rule: String,
    pub seed: u64,
    pub splits: BTreeMap<String, SplitEntry>,
}

fn file_names(ds_modalities: &[SynthModality], kind: SplitKind) -> (Vec<String>, String) {
    let inputs = ds_modalities
        .iter()
        .map(|m| format!("{}.{}.bin", kind.name(), m.name))
        .collect();
    (inputs, format!("{}.labels.bin", kind.name()))
}

fn sha(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Writes array files and `manifest.json` into `dir`; returns the manifest.
pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut splits = BTreeMap::new();
    for kind in SplitKind::ALL {
        let split = ds.split(kind);
        let (inputs, labels) = file_names(&ds.modalities, kind);
        let mut files = BTreeMap::new();
        let label_t = Tensor::new(
            vec![split.len()],
            split.labels.iter().map(|&y| y as f64).collect(),
        )?;
        for (name, t) in inputs
            .iter()
            .zip(&split.inputs)
            .chain([(&labels, &label_t)])
        {
            let bytes = arrayfile::encode(t);
            fs::write(dir.join(name), &bytes)?;
            files.insert(name.clone(), sha(&bytes));
        }
        splits.insert(
            kind.name().to_string(),
            SplitEntry {
                size: split.len(),
                files,
            },
        );
    }
    let manifest = Manifest {
        task: ds.task.clone(),
        modalities: ds.modalities.clone(),
        classes: ds.classes,
        rule: ds.rule.clone(),
        seed: ds.seed,
        splits,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let mut splits = Vec::new();
    for kind in SplitKind::ALL {
        let entry = manifest
            .splits
            .get(kind.name())
            .ok_or_else(|| Error::Data(format!("manifest lacks split `{}`", kind.name())))?;
        let (inputs, labels) = file_names(&manifest.modalities, kind);
        let mut load = |name: &String| -> Result<Tensor> {
            let bytes = fs::read(dir.join(name))?;
            if entry.files.get(name) != Some(&sha(&bytes)) {
                return Err(Error::Data(format!("hash mismatch for `{name}`")));
            }
            arrayfile::decode(&bytes)
        };
        let inputs: Vec<Tensor> = inputs.iter().map(&mut load).collect::<Result<_>>()?;
        let labels: Vec<usize> = load(&labels)?.data().iter().map(|&y| y as usize).collect();
        if labels.len() != entry.size || inputs.iter().any(|t| t.shape()[0] != entry.size) {
            return Err(Error::Data(format!(
                "split `{}` size mismatch",
                kind.name()
            )));
        }
        if labels.iter().any(|&y| y >= manifest.classes) {
            return Err(Error::Data("label out of range".into()));
        }
        let ids = (0..entry.size)
            .map(|i| {
                let mut h = Sha256::new();
                for t in &inputs {
                    let w = t.numel() / entry.size;
                    for v in &t.data()[i * w..(i + 1) * w] {
                        h.update(v.to_le_bytes());
                    }
                }
                hex(&h.finalize()[..12])
            })
            .collect();
        splits.push(Split {
            inputs,
            labels,
            ids,
        });
    }
    let test = splits.pop().expect("three splits");
    let valid = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        task: manifest.task,
        modalities: manifest.modalities,
        classes: manifest.classes,
        rule: manifest.rule,
        seed: manifest.seed,
        train,
        valid,
        test,
    })
}

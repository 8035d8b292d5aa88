use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use highmmt_core::config::ExperimentConfig;
use highmmt_core::synthbench::read_dataset;
use highmmt_core::training::{TaskData, TaskSpec};
use highmmt_core::ModalityRegistry;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Common;

pub struct Context {
    pub cfg: ExperimentConfig,
    pub registry: ModalityRegistry,
    config_path: PathBuf,
    force: bool,
    command: &'static str,
}

#[derive(Serialize)]
struct InputEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: String,
    config_hash: String,
    seed: u64,
    version: &'a str,
    inputs: Vec<InputEntry>,
    outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

impl Context {
    pub fn new(common: &Common, command: &'static str) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(&common.config)?;
        if let Some(seed) = common.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(out) = &common.out {
            cfg.run.out = out.clone();
        }
        let registry = cfg.registry()?;
        Ok(Self {
            cfg,
            registry,
            config_path: common.config.clone(),
            force: common.force,
            command,
        })
    }

    pub fn seed(&self) -> u64 {
        self.cfg.training.seed
    }

    /// Creates an empty output directory, clearing it first under `--force`.
    pub fn fresh_dir(&self, dir: &Path) -> Result<()> {
        let occupied = dir.is_dir() && fs::read_dir(dir)?.next().is_some();
        if occupied {
            if !self.force {
                bail!(
                    "output directory {} is not empty (use --force to replace it)",
                    dir.display()
                );
            }
            fs::remove_dir_all(dir)?;
        }
        fs::create_dir_all(dir)?;
        Ok(())
    }

    pub fn output_dir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.cfg.run.out.join(name);
        self.fresh_dir(&dir)?;
        Ok(dir)
    }

    fn dataset_dir(&self, task: &str) -> PathBuf {
        self.cfg.data_dir().join(task)
    }

    /// Reads the generated datasets of the named tasks.
    pub fn load_tasks(&self, names: &[&str]) -> Result<(Vec<TaskSpec>, Vec<TaskData>)> {
        for &name in names {
            self.cfg.task(name)?;
        }
        let mut specs = Vec::new();
        let mut data = Vec::new();
        for &name in names {
            let spec = self.cfg.task(name)?.clone();
            let dir = self.dataset_dir(name);
            if !dir.join("manifest.json").is_file() {
                bail!(
                    "no dataset for task `{name}` under {} (run `highmmt gen-data` first)",
                    dir.display()
                );
            }
            let ds = read_dataset(&dir).with_context(|| format!("loading dataset of `{name}`"))?;
            data.push(TaskData::from_dataset(&ds, &spec, &self.registry)?);
            specs.push(spec);
        }
        Ok((specs, data))
    }

    pub fn dataset_inputs(&self, names: &[&str]) -> Vec<PathBuf> {
        names
            .iter()
            .map(|n| self.dataset_dir(n).join("manifest.json"))
            .collect()
    }

    /// Writes `manifest.json` describing this run into `dir`.
    pub fn write_manifest(&self, dir: &Path, inputs: &[PathBuf]) -> Result<()> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputEntry {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut outputs: Vec<String> = Vec::new();
        collect_files(dir, dir, &mut outputs)?;
        outputs.sort();
        let manifest = RunManifest {
            command: self.command,
            config: self.config_path.display().to_string(),
            config_hash: self.cfg.hash(),
            seed: self.seed(),
            version: env!("CARGO_PKG_VERSION"),
            inputs,
            outputs,
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(())
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("inside root");
            if rel != Path::new("manifest.json") {
                out.push(rel.display().to_string());
            }
        }
    }
    Ok(())
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::{Dataset, Split, SplitKind, SynthModality};
use crate::error::{Error, Result};

/// How a label is computed from the per-modality latent values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Binary: parity of the per-modality sign bits.
    XorSigns,
    /// Binary: sum of per-modality levels reaches half the maximum.
    SumThreshold,
    /// Binary: all rule modalities show the same pattern.
    PatternMatch,
    /// `classes`-way: sum of per-modality levels modulo `classes`.
    ModularSum,
    /// `levels^k`-way: the joint tuple of per-modality levels.
    Joint,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::XorSigns => "xor_signs",
            Rule::SumThreshold => "sum_threshold",
            Rule::PatternMatch => "pattern_match",
            Rule::ModularSum => "modular_sum",
            Rule::Joint => "joint",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskConfig {
    pub name: String,
    pub modalities: Vec<SynthModality>,
    pub classes: usize,
    pub rule: Rule,
    /// Indices into `modalities` read by the rule; empty means all.
    #[serde(default)]
    pub rule_modalities: Vec<usize>,
    /// Distinct patterns per modality (ignored by `xor_signs`).
    #[serde(default = "default_levels")]
    pub levels: usize,
    pub noise: f64,
    #[serde(default = "default_signal")]
    pub signal: f64,
    /// Train, valid, test sizes.
    pub sizes: [usize; 3],
    pub seed: u64,
    /// Tasks with equal prototype seeds share patterns for equally named modalities.
    #[serde(default)]
    pub prototype_seed: u64,
}

fn default_levels() -> usize {
    2
}

fn default_signal() -> f64 {
    1.0
}

impl SynthTaskConfig {
    pub fn rule_indices(&self) -> Vec<usize> {
        if self.rule_modalities.is_empty() {
            (0..self.modalities.len()).collect()
        } else {
            self.rule_modalities.clone()
        }
    }

    /// Number of patterns each modality draws from.
    pub fn values_per_modality(&self) -> usize {
        match self.rule {
            Rule::XorSigns => 2,
            Rule::ModularSum => self.classes,
            Rule::SumThreshold | Rule::PatternMatch | Rule::Joint => self.levels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(format!("task `{}`: {m}", self.name)));
        if self.modalities.is_empty() {
            return bad("no modalities".into());
        }
        for m in &self.modalities {
            m.validate()?;
        }
        let idx = self.rule_indices();
        if idx.len() < 2 || idx.iter().any(|&i| i >= self.modalities.len()) {
            return bad(format!("rule needs ≥2 valid modality indices, got {idx:?}"));
        }
        let want = match self.rule {
            Rule::ModularSum => self.classes.max(2),
            Rule::Joint => self.levels.pow(idx.len() as u32),
            _ => 2,
        };
        if self.classes != want {
            return bad(format!(
                "rule {} needs {want} classes, got {}",
                self.rule.id(),
                self.classes
            ));
        }
        if self.values_per_modality() < 2 {
            return bad("need at least 2 levels".into());
        }
        if self.sizes.contains(&0) || !(self.noise >= 0.0) || !(self.signal > 0.0) {
            return bad("sizes, noise and signal must be positive".into());
        }
        Ok(())
    }
}

/// Label of one sample from its per-rule-modality values.
pub fn rule_label(rule: Rule, values: &[usize], classes: usize, levels: usize) -> usize {
    match rule {
        Rule::XorSigns => values.iter().sum::<usize>() % 2,
        Rule::SumThreshold => {
            let max = values.len() * (levels - 1);
            usize::from(2 * values.iter().sum::<usize>() >= max)
        }
        Rule::PatternMatch => usize::from(values.iter().all(|&v| v == values[0])),
        Rule::ModularSum => values.iter().sum::<usize>() % classes,
        Rule::Joint => values.iter().fold(0, |acc, &v| acc * levels + v),
    }
}

/// Seed derived from a shared seed and a modality name.
pub(crate) fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// `count` Gaussian patterns of `m.numel()` entries with standard deviation `signal`.
pub(crate) fn prototypes(m: &SynthModality, count: usize, signal: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &m.name));
    (0..count)
        .map(|_| (0..m.numel()).map(|_| signal * gauss(&mut rng)).collect())
        .collect()
}

fn sample_values<R: Rng>(cfg: &SynthTaskConfig, rng: &mut R) -> Vec<usize> {
    let k = cfg.modalities.len();
    let levels = cfg.values_per_modality();
    let mut values: Vec<usize> = (0..k).map(|_| rng.random_range(0..levels)).collect();
    if cfg.rule == Rule::PatternMatch {
        let idx = cfg.rule_indices();
        let positive = rng.random_bool(0.5);
        let first = values[idx[0]];
        for &i in &idx[1..] {
            values[i] = first;
        }
        if !positive {
            let j = idx[1 + rng.random_range(0..idx.len() - 1)];
            values[j] = (first + rng.random_range(1..levels)) % levels;
        }
    }
    values
}

fn label_of(cfg: &SynthTaskConfig, values: &[usize]) -> usize {
    let picked: Vec<usize> = cfg.rule_indices().iter().map(|&i| values[i]).collect();
    rule_label(cfg.rule, &picked, cfg.classes, cfg.values_per_modality())
}

/// Generates a fusion dataset whose label depends on several modalities.
pub fn gen_fusion_task(cfg: &SynthTaskConfig) -> Result<Dataset> {
    cfg.validate()?;
    let protos: Vec<Vec<Vec<f64>>> = cfg
        .modalities
        .iter()
        .map(|m| prototypes(m, cfg.values_per_modality(), cfg.signal, cfg.prototype_seed))
        .collect();
    let shapes: Vec<Vec<usize>> = cfg.modalities.iter().map(|m| m.batch_shape(1)).collect();
    let mut splits = Vec::new();
    for (s, kind) in SplitKind::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, kind.name()));
        let rows = (0..cfg.sizes[s])
            .map(|_| {
                let values = sample_values(cfg, &mut rng);
                let parts = values
                    .iter()
                    .zip(&protos)
                    .map(|(&v, p)| {
                        p[v].iter()
                            .map(|&x| x + cfg.noise * gauss(&mut rng))
                            .collect()
                    })
                    .collect();
                (parts, label_of(cfg, &values))
            })
            .collect();
        splits.push(Split::from_rows(&shapes, rows)?);
    }
    let test = splits.pop().expect("three splits");
    let valid = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        task: cfg.name.clone(),
        modalities: cfg.modalities.clone(),
        classes: cfg.classes,
        rule: cfg.rule.id().to_string(),
        seed: cfg.seed,
        train,
        valid,
        test,
    })
}

fn nearest(protos: &[Vec<f64>], x: &[f64]) -> usize {
    let dist = |p: &Vec<f64>| p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    (0..protos.len())
        .min_by(|&a, &b| dist(&protos[a]).total_cmp(&dist(&protos[b])))
        .expect("at least two prototypes")
}

fn decoded_values(cfg: &SynthTaskConfig, split: &Split) -> Vec<Vec<usize>> {
    let protos: Vec<Vec<Vec<f64>>> = cfg
        .modalities
        .iter()
        .map(|m| prototypes(m, cfg.values_per_modality(), cfg.signal, cfg.prototype_seed))
        .collect();
    (0..split.len())
        .map(|i| {
            cfg.modalities
                .iter()
                .enumerate()
                .map(|(m, spec)| {
                    let w = spec.numel();
                    nearest(&protos[m], &split.inputs[m].data()[i * w..(i + 1) * w])
                })
                .collect()
        })
        .collect()
}

/// Accuracy of the rule applied to nearest-prototype decodings of each modality.
pub fn bayes_accuracy(cfg: &SynthTaskConfig, split: &Split) -> f64 {
    let decoded = decoded_values(cfg, split);
    let hits = decoded
        .iter()
        .zip(&split.labels)
        .filter(|(v, &y)| label_of(cfg, v) == y)
        .count();
    hits as f64 / split.len() as f64
}

/// Best accuracy achievable from a single modality's decoded pattern
/// (majority label per pattern, fitted and scored on `split`).
pub fn unimodal_majority_accuracy(cfg: &SynthTaskConfig, split: &Split) -> f64 {
    let decoded = decoded_values(cfg, split);
    let levels = cfg.values_per_modality();
    (0..cfg.modalities.len())
        .map(|m| {
            let mut counts = vec![vec![0usize; cfg.classes]; levels];
            for (v, &y) in decoded.iter().zip(&split.labels) {
                counts[v[m]][y] += 1;
            }
            let hits: usize = counts
                .iter()
                .map(|c| c.iter().copied().max().unwrap_or(0))
                .sum();
            hits as f64 / split.len() as f64
        })
        .fold(0.0, f64::max)
}

pub(crate) fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

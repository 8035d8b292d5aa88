use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Split, SplitKind, SynthModality};
use super::fusion::{gauss, name_seed, prototypes};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub name: String,
    pub a: SynthModality,
    pub b: SynthModality,
    pub shared_classes: usize,
    /// Items per class in each modality, split 3/1/1.
    pub items_per_class: usize,
    pub noise: f64,
    #[serde(default = "default_signal")]
    pub signal: f64,
    pub seed: u64,
    #[serde(default)]
    pub prototype_seed: u64,
}

fn default_signal() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    /// 1 when both items share a class.
    pub label: usize,
}

/// Items of two modalities labelled with shared classes, and per-split pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalPairSet {
    pub a_items: Tensor,
    pub b_items: Tensor,
    pub a_class: Vec<usize>,
    pub b_class: Vec<usize>,
    /// Item indices per split (train, valid, test) for each modality.
    pub a_splits: [Vec<usize>; 3],
    pub b_splits: [Vec<usize>; 3],
    pub pairs: [Vec<Pair>; 3],
}

fn items(m: &SynthModality, cfg: &RetrievalConfig, tag: &str) -> (Tensor, Vec<usize>) {
    let protos = prototypes(m, cfg.shared_classes, cfg.signal, cfg.prototype_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, tag));
    let n = cfg.shared_classes * cfg.items_per_class;
    let mut data = Vec::with_capacity(n * m.numel());
    let mut class = Vec::with_capacity(n);
    for c in 0..cfg.shared_classes {
        for _ in 0..cfg.items_per_class {
            data.extend(protos[c].iter().map(|&x| x + cfg.noise * gauss(&mut rng)));
            class.push(c);
        }
    }
    let t = Tensor::new(m.batch_shape(n), data).expect("shape matches generated data");
    (t, class)
}

/// Stratified 3/1/1 split of item indices.
fn split_items(class: &[usize], classes: usize, rng: &mut ChaCha8Rng) -> [Vec<usize>; 3] {
    let mut out: [Vec<usize>; 3] = Default::default();
    for c in 0..classes {
        let mut rows: Vec<usize> = (0..class.len()).filter(|&i| class[i] == c).collect();
        rows.shuffle(rng);
        let n = rows.len();
        let (tr, va) = (n * 3 / 5, n / 5);
        out[0].extend(&rows[..tr]);
        out[1].extend(&rows[tr..tr + va]);
        out[2].extend(&rows[tr + va..]);
    }
    out.iter_mut().for_each(|s| s.sort_unstable());
    out
}

pub fn gen_retrieval_task(cfg: &RetrievalConfig) -> Result<RetrievalPairSet> {
    cfg.a.validate()?;
    cfg.b.validate()?;
    if cfg.shared_classes < 2 {
        return Err(Error::Data(
            "retrieval needs at least 2 shared classes".into(),
        ));
    }
    let (a_items, a_class) = items(&cfg.a, cfg, "a");
    let (b_items, b_class) = items(&cfg.b, cfg, "b");
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(cfg.seed, "pairs"));
    let a_splits = split_items(&a_class, cfg.shared_classes, &mut rng);
    let b_splits = split_items(&b_class, cfg.shared_classes, &mut rng);
    let mut pairs: [Vec<Pair>; 3] = Default::default();
    for s in 0..3 {
        let by_class: Vec<Vec<usize>> = (0..cfg.shared_classes)
            .map(|c| {
                b_splits[s]
                    .iter()
                    .copied()
                    .filter(|&i| b_class[i] == c)
                    .collect()
            })
            .collect();
        for c in 0..cfg.shared_classes {
            let a_here = a_splits[s].iter().any(|&i| a_class[i] == c);
            if by_class[c].is_empty() || !a_here {
                return Err(Error::Data(format!(
                    "{} split has no item of shared class {c}",
                    SplitKind::ALL[s].name()
                )));
            }
        }
        for &a in &a_splits[s] {
            let c = a_class[a];
            let pos = by_class[c][rng.random_range(0..by_class[c].len())];
            let other = (c + rng.random_range(1..cfg.shared_classes)) % cfg.shared_classes;
            let neg = by_class[other][rng.random_range(0..by_class[other].len())];
            pairs[s].push(Pair {
                a,
                b: pos,
                label: 1,
            });
            pairs[s].push(Pair {
                a,
                b: neg,
                label: 0,
            });
        }
    }
    Ok(RetrievalPairSet {
        a_items,
        b_items,
        a_class,
        b_class,
        a_splits,
        b_splits,
        pairs,
    })
}

impl RetrievalPairSet {
    /// Materializes pairs as a two-modality binary classification dataset.
    pub fn to_dataset(&self, cfg: &RetrievalConfig) -> Result<Dataset> {
        let shapes = vec![cfg.a.batch_shape(1), cfg.b.batch_shape(1)];
        let (wa, wb) = (cfg.a.numel(), cfg.b.numel());
        let mut splits = Vec::new();
        for pairs in &self.pairs {
            let rows = pairs
                .iter()
                .map(|p| {
                    let a = self.a_items.data()[p.a * wa..(p.a + 1) * wa].to_vec();
                    let b = self.b_items.data()[p.b * wb..(p.b + 1) * wb].to_vec();
                    (vec![a, b], p.label)
                })
                .collect();
            splits.push(Split::from_rows(&shapes, rows)?);
        }
        let test = splits.pop().expect("three splits");
        let valid = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Ok(Dataset {
            task: cfg.name.clone(),
            modalities: vec![cfg.a.clone(), cfg.b.clone()],
            classes: 2,
            rule: "retrieval".into(),
            seed: cfg.seed,
            train,
            valid,
            test,
        })
    }
}

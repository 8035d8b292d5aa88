use highmmt_core::synthbench::{
    bayes_accuracy, flip_labels, gen_fusion_task, gen_retrieval_task, read_dataset, rule_label,
    subsample, subsample_indices, unimodal_majority_accuracy, write_dataset, RetrievalConfig, Rule,
    SynthModality, SynthTaskConfig,
};
use highmmt_core::tensor::Tape;
use highmmt_core::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mods() -> Vec<SynthModality> {
    vec![
        SynthModality::new("a", &[4], 3),
        SynthModality::new("b", &[2, 3], 2),
    ]
}

fn xor(noise: f64, seed: u64) -> SynthTaskConfig {
    SynthTaskConfig {
        name: "x".into(),
        modalities: mods(),
        classes: 2,
        rule: Rule::XorSigns,
        rule_modalities: vec![],
        levels: 2,
        noise,
        signal: 1.0,
        sizes: [200, 60, 60],
        seed,
        prototype_seed: 3,
    }
}

fn retrieval(classes: usize, per_class: usize) -> RetrievalConfig {
    RetrievalConfig {
        name: "r".into(),
        a: SynthModality::new("img", &[3], 2),
        b: SynthModality::new("aud", &[4], 2),
        shared_classes: classes,
        items_per_class: per_class,
        noise: 0.1,
        signal: 1.0,
        seed: 5,
        prototype_seed: 1,
    }
}

#[test]
fn noiseless_rules_are_recovered_exactly() {
    for (rule, classes, levels) in [
        (Rule::XorSigns, 2, 2),
        (Rule::SumThreshold, 2, 3),
        (Rule::PatternMatch, 2, 3),
        (Rule::ModularSum, 3, 2),
        (Rule::Joint, 9, 3),
    ] {
        let cfg = SynthTaskConfig {
            rule,
            classes,
            levels,
            ..xor(0.0, 1)
        };
        let ds = gen_fusion_task(&cfg).unwrap();
        assert_eq!(bayes_accuracy(&cfg, &ds.train), 1.0, "{rule:?}");
        assert!(ds.train.labels.iter().all(|&y| y < classes));
    }
}

#[test]
fn bayes_accuracy_high_at_configured_noise() {
    let cfg = xor(0.5, 2);
    let ds = gen_fusion_task(&cfg).unwrap();
    assert!(bayes_accuracy(&cfg, &ds.test) >= 0.95);
}

#[test]
fn xor_has_synergy() {
    let cfg = SynthTaskConfig {
        sizes: [2000, 10, 10],
        ..xor(0.3, 4)
    };
    let ds = gen_fusion_task(&cfg).unwrap();
    let margin = bayes_accuracy(&cfg, &ds.train) - unimodal_majority_accuracy(&cfg, &ds.train);
    assert!(margin > 0.4, "margin {margin}");
}

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let a = gen_fusion_task(&xor(0.3, 7)).unwrap();
    assert_eq!(a, gen_fusion_task(&xor(0.3, 7)).unwrap());
    assert_ne!(
        a.train.inputs,
        gen_fusion_task(&xor(0.3, 8)).unwrap().train.inputs
    );
}

#[test]
fn splits_are_disjoint() {
    let ds = gen_fusion_task(&xor(0.3, 1)).unwrap();
    assert!(ds.splits_disjoint());
    let r = retrieval(3, 10);
    assert!(gen_retrieval_task(&r)
        .unwrap()
        .to_dataset(&r)
        .unwrap()
        .splits_disjoint());
}

#[test]
fn rule_label_examples() {
    assert_eq!(rule_label(Rule::XorSigns, &[1, 0], 2, 2), 1);
    assert_eq!(rule_label(Rule::XorSigns, &[1, 1], 2, 2), 0);
    assert_eq!(rule_label(Rule::SumThreshold, &[2, 0], 2, 3), 1);
    assert_eq!(rule_label(Rule::SumThreshold, &[0, 1], 2, 3), 0);
    assert_eq!(rule_label(Rule::PatternMatch, &[2, 2], 2, 3), 1);
    assert_eq!(rule_label(Rule::Joint, &[2, 1], 9, 3), 7);
}

#[test]
fn inconsistent_configs_are_rejected() {
    let one_modality = SynthTaskConfig {
        modalities: vec![SynthModality::new("a", &[4], 3)],
        ..xor(0.1, 0)
    };
    assert!(matches!(
        gen_fusion_task(&one_modality),
        Err(Error::Data(_))
    ));
    let wrong_classes = SynthTaskConfig {
        classes: 3,
        ..xor(0.1, 0)
    };
    assert!(gen_fusion_task(&wrong_classes).is_err());
    let zero_axis = SynthTaskConfig {
        modalities: vec![
            SynthModality::new("a", &[0], 3),
            SynthModality::new("b", &[2], 1),
        ],
        ..xor(0.1, 0)
    };
    assert!(gen_fusion_task(&zero_axis).is_err());
}

/// Logistic regression on one modality's flattened features.
fn unimodal_probe(cfg: &SynthTaskConfig, modality: usize) -> f64 {
    let ds = gen_fusion_task(cfg).unwrap();
    let flat = |t: &Tensor| {
        let n = t.shape()[0];
        t.reshape(&[n, t.numel() / n]).unwrap()
    };
    let (x, xt) = (
        flat(&ds.train.inputs[modality]),
        flat(&ds.test.inputs[modality]),
    );
    let d = x.shape()[1];
    let mut w = Tensor::zeros(&[d, 2]);
    for _ in 0..300 {
        let mut tape = Tape::new();
        let wv = tape.param("w", &w);
        let xv = tape.constant(x.clone());
        let logits = tape.matmul(xv, wv).unwrap();
        let loss = tape.cross_entropy(logits, &ds.train.labels).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(wv).unwrap().to_vec();
        w.data_mut()
            .iter_mut()
            .zip(g)
            .for_each(|(a, b)| *a -= 0.5 * b);
    }
    let mut tape = Tape::new();
    let wv = tape.constant(w);
    let xv = tape.constant(xt);
    let out = tape.matmul(xv, wv).unwrap();
    let o = tape.value(out).data().to_vec();
    let hits = ds
        .test
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| usize::from(o[2 * i + 1] > o[2 * i]) == y)
        .count();
    hits as f64 / ds.test.len() as f64
}

#[test]
fn unimodal_probe_is_information_limited_on_xor() {
    let cfg = SynthTaskConfig {
        sizes: [600, 10, 400],
        ..xor(0.3, 9)
    };
    let ds = gen_fusion_task(&cfg).unwrap();
    let bayes = bayes_accuracy(&cfg, &ds.test);
    for m in 0..2 {
        let acc = unimodal_probe(&cfg, m);
        assert!(
            acc < bayes - 0.10,
            "modality {m}: probe {acc} vs bayes {bayes}"
        );
    }
}

#[test]
fn retrieval_pairs_are_balanced_and_consistent() {
    let cfg = retrieval(4, 10);
    let set = gen_retrieval_task(&cfg).unwrap();
    for pairs in &set.pairs {
        let pos = pairs.iter().filter(|p| p.label == 1).count();
        assert_eq!(2 * pos, pairs.len());
        for p in pairs {
            assert_eq!(p.label == 1, set.a_class[p.a] == set.b_class[p.b]);
        }
    }
    assert_eq!(
        set.a_splits.iter().map(Vec::len).collect::<Vec<_>>(),
        [24, 8, 8]
    );
    let ds = set.to_dataset(&cfg).unwrap();
    assert_eq!(ds.train.len(), 48);
    assert_eq!(ds.classes, 2);
}

#[test]
fn separable_retrieval_is_perfectly_decodable() {
    let cfg = retrieval(2, 10);
    let set = gen_retrieval_task(&cfg).unwrap();
    let nearest_class = |items: &Tensor, i: usize, protos: &[Vec<f64>]| {
        let w = items.numel() / items.shape()[0];
        let x = &items.data()[i * w..(i + 1) * w];
        let d = |p: &Vec<f64>| p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        usize::from(d(&protos[1]) < d(&protos[0]))
    };
    // class means over all items stand in for the prototypes
    let means = |items: &Tensor, class: &[usize]| {
        let w = items.numel() / items.shape()[0];
        (0..2)
            .map(|c| {
                let rows: Vec<usize> = (0..class.len()).filter(|&i| class[i] == c).collect();
                (0..w)
                    .map(|j| {
                        rows.iter().map(|&r| items.data()[r * w + j]).sum::<f64>()
                            / rows.len() as f64
                    })
                    .collect()
            })
            .collect::<Vec<Vec<f64>>>()
    };
    let (ma, mb) = (
        means(&set.a_items, &set.a_class),
        means(&set.b_items, &set.b_class),
    );
    for p in &set.pairs[2] {
        let same = nearest_class(&set.a_items, p.a, &ma) == nearest_class(&set.b_items, p.b, &mb);
        assert_eq!(usize::from(same), p.label);
    }
}

#[test]
fn shuffled_retrieval_labels_give_chance() {
    use rand::seq::SliceRandom;
    let mut accs = Vec::new();
    for seed in 0..5 {
        let cfg = RetrievalConfig {
            seed,
            ..retrieval(4, 100)
        };
        let set = gen_retrieval_task(&cfg).unwrap();
        let mut labels: Vec<usize> = set.pairs[0].iter().map(|p| p.label).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let truth: Vec<usize> = set.pairs[0]
            .iter()
            .map(|p| usize::from(set.a_class[p.a] == set.b_class[p.b]))
            .collect();
        let hits = labels.iter().zip(&truth).filter(|(a, b)| a == b).count();
        accs.push(hits as f64 / labels.len() as f64);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.5).abs() < 0.03, "mean {mean}");
}

#[test]
fn retrieval_errors() {
    assert!(gen_retrieval_task(&retrieval(1, 10)).is_err());
    // too few items leaves a split without some class
    assert!(matches!(
        gen_retrieval_task(&retrieval(3, 2)),
        Err(Error::Data(_))
    ));
}

#[test]
fn flipping_changes_every_training_label_only() {
    let ds = gen_fusion_task(&xor(0.3, 1)).unwrap();
    let f = flip_labels(&ds, 3).unwrap();
    assert!(f
        .train
        .labels
        .iter()
        .zip(&ds.train.labels)
        .all(|(a, b)| a == &(1 - b)));
    assert_eq!(f.valid, ds.valid);
    assert_eq!(f.test, ds.test);

    let cfg = SynthTaskConfig {
        rule: Rule::Joint,
        classes: 9,
        levels: 3,
        ..xor(0.3, 1)
    };
    let ds = gen_fusion_task(&cfg).unwrap();
    let f = flip_labels(&ds, 3).unwrap();
    assert!(f
        .train
        .labels
        .iter()
        .zip(&ds.train.labels)
        .all(|(a, b)| a != b));
    assert_eq!(f, flip_labels(&ds, 3).unwrap());
    let mut single = ds.clone();
    single.classes = 1;
    assert!(flip_labels(&single, 0).is_err());
}

#[test]
fn subsample_examples() {
    let ds = gen_fusion_task(&xor(0.3, 1)).unwrap();
    assert_eq!(subsample(&ds, 1.0, 0).unwrap(), ds);
    let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
    let half = subsample_indices(&labels, 2, 0.5, 4).unwrap();
    assert_eq!(half.len(), 50);
    assert_eq!(half.iter().filter(|&&i| labels[i] == 1).count(), 25);
    assert_eq!(half, subsample_indices(&labels, 2, 0.5, 4).unwrap());
    assert!(subsample_indices(&labels, 2, 0.001, 4).is_err());
    assert!(subsample_indices(&labels, 2, 0.0, 4).is_err());
}

proptest! {
    #[test]
    fn subsampling_is_nested(seed in 0u64..1000, n in 20usize..200) {
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % 3).collect();
        let small = subsample_indices(&labels, 3, 0.1, seed);
        let big = subsample_indices(&labels, 3, 0.2, seed).unwrap();
        if let Ok(small) = small {
            prop_assert!(small.iter().all(|i| big.contains(i)));
        }
    }
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_fusion_task(&xor(0.3, 1)).unwrap();
    let m1 = write_dataset(dir.path(), &ds).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    let m2 = write_dataset(dir.path(), &ds).unwrap();
    assert_eq!(m1, m2);

    let other = gen_fusion_task(&xor(0.3, 2)).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    let m3 = write_dataset(dir2.path(), &other).unwrap();
    assert_ne!(m1.splits["train"].files, m3.splits["train"].files);

    std::fs::write(dir.path().join("train.a.bin"), b"garbage").unwrap();
    assert!(read_dataset(dir.path()).is_err());
}

use std::collections::BTreeSet;

use highmmt_core::modality::{large_setting_registry, standardize, ModalityRegistry, ModalitySpec};
use highmmt_core::model::{
    large_setting_tasks, parameter_count, Component, Mode, Model, ModelConfig, SharingConfig,
    TaskHead, Trace, Variant,
};
use highmmt_core::tensor::gradcheck::{central_difference, relative_error};
use highmmt_core::{Error, StandardizedBatch, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_registry() -> ModalityRegistry {
    ModalityRegistry::new(vec![
        ModalitySpec::new("a", 3, 1, 2, 4.0),
        ModalitySpec::new("b", 2, 1, 2, 4.0),
        ModalitySpec::new("c", 4, 2, 1, 2.0),
    ])
    .unwrap()
}

fn tiny_tasks() -> Vec<TaskHead> {
    vec![
        TaskHead::new("ab", &["a", "b"], 3),
        TaskHead::new("abc", &["a", "b", "c"], 2),
        TaskHead::new("c", &["c"], 2),
    ]
}

fn tiny_model(variant: Variant) -> Model {
    Model::new(
        ModelConfig::tiny(),
        variant.sharing(),
        tiny_registry(),
        tiny_tasks(),
    )
    .unwrap()
}

fn batch(reg: &ModalityRegistry, name: &str, n: usize, seed: u64) -> StandardizedBatch {
    let spec = reg.spec_by_name(name).unwrap().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n];
    shape.extend(std::iter::repeat_n(3 + seed as usize % 3, spec.extra_axes));
    shape.push(spec.channel_size);
    let raw = Tensor::randn(&shape, 1.0, &mut rng);
    standardize(&raw, &spec, reg, "t").unwrap()
}

fn task_batches(model: &Model, task: &str, n: usize, seed: u64) -> Vec<StandardizedBatch> {
    let head = model.task(task).unwrap();
    head.modalities
        .iter()
        .enumerate()
        .map(|(i, m)| batch(model.registry(), m, n, seed + i as u64))
        .collect()
}

fn forward(
    model: &Model,
    task: &str,
    batches: &[StandardizedBatch],
    mode: Mode,
) -> (Tape, highmmt_core::Var) {
    let mut tape = Tape::new();
    let out = model
        .forward_task(&mut tape, task, batches, mode, &mut Trace::default())
        .unwrap();
    (tape, out)
}

#[test]
fn encoder_output_shape_is_modality_agnostic() {
    let model = tiny_model(Variant::Full);
    for (name, seed) in [("a", 0), ("a", 1), ("b", 2), ("c", 3)] {
        let b = batch(model.registry(), name, 2, seed);
        let mut tape = Tape::new();
        let z = model
            .encode_unimodal(&mut tape, "ab", &b, &mut Trace::default())
            .unwrap();
        assert_eq!(tape.shape(z), &[2, 4, 16]);
    }
}

#[test]
fn large_encoder_gives_twenty_by_sixty_four() {
    let reg = large_setting_registry();
    let model = Model::new(
        ModelConfig::large(),
        SharingConfig::default(),
        reg.clone(),
        large_setting_tasks(),
    )
    .unwrap();
    let spec = reg.spec_by_name("mosei.audio").unwrap().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in [3, 11] {
        let raw = Tensor::randn(&[1, t, 74], 1.0, &mut rng);
        let b = standardize(&raw, &spec, &reg, "mosei").unwrap();
        let mut tape = Tape::new();
        let z = model
            .encode_unimodal(&mut tape, "mosei", &b, &mut Trace::default())
            .unwrap();
        assert_eq!(tape.shape(z), &[1, 20, 64]);
    }
}

#[test]
fn fuse_widths_match_large_heads() {
    let model = Model::new(
        ModelConfig::large(),
        SharingConfig::default(),
        large_setting_registry(),
        large_setting_tasks(),
    )
    .unwrap();
    assert_eq!(model.head_input_width(2), 128);
    assert_eq!(model.head_input_width(3), 384);
    assert_eq!(
        model.params()["head.mimic.linear.weight"].shape(),
        &[128, 2]
    );
    assert_eq!(
        model.params()["head.avmnist.linear.weight"].shape(),
        &[128, 10]
    );
    assert_eq!(
        model.params()["head.mosei.linear.weight"].shape(),
        &[384, 2]
    );

    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let zs: Vec<_> = (0..3)
        .map(|_| tape.constant(Tensor::randn(&[2, 20, 64], 1.0, &mut rng)))
        .collect();
    let two = model.fuse(&mut tape, "mimic", &zs[..2]).unwrap();
    let three = model.fuse(&mut tape, "mosei", &zs).unwrap();
    assert_eq!(tape.shape(two), &[2, 128]);
    assert_eq!(tape.shape(three), &[2, 384]);
    assert!(matches!(
        model.fuse(&mut tape, "mimic", &zs[..1]),
        Err(Error::Arity(_))
    ));
}

#[test]
fn fuse_block_permutation() {
    let model = tiny_model(Variant::Full);
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let zs: Vec<_> = (0..3)
        .map(|_| tape.constant(Tensor::randn(&[2, 4, 16], 1.0, &mut rng)))
        .collect();
    let a = model.fuse(&mut tape, "abc", &zs).unwrap();
    let perm = [zs[2], zs[0], zs[1]];
    let b = model.fuse(&mut tape, "abc", &perm).unwrap();
    let pairs = |order: [usize; 3]| {
        let mut v = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    v.push((order[i], order[j]));
                }
            }
        }
        v
    };
    let orig = pairs([0, 1, 2]);
    let permuted = pairs([2, 0, 1]);
    let (va, vb) = (tape.value(a).clone(), tape.value(b).clone());
    for (blk, pair) in permuted.iter().enumerate() {
        let src = orig.iter().position(|p| p == pair).unwrap();
        for r in 0..2 {
            let row_a = &va.data()[r * 96 + src * 16..r * 96 + src * 16 + 16];
            let row_b = &vb.data()[r * 96 + blk * 16..r * 96 + blk * 16 + 16];
            assert_eq!(row_a, row_b);
        }
    }
}

#[test]
fn self_fusion_is_well_defined() {
    let model = tiny_model(Variant::Full);
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::randn(
        &[2, 4, 16],
        1.0,
        &mut ChaCha8Rng::seed_from_u64(2),
    ));
    let out = model.crossmodal_direct(&mut tape, "ab", z, z).unwrap();
    assert_eq!(tape.shape(out), &[2, 16]);
    assert!(tape.value(out).is_finite());
}

#[test]
fn every_variant_produces_logits() {
    for v in Variant::ALL {
        let model = tiny_model(v);
        for (task, classes) in [("ab", 3), ("abc", 2), ("c", 2)] {
            let bs = task_batches(&model, task, 3, 7);
            let (tape, out) = forward(&model, task, &bs, Mode::Train);
            assert_eq!(tape.shape(out), &[3, classes], "{v} {task}");
            assert!(tape.value(out).is_finite());
        }
    }
}

#[test]
fn no_multimodal_head_width() {
    let model = tiny_model(Variant::NoMultimodal);
    assert_eq!(model.head_input_width(3), 3 * 16);
    assert_eq!(model.params()["head.abc.bn.gain"].shape(), &[48]);
    let d_all = tiny_registry().d_all();
    let model = tiny_model(Variant::NoUnimodal);
    assert_eq!(model.head_input_width(2), 2 * d_all);
}

#[test]
fn no_embeddings_ignores_identity_segment() {
    let model = tiny_model(Variant::NoEmbeddings);
    let bs = task_batches(&model, "ab", 2, 1);
    let stripped: Vec<_> = bs.iter().map(|b| b.without_modality_identity()).collect();
    let (t1, o1) = forward(&model, "ab", &bs, Mode::Eval);
    let (t2, o2) = forward(&model, "ab", &stripped, Mode::Eval);
    assert_eq!(t1.value(o1), t2.value(o2));
}

#[test]
fn shared_encoder_touched_identically_across_tasks() {
    let model = tiny_model(Variant::Full);
    let mut sets = Vec::new();
    for task in ["ab", "abc", "c"] {
        let (tape, _) = forward(&model, task, &task_batches(&model, task, 2, 3), Mode::Train);
        let names: BTreeSet<String> = tape
            .params()
            .filter(|(n, _)| Component::of(n) == Component::UnimodalEncoder)
            .map(|(n, _)| n.to_string())
            .collect();
        sets.push(names);
    }
    assert!(!sets[0].is_empty());
    assert!(sets.iter().all(|s| s == &sets[0]));
}

#[test]
fn two_modalities_touch_the_same_encoder_tensors() {
    let model = tiny_model(Variant::Full);
    let touched = |name: &str| {
        let mut tape = Tape::new();
        let b = batch(model.registry(), name, 2, 0);
        model
            .encode_unimodal(&mut tape, "ab", &b, &mut Trace::default())
            .unwrap();
        tape.params()
            .map(|(n, _)| n.to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(touched("a"), touched("c"));
}

#[test]
fn attention_rows_are_distributions() {
    let model = tiny_model(Variant::Full);
    let mut tape = Tape::new();
    let mut trace = Trace::default();
    model
        .forward_task(
            &mut tape,
            "abc",
            &task_batches(&model, "abc", 2, 9),
            Mode::Eval,
            &mut trace,
        )
        .unwrap();
    assert_eq!(trace.encoder_attention.len(), 3);
    for (_, v) in &trace.encoder_attention {
        let p = tape.value(*v);
        let t = *p.shape().last().unwrap();
        for row in p.data().chunks(t) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn eval_batch_norm_identity_head() {
    let reg = tiny_registry();
    let tasks = vec![TaskHead::new("c", &["c"], 16)];
    let mut model = Model::new(ModelConfig::tiny(), Variant::Full.sharing(), reg, tasks).unwrap();
    let eye = Tensor::from_fn(&[16, 16], |i| if i / 16 == i % 16 { 1.0 } else { 0.0 });
    model
        .params_mut()
        .insert("head.c.linear.weight".into(), eye);
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::randn(
        &[3, 16],
        1.0,
        &mut ChaCha8Rng::seed_from_u64(0),
    ));
    let out = model
        .predict(&mut tape, "c", z, Mode::Eval, &mut Trace::default())
        .unwrap();
    let scale = 1.0 / (1.0 + 1e-5f64).sqrt();
    for (o, x) in tape.value(out).data().iter().zip(tape.value(z).data()) {
        assert!((o - x * scale).abs() < 1e-15);
    }
    assert!(matches!(
        model.predict(&mut tape, "nope", z, Mode::Eval, &mut Trace::default()),
        Err(Error::UnknownTask(_))
    ));
}

#[test]
fn batch_norm_running_stats_update() {
    let mut model = tiny_model(Variant::Full);
    let bs = task_batches(&model, "c", 4, 2);
    let mut tape = Tape::new();
    let mut trace = Trace::default();
    model
        .forward_task(&mut tape, "c", &bs, Mode::Train, &mut trace)
        .unwrap();
    let (_, mean, var, n) = trace.batch_norm[0].clone();
    model.apply_batch_norm_updates(&trace);
    let rm = &model.buffers()["head.c.bn.running_mean"];
    let rv = &model.buffers()["head.c.bn.running_var"];
    for i in 0..mean.len() {
        assert!((rm.data()[i] - 0.1 * mean[i]).abs() < 1e-15);
        let expect = 0.9 + 0.1 * var[i] * n as f64 / (n - 1) as f64;
        assert!((rv.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn wrong_width_is_incompatible() {
    let model = tiny_model(Variant::Full);
    let other = ModalityRegistry::new(vec![ModalitySpec::new("a", 9, 1, 2, 4.0)]).unwrap();
    let b = batch(&other, "a", 2, 0);
    let mut tape = Tape::new();
    let r = model.encode_unimodal(&mut tape, "ab", &b, &mut Trace::default());
    assert!(matches!(r, Err(Error::Incompatible(_))));
}

#[test]
fn mismatched_modalities_are_rejected() {
    let model = tiny_model(Variant::Full);
    let mut bs = task_batches(&model, "ab", 2, 0);
    bs.swap(0, 1);
    let mut tape = Tape::new();
    let r = model.forward_task(&mut tape, "ab", &bs, Mode::Eval, &mut Trace::default());
    assert!(matches!(r, Err(Error::Contract(_))));
    let r = model.forward_task(&mut tape, "ab", &bs[..1], Mode::Eval, &mut Trace::default());
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn end_to_end_gradient_check() {
    let mut model = tiny_model(Variant::Full);
    let bs = task_batches(&model, "abc", 4, 11);
    let labels = [0usize, 1, 1, 0];
    let loss_of = |m: &Model| {
        let mut tape = Tape::new();
        let logits = m.forward_task(&mut tape, "abc", &bs, Mode::Train, &mut Trace::default())?;
        let loss = tape.cross_entropy(logits, &labels)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let logits = model
        .forward_task(&mut tape, "abc", &bs, Mode::Train, &mut Trace::default())
        .unwrap();
    let loss = tape.cross_entropy(logits, &labels).unwrap();
    tape.backward(loss).unwrap();
    let touched: Vec<(String, Vec<f64>)> = tape
        .params()
        .map(|(n, v)| {
            (
                n.to_string(),
                tape.grad(v).map(|g| g.to_vec()).unwrap_or_default(),
            )
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (name, grad) = &touched[rng.random_range(0..touched.len())];
        let j = rng.random_range(0..grad.len());
        let x0 = model.params()[name].data()[j];
        let numeric = central_difference(
            |x| {
                model.params_mut().get_mut(name).unwrap().data_mut()[j] = x;
                loss_of(&model)
            },
            x0,
            1e-5,
        )
        .unwrap();
        model.params_mut().get_mut(name).unwrap().data_mut()[j] = x0;
        worst = worst.max(relative_error(grad[j], numeric));
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn separate_variant_counts_encoder_per_task() {
    let reg = large_setting_registry();
    let shared = Model::new(
        ModelConfig::large(),
        Variant::Full.sharing(),
        reg.clone(),
        large_setting_tasks(),
    )
    .unwrap();
    let sep = Model::new(
        ModelConfig::large(),
        Variant::Separate.sharing(),
        reg,
        large_setting_tasks(),
    )
    .unwrap();
    let (a, b) = (parameter_count(&shared), parameter_count(&sep));
    assert_eq!(b.unimodal_encoder, 4 * a.unimodal_encoder);
    assert_eq!(b.multimodal, 4 * a.multimodal);
    assert_eq!(a.heads, b.heads);
}

#[test]
fn multitask_total_times_tasks_near_single_task_sum() {
    let reg = large_setting_registry();
    let multi = Model::new(
        ModelConfig::large(),
        SharingConfig::default(),
        reg.clone(),
        large_setting_tasks(),
    )
    .unwrap();
    let single: usize = large_setting_tasks()
        .into_iter()
        .map(|t| {
            let m = Model::new(
                ModelConfig::large(),
                SharingConfig::default(),
                reg.clone(),
                vec![t],
            )
            .unwrap();
            parameter_count(&m).total()
        })
        .sum();
    let multi_total = parameter_count(&multi).total() * 4;
    let rel = (multi_total as f64 - single as f64).abs() / single as f64;
    assert!(rel < 0.05, "{multi_total} vs {single}");
}

#[test]
fn zero_task_model_counts_encoder_and_multimodal() {
    let m = Model::new(
        ModelConfig::tiny(),
        SharingConfig::default(),
        tiny_registry(),
        vec![],
    )
    .unwrap();
    let r = parameter_count(&m);
    assert_eq!(r.heads, 0);
    assert!(r.unimodal_encoder > 0 && r.multimodal > 0);
    assert_eq!(
        r.total(),
        m.params().values().map(|t| t.numel()).sum::<usize>()
    );
}

#[test]
fn construction_is_seeded() {
    assert_eq!(tiny_model(Variant::Full), tiny_model(Variant::Full));
    let mut cfg = ModelConfig::tiny();
    cfg.seed = 1;
    let other = Model::new(cfg, SharingConfig::default(), tiny_registry(), tiny_tasks()).unwrap();
    assert_ne!(other.params(), tiny_model(Variant::Full).params());
}

#[test]
fn bad_task_lists_are_config_errors() {
    let dup = vec![TaskHead::new("x", &["a"], 2), TaskHead::new("x", &["b"], 2)];
    assert!(Model::new(
        ModelConfig::tiny(),
        SharingConfig::default(),
        tiny_registry(),
        dup
    )
    .is_err());
    let unknown = vec![TaskHead::new("x", &["zzz"], 2)];
    assert!(matches!(
        Model::new(
            ModelConfig::tiny(),
            SharingConfig::default(),
            tiny_registry(),
            unknown
        ),
        Err(Error::UnknownModality(_))
    ));
}

use highmmt_core::modality::{
    large_setting_registry, patchify, shared_time_encoding, standardize, ModalityRegistry,
    ModalitySpec,
};
use highmmt_core::{Error, Tensor};
use proptest::prelude::*;

#[test]
fn large_setting_d_all_is_387() {
    let reg = large_setting_registry();
    assert_eq!(reg.len(), 9);
    assert_eq!(reg.d_all(), 387);
    // shared text: both aliases resolve to the same one-hot slot
    assert_eq!(
        reg.resolve("mosei.text").unwrap(),
        reg.resolve("urfunny.text").unwrap()
    );
}

#[test]
fn avmnist_image_layout_golden() {
    let reg = large_setting_registry();
    let spec = reg.spec_by_name("avmnist.image").unwrap().clone();
    let img = Tensor::from_fn(&[2, 28, 28], |i| 1.0 + (i % 97) as f64);
    let b = standardize(&img, &spec, &reg, "avmnist").unwrap();
    assert_eq!(b.data.shape(), &[2, 49, 387]);
    assert_eq!(b.layout.raw, 0..16);
    assert_eq!(b.layout.pad, 16..352);
    assert_eq!(b.layout.positional, 352..378);
    assert_eq!(b.layout.modality, 378..387);
    let idx = reg.resolve("avmnist.image").unwrap();
    let patches = patchify(&img, 4).unwrap();
    for (r, row) in b.data.data().chunks_exact(387).enumerate() {
        assert_eq!(&row[..16], &patches.data()[r * 16..(r + 1) * 16]);
        assert!(row[16..352].iter().all(|&v| v == 0.0));
        for (k, &v) in row[378..].iter().enumerate() {
            assert_eq!(v, if k == idx { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn tiny_registry_d_all_formula() {
    let reg = ModalityRegistry::new(vec![ModalitySpec::new("x", 2, 1, 1, 1.0)]).unwrap();
    assert_eq!(reg.d_all(), 6);
    let raw = Tensor::from_fn(&[1, 3, 2], |i| i as f64);
    let b = standardize(&raw, reg.spec(0), &reg, "t").unwrap();
    assert!(b.layout.pad.is_empty());
    assert_eq!(b.data.shape(), &[1, 3, 6]);
}

#[test]
fn positional_widths_of_appendix_tables() {
    // (extra axes, bands) -> width for every distinct combination in the tables
    for (a, f, w) in [(2, 6, 26), (1, 3, 7), (1, 6, 13), (3, 6, 39)] {
        assert_eq!(ModalitySpec::new("m", 1, a, f, 1.0).positional_width(), w);
    }
}

#[test]
fn shape_and_spec_errors() {
    let reg = ModalityRegistry::new(vec![ModalitySpec::new("x", 2, 1, 1, 1.0)]).unwrap();
    let wrong = Tensor::zeros(&[1, 3, 3]);
    assert!(matches!(
        standardize(&wrong, reg.spec(0), &reg, "t"),
        Err(Error::Layout(_))
    ));
    let other = ModalitySpec::new("x", 2, 1, 2, 1.0);
    assert!(matches!(
        standardize(&Tensor::zeros(&[1, 3, 2]), &other, &reg, "t"),
        Err(Error::Config(_))
    ));
    let stranger = ModalitySpec::new("y", 2, 1, 1, 1.0);
    assert!(matches!(
        standardize(&Tensor::zeros(&[1, 3, 2]), &stranger, &reg, "t"),
        Err(Error::UnknownModality(_))
    ));
}

fn aligned_registry() -> ModalityRegistry {
    ModalityRegistry::new(vec![
        ModalitySpec::new("text", 4, 1, 2, 1.0),
        ModalitySpec::new("video", 3, 1, 2, 1.0),
        ModalitySpec::new("audio", 5, 1, 2, 1.0),
    ])
    .unwrap()
}

#[test]
fn shared_time_encoding_equalizes_positions() {
    let reg = aligned_registry();
    let batches: Vec<_> = ["text", "video"]
        .iter()
        .map(|m| {
            let s = reg.spec_by_name(m).unwrap();
            standardize(&Tensor::full(&[2, 5, s.channel_size], 0.5), s, &reg, "t").unwrap()
        })
        .collect();
    let out = shared_time_encoding(batches.clone()).unwrap();
    assert_eq!(out[0].positional_segment(), out[1].positional_segment());

    let single = shared_time_encoding(vec![batches[0].clone()]).unwrap();
    assert_eq!(single[0], batches[0]);

    let short = standardize(&Tensor::zeros(&[2, 4, 5]), reg.spec(2), &reg, "t").unwrap();
    assert!(matches!(
        shared_time_encoding(vec![batches[0].clone(), short]),
        Err(Error::Alignment(_))
    ));
}

proptest! {
    #[test]
    fn aligned_triples_share_positions(t in 1usize..8, n in 1usize..3, bands in 1usize..4, seed in 0u64..100) {
        let reg = ModalityRegistry::new(vec![
            ModalitySpec::new("text", 4, 1, bands, 2.0),
            ModalitySpec::new("video", 3, 1, bands, 3.0),
            ModalitySpec::new("audio", 5, 1, bands, 1.0),
        ]).unwrap();
        let batches: Vec<_> = (0..3).map(|i| {
            let s = reg.spec(i);
            let raw = Tensor::from_fn(&[n, t, s.channel_size], |j| ((j as u64 + seed) as f64).sin());
            standardize(&raw, s, &reg, "t").unwrap()
        }).collect();
        let out = shared_time_encoding(batches).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert_eq!(out[i].positional_segment(), out[j].positional_segment());
            }
        }
    }

    #[test]
    fn layout_round_trip_and_one_hot(n in 1usize..3, t1 in 1usize..5, t2 in 1usize..5, d in 1usize..6, seed in 0u64..100) {
        let reg = ModalityRegistry::new(vec![
            ModalitySpec::new("grid", d, 2, 2, 4.0),
            ModalitySpec::new("wide", 11, 1, 1, 1.0),
        ]).unwrap();
        let raw = Tensor::from_fn(&[n, t1, t2, d], |j| ((j as u64 * 7 + seed) as f64).cos());
        let b = standardize(&raw, reg.spec(0), &reg, "t").unwrap();
        prop_assert_eq!(b.data.shape()[2], reg.d_all());
        let raw_back = b.raw_segment();
        prop_assert_eq!(raw_back.data(), raw.data());
        let w = reg.d_all();
        for row in b.data.data().chunks_exact(w) {
            prop_assert!(row[b.layout.pad.clone()].iter().all(|&v| v == 0.0));
            prop_assert_eq!(row[b.layout.modality.clone()].iter().sum::<f64>(), 1.0);
        }
    }
}

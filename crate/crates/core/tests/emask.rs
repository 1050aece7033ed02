mod common;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use common::{encoder_config, SIZE};
use idpaint_core::emask::{
    analyze_suppression, build_dataset, face_boxes, facemesh, rasterize, region_box,
    suppression_from_tensors, EMaskConfig,
};
use idpaint_core::identity::RecognitionEncoder;
use idpaint_core::manifest::{Manifest, Region};
use idpaint_core::toyface::{self, landmarks, ToyFaceConfig};
use idpaint_core::Error;
use proptest::prelude::*;

fn write_toy(dir: &Path, n_ids: usize, per: usize) {
    let samples = toyface::generate(&ToyFaceConfig {
        identities: n_ids,
        images_per_identity: per,
        image_size: SIZE,
        identity_seed: 8,
        sample_seed: 9,
    })
    .unwrap();
    toyface::write_corpus(&samples, SIZE, dir).unwrap();
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn dataset_counts_and_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_toy(&corpus, 5, 2);
    let cfg = EMaskConfig::default();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let sa = build_dataset(
        &corpus.join("images"),
        &corpus.join("landmarks"),
        &a,
        &cfg,
        false,
    )
    .unwrap();
    let sb = build_dataset(
        &corpus.join("images"),
        &corpus.join("landmarks"),
        &b,
        &cfg,
        false,
    )
    .unwrap();
    assert_eq!(sa.rows, 10);
    assert!(sa.skipped.is_empty());
    let ta = read_tree(&a);
    assert_eq!(ta.keys().filter(|k| k.ends_with(".png")).count(), 30);
    assert_eq!(ta, read_tree(&b));
    assert_eq!(sb.rows, 10);

    let m = Manifest::load(&sa.manifest_path).unwrap();
    m.validate().unwrap();
    assert_eq!(m.rows.len(), 10);
    for row in &m.rows {
        for r in Region::ALL {
            assert!(m.resolve(row.mask(r)).is_file());
        }
        assert!(m.resolve(&row.image_path).is_file());
        assert!(m.resolve(&row.landmark_path).is_file());
    }
    // Identity labels come from the corpus CSV, not the file names.
    assert_eq!(m.identity_labels().1.len(), 5);
}

#[test]
fn missing_landmarks_skip_rows_and_dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_toy(&corpus, 2, 2);
    std::fs::remove_file(corpus.join("landmarks/id000_01.txt")).unwrap();
    let out = tmp.path().join("out");
    let cfg = EMaskConfig::default();
    let s = build_dataset(
        &corpus.join("images"),
        &corpus.join("landmarks"),
        &out,
        &cfg,
        true,
    )
    .unwrap();
    assert_eq!(s.rows, 3);
    assert_eq!(s.skipped.len(), 1);
    assert!(!out.exists());

    let empty = tmp.path().join("no-landmarks");
    std::fs::create_dir_all(&empty).unwrap();
    let r = build_dataset(&corpus.join("images"), &empty, &out, &cfg, false);
    assert!(matches!(r, Err(Error::Data(_))));
    let r = build_dataset(
        &corpus.join("images"),
        &tmp.path().join("absent"),
        &out,
        &cfg,
        false,
    );
    match r {
        Err(Error::Data(m)) => assert!(m.contains("absent")),
        other => panic!("expected a data error, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn boxes_are_disjoint_and_contain_their_landmarks(
        id_seed in any::<u64>(), k in 0usize..50, size in prop::sample::select(vec![32usize, 64, 128])
    ) {
        let id = toyface::identity_params(id_seed, k);
        let nz = toyface::nuisance(id_seed ^ 1, k, 0);
        let lm = landmarks(&id, &nz).unwrap();
        let idx = facemesh();
        for r in Region::ALL {
            let b = region_box(&lm, r, idx, size, size, 0.25).unwrap();
            for &i in &idx.indices(r) {
                let (x, y) = (lm.points()[i][0] * size as f64, lm.points()[i][1] * size as f64);
                prop_assert!(x >= b.x0 as f64 && x <= b.x1 as f64 && y >= b.y0 as f64 && y <= b.y1 as f64);
            }
        }
        let boxes = face_boxes(&lm, idx, size, size, 0.25, "face").unwrap();
        let rasters: Vec<Vec<u8>> = boxes.iter().map(|b| rasterize(b, size, size).unwrap()).collect();
        for a in 0..3 {
            prop_assert!(rasters[a].iter().any(|&v| v == 1));
            for b in a + 1..3 {
                let both = rasters[a].iter().zip(&rasters[b]).filter(|(x, y)| **x == 1 && **y == 1).count();
                prop_assert_eq!(both, 0);
            }
        }
    }
}

#[test]
fn suppression_limits() {
    let enc = RecognitionEncoder::new(encoder_config(), 3)
        .unwrap()
        .frozen()
        .unwrap();
    let samples = toyface::generate(&ToyFaceConfig {
        identities: 2,
        images_per_identity: 2,
        image_size: SIZE,
        identity_seed: 1,
        sample_seed: 2,
    })
    .unwrap();
    let (images, _) = toyface::to_tensors(&samples, SIZE).unwrap();
    let names: Vec<String> = samples.iter().map(|s| s.name.clone()).collect();
    let zeros = Tensor::zeros((4, 1, SIZE, SIZE), DType::F32, &common::cpu()).unwrap();
    let ones = zeros.ones_like().unwrap();
    let masks: BTreeMap<Region, Tensor> = [
        (Region::Eyes, zeros.clone()),
        (Region::Nose, ones.clone()),
        (Region::Mouth, zeros),
    ]
    .into();
    let rep = suppression_from_tensors(&names, &images, &masks, &enc, 0.0).unwrap();
    assert!(rep.regions[&Region::Eyes].iter().all(|&s| s == 1.0));
    for (full, nose) in rep.full_mask.iter().zip(&rep.regions[&Region::Nose]) {
        assert!((full - nose).abs() < 1e-6);
    }
    for v in rep.regions.values().flatten().chain(&rep.full_mask) {
        assert!((-1.0..=1.0).contains(v));
    }
}

#[test]
fn analysis_csv_has_a_row_per_image_and_region() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_toy(&corpus, 2, 3);
    let out = tmp.path().join("emask");
    let s = build_dataset(
        &corpus.join("images"),
        &corpus.join("landmarks"),
        &out,
        &EMaskConfig::default(),
        false,
    )
    .unwrap();
    let m = Manifest::load(&s.manifest_path).unwrap();
    let enc = RecognitionEncoder::new(encoder_config(), 3)
        .unwrap()
        .frozen()
        .unwrap();
    let rep = analyze_suppression(&m, &enc, 0.0).unwrap();
    rep.write(&out.join("report")).unwrap();
    let csv = std::fs::read_to_string(out.join("report/suppression.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 3);
    let empty = Manifest {
        root: out.clone(),
        rows: vec![],
    };
    assert!(matches!(
        analyze_suppression(&empty, &enc, 0.0),
        Err(Error::Data(_))
    ));
}
